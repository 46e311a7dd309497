#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include "sudosys/errors.hpp"
#include "sudosys/unpacker.hpp"

namespace sudosys {

struct ChatMessage {
  std::string role;  // "user" or "assistant"
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

struct PromptRequest {
  std::string system_text;
  // Prior turns, oldest first. Only the stage-unaware mode and simulated
  // clients send history; structured turns carry everything in user_text.
  std::vector<ChatMessage> history;
  std::string user_text;
  double temperature = 0.7;
  int max_output_tokens = 1024;
  std::string tag;
};

enum class BackendKind { HttpChat, Scripted };

struct BackendConfig {
  BackendKind kind = BackendKind::Scripted;
  std::string endpoint_url;
  std::string model_name;
  std::string auth_token_env;
  std::filesystem::path script_path;
  int timeout_ms = 60000;
  int max_retries_transport = 3;
  int backoff_initial_ms = 500;
  int max_in_flight = 4;
};

// Reads a backend description. Accepts "scripted:<path>", "http:<url>" /
// "https://..." / "http://...", or a path to a YAML file with BackendConfig
// fields. Relative script paths resolve against `base_dir`.
BackendConfig parse_backend_spec(std::string_view spec, const std::filesystem::path& base_dir = {});

class BackendError : public Error {
 public:
  using Error::Error;
};

class TransportError : public BackendError {
 public:
  using BackendError::BackendError;
};

class AuthError : public BackendError {
 public:
  using BackendError::BackendError;
};

class RateLimited : public BackendError {
 public:
  using BackendError::BackendError;
};

class ScriptExhausted : public BackendError {
 public:
  using BackendError::BackendError;
};

struct ScriptEntry {
  // Every listed substring must occur in the request's system or user text.
  // Empty means the entry always matches.
  std::vector<std::string> match;
  std::string response;
};

struct Script {
  std::vector<ScriptEntry> entries;
};

Script parse_script(std::string_view document);
Script load_script(const std::filesystem::path& path);

struct AuditRecord {
  std::string tag;
  std::string prompt_hash;
  std::string response_hash;
  std::int64_t latency_ms = 0;
  std::string backend_id;
};

std::string prompt_hash(const PromptRequest& request);

class Backend {
 public:
  virtual ~Backend() = default;

  // Returns the model text verbatim and appends an audit record.
  ModelOutput complete(const PromptRequest& request);

  virtual std::string id() const = 0;
  std::vector<AuditRecord> audit_log() const;

 protected:
  virtual ModelOutput do_complete(const PromptRequest& request) = 0;

 private:
  mutable std::mutex audit_mutex_;
  std::vector<AuditRecord> audit_;
};

// Plays back a script. Each entry is consumed at most once; a request takes
// the earliest unused entry whose match gate passes.
class ScriptedBackend final : public Backend {
 public:
  explicit ScriptedBackend(Script script, std::string id = "scripted");

  std::string id() const override { return id_; }
  std::size_t remaining() const;
  // Every request received, in order.
  std::vector<PromptRequest> requests() const;

 protected:
  ModelOutput do_complete(const PromptRequest& request) override;

 private:
  std::string id_;
  Script script_;
  std::vector<bool> used_;
  std::vector<PromptRequest> requests_;
  mutable std::mutex mutex_;
};

// OpenAI-compatible chat-completions client.
class HttpChatBackend final : public Backend {
 public:
  explicit HttpChatBackend(BackendConfig config);

  std::string id() const override;

 protected:
  ModelOutput do_complete(const PromptRequest& request) override;

 private:
  BackendConfig config_;
  std::string token_;
  std::string scheme_host_port_;
  std::string path_;
  std::counting_semaphore<> in_flight_;
};

std::shared_ptr<Backend> make_backend(const BackendConfig& config);

// Request body for one chat-completions call.
std::string chat_completion_body(const BackendConfig& config, const PromptRequest& request);

}  // namespace sudosys
