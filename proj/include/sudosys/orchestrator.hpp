#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include "sudosys/event_log.hpp"
#include "sudosys/instruction_gen.hpp"
#include "sudosys/llm_gateway.hpp"
#include "sudosys/session.hpp"
#include "sudosys/unpacker.hpp"
#include "sudosys/util.hpp"

namespace sudosys {

inline constexpr std::string_view kDefaultFormatReminder =
    "Your previous answer could not be read. Answer again with exactly one JSON object in the reply format above "
    "and nothing else.";

struct OrchestratorOptions {
  // Regeneration attempts after the first call, so at most retry_budget + 1 calls per turn.
  int retry_budget = 3;
  double temperature = 0.7;
  int max_output_tokens = 1024;
  std::string format_reminder{kDefaultFormatReminder};
};

struct TurnResult {
  std::string reply;
  StageId stage_before;
  StageId stage_after;
  DialogueStatus status = DialogueStatus::Stay;
  std::vector<std::string> rejected_topic_keys;
  int repair_tier = 0;
  int regen_attempts_used = 0;
  bool completed = false;
};

class RegenerationExhausted : public Error {
 public:
  RegenerationExhausted(UnpackFailure last, int attempts);

  const UnpackFailure& last_failure() const { return last_; }
  int attempts() const { return attempts_; }

 private:
  UnpackFailure last_;
  int attempts_;
};

class SessionNotActive : public Error {
 public:
  using Error::Error;
};

// Called with every request sent to the model, before the call.
using RequestObserver = std::function<void(const Session&, const PromptRequest&)>;

class Orchestrator {
 public:
  Orchestrator(std::shared_ptr<const StageConfig> config, std::shared_ptr<Backend> backend,
               std::shared_ptr<EventStore> store = nullptr, std::shared_ptr<Clock> clock = nullptr,
               std::shared_ptr<IdSource> ids = nullptr, OrchestratorOptions options = {});

  // Structured sessions start at stage 1 with every topic empty. Throws
  // ConfigError when no valid config is attached.
  Session create_session(SessionMode mode);

  // On success the session advances and the turn's events are committed as
  // one batch. On any failure the session is left exactly as it was.
  TurnResult run_turn(Session& session, std::string_view user_input);

  void abort_session(Session& session, const std::string& reason);

  void set_request_observer(RequestObserver observer) { observer_ = std::move(observer); }

  const StageConfig& config() const;
  const std::shared_ptr<EventStore>& store() const { return store_; }
  const OrchestratorOptions& options() const { return options_; }

 private:
  TurnResult run_structured_turn(Session& session, std::string_view user_input);
  TurnResult run_baseline_turn(Session& session, std::string_view user_input);
  SessionEvent make_event(std::uint64_t seq, EventKind kind, nlohmann::json payload);
  nlohmann::json model_call_payload(const PromptRequest& request, const ModelOutput& output, int attempt) const;
  void commit(Session& session, std::vector<SessionEvent> events);
  void fail_turn(Session& session, std::vector<SessionEvent> events, const std::string& kind,
                 const std::string& detail, int attempts);
  void check_usable(const Session& session) const;

  std::shared_ptr<const StageConfig> config_;
  std::shared_ptr<Backend> backend_;
  std::shared_ptr<EventStore> store_;
  std::shared_ptr<Clock> clock_;
  std::shared_ptr<IdSource> ids_;
  OrchestratorOptions options_;
  RequestObserver observer_;
};

class UnknownSession : public Error {
 public:
  using Error::Error;
};

// Thread-safe session table. Turns on one session are serialized by a
// per-session mutex; distinct sessions proceed in parallel.
class SessionRegistry {
 public:
  void add_orchestrator(const std::string& config_id, std::shared_ptr<Orchestrator> orchestrator);
  bool has_config(const std::string& config_id) const;
  std::string default_config_id() const;

  Session create(SessionMode mode, const std::string& config_id);
  TurnResult run_turn(const std::string& session_id, std::string_view text);
  Session abort(const std::string& session_id, const std::string& reason);
  Session snapshot(const std::string& session_id) const;
  const StageConfig& config_for(const std::string& session_id) const;

 private:
  struct Entry {
    std::mutex turn_mutex;
    Session session;
    std::shared_ptr<Orchestrator> orchestrator;
  };
  std::shared_ptr<Entry> find(const std::string& session_id) const;

  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Orchestrator>> orchestrators_;
  std::string default_config_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
};

}  // namespace sudosys
