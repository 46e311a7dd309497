#include "sudosys/llm_gateway.hpp"

#include <chrono>
#include <cstdlib>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include "sudosys/util.hpp"

namespace sudosys {

using nlohmann::json;

namespace {

bool starts_with(std::string_view text, std::string_view prefix) { return text.substr(0, prefix.size()) == prefix; }

std::filesystem::path resolve(const std::filesystem::path& path, const std::filesystem::path& base) {
  if (path.empty() || path.is_absolute() || base.empty()) return path;
  return base / path;
}

template <typename T>
T yaml_or(const YAML::Node& node, const char* field, T fallback) {
  const auto value = node[field];
  if (!value || value.IsNull()) return fallback;
  try {
    return value.as<T>();
  } catch (const YAML::Exception&) {
    throw SchemaError(fmt::format("backend field '{}' has the wrong type", field));
  }
}

}  // namespace

BackendConfig parse_backend_spec(std::string_view spec, const std::filesystem::path& base_dir) {
  BackendConfig config;
  if (starts_with(spec, "scripted:")) {
    config.kind = BackendKind::Scripted;
    config.script_path = resolve(std::string(spec.substr(9)), base_dir);
    return config;
  }
  if (starts_with(spec, "http:") && !starts_with(spec, "http://")) {
    config.kind = BackendKind::HttpChat;
    config.endpoint_url = std::string(spec.substr(5));
    return config;
  }
  if (starts_with(spec, "http://") || starts_with(spec, "https://")) {
    config.kind = BackendKind::HttpChat;
    config.endpoint_url = std::string(spec);
    return config;
  }

  const auto path = resolve(std::string(spec), base_dir);
  YAML::Node root;
  try {
    root = YAML::Load(read_text_file(path));
  } catch (const std::exception& e) {
    throw SchemaError(fmt::format("cannot read backend spec '{}': {}", spec, e.what()));
  }
  if (!root.IsMap()) {
    throw SchemaError(fmt::format("backend file '{}' must be a mapping", path.string()));
  }
  const auto kind = yaml_or<std::string>(root, "kind", "");
  if (kind == "scripted") {
    config.kind = BackendKind::Scripted;
    const auto script = yaml_or<std::string>(root, "script_path", "");
    if (script.empty()) throw SchemaError("scripted backend needs script_path");
    config.script_path = resolve(script, path.parent_path());
  } else if (kind == "http_chat") {
    config.kind = BackendKind::HttpChat;
    config.endpoint_url = yaml_or<std::string>(root, "endpoint_url", "");
    if (config.endpoint_url.empty()) throw SchemaError("http_chat backend needs endpoint_url");
  } else {
    throw SchemaError(fmt::format("backend kind must be 'scripted' or 'http_chat', got '{}'", kind));
  }
  config.model_name = yaml_or<std::string>(root, "model_name", "");
  config.auth_token_env = yaml_or<std::string>(root, "auth_token_env", "");
  config.timeout_ms = yaml_or<int>(root, "timeout_ms", config.timeout_ms);
  config.max_retries_transport = yaml_or<int>(root, "max_retries_transport", config.max_retries_transport);
  config.backoff_initial_ms = yaml_or<int>(root, "backoff_initial_ms", config.backoff_initial_ms);
  config.max_in_flight = yaml_or<int>(root, "max_in_flight", config.max_in_flight);
  return config;
}

Script parse_script(std::string_view document) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(document));
  } catch (const YAML::Exception& e) {
    throw SchemaError(fmt::format("script is not a readable document: {}", e.what()));
  }
  const auto entries = root.IsMap() ? root["entries"] : root;
  if (!entries || !entries.IsSequence() || entries.size() == 0) {
    throw SchemaError("script must contain a non-empty 'entries' list of {match?, response}");
  }
  Script script;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& node = entries[i];
    if (!node.IsMap() || !node["response"] || !node["response"].IsScalar()) {
      throw SchemaError(fmt::format("script entry {} needs a text 'response'", i));
    }
    ScriptEntry entry;
    entry.response = node["response"].as<std::string>();
    if (const auto match = node["match"]; match && !match.IsNull()) {
      if (match.IsScalar()) {
        entry.match.push_back(match.as<std::string>());
      } else if (match.IsSequence()) {
        for (const auto& part : match) entry.match.push_back(part.as<std::string>());
      } else {
        throw SchemaError(fmt::format("script entry {} 'match' must be text or a list of text", i));
      }
    }
    script.entries.push_back(std::move(entry));
  }
  return script;
}

Script load_script(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const std::exception&) {
    throw SchemaError("cannot read script '" + path.string() + "'");
  }
  return parse_script(text);
}

std::string prompt_hash(const PromptRequest& request) {
  std::string material = request.system_text;
  material += '\0';
  for (const auto& message : request.history) {
    material += message.role;
    material += '\0';
    material += message.content;
    material += '\0';
  }
  material += request.user_text;
  return sha256_hex(material).substr(0, 16);
}

ModelOutput Backend::complete(const PromptRequest& request) {
  auto output = do_complete(request);
  AuditRecord record{request.tag, prompt_hash(request), sha256_hex(output.raw).substr(0, 16), output.latency_ms,
                     output.backend_id};
  spdlog::debug("model call {} prompt={} response={} latency={}ms", record.tag, record.prompt_hash,
                record.response_hash, record.latency_ms);
  std::lock_guard lock(audit_mutex_);
  audit_.push_back(std::move(record));
  return output;
}

std::vector<AuditRecord> Backend::audit_log() const {
  std::lock_guard lock(audit_mutex_);
  return audit_;
}

ScriptedBackend::ScriptedBackend(Script script, std::string id)
    : id_(std::move(id)), script_(std::move(script)), used_(script_.entries.size(), false) {
  if (script_.entries.empty()) {
    throw SchemaError("script has no entries");
  }
}

std::size_t ScriptedBackend::remaining() const {
  std::lock_guard lock(mutex_);
  return static_cast<std::size_t>(std::count(used_.begin(), used_.end(), false));
}

std::vector<PromptRequest> ScriptedBackend::requests() const {
  std::lock_guard lock(mutex_);
  return requests_;
}

ModelOutput ScriptedBackend::do_complete(const PromptRequest& request) {
  std::lock_guard lock(mutex_);
  requests_.push_back(request);
  for (std::size_t i = 0; i < script_.entries.size(); ++i) {
    if (used_[i]) continue;
    const auto& entry = script_.entries[i];
    const bool passes = std::all_of(entry.match.begin(), entry.match.end(), [&](const std::string& needle) {
      return request.system_text.find(needle) != std::string::npos ||
             request.user_text.find(needle) != std::string::npos;
    });
    if (!passes) continue;
    used_[i] = true;
    return ModelOutput{entry.response, id_, 0};
  }
  throw ScriptExhausted(fmt::format("script '{}' has no remaining entry for request '{}'", id_, request.tag));
}

namespace {

struct SplitUrl {
  std::string scheme_host_port;
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("endpoint_url must start with http:// or https://: " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) {
    return {url, "/v1/chat/completions"};
  }
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

std::string chat_completion_body(const BackendConfig& config, const PromptRequest& request) {
  json messages = json::array();
  if (!request.system_text.empty()) {
    messages.push_back({{"role", "system"}, {"content", request.system_text}});
  }
  for (const auto& message : request.history) {
    messages.push_back({{"role", message.role}, {"content", message.content}});
  }
  messages.push_back({{"role", "user"}, {"content", request.user_text}});
  json body = {{"model", config.model_name},
               {"messages", messages},
               {"temperature", request.temperature},
               {"max_tokens", request.max_output_tokens}};
  return body.dump(-1, ' ', false, json::error_handler_t::replace);
}

HttpChatBackend::HttpChatBackend(BackendConfig config)
    : config_(std::move(config)), in_flight_(std::max(1, config_.max_in_flight)) {
  const auto split = split_url(config_.endpoint_url);
  scheme_host_port_ = split.scheme_host_port;
  path_ = split.path;
  if (!config_.auth_token_env.empty()) {
    const char* token = std::getenv(config_.auth_token_env.c_str());
    if (token == nullptr || *token == '\0') {
      throw ConfigError("environment variable " + config_.auth_token_env + " holding the API token is not set");
    }
    token_ = token;
  }
}

std::string HttpChatBackend::id() const {
  return config_.model_name.empty() ? scheme_host_port_ : config_.model_name;
}

ModelOutput HttpChatBackend::do_complete(const PromptRequest& request) {
  const auto body = chat_completion_body(config_, request);
  httplib::Headers headers;
  if (!token_.empty()) {
    headers.emplace("Authorization", "Bearer " + token_);
  }

  in_flight_.acquire();
  struct Release {
    std::counting_semaphore<>& semaphore;
    ~Release() { semaphore.release(); }
  } release{in_flight_};

  const auto timeout = std::chrono::milliseconds(config_.timeout_ms);
  std::string last_error;
  bool rate_limited = false;
  for (int attempt = 0; attempt <= config_.max_retries_transport; ++attempt) {
    if (attempt > 0) {
      const auto delay = std::chrono::milliseconds(static_cast<long long>(config_.backoff_initial_ms) << (attempt - 1));
      spdlog::warn("chat backend retry {}/{} after {}ms: {}", attempt, config_.max_retries_transport, delay.count(),
                   last_error);
      std::this_thread::sleep_for(delay);
    }
    httplib::Client client(scheme_host_port_);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);

    const auto started = std::chrono::steady_clock::now();
    auto result = client.Post(path_, headers, body, "application/json");
    const auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);

    if (!result) {
      last_error = httplib::to_string(result.error());
      rate_limited = false;
      continue;
    }
    const int status = result->status;
    if (status == 401 || status == 403) {
      throw AuthError(fmt::format("chat endpoint rejected credentials ({})", status));
    }
    if (status == 429) {
      last_error = "rate limited (429)";
      rate_limited = true;
      continue;
    }
    if (status >= 500) {
      last_error = fmt::format("server error {}", status);
      rate_limited = false;
      continue;
    }
    if (status != 200) {
      throw TransportError(fmt::format("chat endpoint returned {}: {}", status, result->body.substr(0, 200)));
    }
    const auto reply = json::parse(result->body, nullptr, false);
    if (reply.is_discarded()) {
      throw TransportError("chat endpoint returned a body that is not JSON");
    }
    try {
      const auto& content = reply.at("choices").at(0).at("message").at("content");
      return ModelOutput{content.get<std::string>(), id(), latency.count()};
    } catch (const json::exception&) {
      throw TransportError("chat endpoint response has no choices[0].message.content");
    }
  }
  if (rate_limited) {
    throw RateLimited(fmt::format("chat endpoint still rate limiting after {} retries", config_.max_retries_transport));
  }
  throw TransportError(fmt::format("chat endpoint unreachable after {} retries: {}", config_.max_retries_transport,
                                   last_error));
}

std::shared_ptr<Backend> make_backend(const BackendConfig& config) {
  switch (config.kind) {
    case BackendKind::Scripted:
      return std::make_shared<ScriptedBackend>(load_script(config.script_path),
                                               "scripted:" + config.script_path.filename().string());
    case BackendKind::HttpChat:
      return std::make_shared<HttpChatBackend>(config);
  }
  throw ConfigError("unknown backend kind");
}

}  // namespace sudosys
