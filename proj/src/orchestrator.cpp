#include "sudosys/orchestrator.hpp"

#include <set>
#include <utility>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace sudosys {

using nlohmann::json;

RegenerationExhausted::RegenerationExhausted(UnpackFailure last, int attempts)
    : Error(fmt::format("model output unusable after {} attempts: {} ({})", attempts, to_string(last.kind),
                        last.detail)),
      last_(std::move(last)),
      attempts_(attempts) {}

Orchestrator::Orchestrator(std::shared_ptr<const StageConfig> config, std::shared_ptr<Backend> backend,
                           std::shared_ptr<EventStore> store, std::shared_ptr<Clock> clock,
                           std::shared_ptr<IdSource> ids, OrchestratorOptions options)
    : config_(std::move(config)),
      backend_(std::move(backend)),
      store_(store ? std::move(store) : std::make_shared<MemoryEventStore>()),
      clock_(clock ? std::move(clock) : std::make_shared<SystemClock>()),
      ids_(ids ? std::move(ids) : std::make_shared<RandomIdSource>()),
      options_(std::move(options)) {
  if (options_.retry_budget < 0) {
    throw ConfigError("retry budget must be non-negative");
  }
}

const StageConfig& Orchestrator::config() const {
  if (!config_) throw ConfigError("no stage config attached");
  return *config_;
}

SessionEvent Orchestrator::make_event(std::uint64_t seq, EventKind kind, json payload) {
  return SessionEvent{seq, clock_->now(), kind, std::move(payload)};
}

json Orchestrator::model_call_payload(const PromptRequest& request, const ModelOutput& output, int attempt) const {
  return {{"attempt", attempt},
          {"tag", request.tag},
          {"prompt_hash", prompt_hash(request)},
          {"response_hash", sha256_hex(output.raw).substr(0, 16)},
          {"latency_ms", output.latency_ms},
          {"backend_id", output.backend_id}};
}

Session Orchestrator::create_session(SessionMode mode) {
  if (!config_) {
    throw ConfigError("cannot create a session without a stage config");
  }
  if (!backend_) {
    throw ConfigError("cannot create a session without a model backend");
  }
  try {
    validate_stage_config(*config_);
    if (mode == SessionMode::Baseline) build_baseline_prompt(*config_);
  } catch (const ValidationError& e) {
    throw ConfigError(std::string("invalid stage config: ") + e.what());
  }

  std::vector<std::vector<std::string>> layout;
  if (mode == SessionMode::Structured) {
    for (const auto& stage : config_->stages) layout.push_back(stage.topic_keys);
  }
  const json payload = {{"session_id", ids_->next()},
                        {"mode", to_string(mode)},
                        {"config_id", config_->id},
                        {"config_fingerprint", config_fingerprint(*config_)},
                        {"topic_layout", layout},
                        {"greeting", config_->greeting}};
  Session session;
  std::vector<SessionEvent> events{make_event(1, EventKind::Created, payload)};
  apply_event(session, events.front());
  store_->commit(session.id, events);
  return session;
}

void Orchestrator::check_usable(const Session& session) const {
  if (session.lifecycle != Lifecycle::Active) {
    throw SessionNotActive(fmt::format("session {} is {}", session.id, to_string(session.lifecycle)));
  }
  if (!config_ || session.config_ref.fingerprint != config_fingerprint(*config_)) {
    throw ConfigError(fmt::format("session {} was created with config '{}' which this orchestrator does not hold",
                                  session.id, session.config_ref.id));
  }
}

void Orchestrator::commit(Session& session, std::vector<SessionEvent> events) {
  Session next = session;
  for (const auto& event : events) apply_event(next, event);
  store_->commit(session.id, events);
  session = std::move(next);
}

void Orchestrator::fail_turn(Session& session, std::vector<SessionEvent> events, const std::string& kind,
                             const std::string& detail, int attempts) {
  const auto seq = session.last_seq + events.size() + 1;
  events.push_back(make_event(seq, EventKind::Error, {{"kind", kind}, {"detail", detail}, {"attempts", attempts}}));
  try {
    commit(session, std::move(events));
  } catch (const std::exception& e) {
    spdlog::error("session {}: could not record failed turn: {}", session.id, e.what());
  }
}

TurnResult Orchestrator::run_turn(Session& session, std::string_view user_input) {
  check_usable(session);
  if (trim(user_input).empty()) {
    throw EmptyInput();
  }
  return session.mode == SessionMode::Structured ? run_structured_turn(session, user_input)
                                                 : run_baseline_turn(session, user_input);
}

TurnResult Orchestrator::run_structured_turn(Session& session, std::string_view user_input) {
  const auto& config = *config_;
  const StageId stage_before = session.stage;
  const auto instruction =
      generate_instruction(stage_before, visible_topics(session.topics, stage_before), user_input, config);
  const auto& stage_keys = config.stage(stage_before).topic_keys;
  const std::set<std::string> expected(stage_keys.begin(), stage_keys.end());

  std::vector<json> calls;
  std::optional<UnpackedResponse> unpacked;
  UnpackFailure last_failure;
  int attempt = 0;
  for (; attempt <= options_.retry_budget; ++attempt) {
    PromptRequest request;
    request.user_text = instruction.text;
    if (attempt > 0) {
      request.user_text += kPartSeparator;
      request.user_text += options_.format_reminder;
    }
    request.temperature = options_.temperature;
    request.max_output_tokens = options_.max_output_tokens;
    request.tag = fmt::format("{}:turn-{}:attempt-{}", session.id, session.turn_count + 1, attempt);
    if (observer_) observer_(session, request);

    ModelOutput output;
    try {
      output = backend_->complete(request);
    } catch (const BackendError& e) {
      std::vector<SessionEvent> events;
      for (auto& call : calls) events.push_back(make_event(session.last_seq + events.size() + 1, EventKind::ModelCall, call));
      fail_turn(session, std::move(events), "BackendError", e.what(), attempt + 1);
      throw;
    }
    calls.push_back(model_call_payload(request, output, attempt));

    auto result = unpack(output.raw, expected);
    if (auto* ok = std::get_if<UnpackedResponse>(&result)) {
      unpacked = std::move(*ok);
      break;
    }
    last_failure = std::get<UnpackFailure>(std::move(result));
    spdlog::debug("session {}: attempt {} unusable: {} ({})", session.id, attempt, to_string(last_failure.kind),
                  last_failure.detail);
  }

  if (!unpacked) {
    const int attempts = options_.retry_budget + 1;
    std::vector<SessionEvent> events;
    for (auto& call : calls) events.push_back(make_event(session.last_seq + events.size() + 1, EventKind::ModelCall, call));
    fail_turn(session, std::move(events), std::string(to_string(last_failure.kind)), last_failure.detail, attempts);
    throw RegenerationExhausted(last_failure, attempts);
  }

  auto update = apply_topic_update(session.topics, stage_before, unpacked->topic_updates);
  std::map<std::string, std::string> applied = unpacked->topic_updates;
  for (const auto& key : update.rejected) applied.erase(key);
  const auto transition = advance_stage(stage_before, unpacked->status, config.stage_count);

  std::vector<std::pair<EventKind, json>> batch;
  batch.emplace_back(EventKind::ClientUtterance, json{{"text", std::string(user_input)}, {"stage", stage_before.value}});
  for (auto& call : calls) batch.emplace_back(EventKind::ModelCall, std::move(call));
  batch.emplace_back(EventKind::Unpacked, json{{"reply", unpacked->reply},
                                               {"status", to_int(unpacked->status)},
                                               {"repair_tier", unpacked->repair_tier},
                                               {"regen_attempts", attempt},
                                               {"topic_updates", unpacked->topic_updates},
                                               {"ignored_fields", unpacked->ignored_fields}});
  batch.emplace_back(EventKind::TopicsApplied,
                     json{{"stage", stage_before.value}, {"applied", applied}, {"rejected", update.rejected}});
  if (transition.status != DialogueStatus::Stay) {
    batch.emplace_back(EventKind::StageChanged, json{{"from", transition.from.value},
                                                     {"to", transition.to.value},
                                                     {"status", to_int(transition.status)},
                                                     {"clamped", transition.clamped},
                                                     {"completed", transition.completed}});
  }
  if (transition.completed) {
    batch.emplace_back(EventKind::Completed, json{{"stage", transition.to.value}});
  }

  std::vector<SessionEvent> events;
  for (auto& [kind, payload] : batch) {
    events.push_back(make_event(session.last_seq + events.size() + 1, kind, std::move(payload)));
  }
  commit(session, std::move(events));

  TurnResult result;
  result.reply = unpacked->reply;
  result.stage_before = stage_before;
  result.stage_after = transition.to;
  result.status = unpacked->status;
  result.rejected_topic_keys = std::move(update.rejected);
  result.repair_tier = unpacked->repair_tier;
  result.regen_attempts_used = attempt;
  result.completed = transition.completed;
  return result;
}

TurnResult Orchestrator::run_baseline_turn(Session& session, std::string_view user_input) {
  PromptRequest request;
  request.system_text = build_baseline_prompt(*config_);
  for (const auto& utterance : session.transcript) {
    request.history.push_back(
        ChatMessage{utterance.speaker == Speaker::Client ? "user" : "assistant", utterance.text});
  }
  request.user_text = std::string(user_input);
  request.temperature = options_.temperature;
  request.max_output_tokens = options_.max_output_tokens;

  std::vector<json> calls;
  std::optional<std::string> reply;
  int attempt = 0;
  for (; attempt <= options_.retry_budget; ++attempt) {
    request.tag = fmt::format("{}:turn-{}:attempt-{}", session.id, session.turn_count + 1, attempt);
    if (observer_) observer_(session, request);
    ModelOutput output;
    try {
      output = backend_->complete(request);
    } catch (const BackendError& e) {
      std::vector<SessionEvent> events;
      for (auto& call : calls) events.push_back(make_event(session.last_seq + events.size() + 1, EventKind::ModelCall, call));
      fail_turn(session, std::move(events), "BackendError", e.what(), attempt + 1);
      throw;
    }
    calls.push_back(model_call_payload(request, output, attempt));
    if (!trim(output.raw).empty()) {
      reply = sanitize_utf8(output.raw);
      break;
    }
  }
  if (!reply) {
    const int attempts = options_.retry_budget + 1;
    std::vector<SessionEvent> events;
    for (auto& call : calls) events.push_back(make_event(session.last_seq + events.size() + 1, EventKind::ModelCall, call));
    fail_turn(session, std::move(events), "EmptyReply", "model returned blank text", attempts);
    throw RegenerationExhausted(UnpackFailure{UnpackFailureKind::EmptyReply, "model returned blank text", ""}, attempts);
  }

  std::vector<std::pair<EventKind, json>> batch;
  batch.emplace_back(EventKind::ClientUtterance, json{{"text", std::string(user_input)}, {"stage", session.stage.value}});
  for (auto& call : calls) batch.emplace_back(EventKind::ModelCall, std::move(call));
  batch.emplace_back(EventKind::Unpacked, json{{"reply", *reply}, {"status", 0}, {"repair_tier", 0}, {"regen_attempts", attempt}});
  std::vector<SessionEvent> events;
  for (auto& [kind, payload] : batch) {
    events.push_back(make_event(session.last_seq + events.size() + 1, kind, std::move(payload)));
  }
  const StageId stage = session.stage;
  commit(session, std::move(events));

  TurnResult result;
  result.reply = *reply;
  result.stage_before = stage;
  result.stage_after = stage;
  result.regen_attempts_used = attempt;
  return result;
}

void Orchestrator::abort_session(Session& session, const std::string& reason) {
  if (session.lifecycle != Lifecycle::Active) {
    throw SessionNotActive(fmt::format("session {} is {}", session.id, to_string(session.lifecycle)));
  }
  commit(session, {make_event(session.last_seq + 1, EventKind::Aborted, {{"reason", reason}})});
}

void SessionRegistry::add_orchestrator(const std::string& config_id, std::shared_ptr<Orchestrator> orchestrator) {
  std::lock_guard lock(mutex_);
  if (orchestrators_.empty()) default_config_ = config_id;
  orchestrators_[config_id] = std::move(orchestrator);
}

bool SessionRegistry::has_config(const std::string& config_id) const {
  std::lock_guard lock(mutex_);
  return orchestrators_.contains(config_id);
}

std::string SessionRegistry::default_config_id() const {
  std::lock_guard lock(mutex_);
  return default_config_;
}

Session SessionRegistry::create(SessionMode mode, const std::string& config_id) {
  std::shared_ptr<Orchestrator> orchestrator;
  {
    std::lock_guard lock(mutex_);
    const auto it = orchestrators_.find(config_id.empty() ? default_config_ : config_id);
    if (it == orchestrators_.end()) {
      throw ConfigError("unknown config '" + config_id + "'");
    }
    orchestrator = it->second;
  }
  auto entry = std::make_shared<Entry>();
  entry->session = orchestrator->create_session(mode);
  entry->orchestrator = std::move(orchestrator);
  auto snapshot = entry->session;
  std::lock_guard lock(mutex_);
  sessions_[snapshot.id] = std::move(entry);
  return snapshot;
}

std::shared_ptr<SessionRegistry::Entry> SessionRegistry::find(const std::string& session_id) const {
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) {
    throw UnknownSession("unknown session '" + session_id + "'");
  }
  return it->second;
}

TurnResult SessionRegistry::run_turn(const std::string& session_id, std::string_view text) {
  auto entry = find(session_id);
  std::lock_guard turn(entry->turn_mutex);
  Session working;
  {
    std::lock_guard lock(mutex_);
    working = entry->session;
  }
  struct Publish {
    SessionRegistry& registry;
    Entry& entry;
    Session& working;
    ~Publish() {
      std::lock_guard lock(registry.mutex_);
      entry.session = working;
    }
  } publish{*this, *entry, working};
  return entry->orchestrator->run_turn(working, text);
}

Session SessionRegistry::abort(const std::string& session_id, const std::string& reason) {
  auto entry = find(session_id);
  std::lock_guard turn(entry->turn_mutex);
  Session working;
  {
    std::lock_guard lock(mutex_);
    working = entry->session;
  }
  entry->orchestrator->abort_session(working, reason);
  std::lock_guard lock(mutex_);
  entry->session = working;
  return working;
}

Session SessionRegistry::snapshot(const std::string& session_id) const {
  auto entry = find(session_id);
  std::lock_guard lock(mutex_);
  return entry->session;
}

const StageConfig& SessionRegistry::config_for(const std::string& session_id) const {
  return find(session_id)->orchestrator->config();
}

}  // namespace sudosys
