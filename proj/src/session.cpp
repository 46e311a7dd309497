#include "sudosys/session.hpp"

#include <array>
#include <utility>

#include <fmt/format.h>

namespace sudosys {

using nlohmann::json;

std::string_view to_string(SessionMode mode) { return mode == SessionMode::Structured ? "structured" : "baseline"; }

std::optional<SessionMode> session_mode_from_string(std::string_view text) {
  if (text == "structured") return SessionMode::Structured;
  if (text == "baseline") return SessionMode::Baseline;
  return std::nullopt;
}

std::string_view to_string(Lifecycle lifecycle) {
  switch (lifecycle) {
    case Lifecycle::Active:
      return "active";
    case Lifecycle::Completed:
      return "completed";
    case Lifecycle::Aborted:
      return "aborted";
  }
  return "active";
}

bool Session::operator==(const Session& other) const {
  return id == other.id && mode == other.mode && stage == other.stage && topics == other.topics &&
         transcript == other.transcript && lifecycle == other.lifecycle && turn_count == other.turn_count &&
         config_ref == other.config_ref && created_at == other.created_at && updated_at == other.updated_at;
}

namespace {

constexpr std::array<std::pair<EventKind, std::string_view>, 9> kEventNames{{
    {EventKind::Created, "Created"},
    {EventKind::ClientUtterance, "ClientUtterance"},
    {EventKind::ModelCall, "ModelCall"},
    {EventKind::Unpacked, "Unpacked"},
    {EventKind::TopicsApplied, "TopicsApplied"},
    {EventKind::StageChanged, "StageChanged"},
    {EventKind::Completed, "Completed"},
    {EventKind::Aborted, "Aborted"},
    {EventKind::Error, "Error"},
}};

}  // namespace

std::string_view to_string(EventKind kind) {
  for (const auto& [value, name] : kEventNames) {
    if (value == kind) return name;
  }
  return "Error";
}

std::optional<EventKind> event_kind_from_string(std::string_view text) {
  for (const auto& [value, name] : kEventNames) {
    if (name == text) return value;
  }
  return std::nullopt;
}

std::string encode_event(const SessionEvent& event) {
  const json line = {{"seq", event.seq}, {"ts", event.timestamp}, {"kind", to_string(event.kind)}, {"payload", event.payload}};
  return line.dump(-1, ' ', false, json::error_handler_t::replace);
}

SessionEvent decode_event(std::string_view line) {
  const auto value = json::parse(line, nullptr, false);
  if (value.is_discarded() || !value.is_object()) {
    throw CorruptLog("event record is not a JSON object");
  }
  try {
    SessionEvent event;
    event.seq = value.at("seq").get<std::uint64_t>();
    event.timestamp = value.at("ts").get<std::string>();
    const auto kind = event_kind_from_string(value.at("kind").get<std::string>());
    if (!kind) {
      throw CorruptLog(fmt::format("event {} has unknown kind", event.seq));
    }
    event.kind = *kind;
    event.payload = value.at("payload");
    return event;
  } catch (const json::exception& e) {
    throw CorruptLog(std::string("undecodable event record: ") + e.what());
  }
}

namespace {

StageId checked_stage(const Session& session, const json& value) {
  const StageId stage{value.get<int>()};
  if (stage.value < 1 || stage.value > std::max(1, session.topics.stage_count())) {
    throw CorruptLog(fmt::format("stage {} outside the session's range", stage.value));
  }
  return stage;
}

void append_utterance(Session& session, Speaker speaker, std::string text) {
  const int index = session.transcript.empty() ? 1 : session.transcript.back().turn_index + 1;
  session.transcript.push_back(Utterance{speaker, std::move(text), index, session.stage});
}

void apply_payload(Session& session, const SessionEvent& event) {
  const auto& p = event.payload;
  switch (event.kind) {
    case EventKind::Created: {
      const auto mode = session_mode_from_string(p.at("mode").get<std::string>());
      if (!mode) throw CorruptLog("Created event has an unknown mode");
      session = Session{};
      session.id = p.at("session_id").get<std::string>();
      session.mode = *mode;
      session.stage = StageId{1};
      session.topics = TopicStore::from_layout(p.at("topic_layout").get<std::vector<std::vector<std::string>>>());
      session.config_ref = ConfigRef{p.at("config_id").get<std::string>(), p.at("config_fingerprint").get<std::string>()};
      session.created_at = event.timestamp;
      if (const auto greeting = p.value("greeting", std::string{}); !greeting.empty()) {
        append_utterance(session, Speaker::Counselor, greeting);
      }
      break;
    }
    case EventKind::ClientUtterance:
      append_utterance(session, Speaker::Client, p.at("text").get<std::string>());
      ++session.turn_count;
      break;
    case EventKind::Unpacked:
      append_utterance(session, Speaker::Counselor, p.at("reply").get<std::string>());
      break;
    case EventKind::TopicsApplied: {
      const auto stage = checked_stage(session, p.at("stage"));
      for (const auto& [key, description] : p.at("applied").items()) {
        if (!session.topics.set_description(stage, key, description.get<std::string>())) {
          throw CorruptLog(fmt::format("event {} applies unknown topic '{}' to stage {}", event.seq, key, stage.value));
        }
      }
      break;
    }
    case EventKind::StageChanged:
      session.stage = checked_stage(session, p.at("to"));
      break;
    case EventKind::Completed:
      session.lifecycle = Lifecycle::Completed;
      break;
    case EventKind::Aborted:
      session.lifecycle = Lifecycle::Aborted;
      break;
    case EventKind::ModelCall:
    case EventKind::Error:
      return;
  }
  session.updated_at = event.timestamp;
}

}  // namespace

void apply_event(Session& session, const SessionEvent& event) {
  if (event.kind == EventKind::Created && session.last_seq != 0) {
    throw CorruptLog(fmt::format("event {} re-creates an existing session", event.seq));
  }
  if (event.kind != EventKind::Created && session.last_seq == 0) {
    throw CorruptLog("log does not start with a Created event");
  }
  if (event.seq != session.last_seq + 1) {
    throw CorruptLog(fmt::format("sequence gap: expected {}, found {}", session.last_seq + 1, event.seq));
  }
  try {
    apply_payload(session, event);
  } catch (const json::exception& e) {
    throw CorruptLog(fmt::format("event {} ({}) has an undecodable payload: {}", event.seq, to_string(event.kind),
                                 e.what()));
  }
  session.last_seq = event.seq;
}

Session replay_session(std::span<const SessionEvent> events) {
  if (events.empty()) {
    throw CorruptLog("empty log: missing Created event");
  }
  Session session;
  for (const auto& event : events) {
    apply_event(session, event);
  }
  return session;
}

json to_json(const Session& session) {
  json topics = json::array();
  for (const auto& entry : session.topics.stages()) {
    json stage_topics = json::array();
    for (const auto& topic : entry.topics) {
      stage_topics.push_back({{"key", topic.key}, {"description", topic.description}});
    }
    topics.push_back({{"stage", entry.stage.value}, {"topics", stage_topics}});
  }
  json transcript = json::array();
  for (const auto& u : session.transcript) {
    transcript.push_back({{"speaker", to_string(u.speaker)},
                          {"text", u.text},
                          {"turn_index", u.turn_index},
                          {"stage", u.stage_at_emission.value}});
  }
  return {{"id", session.id},
          {"mode", to_string(session.mode)},
          {"stage", session.stage.value},
          {"topics", topics},
          {"transcript", transcript},
          {"lifecycle", to_string(session.lifecycle)},
          {"turn_count", session.turn_count},
          {"config_id", session.config_ref.id},
          {"config_fingerprint", session.config_ref.fingerprint},
          {"created_at", session.created_at},
          {"updated_at", session.updated_at},
          {"last_seq", session.last_seq}};
}

}  // namespace sudosys
