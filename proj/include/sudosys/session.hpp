#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sudosys/core.hpp"
#include "sudosys/stage_engine.hpp"

namespace sudosys {

enum class SessionMode { Structured, Baseline };
enum class Lifecycle { Active, Completed, Aborted };

std::string_view to_string(SessionMode mode);
std::optional<SessionMode> session_mode_from_string(std::string_view text);
std::string_view to_string(Lifecycle lifecycle);

struct ConfigRef {
  std::string id;
  std::string fingerprint;

  bool operator==(const ConfigRef&) const = default;
};

struct Session {
  std::string id;
  SessionMode mode = SessionMode::Structured;
  StageId stage;
  TopicStore topics;
  std::vector<Utterance> transcript;
  Lifecycle lifecycle = Lifecycle::Active;
  int turn_count = 0;
  ConfigRef config_ref;
  std::string created_at;
  std::string updated_at;

  // Sequence number of the last event in this session's log. Bookkeeping for
  // appends, not dialogue state: failed turns advance it, so == ignores it.
  std::uint64_t last_seq = 0;

  bool operator==(const Session& other) const;
};

enum class EventKind {
  Created,
  ClientUtterance,
  ModelCall,
  Unpacked,
  TopicsApplied,
  StageChanged,
  Completed,
  Aborted,
  Error,
};

std::string_view to_string(EventKind kind);
std::optional<EventKind> event_kind_from_string(std::string_view text);

struct SessionEvent {
  std::uint64_t seq = 0;
  std::string timestamp;
  EventKind kind = EventKind::Created;
  nlohmann::json payload = nlohmann::json::object();

  bool operator==(const SessionEvent&) const = default;
};

class CorruptLog : public Error {
 public:
  using Error::Error;
};

// One line, no trailing newline. Keys are sorted, so identical events encode
// to identical bytes.
std::string encode_event(const SessionEvent& event);
SessionEvent decode_event(std::string_view line);

// Applies one event to `session`. Created must come first. Throws CorruptLog
// for payloads that do not fit the session.
void apply_event(Session& session, const SessionEvent& event);

// Rebuilds a session from its full log. Throws CorruptLog on an empty log, a
// missing Created event, a sequence gap, or an undecodable payload.
Session replay_session(std::span<const SessionEvent> events);

// JSON view used by persistence tests and the CLI.
nlohmann::json to_json(const Session& session);

}  // namespace sudosys
