#pragma once

#include <compare>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sudosys/errors.hpp"

namespace sudosys {

// 1-based stage index. Range checks against a concrete StageConfig happen
// where a config is in scope (load, transitions, topic access).
struct StageId {
  int value = 1;

  constexpr auto operator<=>(const StageId&) const = default;
};

// The model's per-turn verdict on stage progression.
enum class DialogueStatus : int { Back = -1, Stay = 0, Advance = 1 };

constexpr int to_int(DialogueStatus status) { return static_cast<int>(status); }
std::optional<DialogueStatus> status_from_int(long long value);
std::string_view to_string(DialogueStatus status);

struct Topic {
  std::string key;
  std::string description;

  bool operator==(const Topic&) const = default;
};

struct StageDefinition {
  StageId index;
  std::string title;
  std::string base_instruction;
  std::vector<std::string> topic_keys;
  std::string advance_hint;

  bool operator==(const StageDefinition&) const = default;
};

inline constexpr std::string_view kFieldsPlaceholder = "{{fields}}";

struct StageConfig {
  std::string id = "default";
  int stage_count = 0;
  std::vector<StageDefinition> stages;
  // Must contain kFieldsPlaceholder; it is replaced by the per-stage JSON skeleton.
  std::string response_template_skeleton;
  std::string baseline_prompt;
  // Optional counselor opening line, emitted when a session is created.
  std::string greeting;

  const StageDefinition& stage(StageId id) const;
  bool contains(StageId id) const { return id.value >= 1 && id.value <= stage_count; }

  bool operator==(const StageConfig&) const = default;
};

enum class Speaker { Client, Counselor };

std::string_view to_string(Speaker speaker);
std::optional<Speaker> speaker_from_string(std::string_view text);

struct Utterance {
  Speaker speaker = Speaker::Client;
  std::string text;
  int turn_index = 1;
  StageId stage_at_emission;

  bool operator==(const Utterance&) const = default;
};

// Parses and validates a stage-config document (YAML). Throws SchemaError for
// structural problems and ValidationError for invariant violations.
StageConfig load_stage_config(std::string_view document);
StageConfig load_stage_config_file(const std::filesystem::path& path);

// Emits a document that load_stage_config reads back to an equal StageConfig.
std::string serialize_stage_config(const StageConfig& config);

// Re-runs every load-time invariant on an in-memory config.
void validate_stage_config(const StageConfig& config);

// Stable content hash of the serialized config, used as the config identity in session logs.
std::string config_fingerprint(const StageConfig& config);

bool is_identifier(std::string_view text);
std::string_view trim(std::string_view text);

}  // namespace sudosys
