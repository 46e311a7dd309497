#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "sudosys/core.hpp"

namespace sudosys {

// Verbatim model text plus transport metadata.
struct ModelOutput {
  std::string raw;
  std::string backend_id;
  std::int64_t latency_ms = 0;
};

enum class UnpackFailureKind { NotParseable, MissingField, BadStatusValue, EmptyReply };

std::string_view to_string(UnpackFailureKind kind);
std::optional<UnpackFailureKind> unpack_failure_kind_from_string(std::string_view text);

// Every kind warrants regeneration.
struct UnpackFailure {
  UnpackFailureKind kind = UnpackFailureKind::NotParseable;
  std::string detail;
  std::string raw;
};

struct UnpackedResponse {
  std::map<std::string, std::string> topic_updates;
  std::string reply;
  DialogueStatus status = DialogueStatus::Stay;
  // 0 when the raw text parsed as-is; otherwise the repair tier that succeeded.
  int repair_tier = 0;
  // Expected topic keys whose values were not text and were therefore skipped.
  std::vector<std::string> ignored_fields;

  bool operator==(const UnpackedResponse&) const = default;
};

using UnpackResult = std::variant<UnpackedResponse, UnpackFailure>;

struct RepairCandidate {
  int tier = 0;
  std::string text;
};

inline constexpr int kMaxRepairTier = 4;

// Tier 0: raw. Tier 1: code-fence lines removed. Tier 2: first balanced {...}
// slice of tier 1. Tier 3: tier 1 with typographic/full-width quotes and
// punctuation mapped to ASCII outside string literals, then sliced. Tier 4:
// tier 3 without trailing commas. Tiers that find no object slice are omitted.
std::vector<RepairCandidate> repair_candidates(std::string_view raw);

// First balanced {...} slice starting at the first '{', honouring string
// literals and escapes. nullopt if there is no '{' or it never closes.
std::optional<std::string> balanced_object_slice(std::string_view text);

struct ParsedObject {
  nlohmann::json object;
  int tier = 0;
};

// Tries repair candidates in tier order and returns the first one that parses
// as a JSON object.
std::optional<ParsedObject> parse_first_object(std::string_view raw);

// Accepts -1/0/1, "-1"/"0"/"1", and back/stay/advance in any letter case.
std::variant<DialogueStatus, UnpackFailure> parse_status(const nlohmann::json& value);

UnpackResult unpack(std::string_view raw, const std::set<std::string>& expected_topic_keys);

// Canonical object form; unpacking its dump succeeds at tier 0 with the same fields.
nlohmann::json to_json(const UnpackedResponse& response);

}  // namespace sudosys
