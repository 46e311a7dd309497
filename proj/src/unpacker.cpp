#include "sudosys/unpacker.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <utility>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace sudosys {

using nlohmann::json;

std::string_view to_string(UnpackFailureKind kind) {
  switch (kind) {
    case UnpackFailureKind::NotParseable:
      return "NotParseable";
    case UnpackFailureKind::MissingField:
      return "MissingField";
    case UnpackFailureKind::BadStatusValue:
      return "BadStatusValue";
    case UnpackFailureKind::EmptyReply:
      return "EmptyReply";
  }
  return "NotParseable";
}

std::optional<UnpackFailureKind> unpack_failure_kind_from_string(std::string_view text) {
  for (const auto kind : {UnpackFailureKind::NotParseable, UnpackFailureKind::MissingField,
                          UnpackFailureKind::BadStatusValue, UnpackFailureKind::EmptyReply}) {
    if (to_string(kind) == text) return kind;
  }
  return std::nullopt;
}

namespace {

bool is_fence_line(std::string_view line) { return trim(line).substr(0, 3) == "```"; }

std::string strip_fence_lines(std::string_view raw) {
  std::string out;
  bool first = true;
  std::size_t start = 0;
  while (start <= raw.size()) {
    auto end = raw.find('\n', start);
    if (end == std::string_view::npos) end = raw.size();
    const auto line = raw.substr(start, end - start);
    if (!is_fence_line(line)) {
      if (!first) out += '\n';
      out += line;
      first = false;
    }
    start = end + 1;
  }
  return out;
}

struct Replacement {
  std::string_view from;
  char to;
};

// UTF-8 spellings of quote and structural punctuation that models emit in place of ASCII.
constexpr std::array<Replacement, 4> kQuoteMarks{{
    {"\xE2\x80\x9C", '"'},  // U+201C left double quotation mark
    {"\xE2\x80\x9D", '"'},  // U+201D right double quotation mark
    {"\xE2\x80\x9E", '"'},  // U+201E double low-9 quotation mark
    {"\xEF\xBC\x82", '"'},  // U+FF02 fullwidth quotation mark
}};

constexpr std::array<Replacement, 6> kFullWidthPunctuation{{
    {"\xEF\xBD\x9B", '{'},  // U+FF5B
    {"\xEF\xBD\x9D", '}'},  // U+FF5D
    {"\xEF\xBC\xBB", '['},  // U+FF3B
    {"\xEF\xBC\xBD", ']'},  // U+FF3D
    {"\xEF\xBC\x9A", ':'},  // U+FF1A
    {"\xEF\xBC\x8C", ','},  // U+FF0C
}};

template <std::size_t N>
std::optional<Replacement> match_at(std::string_view text, std::size_t pos, const std::array<Replacement, N>& table) {
  for (const auto& entry : table) {
    if (text.substr(pos, entry.from.size()) == entry.from) return entry;
  }
  return std::nullopt;
}

// Outside string literals, typographic quotes open/close strings and full-width
// punctuation becomes ASCII. Inside ASCII-delimited strings nothing changes.
std::string normalize_quotes(std::string_view text) {
  enum class State { Outside, InAscii, InTypographic };
  State state = State::Outside;
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    switch (state) {
      case State::Outside: {
        if (c == '"') {
          out += c;
          state = State::InAscii;
          ++i;
        } else if (const auto quote = match_at(text, i, kQuoteMarks)) {
          out += '"';
          state = State::InTypographic;
          i += quote->from.size();
        } else if (const auto punct = match_at(text, i, kFullWidthPunctuation)) {
          out += punct->to;
          i += punct->from.size();
        } else {
          out += c;
          ++i;
        }
        break;
      }
      case State::InAscii: {
        out += c;
        ++i;
        if (c == '\\' && i < text.size()) {
          out += text[i++];
        } else if (c == '"') {
          state = State::Outside;
        }
        break;
      }
      case State::InTypographic: {
        if (c == '\\' && i + 1 < text.size()) {
          out += c;
          out += text[i + 1];
          i += 2;
        } else if (c == '"') {
          out += c;
          state = State::Outside;
          ++i;
        } else if (const auto quote = match_at(text, i, kQuoteMarks)) {
          out += '"';
          state = State::Outside;
          i += quote->from.size();
        } else {
          out += c;
          ++i;
        }
        break;
      }
    }
  }
  return out;
}

// Drops commas whose next non-space character closes an object or array.
std::string remove_trailing_commas(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool in_string = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      out += c;
      if (c == '\\' && i + 1 < text.size()) {
        out += text[++i];
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
      out += c;
      continue;
    }
    if (c == ',') {
      std::size_t j = i + 1;
      while (j < text.size() && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
      if (j < text.size() && (text[j] == '}' || text[j] == ']')) continue;
    }
    out += c;
  }
  return out;
}

std::optional<json> parse_object(const std::string& candidate) {
  auto value = json::parse(candidate, nullptr, false);
  if (value.is_discarded() || !value.is_object()) return std::nullopt;
  return value;
}

UnpackFailure failure(UnpackFailureKind kind, std::string detail, std::string_view raw) {
  return UnpackFailure{kind, std::move(detail), std::string(raw)};
}

std::string lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

std::optional<std::string> balanced_object_slice(std::string_view text) {
  const auto open = text.find('{');
  if (open == std::string_view::npos) return std::nullopt;
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = open; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (c == '\\') {
        ++i;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{') {
      ++depth;
    } else if (c == '}') {
      if (--depth == 0) return std::string(text.substr(open, i - open + 1));
    }
  }
  return std::nullopt;
}

std::vector<RepairCandidate> repair_candidates(std::string_view raw) {
  std::vector<RepairCandidate> candidates;
  candidates.push_back({0, std::string(raw)});

  const auto unfenced = strip_fence_lines(raw);
  candidates.push_back({1, unfenced});

  if (auto slice = balanced_object_slice(unfenced)) {
    candidates.push_back({2, std::move(*slice)});
  }

  auto normalized = normalize_quotes(unfenced);
  if (auto slice = balanced_object_slice(normalized)) {
    candidates.push_back({3, *slice});
    candidates.push_back({4, remove_trailing_commas(*slice)});
  }
  return candidates;
}

std::optional<ParsedObject> parse_first_object(std::string_view raw) {
  for (auto& candidate : repair_candidates(raw)) {
    if (auto object = parse_object(candidate.text)) {
      return ParsedObject{std::move(*object), candidate.tier};
    }
  }
  return std::nullopt;
}

std::variant<DialogueStatus, UnpackFailure> parse_status(const json& value) {
  if (value.is_number_integer()) {
    const auto number = value.is_number_unsigned() ? static_cast<long long>(std::min<std::uint64_t>(
                                                         value.get<std::uint64_t>(), 1000))
                                                   : value.get<long long>();
    if (const auto status = status_from_int(number)) return *status;
  } else if (value.is_string()) {
    const auto& text = value.get_ref<const std::string&>();
    if (text == "-1") return DialogueStatus::Back;
    if (text == "0") return DialogueStatus::Stay;
    if (text == "1") return DialogueStatus::Advance;
    const auto token = lower(text);
    if (token == "back") return DialogueStatus::Back;
    if (token == "stay") return DialogueStatus::Stay;
    if (token == "advance") return DialogueStatus::Advance;
  }
  return failure(UnpackFailureKind::BadStatusValue,
                 "status must be -1, 0 or 1 but was " +
                     value.dump(-1, ' ', false, json::error_handler_t::replace),
                 {});
}

UnpackResult unpack(std::string_view raw, const std::set<std::string>& expected_topic_keys) {
  auto parsed = parse_first_object(raw);
  if (!parsed) {
    return failure(UnpackFailureKind::NotParseable, "no repair tier produced a JSON object", raw);
  }
  const auto& object = parsed->object;

  const auto reply = object.find("reply");
  if (reply == object.end()) {
    return failure(UnpackFailureKind::MissingField, "reply", raw);
  }
  if (!reply->is_string()) {
    return failure(UnpackFailureKind::MissingField, "reply (must be text)", raw);
  }
  const auto status_field = object.find("status");
  if (status_field == object.end()) {
    return failure(UnpackFailureKind::MissingField, "status", raw);
  }
  auto status = parse_status(*status_field);
  if (auto* bad = std::get_if<UnpackFailure>(&status)) {
    bad->raw = std::string(raw);
    return std::move(*bad);
  }
  if (trim(reply->get_ref<const std::string&>()).empty()) {
    return failure(UnpackFailureKind::EmptyReply, "reply is blank", raw);
  }

  UnpackedResponse response;
  response.reply = reply->get<std::string>();
  response.status = std::get<DialogueStatus>(status);
  response.repair_tier = parsed->tier;
  for (const auto& [key, value] : object.items()) {
    if (key == "reply" || key == "status") continue;
    if (!expected_topic_keys.contains(key)) {
      spdlog::debug("unpacker: dropping unexpected field '{}'", key);
      continue;
    }
    if (value.is_string()) {
      response.topic_updates.emplace(key, value.get<std::string>());
    } else {
      response.ignored_fields.push_back(key);
    }
  }
  return response;
}

json to_json(const UnpackedResponse& response) {
  json object = json::object();
  for (const auto& [key, description] : response.topic_updates) {
    object[key] = description;
  }
  object["status"] = to_int(response.status);
  object["reply"] = response.reply;
  return object;
}

}  // namespace sudosys
