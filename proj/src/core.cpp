#include "sudosys/core.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "sudosys/util.hpp"

namespace sudosys {

std::optional<DialogueStatus> status_from_int(long long value) {
  switch (value) {
    case -1:
      return DialogueStatus::Back;
    case 0:
      return DialogueStatus::Stay;
    case 1:
      return DialogueStatus::Advance;
    default:
      return std::nullopt;
  }
}

std::string_view to_string(DialogueStatus status) {
  switch (status) {
    case DialogueStatus::Back:
      return "back";
    case DialogueStatus::Stay:
      return "stay";
    case DialogueStatus::Advance:
      return "advance";
  }
  return "stay";
}

std::string_view to_string(Speaker speaker) {
  return speaker == Speaker::Client ? "client" : "counselor";
}

std::optional<Speaker> speaker_from_string(std::string_view text) {
  if (text == "client") return Speaker::Client;
  if (text == "counselor") return Speaker::Counselor;
  return std::nullopt;
}

const StageDefinition& StageConfig::stage(StageId id) const {
  if (!contains(id)) {
    throw ValidationError(fmt::format("stage {} outside 1..{}", id.value, stage_count), id.value);
  }
  return stages[static_cast<std::size_t>(id.value - 1)];
}

bool is_identifier(std::string_view text) {
  if (text.empty()) return false;
  const auto head = static_cast<unsigned char>(text.front());
  if (!(std::isalpha(head) || head == '_')) return false;
  return std::all_of(text.begin(), text.end(), [](char c) {
    const auto u = static_cast<unsigned char>(c);
    return std::isalnum(u) || u == '_';
  });
}

std::string_view trim(std::string_view text) {
  constexpr std::string_view kSpace = " \t\r\n\f\v";
  const auto first = text.find_first_not_of(kSpace);
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(kSpace);
  return text.substr(first, last - first + 1);
}

namespace {

std::string rstrip(std::string text) {
  while (!text.empty() && (text.back() == '\n' || text.back() == ' ' || text.back() == '\r' ||
                           text.back() == '\t')) {
    text.pop_back();
  }
  return text;
}

std::string where(const std::string& context, const char* field) {
  return context.empty() ? std::string(field) : context + "." + field;
}

std::string require_string(const YAML::Node& parent, const char* field, const std::string& context) {
  const auto node = parent[field];
  if (!node) {
    throw SchemaError(fmt::format("missing field '{}'", where(context, field)));
  }
  if (!node.IsScalar()) {
    throw SchemaError(fmt::format("field '{}' must be text", where(context, field)));
  }
  return rstrip(node.as<std::string>());
}

std::string optional_string(const YAML::Node& parent, const char* field, const std::string& context) {
  const auto node = parent[field];
  if (!node || node.IsNull()) return {};
  if (!node.IsScalar()) {
    throw SchemaError(fmt::format("field '{}' must be text", where(context, field)));
  }
  return rstrip(node.as<std::string>());
}

int require_int(const YAML::Node& parent, const char* field, const std::string& context) {
  const auto node = parent[field];
  if (!node) {
    throw SchemaError(fmt::format("missing field '{}'", where(context, field)));
  }
  try {
    return node.as<int>();
  } catch (const YAML::Exception&) {
    throw SchemaError(fmt::format("field '{}' must be an integer", where(context, field)));
  }
}

StageDefinition parse_stage(const YAML::Node& node, std::size_t position) {
  const auto context = fmt::format("stages[{}]", position);
  if (!node.IsMap()) {
    throw SchemaError(fmt::format("'{}' must be a mapping", context));
  }
  StageDefinition stage;
  stage.index = StageId{require_int(node, "index", context)};
  stage.title = require_string(node, "title", context);
  stage.base_instruction = require_string(node, "base_instruction", context);
  stage.advance_hint = optional_string(node, "advance_hint", context);
  const auto keys = node["topic_keys"];
  if (keys && !keys.IsNull()) {
    if (!keys.IsSequence()) {
      throw SchemaError(fmt::format("field '{}.topic_keys' must be a list", context));
    }
    for (const auto& key : keys) {
      if (!key.IsScalar()) {
        throw SchemaError(fmt::format("'{}.topic_keys' entries must be text", context));
      }
      stage.topic_keys.push_back(key.as<std::string>());
    }
  }
  return stage;
}

}  // namespace

void validate_stage_config(const StageConfig& config) {
  if (config.stage_count < 1) {
    throw ValidationError("stage_count must be at least 1");
  }
  if (static_cast<int>(config.stages.size()) != config.stage_count) {
    throw ValidationError(fmt::format("stage_count is {} but {} stages are defined", config.stage_count,
                                      config.stages.size()));
  }
  if (config.response_template_skeleton.find(kFieldsPlaceholder) == std::string::npos) {
    throw ValidationError(
        fmt::format("response_template_skeleton must contain the {} placeholder", kFieldsPlaceholder));
  }
  if (config.baseline_prompt.find(kFieldsPlaceholder) != std::string::npos) {
    throw ValidationError("baseline_prompt must not contain the response template placeholder");
  }
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    const auto& stage = config.stages[i];
    const int expected = static_cast<int>(i) + 1;
    if (stage.index.value != expected) {
      throw ValidationError(fmt::format("stage index gap at {}", expected), expected);
    }
    if (trim(stage.base_instruction).empty()) {
      throw ValidationError(fmt::format("stage {} has an empty base_instruction", expected), expected);
    }
    std::set<std::string_view> seen;
    for (const auto& key : stage.topic_keys) {
      if (!is_identifier(key)) {
        throw ValidationError(fmt::format("stage {} topic key '{}' is not an identifier", expected, key),
                              expected);
      }
      if (key == "reply" || key == "status") {
        throw ValidationError(fmt::format("stage {} topic key '{}' is reserved", expected, key), expected);
      }
      if (!seen.insert(key).second) {
        throw ValidationError(fmt::format("stage {} has duplicate topic key '{}'", expected, key), expected);
      }
    }
  }
}

StageConfig load_stage_config(std::string_view document) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(document));
  } catch (const YAML::Exception& e) {
    throw SchemaError(fmt::format("config is not a readable document: {}", e.what()));
  }
  if (!root.IsMap()) {
    throw SchemaError(
        "config must be a mapping with keys stage_count, baseline_prompt, response_template_skeleton, stages");
  }

  StageConfig config;
  if (const auto id = optional_string(root, "id", ""); !id.empty()) {
    config.id = id;
  }
  config.stage_count = require_int(root, "stage_count", "");
  config.baseline_prompt = optional_string(root, "baseline_prompt", "");
  config.response_template_skeleton = require_string(root, "response_template_skeleton", "");
  config.greeting = optional_string(root, "greeting", "");

  const auto stages = root["stages"];
  if (!stages) {
    throw SchemaError("missing field 'stages'");
  }
  if (!stages.IsSequence()) {
    throw SchemaError("field 'stages' must be a list");
  }
  for (std::size_t i = 0; i < stages.size(); ++i) {
    config.stages.push_back(parse_stage(stages[i], i));
  }

  std::stable_sort(config.stages.begin(), config.stages.end(),
                   [](const StageDefinition& a, const StageDefinition& b) { return a.index < b.index; });
  for (std::size_t i = 0; i + 1 < config.stages.size(); ++i) {
    if (config.stages[i].index == config.stages[i + 1].index) {
      throw ValidationError(fmt::format("stage index {} defined twice", config.stages[i].index.value),
                            config.stages[i].index.value);
    }
  }
  validate_stage_config(config);
  return config;
}

StageConfig load_stage_config_file(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const std::exception&) {
    throw SchemaError("cannot read stage config '" + path.string() +
                      "' (expected a YAML document with stage_count, stages[], response_template_skeleton)");
  }
  return load_stage_config(text);
}

std::string serialize_stage_config(const StageConfig& config) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "id" << YAML::Value << YAML::DoubleQuoted << config.id;
  out << YAML::Key << "stage_count" << YAML::Value << config.stage_count;
  out << YAML::Key << "greeting" << YAML::Value << YAML::DoubleQuoted << config.greeting;
  out << YAML::Key << "baseline_prompt" << YAML::Value << YAML::DoubleQuoted << config.baseline_prompt;
  out << YAML::Key << "response_template_skeleton" << YAML::Value << YAML::DoubleQuoted
      << config.response_template_skeleton;
  out << YAML::Key << "stages" << YAML::Value << YAML::BeginSeq;
  for (const auto& stage : config.stages) {
    out << YAML::BeginMap;
    out << YAML::Key << "index" << YAML::Value << stage.index.value;
    out << YAML::Key << "title" << YAML::Value << YAML::DoubleQuoted << stage.title;
    out << YAML::Key << "base_instruction" << YAML::Value << YAML::DoubleQuoted << stage.base_instruction;
    out << YAML::Key << "advance_hint" << YAML::Value << YAML::DoubleQuoted << stage.advance_hint;
    out << YAML::Key << "topic_keys" << YAML::Value << YAML::Flow << YAML::BeginSeq;
    for (const auto& key : stage.topic_keys) out << key;
    out << YAML::EndSeq;
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

std::string config_fingerprint(const StageConfig& config) {
  return sha256_hex(serialize_stage_config(config)).substr(0, 16);
}

}  // namespace sudosys
