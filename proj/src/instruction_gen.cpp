#include "sudosys/instruction_gen.hpp"

#include <fmt/format.h>

namespace sudosys {

namespace {

std::string indent_continuations(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (const char c : text) {
    out += c;
    if (c == '\n') out += "  ";
  }
  return out;
}

std::string replace_all(std::string text, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = text.find(from, pos)) != std::string::npos) {
    text.replace(pos, from.size(), to);
    pos += to.size();
  }
  return text;
}

std::string render_base(const StageConfig& config, StageId stage) {
  const auto& definition = config.stage(stage);
  auto text = fmt::format("## Stage {} of {}: {}\n{}", stage.value, config.stage_count, definition.title,
                          definition.base_instruction);
  if (!definition.advance_hint.empty()) {
    text += "\nWhen to move on: " + definition.advance_hint;
  }
  return text;
}

}  // namespace

std::string render_topics_block(const StageConfig& config, const std::vector<StageTopics>& visible) {
  std::string out{kTopicsHeading};
  out += "\nTopics marked [ ] have not been discussed yet. Only the current stage's topics may be revised;"
         " earlier stages are kept for reference.";
  for (const auto& entry : visible) {
    const auto title = config.contains(entry.stage) ? config.stage(entry.stage).title : std::string{};
    out += fmt::format("\n### Stage {}: {}", entry.stage.value, title);
    if (entry.topics.empty()) {
      out += "\n(no topics for this stage)";
    }
    for (const auto& topic : entry.topics) {
      if (topic.description.empty()) {
        out += fmt::format("\n- [ ] {}", topic.key);
      } else {
        out += fmt::format("\n- [x] {}: {}", topic.key, indent_continuations(topic.description));
      }
    }
  }
  return out;
}

std::string render_response_fields(const StageDefinition& stage) {
  std::string out = "{\n";
  for (const auto& key : stage.topic_keys) {
    out += fmt::format("  \"{0}\": \"<what is known so far about {0}>\",\n", key);
  }
  out += "  \"status\": <-1 | 0 | 1>,\n";
  out += "  \"reply\": \"<your reply to the client>\"\n";
  out += "}";
  return out;
}

std::string render_response_template(const StageConfig& config, StageId stage) {
  const auto skeleton =
      replace_all(config.response_template_skeleton, kFieldsPlaceholder, render_response_fields(config.stage(stage)));
  return std::string(kReplyFormatHeading) + "\n" + skeleton;
}

Instruction generate_instruction(StageId stage, const std::vector<StageTopics>& visible,
                                 std::string_view user_input, const StageConfig& config) {
  if (trim(user_input).empty()) {
    throw EmptyInput();
  }
  Instruction instruction;
  instruction.stage = stage;
  instruction.parts.base_instruction = render_base(config, stage);
  instruction.parts.topics_block = render_topics_block(config, visible);
  instruction.parts.user_input = std::string(kClientHeading) + "\n" + std::string(user_input);
  instruction.parts.response_template = render_response_template(config, stage);

  const auto& parts = instruction.parts;
  instruction.text.reserve(parts.base_instruction.size() + parts.topics_block.size() + parts.user_input.size() +
                           parts.response_template.size() + 3 * kPartSeparator.size());
  instruction.text += parts.base_instruction;
  instruction.text += kPartSeparator;
  instruction.text += parts.topics_block;
  instruction.text += kPartSeparator;
  instruction.text += parts.user_input;
  instruction.text += kPartSeparator;
  instruction.text += parts.response_template;
  return instruction;
}

std::string build_baseline_prompt(const StageConfig& config) {
  if (trim(config.baseline_prompt).empty()) {
    throw ValidationError("config '" + config.id + "' has no baseline_prompt");
  }
  return config.baseline_prompt;
}

}  // namespace sudosys
