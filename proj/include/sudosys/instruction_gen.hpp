#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "sudosys/core.hpp"
#include "sudosys/stage_engine.hpp"

namespace sudosys {

// Blank line between the four instruction parts.
inline constexpr std::string_view kPartSeparator = "\n\n";

inline constexpr std::string_view kTopicsHeading = "## Topics so far";
inline constexpr std::string_view kClientHeading = "## Client says";
inline constexpr std::string_view kReplyFormatHeading = "## Reply format";

struct InstructionParts {
  std::string base_instruction;
  std::string topics_block;
  std::string user_input;
  std::string response_template;

  bool operator==(const InstructionParts&) const = default;
};

struct Instruction {
  std::string text;
  StageId stage;
  InstructionParts parts;
};

// One section per stage, one line per topic. Undiscussed topics render as
// "- [ ] key", recorded ones as "- [x] key: description".
std::string render_topics_block(const StageConfig& config, const std::vector<StageTopics>& visible);

// JSON skeleton with the stage's topic keys, then `status` and `reply`.
std::string render_response_fields(const StageDefinition& stage);
std::string render_response_template(const StageConfig& config, StageId stage);

// Throws EmptyInput for a blank utterance.
Instruction generate_instruction(StageId stage, const std::vector<StageTopics>& visible,
                                 std::string_view user_input, const StageConfig& config);

// System prompt for the stage-unaware mode. Throws ValidationError if the
// config carries no baseline prompt.
std::string build_baseline_prompt(const StageConfig& config);

}  // namespace sudosys
