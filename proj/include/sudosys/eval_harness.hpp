#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sudosys/llm_gateway.hpp"
#include "sudosys/orchestrator.hpp"
#include "sudosys/unpacker.hpp"

namespace sudosys {

// ---------------------------------------------------------------------------
// Portraits
// ---------------------------------------------------------------------------

struct Portrait {
  std::optional<int> age;
  std::string gender;
  std::string occupation;
  std::vector<std::string> hobbies;
  std::vector<std::string> health_conditions;
  std::vector<std::string> distress_sources;
  std::string current_mood;
  std::vector<std::string> psychiatric_symptoms;
  std::string source_id;

  bool operator==(const Portrait&) const = default;
};

class InvalidPortrait : public Error {
 public:
  using Error::Error;
};

// A structured model answer that stayed unusable through the retry budget.
class StructuredOutputError : public Error {
 public:
  StructuredOutputError(const std::string& what, UnpackFailure last) : Error(what), last_(std::move(last)) {}
  const UnpackFailure& last_failure() const { return last_; }

 private:
  UnpackFailure last_;
};

// Throws InvalidPortrait when neither distress sources nor symptoms are present.
void validate_portrait(const Portrait& portrait);

nlohmann::json to_json(const Portrait& portrait);
// Throws SchemaError on wrong field types. Missing text fields read as empty.
Portrait portrait_from_json(const nlohmann::json& object);

// One JSON object per line.
std::vector<Portrait> load_portraits(const std::filesystem::path& path);
std::string portraits_to_jsonl(std::span<const Portrait> portraits);

struct ModelCallOptions {
  // Re-asks after the first call when the answer does not fit its schema.
  int retry_budget = 3;
  double temperature = 0.7;
  int max_output_tokens = 1024;
};

extern const std::string_view kDefaultPortraitPrompt;
extern const std::string_view kDefaultPersonaPrompt;
extern const std::string_view kDefaultJudgeRubric;
extern const std::string_view kDefaultJointJudgeRubric;

// Replaces "{{transcript}}" in `prompt`, or appends the transcript when absent.
Portrait extract_portrait(std::string_view transcript_text, Backend& backend, std::string_view prompt,
                          std::string source_id, const ModelCallOptions& options = {});

// ---------------------------------------------------------------------------
// Dialogue simulation
// ---------------------------------------------------------------------------

enum class Termination { TurnCap, SessionCompleted, ClientClosed, Error };

std::string_view to_string(Termination termination);

struct GeneratedDialogue {
  std::string portrait_ref;
  std::string system_id;
  std::vector<Utterance> transcript;
  // Client utterances delivered to the system under test.
  int turns_used = 0;
  Termination termination = Termination::TurnCap;
  std::string error_detail;
};

struct SystemReply {
  std::string text;
  StageId stage_before;
  StageId stage_after;
  bool completed = false;
};

// Anything with run_turn semantics that a simulated client can talk to.
class DialogueSystem {
 public:
  virtual ~DialogueSystem() = default;
  virtual std::string id() const = 0;
  // Starts a fresh conversation; returns the counselor's opening line if any.
  virtual std::optional<std::string> open() = 0;
  virtual SystemReply respond(std::string_view client_text) = 0;
  virtual StageId current_stage() const = 0;
};

// A structured or stage-unaware session driven by an Orchestrator.
class OrchestratedSystem final : public DialogueSystem {
 public:
  OrchestratedSystem(std::string id, std::shared_ptr<Orchestrator> orchestrator, SessionMode mode);

  std::string id() const override { return id_; }
  std::optional<std::string> open() override;
  SystemReply respond(std::string_view client_text) override;
  StageId current_stage() const override { return session_.stage; }
  const Session& session() const { return session_; }

 private:
  std::string id_;
  std::shared_ptr<Orchestrator> orchestrator_;
  SessionMode mode_;
  Session session_;
};

// An external chat model (e.g. a fine-tuned counselor behind an
// OpenAI-compatible endpoint) with rolling history.
class ChatEndpointSystem final : public DialogueSystem {
 public:
  ChatEndpointSystem(std::string id, std::shared_ptr<Backend> backend, std::string system_prompt = {});

  std::string id() const override { return id_; }
  std::optional<std::string> open() override;
  SystemReply respond(std::string_view client_text) override;
  StageId current_stage() const override { return StageId{1}; }

 private:
  std::string id_;
  std::shared_ptr<Backend> backend_;
  std::string system_prompt_;
  std::vector<ChatMessage> history_;
};

inline constexpr std::string_view kDefaultClosingToken = "<<END>>";

struct SimulationOptions {
  // A turn is one client utterance; the client opens every exchange.
  int max_turns = 20;
  std::string persona_template{kDefaultPersonaPrompt};
  std::string closing_token{kDefaultClosingToken};
  double temperature = 0.7;
  int max_output_tokens = 512;
};

std::string render_persona(const Portrait& portrait, std::string_view persona_template,
                           std::string_view closing_token);
std::string render_transcript(std::span<const Utterance> transcript);

// Never throws for backend or system failures: they end the dialogue with
// termination=Error and the partial transcript kept.
GeneratedDialogue simulate_dialogue(const Portrait& portrait, DialogueSystem& system, Backend& client,
                                    const SimulationOptions& options = {});

// ---------------------------------------------------------------------------
// Judging and aggregation
// ---------------------------------------------------------------------------

struct RatingReport {
  std::string dialogue_ref;
  std::string system_id;
  std::string portrait_ref;
  int coherence = 0;
  int professionalism = 0;
  int empathy = 0;
  int authenticity = 0;
  std::string judge_raw;

  bool operator==(const RatingReport&) const = default;
};

class JudgeFailure : public Error {
 public:
  using Error::Error;
};

std::string dialogue_ref(const GeneratedDialogue& dialogue);

RatingReport judge_dialogue(const GeneratedDialogue& dialogue, Backend& judge, std::string_view rubric,
                            const ModelCallOptions& options = {});

// One call rating every dialogue held with the same client; the judge answers
// {"dialogue_1": {...}, "dialogue_2": {...}, ...}.
std::vector<RatingReport> judge_dialogues_jointly(std::span<const GeneratedDialogue> dialogues, Backend& judge,
                                                  std::string_view rubric, const ModelCallOptions& options = {});

nlohmann::json to_json(const RatingReport& report);

struct DimensionMeans {
  // Means in tenths, rounded half up: 35 means 3.5.
  int coherence = 0;
  int professionalism = 0;
  int empathy = 0;
  int authenticity = 0;

  bool operator==(const DimensionMeans&) const = default;
};

struct EvalTable {
  std::map<std::string, DimensionMeans> rows;
  int n_dialogues = 0;  // per system
  int excluded = 0;     // failed pairs left out of the means

  bool operator==(const EvalTable&) const = default;
};

class UnbalancedGroups : public Error {
 public:
  using Error::Error;
};

// Mean of n integers rounded half up to one decimal, returned in tenths.
int mean_tenths(long long sum, long long count);

EvalTable aggregate(std::span<const RatingReport> reports);
std::string render_table(const EvalTable& table);

// ---------------------------------------------------------------------------
// Campaigns
// ---------------------------------------------------------------------------

enum class JudgeMode { Independent, Joint };

struct CampaignSystem {
  std::string id;
  // Builds a fresh system for one dialogue.
  std::function<std::unique_ptr<DialogueSystem>()> make;
};

// Returns the backend used for one (portrait, system) pair. Scripted setups
// hand out a fresh instance per pair so results do not depend on scheduling.
using BackendFactory = std::function<std::shared_ptr<Backend>()>;

struct CampaignOptions {
  std::string campaign_id = "campaign";
  std::filesystem::path output_root;  // artifacts go to <output_root>/campaign/<campaign_id>/
  int parallelism = 4;
  JudgeMode judge_mode = JudgeMode::Independent;
  SimulationOptions simulation;
  std::string rubric{kDefaultJudgeRubric};
  ModelCallOptions judge_call;
};

struct PairFailure {
  std::string portrait_ref;
  std::string system_id;
  std::string reason;
};

struct CampaignResult {
  EvalTable table;
  std::vector<GeneratedDialogue> dialogues;
  std::vector<RatingReport> reports;
  std::vector<PairFailure> failures;
  std::filesystem::path directory;
};

class CampaignError : public Error {
 public:
  using Error::Error;
};

// Simulates and judges every (portrait, system) pair. A portrait with any
// failed pair is left out of the means for every system, so each row averages
// the same clients. Throws CampaignError for an empty campaign or when every
// pair failed (artifacts are still written).
CampaignResult run_campaign(std::span<const Portrait> portraits, std::span<const CampaignSystem> systems,
                            const BackendFactory& client_backend, const BackendFactory& judge_backend,
                            const CampaignOptions& options);

std::string render_dialogue_log(const GeneratedDialogue& dialogue);

}  // namespace sudosys
