#include "sudosys/eval_harness.hpp"

#include <algorithm>
#include <atomic>
#include <array>
#include <cctype>
#include <charconv>
#include <set>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "sudosys/util.hpp"

namespace sudosys {

using nlohmann::json;

const std::string_view kDefaultPortraitPrompt =
    R"(You read counseling transcripts and describe the client.

Transcript:
{{transcript}}

Answer with exactly one JSON object and nothing else:
{
  "age": <integer, or null if unknown>,
  "gender": "<gender, or empty if unknown>",
  "occupation": "<occupation, or empty if unknown>",
  "hobbies": ["<hobby>", ...],
  "health_conditions": ["<condition>", ...],
  "distress_sources": ["<what troubles the client>", ...],
  "current_mood": "<mood in a few words>",
  "psychiatric_symptoms": ["<symptom>", ...]
}
Use empty lists for anything the transcript does not mention.)";

const std::string_view kDefaultPersonaPrompt =
    R"(You are playing a client who has come to a counselor for help. Stay in character.

About you:
- Age: {{age}}
- Gender: {{gender}}
- Occupation: {{occupation}}
- Hobbies: {{hobbies}}
- Health conditions: {{health_conditions}}
- What troubles you: {{distress_sources}}
- Current mood: {{current_mood}}
- Symptoms: {{psychiatric_symptoms}}

Speak in the first person, one short message at a time, the way a real client would.
Do not act as the counselor. When you feel the conversation has reached a natural end,
reply with {{closing_token}} and nothing else.)";

const std::string_view kDefaultJudgeRubric =
    R"(You are an experienced counseling supervisor. Rate the counselor in the dialogue below
on four dimensions, each an integer from 1 (poor) to 5 (excellent):

- coherence: replies follow from what the client said and the session holds together
- professionalism: the counselor uses sound counseling technique and keeps appropriate boundaries
- empathy: the counselor understands and acknowledges the client's feelings
- authenticity: the counselor sounds like a real human counselor

Dialogue:
{{transcript}}

Answer with exactly one JSON object and nothing else:
{"coherence": <1-5>, "professionalism": <1-5>, "empathy": <1-5>, "authenticity": <1-5>})";

const std::string_view kDefaultJointJudgeRubric =
    R"(You are an experienced counseling supervisor. The same client talked to several counselors.
Rate each counselor on four dimensions, each an integer from 1 (poor) to 5 (excellent):

- coherence: replies follow from what the client said and the session holds together
- professionalism: the counselor uses sound counseling technique and keeps appropriate boundaries
- empathy: the counselor understands and acknowledges the client's feelings
- authenticity: the counselor sounds like a real human counselor

{{transcript}}

Answer with exactly one JSON object and nothing else, with one entry per dialogue:
{"dialogue_1": {"coherence": <1-5>, "professionalism": <1-5>, "empathy": <1-5>, "authenticity": <1-5>}, ...})";

namespace {

constexpr std::string_view kRetryReminder =
    "\n\nYour previous answer could not be read. Answer with exactly one JSON object in the requested format.";

std::string fill_placeholder(std::string_view text, std::string_view placeholder, std::string_view value) {
  std::string out;
  std::size_t pos = 0;
  bool found = false;
  while (true) {
    const auto hit = text.find(placeholder, pos);
    if (hit == std::string_view::npos) break;
    out.append(text.substr(pos, hit - pos));
    out.append(value);
    pos = hit + placeholder.size();
    found = true;
  }
  out.append(text.substr(pos));
  return found ? out : std::string(text);
}

std::string with_transcript(std::string_view prompt, std::string_view transcript) {
  if (prompt.find("{{transcript}}") == std::string_view::npos) {
    return std::string(prompt) + "\n\n" + std::string(transcript);
  }
  return fill_placeholder(prompt, "{{transcript}}", transcript);
}

std::string join(const std::vector<std::string>& items, std::string_view separator) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += separator;
    out += items[i];
  }
  return out;
}

UnpackFailure schema_failure(std::string detail, std::string raw) {
  return UnpackFailure{UnpackFailureKind::MissingField, std::move(detail), std::move(raw)};
}

// Sends `request`, re-asking with a reminder while `accept` rejects the answer.
template <typename T, typename Accept>
T call_with_retries(Backend& backend, PromptRequest request, const ModelCallOptions& options, Accept accept,
                    UnpackFailure& last) {
  const std::string base_tag = request.tag;
  const std::string base_user = request.user_text;
  for (int attempt = 1; attempt <= options.retry_budget + 1; ++attempt) {
    request.tag = fmt::format("{}:attempt-{}", base_tag, attempt);
    request.user_text = attempt == 1 ? base_user : base_user + std::string(kRetryReminder);
    const ModelOutput output = backend.complete(request);
    auto result = accept(output.raw);
    if (std::holds_alternative<T>(result)) return std::get<T>(std::move(result));
    last = std::get<UnpackFailure>(std::move(result));
    spdlog::debug("{}: attempt {} rejected: {}", base_tag, attempt, last.detail);
  }
  throw StructuredOutputError(fmt::format("{}: no usable answer after {} attempts: {}", base_tag,
                                          options.retry_budget + 1, last.detail),
                              last);
}

std::variant<std::vector<std::string>, std::string> read_list(const json& object, const char* key) {
  std::vector<std::string> items;
  if (!object.contains(key) || object.at(key).is_null()) return items;
  const json& value = object.at(key);
  if (value.is_string()) {
    const auto text = trim(value.get_ref<const std::string&>());
    if (!text.empty()) items.emplace_back(text);
    return items;
  }
  if (!value.is_array()) return fmt::format("field '{}' must be a list of text", key);
  for (const auto& item : value) {
    if (!item.is_string()) return fmt::format("field '{}' must be a list of text", key);
    const auto text = trim(item.get_ref<const std::string&>());
    if (!text.empty()) items.emplace_back(text);
  }
  return items;
}

std::variant<std::string, std::string> read_text(const json& object, const char* key) {
  using Result = std::variant<std::string, std::string>;
  if (!object.contains(key) || object.at(key).is_null()) return Result(std::in_place_index<0>);
  const json& value = object.at(key);
  if (!value.is_string()) return Result(std::in_place_index<1>, fmt::format("field '{}' must be text", key));
  return Result(std::in_place_index<0>, trim(value.get_ref<const std::string&>()));
}

std::variant<std::optional<int>, std::string> read_age(const json& object) {
  if (!object.contains("age") || object.at("age").is_null()) return std::optional<int>{};
  const json& value = object.at("age");
  if (value.is_number_integer()) return std::optional<int>{value.get<int>()};
  if (value.is_string()) {
    const auto text = trim(value.get_ref<const std::string&>());
    int parsed = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), parsed);
    if (ec == std::errc{} && end == text.data() + text.size()) return std::optional<int>{parsed};
    return std::optional<int>{};
  }
  return std::string("field 'age' must be an integer or null");
}

// Shared by the JSONL reader (throws) and model-output parsing (retries).
std::variant<Portrait, std::string> portrait_fields(const json& object) {
  if (!object.is_object()) return std::string("portrait must be a JSON object");
  Portrait p;
  auto age = read_age(object);
  if (auto* err = std::get_if<std::string>(&age)) return *err;
  p.age = std::get<std::optional<int>>(age);

  const std::pair<const char*, std::string*> texts[] = {
      {"gender", &p.gender}, {"occupation", &p.occupation}, {"current_mood", &p.current_mood}};
  for (const auto& [key, target] : texts) {
    auto value = read_text(object, key);
    if (value.index() == 1) return std::get<1>(value);
    *target = std::get<0>(std::move(value));
  }
  const std::pair<const char*, std::vector<std::string>*> lists[] = {
      {"hobbies", &p.hobbies},
      {"health_conditions", &p.health_conditions},
      {"distress_sources", &p.distress_sources},
      {"psychiatric_symptoms", &p.psychiatric_symptoms}};
  for (const auto& [key, target] : lists) {
    auto value = read_list(object, key);
    if (auto* err = std::get_if<std::string>(&value)) return *err;
    *target = std::get<std::vector<std::string>>(std::move(value));
  }
  return p;
}

}  // namespace

void validate_portrait(const Portrait& portrait) {
  if (portrait.distress_sources.empty() && portrait.psychiatric_symptoms.empty()) {
    throw InvalidPortrait(fmt::format("portrait '{}' names no distress source and no symptom", portrait.source_id));
  }
}

json to_json(const Portrait& portrait) {
  json out = json::object();
  out["age"] = portrait.age ? json(*portrait.age) : json(nullptr);
  out["gender"] = portrait.gender;
  out["occupation"] = portrait.occupation;
  out["hobbies"] = portrait.hobbies;
  out["health_conditions"] = portrait.health_conditions;
  out["distress_sources"] = portrait.distress_sources;
  out["current_mood"] = portrait.current_mood;
  out["psychiatric_symptoms"] = portrait.psychiatric_symptoms;
  out["source_id"] = portrait.source_id;
  return out;
}

Portrait portrait_from_json(const json& object) {
  auto parsed = portrait_fields(object);
  if (auto* err = std::get_if<std::string>(&parsed)) throw SchemaError(*err);
  Portrait p = std::get<Portrait>(std::move(parsed));
  if (object.contains("source_id")) {
    if (!object.at("source_id").is_string()) throw SchemaError("field 'source_id' must be text");
    p.source_id = object.at("source_id").get<std::string>();
  }
  return p;
}

std::vector<Portrait> load_portraits(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  std::vector<Portrait> portraits;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const auto line = trim(std::string_view(text).substr(start, end - start));
    ++line_no;
    start = end + 1;
    if (line.empty()) continue;
    try {
      Portrait p = portrait_from_json(json::parse(line));
      if (p.source_id.empty()) p.source_id = fmt::format("p{:03}", portraits.size() + 1);
      portraits.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw SchemaError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    } catch (const SchemaError& e) {
      throw SchemaError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    }
  }
  return portraits;
}

std::string portraits_to_jsonl(std::span<const Portrait> portraits) {
  std::string out;
  for (const auto& p : portraits) {
    out += to_json(p).dump(-1, ' ', false, json::error_handler_t::replace);
    out += '\n';
  }
  return out;
}

Portrait extract_portrait(std::string_view transcript_text, Backend& backend, std::string_view prompt,
                          std::string source_id, const ModelCallOptions& options) {
  if (trim(transcript_text).empty()) throw EmptyInput("transcript is empty");
  PromptRequest request;
  request.user_text = with_transcript(prompt, transcript_text);
  request.temperature = options.temperature;
  request.max_output_tokens = options.max_output_tokens;
  request.tag = fmt::format("portrait:{}", source_id);

  UnpackFailure last;
  auto accept = [](const std::string& raw) -> std::variant<Portrait, UnpackFailure> {
    const auto parsed = parse_first_object(raw);
    if (!parsed) return UnpackFailure{UnpackFailureKind::NotParseable, "no JSON object found", raw};
    auto fields = portrait_fields(parsed->object);
    if (auto* err = std::get_if<std::string>(&fields)) return schema_failure(*err, raw);
    return std::get<Portrait>(std::move(fields));
  };
  Portrait portrait = call_with_retries<Portrait>(backend, std::move(request), options, accept, last);
  portrait.source_id = std::move(source_id);
  validate_portrait(portrait);
  return portrait;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Termination termination) {
  switch (termination) {
    case Termination::TurnCap: return "TurnCap";
    case Termination::SessionCompleted: return "SessionCompleted";
    case Termination::ClientClosed: return "ClientClosed";
    case Termination::Error: return "Error";
  }
  return "Error";
}

OrchestratedSystem::OrchestratedSystem(std::string id, std::shared_ptr<Orchestrator> orchestrator, SessionMode mode)
    : id_(std::move(id)), orchestrator_(std::move(orchestrator)), mode_(mode) {
  if (!orchestrator_) throw ConfigError("system '" + id_ + "' has no orchestrator");
}

std::optional<std::string> OrchestratedSystem::open() {
  session_ = orchestrator_->create_session(mode_);
  if (session_.transcript.empty()) return std::nullopt;
  return session_.transcript.front().text;
}

SystemReply OrchestratedSystem::respond(std::string_view client_text) {
  const TurnResult result = orchestrator_->run_turn(session_, client_text);
  return SystemReply{result.reply, result.stage_before, result.stage_after, result.completed};
}

ChatEndpointSystem::ChatEndpointSystem(std::string id, std::shared_ptr<Backend> backend, std::string system_prompt)
    : id_(std::move(id)), backend_(std::move(backend)), system_prompt_(std::move(system_prompt)) {
  if (!backend_) throw ConfigError("system '" + id_ + "' has no backend");
}

std::optional<std::string> ChatEndpointSystem::open() {
  history_.clear();
  return std::nullopt;
}

SystemReply ChatEndpointSystem::respond(std::string_view client_text) {
  PromptRequest request;
  request.system_text = system_prompt_;
  request.history = history_;
  request.user_text = std::string(client_text);
  request.tag = fmt::format("{}:turn-{}", id_, history_.size() / 2 + 1);
  const ModelOutput output = backend_->complete(request);
  const std::string reply = sanitize_utf8(trim(output.raw));
  if (reply.empty()) throw Error("system '" + id_ + "' returned an empty reply");
  history_.push_back({"user", std::string(client_text)});
  history_.push_back({"assistant", reply});
  return SystemReply{reply, StageId{1}, StageId{1}, false};
}

std::string render_persona(const Portrait& portrait, std::string_view persona_template,
                           std::string_view closing_token) {
  auto list = [](const std::vector<std::string>& items) { return items.empty() ? std::string("none") : join(items, ", "); };
  auto text = [](const std::string& value) { return value.empty() ? std::string("unknown") : value; };
  std::string out(persona_template);
  out = fill_placeholder(out, "{{age}}", portrait.age ? std::to_string(*portrait.age) : "unknown");
  out = fill_placeholder(out, "{{gender}}", text(portrait.gender));
  out = fill_placeholder(out, "{{occupation}}", text(portrait.occupation));
  out = fill_placeholder(out, "{{hobbies}}", list(portrait.hobbies));
  out = fill_placeholder(out, "{{health_conditions}}", list(portrait.health_conditions));
  out = fill_placeholder(out, "{{distress_sources}}", list(portrait.distress_sources));
  out = fill_placeholder(out, "{{current_mood}}", text(portrait.current_mood));
  out = fill_placeholder(out, "{{psychiatric_symptoms}}", list(portrait.psychiatric_symptoms));
  out = fill_placeholder(out, "{{closing_token}}", closing_token);
  return out;
}

std::string render_transcript(std::span<const Utterance> transcript) {
  std::string out;
  for (const auto& u : transcript) {
    if (!out.empty()) out += '\n';
    out += u.speaker == Speaker::Client ? "Client: " : "Counselor: ";
    out += u.text;
  }
  return out;
}

GeneratedDialogue simulate_dialogue(const Portrait& portrait, DialogueSystem& system, Backend& client,
                                    const SimulationOptions& options) {
  GeneratedDialogue dialogue;
  dialogue.portrait_ref = portrait.source_id;
  dialogue.system_id = system.id();

  auto push = [&](Speaker speaker, std::string text, StageId stage) {
    const int index = static_cast<int>(dialogue.transcript.size()) + 1;
    dialogue.transcript.push_back(Utterance{speaker, std::move(text), index, stage});
  };
  auto fail = [&](const std::string& detail) {
    dialogue.termination = Termination::Error;
    dialogue.error_detail = detail;
    spdlog::debug("dialogue {} / {} ended with an error: {}", dialogue.portrait_ref, dialogue.system_id, detail);
  };

  try {
    if (auto greeting = system.open()) push(Speaker::Counselor, *greeting, system.current_stage());
  } catch (const std::exception& e) {
    fail(e.what());
    return dialogue;
  }

  const std::string persona = render_persona(portrait, options.persona_template, options.closing_token);
  while (dialogue.turns_used < options.max_turns) {
    PromptRequest request;
    request.system_text = persona;
    request.user_text = dialogue.transcript.empty()
                            ? std::string("The session is starting. Write your first message as the client.")
                            : "Conversation so far:\n" + render_transcript(dialogue.transcript) +
                                  "\n\nWrite your next message as the client.";
    request.temperature = options.temperature;
    request.max_output_tokens = options.max_output_tokens;
    request.tag = fmt::format("client:{}:{}:turn-{}", dialogue.portrait_ref, dialogue.system_id,
                              dialogue.turns_used + 1);

    std::string client_text;
    try {
      client_text = sanitize_utf8(trim(client.complete(request).raw));
    } catch (const std::exception& e) {
      fail(std::string("client: ") + e.what());
      return dialogue;
    }
    if (!options.closing_token.empty() && client_text.find(options.closing_token) != std::string::npos) {
      dialogue.termination = Termination::ClientClosed;
      return dialogue;
    }
    if (client_text.empty()) {
      fail("client produced an empty message");
      return dialogue;
    }

    const StageId stage = system.current_stage();
    push(Speaker::Client, client_text, stage);
    ++dialogue.turns_used;
    SystemReply reply;
    try {
      reply = system.respond(client_text);
    } catch (const std::exception& e) {
      fail(std::string("system: ") + e.what());
      return dialogue;
    }
    push(Speaker::Counselor, reply.text, reply.stage_before);
    if (reply.completed) {
      dialogue.termination = Termination::SessionCompleted;
      return dialogue;
    }
  }
  dialogue.termination = Termination::TurnCap;
  return dialogue;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kDimensions[] = {"coherence", "professionalism", "empathy", "authenticity"};

std::variant<std::array<int, 4>, std::string> read_ratings(const json& object) {
  if (!object.is_object()) return std::string("ratings must be a JSON object");
  std::array<int, 4> values{};
  for (std::size_t i = 0; i < 4; ++i) {
    const char* key = kDimensions[i];
    if (!object.contains(key)) return fmt::format("missing rating '{}'", key);
    const json& value = object.at(key);
    if (!value.is_number_integer()) return fmt::format("rating '{}' must be an integer", key);
    const auto n = value.get<long long>();
    if (n < 1 || n > 5) return fmt::format("rating '{}' is {}, outside 1..5", key, n);
    values[i] = static_cast<int>(n);
  }
  return values;
}

RatingReport make_report(const GeneratedDialogue& dialogue, const std::array<int, 4>& values, std::string raw) {
  RatingReport report;
  report.dialogue_ref = dialogue_ref(dialogue);
  report.system_id = dialogue.system_id;
  report.portrait_ref = dialogue.portrait_ref;
  report.coherence = values[0];
  report.professionalism = values[1];
  report.empathy = values[2];
  report.authenticity = values[3];
  report.judge_raw = std::move(raw);
  return report;
}

void check_judgeable(const GeneratedDialogue& dialogue) {
  const bool has_client = std::any_of(dialogue.transcript.begin(), dialogue.transcript.end(),
                                      [](const Utterance& u) { return u.speaker == Speaker::Client; });
  if (!has_client) throw JudgeFailure("dialogue " + dialogue_ref(dialogue) + " has no client utterance");
}

}  // namespace

std::string dialogue_ref(const GeneratedDialogue& dialogue) {
  return dialogue.portrait_ref + "__" + dialogue.system_id;
}

RatingReport judge_dialogue(const GeneratedDialogue& dialogue, Backend& judge, std::string_view rubric,
                            const ModelCallOptions& options) {
  check_judgeable(dialogue);
  PromptRequest request;
  request.user_text = with_transcript(rubric, render_transcript(dialogue.transcript));
  request.temperature = options.temperature;
  request.max_output_tokens = options.max_output_tokens;
  request.tag = "judge:" + dialogue_ref(dialogue);

  using Rated = std::pair<std::array<int, 4>, std::string>;
  auto accept = [](const std::string& raw) -> std::variant<Rated, UnpackFailure> {
    const auto parsed = parse_first_object(raw);
    if (!parsed) return UnpackFailure{UnpackFailureKind::NotParseable, "no JSON object found", raw};
    auto ratings = read_ratings(parsed->object);
    if (auto* err = std::get_if<std::string>(&ratings)) return schema_failure(*err, raw);
    return Rated{std::get<std::array<int, 4>>(ratings), raw};
  };
  UnpackFailure last;
  try {
    auto [values, raw] = call_with_retries<Rated>(judge, std::move(request), options, accept, last);
    return make_report(dialogue, values, std::move(raw));
  } catch (const StructuredOutputError& e) {
    throw JudgeFailure(e.what());
  }
}

std::vector<RatingReport> judge_dialogues_jointly(std::span<const GeneratedDialogue> dialogues, Backend& judge,
                                                  std::string_view rubric, const ModelCallOptions& options) {
  if (dialogues.empty()) return {};
  std::string block;
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    check_judgeable(dialogues[i]);
    if (i > 0) block += "\n\n";
    block += fmt::format("Dialogue {}:\n{}", i + 1, render_transcript(dialogues[i].transcript));
  }
  PromptRequest request;
  request.user_text = with_transcript(rubric, block);
  request.temperature = options.temperature;
  request.max_output_tokens = options.max_output_tokens;
  request.tag = "judge-joint:" + dialogues.front().portrait_ref;

  using Rated = std::pair<std::vector<std::array<int, 4>>, std::string>;
  const std::size_t count = dialogues.size();
  auto accept = [count](const std::string& raw) -> std::variant<Rated, UnpackFailure> {
    const auto parsed = parse_first_object(raw);
    if (!parsed) return UnpackFailure{UnpackFailureKind::NotParseable, "no JSON object found", raw};
    Rated rated{{}, raw};
    for (std::size_t i = 0; i < count; ++i) {
      const std::string key = fmt::format("dialogue_{}", i + 1);
      if (!parsed->object.contains(key)) return schema_failure("missing " + key, raw);
      auto ratings = read_ratings(parsed->object.at(key));
      if (auto* err = std::get_if<std::string>(&ratings)) return schema_failure(key + ": " + *err, raw);
      rated.first.push_back(std::get<std::array<int, 4>>(ratings));
    }
    return rated;
  };
  UnpackFailure last;
  try {
    auto [values, raw] = call_with_retries<Rated>(judge, std::move(request), options, accept, last);
    std::vector<RatingReport> reports;
    for (std::size_t i = 0; i < count; ++i) reports.push_back(make_report(dialogues[i], values[i], raw));
    return reports;
  } catch (const StructuredOutputError& e) {
    throw JudgeFailure(e.what());
  }
}

json to_json(const RatingReport& report) {
  return json{{"dialogue_ref", report.dialogue_ref},
              {"system_id", report.system_id},
              {"portrait_ref", report.portrait_ref},
              {"coherence", report.coherence},
              {"professionalism", report.professionalism},
              {"empathy", report.empathy},
              {"authenticity", report.authenticity},
              {"judge_raw", report.judge_raw}};
}

int mean_tenths(long long sum, long long count) {
  if (count <= 0) throw ValidationError("mean of zero values");
  if (sum < 0) throw ValidationError("ratings are positive");
  return static_cast<int>((20 * sum + count) / (2 * count));
}

EvalTable aggregate(std::span<const RatingReport> reports) {
  if (reports.empty()) throw ValidationError("no rating reports to aggregate");
  struct Sums {
    long long values[4] = {0, 0, 0, 0};
    long long count = 0;
  };
  std::map<std::string, Sums> groups;
  for (const auto& r : reports) {
    const int values[4] = {r.coherence, r.professionalism, r.empathy, r.authenticity};
    auto& g = groups[r.system_id];
    for (int i = 0; i < 4; ++i) {
      if (values[i] < 1 || values[i] > 5) {
        throw ValidationError(fmt::format("report {} has rating {} outside 1..5", r.dialogue_ref, values[i]));
      }
      g.values[i] += values[i];
    }
    ++g.count;
  }
  const long long n = groups.begin()->second.count;
  for (const auto& [system, g] : groups) {
    if (g.count != n) {
      throw UnbalancedGroups(fmt::format("system '{}' has {} reports, '{}' has {}", system, g.count,
                                         groups.begin()->first, n));
    }
  }
  EvalTable table;
  table.n_dialogues = static_cast<int>(n);
  for (const auto& [system, g] : groups) {
    table.rows[system] = DimensionMeans{mean_tenths(g.values[0], n), mean_tenths(g.values[1], n),
                                        mean_tenths(g.values[2], n), mean_tenths(g.values[3], n)};
  }
  return table;
}

std::string render_table(const EvalTable& table) {
  const std::vector<std::string> headers = {"System", "Coherence", "Professionalism", "Empathy", "Authenticity"};
  std::vector<std::vector<std::string>> rows;
  for (const auto& [system, m] : table.rows) {
    auto cell = [](int tenths) { return fmt::format("{}.{}", tenths / 10, tenths % 10); };
    rows.push_back({system, cell(m.coherence), cell(m.professionalism), cell(m.empathy), cell(m.authenticity)});
  }
  std::vector<std::size_t> widths;
  for (const auto& h : headers) widths.push_back(h.size());
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) out += " | ";
      out += i == 0 ? fmt::format("{:<{}}", cells[i], widths[i]) : fmt::format("{:>{}}", cells[i], widths[i]);
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out + "\n";
  };
  std::string out = line(headers);
  std::string rule;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (i > 0) rule += "-+-";
    rule += std::string(widths[i], '-');
  }
  out += rule + "\n";
  for (const auto& row : rows) out += line(row);
  out += fmt::format("dialogues per system: {}, excluded pairs: {}\n", table.n_dialogues, table.excluded);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string file_safe(std::string_view text) {
  std::string out;
  for (const char c : text) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
    out += ok ? c : '_';
  }
  return out.empty() ? std::string("_") : out;
}

struct PairOutcome {
  GeneratedDialogue dialogue;
  std::optional<RatingReport> report;
  std::string failure;
};

}  // namespace

std::string render_dialogue_log(const GeneratedDialogue& dialogue) {
  std::string out = fmt::format("portrait: {}\nsystem: {}\ntermination: {}\nturns_used: {}\n", dialogue.portrait_ref,
                                dialogue.system_id, to_string(dialogue.termination), dialogue.turns_used);
  if (!dialogue.error_detail.empty()) out += "error: " + dialogue.error_detail + "\n";
  out += "---\n";
  for (const auto& u : dialogue.transcript) {
    out += fmt::format("[{}] {} (stage {}): {}\n", u.turn_index, to_string(u.speaker), u.stage_at_emission.value,
                       u.text);
  }
  return out;
}

CampaignResult run_campaign(std::span<const Portrait> portraits, std::span<const CampaignSystem> systems,
                            const BackendFactory& client_backend, const BackendFactory& judge_backend,
                            const CampaignOptions& options) {
  if (portraits.empty()) throw CampaignError("campaign has no portraits");
  if (systems.empty()) throw CampaignError("campaign has no systems");
  if (!client_backend || !judge_backend) throw ConfigError("campaign needs client and judge backends");
  {
    std::set<std::string> ids;
    for (const auto& p : portraits) {
      if (!ids.insert(p.source_id).second) throw CampaignError("duplicate portrait id '" + p.source_id + "'");
    }
    ids.clear();
    for (const auto& s : systems) {
      if (!s.make) throw ConfigError("system '" + s.id + "' has no factory");
      if (!ids.insert(s.id).second) throw CampaignError("duplicate system id '" + s.id + "'");
    }
  }

  const std::size_t n_systems = systems.size();
  const std::size_t n_pairs = portraits.size() * n_systems;
  std::vector<PairOutcome> outcomes(n_pairs);

  auto simulate = [&](std::size_t index) {
    const Portrait& portrait = portraits[index / n_systems];
    const CampaignSystem& spec = systems[index % n_systems];
    PairOutcome& outcome = outcomes[index];
    try {
      auto system = spec.make();
      auto client = client_backend();
      if (!system || !client) throw ConfigError("factory returned nothing");
      outcome.dialogue = simulate_dialogue(portrait, *system, *client, options.simulation);
      outcome.dialogue.system_id = spec.id;
    } catch (const std::exception& e) {
      outcome.dialogue.portrait_ref = portrait.source_id;
      outcome.dialogue.system_id = spec.id;
      outcome.dialogue.termination = Termination::Error;
      outcome.dialogue.error_detail = e.what();
    }
    if (outcome.dialogue.termination == Termination::Error) {
      outcome.failure = "dialogue failed: " + outcome.dialogue.error_detail;
    }
  };

  auto judge_independent = [&](std::size_t index) {
    PairOutcome& outcome = outcomes[index];
    if (!outcome.failure.empty()) return;
    try {
      auto judge = judge_backend();
      outcome.report = judge_dialogue(outcome.dialogue, *judge, options.rubric, options.judge_call);
    } catch (const std::exception& e) {
      outcome.failure = std::string("judging failed: ") + e.what();
    }
  };

  // Joint judging works per portrait: all of that client's dialogues in one call.
  auto judge_joint = [&](std::size_t portrait_index) {
    std::vector<GeneratedDialogue> group;
    for (std::size_t s = 0; s < n_systems; ++s) {
      const auto& outcome = outcomes[portrait_index * n_systems + s];
      if (!outcome.failure.empty()) return;
      group.push_back(outcome.dialogue);
    }
    try {
      auto judge = judge_backend();
      auto reports = judge_dialogues_jointly(group, *judge, options.rubric, options.judge_call);
      for (std::size_t s = 0; s < n_systems; ++s) outcomes[portrait_index * n_systems + s].report = reports[s];
    } catch (const std::exception& e) {
      for (std::size_t s = 0; s < n_systems; ++s) {
        outcomes[portrait_index * n_systems + s].failure = std::string("judging failed: ") + e.what();
      }
    }
  };

  auto parallel_for = [&](std::size_t count, const std::function<void(std::size_t)>& body) {
    const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(1, options.parallelism)), 1,
                                                        std::max<std::size_t>(count, 1));
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) body(i);
      });
    }
  };

  if (options.judge_mode == JudgeMode::Joint) {
    parallel_for(portraits.size(), [&](std::size_t p) {
      for (std::size_t s = 0; s < n_systems; ++s) simulate(p * n_systems + s);
      judge_joint(p);
    });
  } else {
    parallel_for(n_pairs, [&](std::size_t i) {
      simulate(i);
      judge_independent(i);
    });
  }

  CampaignResult result;
  result.directory = options.output_root / "campaign" / file_safe(options.campaign_id);
  std::vector<bool> portrait_ok(portraits.size(), true);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    auto& outcome = outcomes[i];
    if (!outcome.failure.empty()) {
      portrait_ok[i / n_systems] = false;
      result.failures.push_back({outcome.dialogue.portrait_ref, outcome.dialogue.system_id, outcome.failure});
    }
  }

  std::vector<RatingReport> counted;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    auto& outcome = outcomes[i];
    const std::string name = file_safe(outcome.dialogue.portrait_ref) + "__" + file_safe(outcome.dialogue.system_id);
    write_text_file(result.directory / "dialogues" / (name + ".log"), render_dialogue_log(outcome.dialogue));
    if (outcome.report) {
      write_text_file(result.directory / "reports" / (name + ".rec"),
                      to_json(*outcome.report).dump(2, ' ', false, json::error_handler_t::replace) + "\n");
      result.reports.push_back(*outcome.report);
      if (portrait_ok[i / n_systems]) counted.push_back(*outcome.report);
    }
    result.dialogues.push_back(std::move(outcome.dialogue));
  }

  std::string failures_text;
  for (const auto& f : result.failures) {
    failures_text += fmt::format("{}__{}: {}\n", f.portrait_ref, f.system_id, f.reason);
  }
  write_text_file(result.directory / "failures.txt", failures_text);

  if (counted.empty()) {
    throw CampaignError(fmt::format("every portrait had a failed pair ({} of {} pairs failed)",
                                    result.failures.size(), n_pairs));
  }
  result.table = aggregate(counted);
  result.table.excluded = static_cast<int>(n_pairs - counted.size());
  write_text_file(result.directory / "table.txt", render_table(result.table));
  return result;
}

}  // namespace sudosys
