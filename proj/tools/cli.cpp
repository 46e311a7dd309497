#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <iterator>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "sudosys/eval_harness.hpp"
#include "sudosys/event_log.hpp"
#include "sudosys/orchestrator.hpp"
#include "sudosys/service.hpp"
#include "sudosys/unpacker.hpp"
#include "sudosys/util.hpp"

namespace sudosys::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Skips ids that already have a log so deterministic ids never append to an
// earlier session.
class FreshIdSource final : public IdSource {
 public:
  FreshIdSource(std::shared_ptr<IdSource> inner, std::shared_ptr<EventStore> store)
      : inner_(std::move(inner)), store_(std::move(store)) {}

  std::string next() override {
    const auto existing = store_->session_ids();
    while (true) {
      std::string id = inner_->next();
      if (std::find(existing.begin(), existing.end(), id) == existing.end()) return id;
    }
  }

 private:
  std::shared_ptr<IdSource> inner_;
  std::shared_ptr<EventStore> store_;
};

std::shared_ptr<Clock> make_clock(const std::string& name) {
  if (name == "logical") return std::make_shared<LogicalClock>();
  return std::make_shared<SystemClock>();
}

std::shared_ptr<IdSource> make_ids(const std::string& name) {
  if (name == "sequential") return std::make_shared<SequentialIdSource>();
  return std::make_shared<RandomIdSource>();
}

std::string file_safe(std::string_view text) {
  std::string out;
  for (const char c : text) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return out;
}

std::string stage_banner(const StageConfig& config, StageId stage) {
  return fmt::format("=== Stage {}/{}: {} ===", stage.value, config.stage_count, config.stage(stage).title);
}

std::string read_prompt(const std::string& path, std::string_view fallback) {
  if (path.empty()) return std::string(fallback);
  std::string text = read_text_file(path);
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  return text;
}

// Scripted backends get a fresh cursor per call so each dialogue replays the
// whole script; HTTP backends are shared.
BackendFactory backend_factory(const std::string& spec) {
  const BackendConfig config = parse_backend_spec(spec, fs::current_path());
  if (config.kind == BackendKind::Scripted) {
    Script script = load_script(config.script_path);
    std::string id = "scripted:" + config.script_path.filename().string();
    return [script = std::move(script), id = std::move(id)] { return std::make_shared<ScriptedBackend>(script, id); };
  }
  auto shared = make_backend(config);
  return [shared] { return shared; };
}

struct ChatArgs {
  std::string config;
  std::string backend;
  std::string mode = "structured";
  std::string session_dir = "sessions";
  std::string dump_prompts;
  std::string clock = "system";
  std::string ids = "random";
  int retry_budget = 3;
  bool echo = false;
};

int run_chat(const ChatArgs& args, std::istream& in, std::ostream& out, std::ostream& err) {
  const auto mode = session_mode_from_string(args.mode);
  if (!mode) {
    err << "unknown mode '" << args.mode << "' (expected structured or baseline)\n";
    return kUsage;
  }
  auto config = std::make_shared<const StageConfig>(load_stage_config_file(args.config));
  auto backend = make_backend(parse_backend_spec(args.backend, fs::current_path()));
  auto store = std::make_shared<FileEventStore>(args.session_dir);
  auto ids = std::make_shared<FreshIdSource>(make_ids(args.ids), store);
  OrchestratorOptions options;
  options.retry_budget = args.retry_budget;
  Orchestrator orchestrator(config, backend, store, make_clock(args.clock), ids, options);

  if (!args.dump_prompts.empty()) {
    fs::create_directories(args.dump_prompts);
    orchestrator.set_request_observer([dir = fs::path(args.dump_prompts)](const Session&, const PromptRequest& r) {
      std::string text = "### system\n" + r.system_text + "\n";
      for (const auto& m : r.history) text += "### " + m.role + "\n" + m.content + "\n";
      text += "### user\n" + r.user_text + "\n";
      write_text_file(dir / (file_safe(r.tag) + ".txt"), text);
    });
  }

  Session session = orchestrator.create_session(*mode);
  const bool structured = *mode == SessionMode::Structured;
  out << "Session " << session.id << " (" << to_string(session.mode) << ")\n";
  if (structured) out << stage_banner(*config, session.stage) << "\n";
  if (!session.transcript.empty()) out << "Counselor: " << session.transcript.front().text << "\n";

  std::string line;
  while (session.lifecycle == Lifecycle::Active && std::getline(in, line)) {
    const auto text = trim(line);
    if (text.empty()) continue;
    if (text == "/quit") break;
    if (args.echo) out << "Client: " << text << "\n";
    try {
      const TurnResult result = orchestrator.run_turn(session, text);
      out << "Counselor: " << result.reply << "\n";
      if (structured && result.stage_after != result.stage_before) {
        out << stage_banner(*config, result.stage_after) << "\n";
      }
      if (result.completed) out << "=== Session completed ===\n";
    } catch (const RegenerationExhausted& e) {
      out << "[The counselor could not produce a usable reply (" << to_string(e.last_failure().kind)
          << "). Please try again.]\n";
    } catch (const BackendError& e) {
      err << "backend failure: " << e.what() << "\n";
      return kRuntime;
    }
  }
  out << fmt::format("Session {}: stage {}/{}, {}, {} turns, log {}\n", session.id, session.stage.value,
                     config->stage_count, to_string(session.lifecycle), session.turn_count,
                     store->log_path(session.id).string());
  return kOk;
}

struct EvalArgs {
  std::string portraits;
  std::vector<std::string> systems;
  std::string client_backend;
  std::string judge_backend;
  std::string config;
  std::string out_dir = ".";
  std::string campaign_id = "campaign";
  std::string judge_mode = "independent";
  std::string persona;
  std::string rubric;
  int max_turns = 20;
  int parallel = 4;
};

int run_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  const auto portraits = load_portraits(args.portraits);
  std::shared_ptr<const StageConfig> config;
  if (!args.config.empty()) config = std::make_shared<const StageConfig>(load_stage_config_file(args.config));

  std::vector<CampaignSystem> systems;
  for (const auto& spec : args.systems) {
    const auto eq = spec.find('=');
    const auto colon = spec.find(':', eq == std::string::npos ? 0 : eq);
    if (eq == std::string::npos || colon == std::string::npos) {
      err << "system must look like <id>=<structured|baseline|external>:<backend>, got '" << spec << "'\n";
      return kUsage;
    }
    const std::string id = spec.substr(0, eq);
    const std::string kind = spec.substr(eq + 1, colon - eq - 1);
    const BackendFactory backends = backend_factory(spec.substr(colon + 1));
    if (kind == "external") {
      systems.push_back({id, [id, backends] { return std::make_unique<ChatEndpointSystem>(id, backends()); }});
      continue;
    }
    const auto mode = session_mode_from_string(kind);
    if (!mode) {
      err << "unknown system kind '" << kind << "'\n";
      return kUsage;
    }
    if (!config) {
      err << "system '" << id << "' needs --config\n";
      return kUsage;
    }
    systems.push_back({id, [id, backends, config, mode = *mode] {
                         auto orchestrator = std::make_shared<Orchestrator>(
                             config, backends(), std::make_shared<MemoryEventStore>(),
                             std::make_shared<LogicalClock>(), std::make_shared<SequentialIdSource>());
                         return std::make_unique<OrchestratedSystem>(id, orchestrator, mode);
                       }});
  }

  CampaignOptions options;
  options.campaign_id = args.campaign_id;
  options.output_root = args.out_dir;
  options.parallelism = args.parallel;
  options.simulation.max_turns = args.max_turns;
  options.simulation.persona_template = read_prompt(args.persona, kDefaultPersonaPrompt);
  if (args.judge_mode == "joint") {
    options.judge_mode = JudgeMode::Joint;
    options.rubric = read_prompt(args.rubric, kDefaultJointJudgeRubric);
  } else if (args.judge_mode == "independent") {
    options.rubric = read_prompt(args.rubric, kDefaultJudgeRubric);
  } else {
    err << "judge mode must be independent or joint\n";
    return kUsage;
  }

  try {
    const CampaignResult result = run_campaign(portraits, systems, backend_factory(args.client_backend),
                                               backend_factory(args.judge_backend), options);
    out << render_table(result.table);
    out << fmt::format("judged dialogues: {}, failed pairs: {}\n", result.reports.size(), result.failures.size());
    out << "artifacts: " << result.directory.string() << "\n";
    return kOk;
  } catch (const CampaignError& e) {
    err << "campaign failed: " << e.what() << "\n";
    return kRuntime;
  }
}

int run_extract(const std::string& transcripts, const std::string& backend_spec, const std::string& out_path,
                const std::string& prompt_path, std::ostream& out, std::ostream& err) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(transcripts)) {
    if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  auto backend = make_backend(parse_backend_spec(backend_spec, fs::current_path()));
  const std::string prompt = read_prompt(prompt_path, kDefaultPortraitPrompt);

  std::vector<Portrait> portraits;
  for (const auto& file : files) {
    try {
      portraits.push_back(extract_portrait(read_text_file(file), *backend, prompt, file.stem().string()));
    } catch (const InvalidPortrait& e) {
      err << "skipped " << file.filename().string() << ": " << e.what() << "\n";
    } catch (const StructuredOutputError& e) {
      err << "skipped " << file.filename().string() << ": " << e.what() << "\n";
    } catch (const EmptyInput& e) {
      err << "skipped " << file.filename().string() << ": " << e.what() << "\n";
    }
  }
  write_text_file(out_path, portraits_to_jsonl(portraits));
  out << fmt::format("extracted {} of {} portraits into {}\n", portraits.size(), files.size(), out_path);
  return portraits.empty() ? kRuntime : kOk;
}

struct ServeArgs {
  std::vector<std::string> configs;
  std::string backend;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string token_env;
  std::string static_dir;
  std::string session_dir = "sessions";
  std::string ratings;
};

int run_serve(const ServeArgs& args, std::ostream& err) {
  ServiceOptions options;
  options.host = args.host;
  options.port = args.port;
  options.static_dir = args.static_dir;
  options.ratings_path = args.ratings;
  if (!args.token_env.empty()) {
    const char* token = std::getenv(args.token_env.c_str());
    if (token == nullptr || *token == '\0') {
      err << "environment variable " << args.token_env << " is not set\n";
      return kUsage;
    }
    options.auth_token = token;
  }
  auto registry = std::make_shared<SessionRegistry>();
  auto backend = make_backend(parse_backend_spec(args.backend, fs::current_path()));
  auto store = std::make_shared<FileEventStore>(args.session_dir);
  for (const auto& path : args.configs) {
    auto config = std::make_shared<const StageConfig>(load_stage_config_file(path));
    if (registry->has_config(config->id)) {
      err << "duplicate config id '" << config->id << "'\n";
      return kUsage;
    }
    registry->add_orchestrator(config->id, std::make_shared<Orchestrator>(config, backend, store));
  }
  Service service(registry, options);
  service.run();
  return kOk;
}

int run_replay(const std::string& log, std::ostream& out) {
  const auto events = read_event_log(log);
  out << to_json(replay_session(events)).dump(2, ' ', false, json::error_handler_t::replace) << "\n";
  return kOk;
}

int run_unpack(const std::string& file, const std::vector<std::string>& keys, std::istream& in, std::ostream& out) {
  std::string raw;
  if (file.empty() || file == "-") {
    raw.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  } else {
    raw = read_text_file(file);
  }
  const auto result = unpack(raw, std::set<std::string>(keys.begin(), keys.end()));
  if (const auto* ok = std::get_if<UnpackedResponse>(&result)) {
    json shown = to_json(*ok);
    shown["repair_tier"] = ok->repair_tier;
    if (!ok->ignored_fields.empty()) shown["ignored_fields"] = ok->ignored_fields;
    out << shown.dump(2, ' ', false, json::error_handler_t::replace) << "\n";
    return kOk;
  }
  const auto& failure = std::get<UnpackFailure>(result);
  out << json{{"failure", to_string(failure.kind)}, {"detail", failure.detail}}.dump(2) << "\n";
  return kRuntime;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Stage-aware counseling dialogue system"};
  app.require_subcommand(1);

  ChatArgs chat;
  auto* chat_cmd = app.add_subcommand("chat", "Hold a counseling session on the terminal");
  chat_cmd->add_option("--config", chat.config, "Stage config (YAML)")->required()->check(CLI::ExistingFile);
  chat_cmd->add_option("--backend", chat.backend, "scripted:<file>, http(s)://..., or a backend YAML file")
      ->required();
  chat_cmd->add_option("--mode", chat.mode, "structured or baseline");
  chat_cmd->add_option("--session-dir", chat.session_dir, "Where event logs are written");
  chat_cmd->add_option("--dump-prompts", chat.dump_prompts, "Write every model request to this directory");
  chat_cmd->add_option("--clock", chat.clock, "system or logical")->check(CLI::IsMember({"system", "logical"}));
  chat_cmd->add_option("--ids", chat.ids, "random or sequential")->check(CLI::IsMember({"random", "sequential"}));
  chat_cmd->add_option("--retry-budget", chat.retry_budget, "Regenerations per turn")->check(CLI::NonNegativeNumber);
  chat_cmd->add_flag("--echo", chat.echo, "Print client lines as they are read");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluation tools");
  eval_cmd->require_subcommand(1);
  EvalArgs eval;
  auto* run_cmd = eval_cmd->add_subcommand("run", "Simulate and judge every (portrait, system) pair");
  run_cmd->add_option("--portraits", eval.portraits, "Portraits (JSON lines)")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--system", eval.systems, "<id>=<structured|baseline|external>:<backend>")->required();
  run_cmd->add_option("--client-backend", eval.client_backend, "Backend playing the clients")->required();
  run_cmd->add_option("--judge-backend", eval.judge_backend, "Backend rating the dialogues")->required();
  run_cmd->add_option("--config", eval.config, "Stage config for structured and baseline systems");
  run_cmd->add_option("--out", eval.out_dir, "Output root");
  run_cmd->add_option("--campaign-id", eval.campaign_id, "Campaign directory name");
  run_cmd->add_option("--judge-mode", eval.judge_mode, "independent or joint");
  run_cmd->add_option("--persona", eval.persona, "Client persona prompt file");
  run_cmd->add_option("--rubric", eval.rubric, "Judge rubric file");
  run_cmd->add_option("--max-turns", eval.max_turns, "Client turns per dialogue")->check(CLI::PositiveNumber);
  run_cmd->add_option("--parallel", eval.parallel, "Dialogues in flight")->check(CLI::PositiveNumber);

  std::string transcripts, extract_backend, extract_out, extract_prompt;
  auto* extract_cmd = eval_cmd->add_subcommand("extract-portraits", "Turn transcripts into client portraits");
  extract_cmd->add_option("--transcripts", transcripts, "Directory of .txt transcripts")
      ->required()
      ->check(CLI::ExistingDirectory);
  extract_cmd->add_option("--backend", extract_backend, "Extraction backend")->required();
  extract_cmd->add_option("--out", extract_out, "Output JSON lines file")->required();
  extract_cmd->add_option("--prompt", extract_prompt, "Extraction prompt file");

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP API");
  serve_cmd->add_option("--config", serve.configs, "Stage config (repeatable; the first is the default)")
      ->required()
      ->check(CLI::ExistingFile);
  serve_cmd->add_option("--backend", serve.backend, "Counselor backend")->required();
  serve_cmd->add_option("--host", serve.host);
  serve_cmd->add_option("--port", serve.port);
  serve_cmd->add_option("--token-env", serve.token_env, "Environment variable holding the bearer token");
  serve_cmd->add_option("--static-dir", serve.static_dir, "Static files served at /");
  serve_cmd->add_option("--session-dir", serve.session_dir, "Where event logs are written");
  serve_cmd->add_option("--ratings", serve.ratings, "Append submitted ratings to this file");

  std::string replay_log;
  auto* replay_cmd = app.add_subcommand("replay", "Rebuild a session from its event log");
  replay_cmd->add_option("log", replay_log, "Event log")->required()->check(CLI::ExistingFile);

  std::string unpack_file;
  std::vector<std::string> unpack_keys;
  auto* unpack_cmd = app.add_subcommand("unpack", "Unpack one raw model answer");
  unpack_cmd->add_option("file", unpack_file, "Raw answer (default: stdin)");
  unpack_cmd->add_option("--keys", unpack_keys, "Expected topic keys")->delimiter(',');

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*chat_cmd) return run_chat(chat, in, out, err);
    if (*run_cmd) return run_eval(eval, out, err);
    if (*extract_cmd) return run_extract(transcripts, extract_backend, extract_out, extract_prompt, out, err);
    if (*serve_cmd) return run_serve(serve, err);
    if (*replay_cmd) return run_replay(replay_log, out);
    if (*unpack_cmd) return run_unpack(unpack_file, unpack_keys, in, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const SchemaError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const ValidationError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace sudosys::cli
