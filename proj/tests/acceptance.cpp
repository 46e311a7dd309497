// Acceptance checks: one PASS/FAIL line per criterion, each with its time
// limit. Exit status is non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>

#include "cli.hpp"
#include "support.hpp"
#include "sudosys/eval_harness.hpp"
#include "sudosys/service.hpp"

using namespace sudosys;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Empty string means the criterion held; anything else explains the failure.
using Check = std::function<std::string()>;

struct Criterion {
  std::string name;
  std::optional<std::chrono::milliseconds> limit;
  Check check;
};

std::string describe_stage(const StageTransition& t) {
  return fmt::format("to={} completed={} clamped={}", t.to.value, t.completed, t.clamped);
}

std::string stage_oracle() {
  constexpr int n = 7;
  int cases = 0;
  for (int s = 1; s <= n; ++s) {
    for (int c = -1; c <= 1; ++c) {
      ++cases;
      StageTransition expected;
      expected.from = StageId{s};
      expected.status = static_cast<DialogueStatus>(c);
      expected.to = StageId{std::clamp(s + c, 1, n)};
      expected.completed = s == n && c == 1;
      expected.clamped = s + c < 1 || s + c > n;
      const auto actual = advance_stage(StageId{s}, static_cast<DialogueStatus>(c), n);
      if (!(actual == expected)) {
        return fmt::format("s={} c={}: got {}, expected {}", s, c, describe_stage(actual), describe_stage(expected));
      }
    }
  }
  return cases == 21 ? "" : fmt::format("enumerated {} cases instead of 21", cases);
}

std::string topic_immutability() {
  const auto config = testing::load_config();
  std::vector<std::string> keys;
  for (const auto& stage : config->stages) keys.insert(keys.end(), stage.topic_keys.begin(), stage.topic_keys.end());
  keys.push_back("not_a_topic");

  std::mt19937 rng(20240611);
  std::uniform_int_distribution<int> status(-1, 1);
  std::uniform_int_distribution<std::size_t> key(0, keys.size() - 1);
  std::uniform_int_distribution<int> count(0, 5);
  for (int sequence = 0; sequence < 1000; ++sequence) {
    auto store = TopicStore::from_config(*config);
    StageId stage{1};
    for (int step = 0; step < 40; ++step) {
      std::map<std::string, std::string> proposed;
      for (int k = count(rng); k > 0; --k) proposed[keys[key(rng)]] = fmt::format("v{}-{}", sequence, step);
      auto result = apply_topic_update(store, stage, proposed);
      for (int s = 1; s <= config->stage_count; ++s) {
        if (s != stage.value && !(result.store.stage(StageId{s}) == store.stage(StageId{s}))) {
          return fmt::format("sequence {} step {}: stage {} changed while stage {} was current", sequence, step, s,
                             stage.value);
        }
      }
      store = std::move(result.store);
      const auto t = advance_stage(stage, static_cast<DialogueStatus>(status(rng)), config->stage_count);
      if (t.completed) break;
      stage = t.to;
    }
  }
  return "";
}

std::string unpacker_corpus() {
  std::ifstream in(testing::fixture("unpacker/corpus.jsonl"));
  std::string line;
  int total = 0;
  std::set<int> tiers;
  std::set<std::string> kinds;
  std::vector<std::string> mismatches;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++total;
    const auto c = json::parse(line);
    const std::string raw = c["raw"];
    const auto& expect = c["expect"];
    const auto result = unpack(raw, c["keys"].get<std::set<std::string>>());
    bool ok = false;
    if (expect["outcome"] == "ok") {
      tiers.insert(expect["tier"].get<int>());
      if (const auto* r = std::get_if<UnpackedResponse>(&result)) {
        ok = r->repair_tier == expect["tier"] && r->reply == expect["reply"] && to_int(r->status) == expect["status"] &&
             r->topic_updates == expect["topics"].get<std::map<std::string, std::string>>() &&
             r->ignored_fields == expect["ignored"].get<std::vector<std::string>>();
        if (ok && r->repair_tier == 0 && r->reply != json::parse(raw)["reply"].get<std::string>()) ok = false;
      }
    } else {
      kinds.insert(expect["outcome"].get<std::string>());
      if (const auto* f = std::get_if<UnpackFailure>(&result)) ok = to_string(f->kind) == expect["outcome"];
    }
    if (!ok) mismatches.push_back(c["name"]);
  }
  if (total < 30) return fmt::format("corpus has only {} cases", total);
  if (tiers != std::set<int>{0, 1, 2, 3, 4} || kinds.size() != 4) return "corpus does not cover every tier and kind";
  if (!mismatches.empty()) return fmt::format("{} of {} cases differ, first: {}", mismatches.size(), total, mismatches[0]);
  return "";
}

std::string golden_session() {
  auto chat = [](const testing::TempDir& dir, std::string& out) {
    std::istringstream in(read_text_file(testing::fixture("chat/client_lines.txt")));
    std::ostringstream o, e;
    const int code = cli::run_cli({"chat", "--config", testing::shipped_config().string(), "--backend",
                                   "scripted:" + testing::fixture("scripts/happy_path_7stage.yaml").string(), "--clock",
                                   "logical", "--ids", "sequential", "--echo", "--session-dir",
                                   (dir / "sessions").string()},
                                  in, o, e);
    out = o.str();
    const auto prefix = (dir / "sessions").string();
    for (auto pos = out.find(prefix); pos != std::string::npos; pos = out.find(prefix)) out.replace(pos, prefix.size(), "sessions");
    return code;
  };
  testing::TempDir first, second;
  std::string out1, out2;
  if (chat(first, out1) != cli::kOk || chat(second, out2) != cli::kOk) return "chat exited with an error";
  const auto log1 = read_text_file(first / "sessions/s0001.log");
  if (out1 != out2) return "two runs printed different output";
  if (log1 != read_text_file(second / "sessions/s0001.log")) return "two runs wrote different event logs";

  const auto events = read_event_log(first / "sessions/s0001.log");
  const auto session = replay_session(events);
  std::set<int> visited{1};
  for (const auto& e : events) {
    if (e.kind == EventKind::StageChanged) visited.insert(e.payload["to"].get<int>());
  }
  if (visited != std::set<int>{1, 2, 3, 4, 5, 6, 7}) return "not every stage was visited";
  if (session.turn_count > 20) return fmt::format("{} turns used", session.turn_count);
  if (session.lifecycle != Lifecycle::Completed) return "session did not complete";
  for (const auto& stage : session.topics.stages()) {
    for (const auto& topic : stage.topics) {
      if (trim(topic.description).empty()) return fmt::format("topic '{}' stayed empty", topic.key);
    }
  }
  const auto summary = fmt::format("Session s0001: stage 7/7, completed, {} turns", session.turn_count);
  if (out1.find(summary) == std::string::npos) return "printed summary disagrees with the replayed log";

  // Live session against its own persisted log.
  testing::TempDir third;
  auto store = std::make_shared<FileEventStore>(third / "sessions");
  auto backend = make_backend(
      parse_backend_spec("scripted:" + testing::fixture("scripts/happy_path_7stage.yaml").string()));
  Orchestrator orchestrator(testing::load_config(), backend, store,
                            std::make_shared<LogicalClock>(), std::make_shared<SequentialIdSource>());
  auto live = orchestrator.create_session(SessionMode::Structured);
  std::istringstream lines(read_text_file(testing::fixture("chat/client_lines.txt")));
  std::string line;
  while (live.lifecycle == Lifecycle::Active && std::getline(lines, line)) orchestrator.run_turn(live, line);
  if (!(replay_session(store->load(live.id)) == live)) return "replayed log differs from the live session";
  if (read_text_file(store->log_path(live.id)) != log1) return "library run and CLI run wrote different logs";
  return "";
}

std::string regeneration() {
  auto config = testing::load_config(testing::source_dir() / "config" / "minimal_2stage.yaml");
  for (int k = 0; k <= 4; ++k) {
    std::string yaml = "entries:\n";
    for (int i = 0; i < k; ++i) yaml += fmt::format("  - response: \"garbage {} {{{{\"\n", i);
    yaml += "  - response: '{\"concern\": \"exams\", \"status\": 0, \"reply\": \"Go on.\"}'\n";
    auto store = std::make_shared<MemoryEventStore>();
    Orchestrator orchestrator(config, testing::scripted(yaml), store, std::make_shared<LogicalClock>(),
                              std::make_shared<SequentialIdSource>());
    auto session = orchestrator.create_session(SessionMode::Structured);
    const auto before = session;
    try {
      const auto r = orchestrator.run_turn(session, "I am worried");
      if (k == 4) return "k=4 did not exhaust the budget";
      if (r.regen_attempts_used != k) return fmt::format("k={} reported {} attempts", k, r.regen_attempts_used);
      if (!(replay_session(store->load(session.id)) == session)) return fmt::format("k={} log does not replay", k);
    } catch (const RegenerationExhausted& e) {
      if (k != 4) return fmt::format("k={} exhausted the budget", k);
      if (!(session == before)) return "failed turn changed the session";
      if (!(replay_session(store->load(session.id)) == before)) return "failed turn changed the replayed state";
      if (e.attempts() != 4) return fmt::format("exhaustion after {} attempts", e.attempts());
    }
  }
  return "";
}

std::string campaign() {
  auto config = testing::load_config();
  const auto happy = load_script(testing::fixture("scripts/happy_path_7stage.yaml"));
  const auto baseline = load_script(testing::fixture("scripts/baseline_generic.yaml"));
  auto orchestrator = [config](const Script& script) {
    return std::make_shared<Orchestrator>(config, std::make_shared<ScriptedBackend>(script),
                                          std::make_shared<MemoryEventStore>(), std::make_shared<LogicalClock>(),
                                          std::make_shared<SequentialIdSource>());
  };
  const std::vector<CampaignSystem> systems{
      {"sudosys",
       [=] { return std::make_unique<OrchestratedSystem>("sudosys", orchestrator(happy), SessionMode::Structured); }},
      {"baseline",
       [=] { return std::make_unique<OrchestratedSystem>("baseline", orchestrator(baseline), SessionMode::Baseline); }},
  };
  auto fresh = [](const std::string& relative) -> BackendFactory {
    const auto script = load_script(testing::fixture(relative));
    return [script] { return std::make_shared<ScriptedBackend>(script); };
  };
  const auto portraits = load_portraits(testing::fixture("portraits/synthetic.jsonl"));
  testing::TempDir dir;
  CampaignOptions options;
  options.output_root = dir.path();
  const auto result = run_campaign(portraits, systems, fresh("scripts/client_generic.yaml"),
                                   fresh("scripts/judge_campaign.yaml"), options);
  if (portraits.size() != 10) return "fixture does not hold 10 portraits";
  if (result.reports.size() != 20) return fmt::format("{} judged dialogues", result.reports.size());
  for (const auto& d : result.dialogues) {
    if (d.turns_used > 20) return fmt::format("{} used {} client turns", dialogue_ref(d), d.turns_used);
  }

  std::ifstream in(testing::fixture("campaign/expected_table.txt"));
  std::string system;
  double c, p, e, a;
  int rows = 0;
  while (in >> system >> c >> p >> e >> a) {
    ++rows;
    const auto it = result.table.rows.find(system);
    if (it == result.table.rows.end()) return "missing row " + system;
    const DimensionMeans expected{static_cast<int>(std::lround(c * 10)), static_cast<int>(std::lround(p * 10)),
                                  static_cast<int>(std::lround(e * 10)), static_cast<int>(std::lround(a * 10))};
    if (!(it->second == expected)) return "row " + system + " differs from the expected table";
  }
  if (rows != static_cast<int>(result.table.rows.size())) return "table has extra rows";
  return "";
}

std::string aggregation() {
  auto report = [](std::string system, std::string portrait, int c, int p, int e, int a) {
    RatingReport r;
    r.system_id = std::move(system);
    r.portrait_ref = std::move(portrait);
    r.dialogue_ref = r.portrait_ref + "__" + r.system_id;
    r.coherence = c;
    r.professionalism = p;
    r.empathy = e;
    r.authenticity = a;
    return r;
  };
  // Means worked out by hand: 7/2, 9/2, 8/2, 7/2; 13/3, 5/3, 7/3, 9/3; 17/4, 14/4, 10/4, 6/4.
  std::vector<RatingReport> reports{report("A", "p1", 3, 4, 5, 3), report("A", "p2", 4, 5, 3, 4)};
  if (!(aggregate(reports).rows.at("A") == DimensionMeans{35, 45, 40, 35})) return "two-report example";
  reports = {report("B", "p1", 5, 1, 2, 3), report("B", "p2", 4, 2, 2, 3), report("B", "p3", 4, 2, 3, 3)};
  if (!(aggregate(reports).rows.at("B") == DimensionMeans{43, 17, 23, 30})) return "three-report example";
  reports = {report("C", "p1", 4, 4, 2, 1), report("C", "p2", 4, 3, 3, 1), report("C", "p3", 4, 3, 2, 2),
             report("C", "p4", 5, 4, 3, 2)};
  if (!(aggregate(reports).rows.at("C") == DimensionMeans{43, 35, 25, 15})) return "half-up example";

  std::mt19937 rng(99);
  std::uniform_int_distribution<int> score(1, 5);
  reports.clear();
  for (int p = 0; p < 12; ++p) {
    for (const char* s : {"x", "y", "z"}) {
      reports.push_back(report(s, "p" + std::to_string(p), score(rng), score(rng), score(rng), score(rng)));
    }
  }
  const auto expected = aggregate(reports);
  for (int i = 0; i < 100; ++i) {
    std::shuffle(reports.begin(), reports.end(), rng);
    if (!(aggregate(reports) == expected)) return fmt::format("shuffle {} changed the table", i);
  }
  return "";
}

std::string service_serialization() {
  std::string yaml = "entries:\n";
  for (int i = 1; i <= 20; ++i) yaml += fmt::format("  - response: '{{\"status\": 0, \"reply\": \"reply {}\"}}'\n", i);
  auto registry = std::make_shared<SessionRegistry>();
  auto config = testing::load_config();
  registry->add_orchestrator(config->id, std::make_shared<Orchestrator>(config, testing::scripted(yaml)));
  ServiceOptions options;
  options.port = 0;
  Service service(registry, options);
  const int port = service.start();

  httplib::Client client("127.0.0.1", port);
  const auto created = client.Post("/sessions", "{}", "application/json");
  if (!created || created->status != 201) return "session could not be created";
  const std::string id = json::parse(created->body)["id"];

  std::vector<int> statuses(20, 0);
  {
    std::vector<std::jthread> threads;
    for (int i = 0; i < 20; ++i) {
      threads.emplace_back([&, i] {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(std::chrono::seconds(10));
        const auto res = c.Post("/sessions/" + id + "/messages", json{{"text", fmt::format("message {}", i)}}.dump(),
                                "application/json");
        statuses[i] = res ? res->status : -static_cast<int>(res.error());
      });
    }
  }
  service.stop();
  for (int i = 0; i < 20; ++i) {
    if (statuses[i] != 200) return fmt::format("request {} answered {}", i, statuses[i]);
  }
  const auto session = registry->snapshot(id);
  if (session.turn_count != 20) return fmt::format("{} turns recorded", session.turn_count);
  // Greeting, then strictly alternating client/counselor pairs whose replies
  // follow the script order.
  if (session.transcript.size() != 41) return fmt::format("{} utterances", session.transcript.size());
  std::set<std::string> messages;
  for (std::size_t i = 1; i < session.transcript.size(); i += 2) {
    const auto& client_u = session.transcript[i];
    const auto& reply_u = session.transcript[i + 1];
    if (client_u.speaker != Speaker::Client || reply_u.speaker != Speaker::Counselor) return "utterances interleaved";
    if (reply_u.text != fmt::format("reply {}", (i + 1) / 2)) return "replies out of order";
    messages.insert(client_u.text);
  }
  if (messages.size() != 20) return "a client message was lost or duplicated";
  return "";
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"stage-machine oracle (21 cases, N=7)", std::chrono::milliseconds(1000), stage_oracle},
      {"topic immutability (1000 random sequences)", std::chrono::milliseconds(10000), topic_immutability},
      {"unpacker corpus and tier-0 reply round trip", std::chrono::milliseconds(1000), unpacker_corpus},
      {"golden 7-stage session, replay and byte-identical reruns", std::chrono::milliseconds(5000), golden_session},
      {"regeneration contract (k=0..3 recover, k=4 exhausts)", std::chrono::milliseconds(1000), regeneration},
      {"campaign 10 portraits x 2 systems matches expected table", std::chrono::milliseconds(30000), campaign},
      {"aggregation hand fixtures and 100 shuffles", std::nullopt, aggregation},
      {"service: 20 concurrent messages serialize", std::chrono::milliseconds(10000), service_serialization},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    const auto started = std::chrono::steady_clock::now();
    std::string problem;
    try {
      problem = c.check();
    } catch (const std::exception& e) {
      problem = std::string("exception: ") + e.what();
    }
    const auto elapsed =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);
    if (problem.empty() && c.limit && elapsed > *c.limit) {
      problem = fmt::format("took {} ms, limit {} ms", elapsed.count(), c.limit->count());
    }
    const std::string limit = c.limit ? fmt::format("limit {} ms", c.limit->count()) : "no time limit";
    std::cout << fmt::format("{} {} [{} ms, {}]{}\n", problem.empty() ? "PASS" : "FAIL", c.name, elapsed.count(), limit,
                             problem.empty() ? "" : ": " + problem);
    if (!problem.empty()) ++failed;
  }
  std::cout << fmt::format("{} of {} criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
