#include <doctest.h>

#include <fstream>
#include <thread>

#include "support.hpp"
#include "sudosys/orchestrator.hpp"

using namespace sudosys;
using nlohmann::json;

namespace {

std::vector<std::string> client_lines() {
  std::ifstream in(testing::fixture("chat/client_lines.txt"));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

std::shared_ptr<const StageConfig> minimal_config() {
  return testing::load_config(testing::source_dir() / "config" / "minimal_2stage.yaml");
}

Orchestrator make(std::shared_ptr<const StageConfig> config, std::shared_ptr<Backend> backend,
                  std::shared_ptr<EventStore> store = std::make_shared<MemoryEventStore>(), int retry_budget = 3) {
  OrchestratorOptions options;
  options.retry_budget = retry_budget;
  return Orchestrator(std::move(config), std::move(backend), std::move(store), std::make_shared<LogicalClock>(),
                      std::make_shared<SequentialIdSource>(), options);
}

// `bad` garbage replies followed by one valid reply for the minimal config.
std::string regen_script(int bad) {
  std::string yaml = "entries:\n";
  for (int i = 0; i < bad; ++i) yaml += "  - response: \"not json at all " + std::to_string(i) + "\"\n";
  yaml += "  - response: '{\"concern\": \"exams\", \"status\": 0, \"reply\": \"Go on.\"}'\n";
  return yaml;
}

}  // namespace

TEST_CASE("scripted happy path reaches completion with every topic filled") {
  auto config = testing::load_config();
  auto store = std::make_shared<MemoryEventStore>();
  auto orchestrator = make(config, testing::scripted_file("scripts/happy_path_7stage.yaml"), store);
  auto session = orchestrator.create_session(SessionMode::Structured);
  CHECK(session.id == "s0001");
  CHECK(session.stage.value == 1);
  REQUIRE(session.transcript.size() == 1);
  CHECK(session.transcript[0].text == config->greeting);

  std::vector<int> stages{1};
  std::set<int> tiers;
  for (const auto& line : client_lines()) {
    const auto r = orchestrator.run_turn(session, line);
    CHECK(r.stage_before.value == stages.back());
    CHECK(r.stage_after == session.stage);
    CHECK(r.regen_attempts_used == 0);
    CHECK(r.rejected_topic_keys.empty());
    tiers.insert(r.repair_tier);
    stages.push_back(session.stage.value);
    if (r.completed) break;
  }
  CHECK(session.lifecycle == Lifecycle::Completed);
  CHECK(session.turn_count == 14);
  CHECK(session.stage.value == 7);
  CHECK(tiers.size() > 1);
  for (std::size_t i = 1; i < stages.size(); ++i) CHECK(stages[i] - stages[i - 1] >= 0);
  for (int s = 1; s <= 7; ++s) {
    CHECK(std::find(stages.begin(), stages.end(), s) != stages.end());
    for (const auto& topic : session.topics.stage(StageId{s}).topics) {
      CAPTURE(topic.key);
      CHECK_FALSE(trim(topic.description).empty());
    }
  }
  CHECK(session.transcript.size() == 29);

  const auto replayed = replay_session(store->load(session.id));
  CHECK(replayed == session);
  CHECK(replayed.last_seq == session.last_seq);
  CHECK_THROWS_AS(orchestrator.run_turn(session, "one more"), SessionNotActive);
}

TEST_CASE("regeneration recovers within the budget") {
  for (int k = 0; k <= 3; ++k) {
    CAPTURE(k);
    auto backend = testing::scripted(regen_script(k));
    auto store = std::make_shared<MemoryEventStore>();
    auto orchestrator = make(minimal_config(), backend, store);
    auto session = orchestrator.create_session(SessionMode::Structured);
    const auto r = orchestrator.run_turn(session, "I am worried about exams");
    CHECK(r.regen_attempts_used == k);
    CHECK(r.reply == "Go on.");
    CHECK(backend->requests().size() == static_cast<std::size_t>(k + 1));
    for (int i = 1; i <= k; ++i) {
      CHECK(backend->requests()[i].user_text.ends_with(std::string(kDefaultFormatReminder)));
    }
    CHECK_FALSE(backend->requests()[0].user_text.ends_with(std::string(kDefaultFormatReminder)));
    const auto events = store->load(session.id);
    CHECK(std::count_if(events.begin(), events.end(),
                        [](const SessionEvent& e) { return e.kind == EventKind::ModelCall; }) == k + 1);
    CHECK(replay_session(events) == session);
  }
}

TEST_CASE("exhausted regeneration leaves the session untouched") {
  auto backend = testing::scripted(regen_script(4));
  auto store = std::make_shared<MemoryEventStore>();
  auto orchestrator = make(minimal_config(), backend, store);
  auto session = orchestrator.create_session(SessionMode::Structured);
  const auto before = session;
  try {
    orchestrator.run_turn(session, "I am worried about exams");
    FAIL("expected RegenerationExhausted");
  } catch (const RegenerationExhausted& e) {
    CHECK(e.attempts() == 4);
    CHECK(e.last_failure().kind == UnpackFailureKind::NotParseable);
    CHECK(e.last_failure().raw == "not json at all 3");
  }
  CHECK(session == before);
  CHECK(backend->requests().size() == 4);

  const auto events = store->load(session.id);
  REQUIRE(events.size() == 6);
  CHECK(events.back().kind == EventKind::Error);
  CHECK(events.back().payload["kind"] == "NotParseable");
  CHECK(events.back().payload["attempts"] == 4);
  CHECK(replay_session(events) == before);

  // The valid entry is still unused, so the next turn goes through cleanly.
  const auto r = orchestrator.run_turn(session, "Still worried");
  CHECK(r.reply == "Go on.");
  CHECK(replay_session(store->load(session.id)) == session);
}

TEST_CASE("retry budget of zero means one call") {
  auto backend = testing::scripted(regen_script(1));
  auto orchestrator = make(minimal_config(), backend, std::make_shared<MemoryEventStore>(), 0);
  auto session = orchestrator.create_session(SessionMode::Structured);
  CHECK_THROWS_AS(orchestrator.run_turn(session, "hi"), RegenerationExhausted);
  CHECK(backend->requests().size() == 1);
  CHECK_THROWS_AS(make(minimal_config(), backend, std::make_shared<MemoryEventStore>(), -1), ConfigError);
}

TEST_CASE("backend failure propagates and records an error") {
  auto backend = testing::scripted("entries:\n  - {match: never-present, response: x}\n");
  auto store = std::make_shared<MemoryEventStore>();
  auto orchestrator = make(minimal_config(), backend, store);
  auto session = orchestrator.create_session(SessionMode::Structured);
  const auto before = session;
  CHECK_THROWS_AS(orchestrator.run_turn(session, "hello"), ScriptExhausted);
  CHECK(session == before);
  const auto events = store->load(session.id);
  CHECK(events.back().kind == EventKind::Error);
  CHECK(events.back().payload["kind"] == "BackendError");
}

TEST_CASE("blank input is refused before any model call") {
  auto backend = testing::scripted(regen_script(0));
  auto orchestrator = make(minimal_config(), backend);
  auto session = orchestrator.create_session(SessionMode::Structured);
  CHECK_THROWS_AS(orchestrator.run_turn(session, "  \n"), EmptyInput);
  CHECK(backend->requests().empty());
}

TEST_CASE("topics for other stages are rejected and reported") {
  auto backend = testing::scripted(R"(entries:
  - response: '{"concern": "exams", "summary": "too early", "mystery": "x", "status": 1, "reply": "Ok."}'
  - response: '{"concern": "late change", "summary": "done", "status": 0, "reply": "Fine."}'
)");
  auto store = std::make_shared<MemoryEventStore>();
  auto orchestrator = make(minimal_config(), backend, store);
  auto session = orchestrator.create_session(SessionMode::Structured);

  auto r = orchestrator.run_turn(session, "exams");
  // Keys outside the stage's expected set are not even extracted.
  CHECK(r.rejected_topic_keys.empty());
  CHECK(session.topics.stage(StageId{1}).topics[0].description == "exams");
  CHECK(session.topics.stage(StageId{2}).topics[0].description.empty());
  CHECK(session.stage.value == 2);

  r = orchestrator.run_turn(session, "wrap up");
  CHECK(session.topics.stage(StageId{1}).topics[0].description == "exams");
  CHECK(session.topics.stage(StageId{2}).topics[0].description == "done");

  // Audit: every TopicsApplied event only touches its own stage's keys.
  const auto config = minimal_config();
  for (const auto& e : store->load(session.id)) {
    if (e.kind != EventKind::TopicsApplied) continue;
    const auto& keys = config->stage(StageId{e.payload["stage"].get<int>()}).topic_keys;
    for (const auto& [key, value] : e.payload["applied"].items()) {
      CHECK(std::find(keys.begin(), keys.end(), key) != keys.end());
    }
  }
}

TEST_CASE("back at stage one is clamped and completion at the last stage ends the session") {
  auto backend = testing::scripted(R"(entries:
  - response: '{"status": -1, "reply": "Let us stay here."}'
  - response: '{"status": 1, "reply": "Moving on."}'
  - response: '{"status": 1, "reply": "Goodbye."}'
)");
  auto orchestrator = make(minimal_config(), backend);
  auto session = orchestrator.create_session(SessionMode::Structured);
  auto r = orchestrator.run_turn(session, "a");
  CHECK(r.stage_after.value == 1);
  r = orchestrator.run_turn(session, "b");
  CHECK(r.stage_after.value == 2);
  CHECK_FALSE(r.completed);
  r = orchestrator.run_turn(session, "c");
  CHECK(r.completed);
  CHECK(r.stage_after.value == 2);
  CHECK(session.lifecycle == Lifecycle::Completed);
}

TEST_CASE("baseline mode sends the rolling history and no stage machinery") {
  auto config = testing::load_config();
  auto backend = testing::scripted(R"(entries:
  - response: "I'm listening. Tell me more."
  - response: "   "
  - response: "That sounds hard."
)");
  auto store = std::make_shared<MemoryEventStore>();
  auto orchestrator = make(config, backend, store);
  auto session = orchestrator.create_session(SessionMode::Baseline);
  CHECK(session.topics.stage_count() == 0);

  auto r = orchestrator.run_turn(session, "I can't sleep");
  CHECK(r.reply == "I'm listening. Tell me more.");
  r = orchestrator.run_turn(session, "Work is stressful");
  CHECK(r.reply == "That sounds hard.");
  CHECK(r.regen_attempts_used == 1);
  CHECK(session.stage.value == 1);

  const auto requests = backend->requests();
  REQUIRE(requests.size() == 3);
  for (const auto& req : requests) {
    CHECK(req.system_text == config->baseline_prompt);
    CHECK(req.user_text.find("## Stage") == std::string::npos);
  }
  CHECK(requests[0].history == std::vector<ChatMessage>{{"assistant", config->greeting}});
  CHECK(requests[1].history == std::vector<ChatMessage>{{"assistant", config->greeting},
                                                        {"user", "I can't sleep"},
                                                        {"assistant", "I'm listening. Tell me more."}});
  CHECK(replay_session(store->load(session.id)) == session);
}

TEST_CASE("aborted sessions refuse turns") {
  auto orchestrator = make(minimal_config(), testing::scripted(regen_script(0)));
  auto session = orchestrator.create_session(SessionMode::Structured);
  orchestrator.abort_session(session, "client left");
  CHECK(session.lifecycle == Lifecycle::Aborted);
  CHECK_THROWS_AS(orchestrator.run_turn(session, "hello"), SessionNotActive);
  CHECK_THROWS_AS(orchestrator.abort_session(session, "again"), SessionNotActive);
}

TEST_CASE("missing config or backend cannot create sessions") {
  Orchestrator no_config(nullptr, testing::scripted(regen_script(0)));
  CHECK_THROWS_AS(no_config.create_session(SessionMode::Structured), ConfigError);
  Orchestrator no_backend(minimal_config(), nullptr);
  CHECK_THROWS_AS(no_backend.create_session(SessionMode::Structured), ConfigError);
}

TEST_CASE("a session from another config is refused") {
  auto first = make(minimal_config(), testing::scripted(regen_script(0)));
  auto second = make(testing::load_config(), testing::scripted(regen_script(0)));
  auto session = first.create_session(SessionMode::Structured);
  CHECK_THROWS_AS(second.run_turn(session, "hello"), ConfigError);
}

TEST_CASE("request observer sees every call") {
  auto backend = testing::scripted(regen_script(2));
  auto orchestrator = make(minimal_config(), backend);
  std::vector<std::string> tags;
  orchestrator.set_request_observer([&](const Session&, const PromptRequest& r) { tags.push_back(r.tag); });
  auto session = orchestrator.create_session(SessionMode::Structured);
  orchestrator.run_turn(session, "hello");
  CHECK(tags == std::vector<std::string>{"s0001:turn-1:attempt-0", "s0001:turn-1:attempt-1", "s0001:turn-1:attempt-2"});
}

TEST_CASE("file-backed sessions replay from disk") {
  testing::TempDir dir;
  auto store = std::make_shared<FileEventStore>(dir / "sessions");
  auto orchestrator = make(testing::load_config(), testing::scripted_file("scripts/happy_path_7stage.yaml"), store);
  auto session = orchestrator.create_session(SessionMode::Structured);
  for (const auto& line : client_lines()) orchestrator.run_turn(session, line);
  CHECK(replay_session(read_event_log(store->log_path(session.id))) == session);
}

TEST_CASE("registry serializes turns on one session") {
  std::string yaml = "entries:\n";
  for (int i = 0; i < 40; ++i) {
    yaml += "  - response: '{\"status\": 0, \"reply\": \"Reply " + std::to_string(i) + "\"}'\n";
  }
  SessionRegistry registry;
  registry.add_orchestrator("minimal", std::make_shared<Orchestrator>(make(minimal_config(), testing::scripted(yaml))));
  CHECK(registry.has_config("minimal"));
  CHECK(registry.default_config_id() == "minimal");
  CHECK_THROWS_AS(registry.create(SessionMode::Structured, "other"), ConfigError);
  CHECK_THROWS_AS(registry.snapshot("nope"), UnknownSession);

  const auto id = registry.create(SessionMode::Structured, "").id;
  std::vector<std::jthread> threads;
  for (int t = 0; t < 20; ++t) {
    threads.emplace_back([&registry, &id, t] { registry.run_turn(id, "message " + std::to_string(t)); });
  }
  threads.clear();
  const auto s = registry.snapshot(id);
  CHECK(s.turn_count == 20);
  REQUIRE(s.transcript.size() == 40);
  for (std::size_t i = 0; i < s.transcript.size(); ++i) {
    CHECK(s.transcript[i].speaker == (i % 2 == 0 ? Speaker::Client : Speaker::Counselor));
    CHECK(s.transcript[i].turn_index == static_cast<int>(i) + 1);
  }
  CHECK(registry.abort(id, "done").lifecycle == Lifecycle::Aborted);
  CHECK_THROWS_AS(registry.run_turn(id, "late"), SessionNotActive);
}
