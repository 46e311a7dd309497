#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "support.hpp"
#include "sudosys/llm_gateway.hpp"

using namespace sudosys;
using nlohmann::json;

namespace {

PromptRequest request(std::string user, std::string system = "sys", std::string tag = "t") {
  PromptRequest r;
  r.system_text = std::move(system);
  r.user_text = std::move(user);
  r.tag = std::move(tag);
  return r;
}

// Chat-completions stand-in on an ephemeral port. `handler` decides each reply.
class StubServer {
 public:
  explicit StubServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server_.Post("/v1/chat/completions", [this, handler](const httplib::Request& req, httplib::Response& res) {
      ++hits_;
      last_body_ = req.body;
      last_auth_ = req.get_header_value("Authorization");
      handler(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }

  BackendConfig config() const {
    BackendConfig c;
    c.kind = BackendKind::HttpChat;
    c.endpoint_url = "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions";
    c.model_name = "stub-model";
    c.timeout_ms = 2000;
    c.max_retries_transport = 2;
    c.backoff_initial_ms = 1;
    return c;
  }
  int hits() const { return hits_; }
  std::string last_body() const { return last_body_; }
  std::string last_auth() const { return last_auth_; }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> hits_{0};
  std::string last_body_;
  std::string last_auth_;
};

void reply_with(httplib::Response& res, const std::string& content) {
  json body = {{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})}};
  res.set_content(body.dump(), "application/json");
}

}  // namespace

TEST_CASE("script parsing") {
  const auto script = parse_script(R"(
entries:
  - {match: "Stage 1", response: one}
  - {match: [a, b], response: two}
  - {response: three}
)");
  REQUIRE(script.entries.size() == 3);
  CHECK(script.entries[0].match == std::vector<std::string>{"Stage 1"});
  CHECK(script.entries[1].match == std::vector<std::string>{"a", "b"});
  CHECK(script.entries[2].match.empty());

  CHECK(parse_script("- {response: bare list}").entries.size() == 1);
  CHECK_THROWS_AS(parse_script("entries: []"), SchemaError);
  CHECK_THROWS_AS(parse_script("entries:\n  - {match: x}"), SchemaError);
  CHECK_THROWS_AS(parse_script("entries:\n  - {response: x, match: {a: 1}}"), SchemaError);
  CHECK_THROWS_AS(parse_script("entries: [unclosed"), SchemaError);
  CHECK_THROWS_AS(load_script("/nonexistent/script.yaml"), SchemaError);
}

TEST_CASE("scripted backend takes the earliest unused matching entry") {
  auto backend = testing::scripted(R"(
entries:
  - {match: [needle, other], response: both}
  - {match: needle, response: first}
  - {match: needle, response: second}
  - {response: fallback}
)");
  CHECK(backend->complete(request("a needle here")).raw == "first");
  CHECK(backend->complete(request("needle", "other")).raw == "both");
  CHECK(backend->complete(request("needle again")).raw == "second");
  CHECK(backend->complete(request("needle")).raw == "fallback");
  CHECK(backend->remaining() == 0);
  CHECK_THROWS_AS(backend->complete(request("needle")), ScriptExhausted);
  CHECK(backend->requests().size() == 5);
}

TEST_CASE("scripted responses are returned verbatim and audited") {
  auto backend = testing::scripted("entries:\n  - response: \"  {\\\"reply\\\": 1}\\n```\\n\"\n");
  const auto out = backend->complete(request("x", "s", "turn-1"));
  CHECK(out.raw == "  {\"reply\": 1}\n```\n");
  const auto audit = backend->audit_log();
  REQUIRE(audit.size() == 1);
  CHECK(audit[0].tag == "turn-1");
  CHECK(audit[0].prompt_hash == prompt_hash(request("x", "s", "turn-1")));
  CHECK(audit[0].prompt_hash.size() == 16);
  CHECK(audit[0].response_hash == sha256_hex(out.raw).substr(0, 16));
}

TEST_CASE("prompt hash covers system, history and user text") {
  auto a = request("u", "s");
  auto b = a;
  CHECK(prompt_hash(a) == prompt_hash(b));
  b.history.push_back({"user", "earlier"});
  CHECK(prompt_hash(a) != prompt_hash(b));
  CHECK(prompt_hash(request("u", "s")) != prompt_hash(request("s", "u")));
  b = a;
  b.tag = "other";
  CHECK(prompt_hash(a) == prompt_hash(b));
}

TEST_CASE("backend specs") {
  auto c = parse_backend_spec("scripted:scripts/x.yaml", "/base");
  CHECK(c.kind == BackendKind::Scripted);
  CHECK(c.script_path == std::filesystem::path("/base/scripts/x.yaml"));

  c = parse_backend_spec("http:http://host:1/v1/chat/completions");
  CHECK(c.kind == BackendKind::HttpChat);
  CHECK(c.endpoint_url == "http://host:1/v1/chat/completions");
  CHECK(parse_backend_spec("https://api.example.org/v1").endpoint_url == "https://api.example.org/v1");

  testing::TempDir dir;
  write_text_file(dir / "b.yaml",
                  "kind: http_chat\nendpoint_url: http://h:2\nmodel_name: m\nauth_token_env: TOK\nmax_in_flight: 2\n");
  c = parse_backend_spec((dir / "b.yaml").string());
  CHECK(c.kind == BackendKind::HttpChat);
  CHECK(c.model_name == "m");
  CHECK(c.auth_token_env == "TOK");
  CHECK(c.max_in_flight == 2);

  write_text_file(dir / "s.yaml", "kind: scripted\nscript_path: play.yaml\n");
  CHECK(parse_backend_spec((dir / "s.yaml").string()).script_path == dir.path() / "play.yaml");

  write_text_file(dir / "bad.yaml", "kind: carrier_pigeon\n");
  CHECK_THROWS_AS(parse_backend_spec((dir / "bad.yaml").string()), SchemaError);
  CHECK_THROWS_AS(parse_backend_spec("/nonexistent/backend.yaml"), SchemaError);
}

TEST_CASE("chat completion body") {
  BackendConfig config;
  config.model_name = "m1";
  auto r = request("now", "system here");
  r.history = {{"user", "hi"}, {"assistant", "hello"}};
  r.temperature = 0.25;
  r.max_output_tokens = 77;
  const auto body = json::parse(chat_completion_body(config, r));
  CHECK(body["model"] == "m1");
  CHECK(body["temperature"] == 0.25);
  CHECK(body["max_tokens"] == 77);
  REQUIRE(body["messages"].size() == 4);
  CHECK(body["messages"][0] == json{{"role", "system"}, {"content", "system here"}});
  CHECK(body["messages"][1]["content"] == "hi");
  CHECK(body["messages"][2]["role"] == "assistant");
  CHECK(body["messages"][3] == json{{"role", "user"}, {"content", "now"}});

  r.system_text.clear();
  CHECK(json::parse(chat_completion_body(config, r))["messages"].size() == 3);
}

TEST_CASE("http backend returns the content field byte for byte") {
  const std::string canned = "```json\n{\"reply\": \"caf\xC3\xA9\", \"status\": 0,}\n```  \n";
  StubServer stub([&](const httplib::Request&, httplib::Response& res) { reply_with(res, canned); });
  auto backend = make_backend(stub.config());
  const auto out = backend->complete(request("hello"));
  CHECK(out.raw == canned);
  CHECK(out.backend_id == "stub-model");
  CHECK(json::parse(stub.last_body())["messages"].back()["content"] == "hello");
  CHECK(stub.last_auth().empty());
}

TEST_CASE("http backend sends the bearer token from the environment") {
  StubServer stub([](const httplib::Request&, httplib::Response& res) { reply_with(res, "ok"); });
  auto config = stub.config();
  config.auth_token_env = "SUDOSYS_TEST_TOKEN";
  ::setenv("SUDOSYS_TEST_TOKEN", "secret-1", 1);
  HttpChatBackend backend(config);
  backend.complete(request("x"));
  CHECK(stub.last_auth() == "Bearer secret-1");

  ::unsetenv("SUDOSYS_TEST_TOKEN");
  CHECK_THROWS_AS(HttpChatBackend{config}, ConfigError);
}

TEST_CASE("http backend error mapping") {
  SUBCASE("401 and 403 are auth errors without retry") {
    for (int code : {401, 403}) {
      StubServer stub([code](const httplib::Request&, httplib::Response& res) { res.status = code; });
      HttpChatBackend backend(stub.config());
      CHECK_THROWS_AS(backend.complete(request("x")), AuthError);
      CHECK(stub.hits() == 1);
    }
  }
  SUBCASE("persistent 429 is rate limited after the retries") {
    StubServer stub([](const httplib::Request&, httplib::Response& res) { res.status = 429; });
    HttpChatBackend backend(stub.config());
    CHECK_THROWS_AS(backend.complete(request("x")), RateLimited);
    CHECK(stub.hits() == 3);
  }
  SUBCASE("5xx is retried and can recover") {
    std::atomic<int> calls{0};
    StubServer stub([&](const httplib::Request&, httplib::Response& res) {
      if (calls++ < 2) {
        res.status = 503;
      } else {
        reply_with(res, "recovered");
      }
    });
    HttpChatBackend backend(stub.config());
    CHECK(backend.complete(request("x")).raw == "recovered");
    CHECK(stub.hits() == 3);
  }
  SUBCASE("body without content is a transport error") {
    StubServer stub([](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"choices": []})", "application/json");
    });
    HttpChatBackend backend(stub.config());
    CHECK_THROWS_AS(backend.complete(request("x")), TransportError);
  }
  SUBCASE("unreachable endpoint is a transport error") {
    BackendConfig config;
    config.kind = BackendKind::HttpChat;
    config.endpoint_url = "http://127.0.0.1:1/v1/chat/completions";
    config.max_retries_transport = 1;
    config.backoff_initial_ms = 1;
    config.timeout_ms = 500;
    HttpChatBackend backend(config);
    CHECK_THROWS_AS(backend.complete(request("x")), TransportError);
  }
}

TEST_CASE("endpoint url must carry a scheme") {
  BackendConfig config;
  config.kind = BackendKind::HttpChat;
  config.endpoint_url = "localhost:8000";
  CHECK_THROWS_AS(HttpChatBackend{config}, ConfigError);
}
