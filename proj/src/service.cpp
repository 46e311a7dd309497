#include "sudosys/service.hpp"

#include <fstream>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "sudosys/stage_engine.hpp"

namespace sudosys {

using nlohmann::json;

namespace {

ApiResponse error_response(int status, std::string code, std::string message, json detail = json::object()) {
  return ApiResponse{status, json{{"code", std::move(code)}, {"message", std::move(message)}, {"detail", std::move(detail)}}};
}

std::vector<std::string> split_path(std::string_view path) {
  if (const auto q = path.find('?'); q != std::string_view::npos) path = path.substr(0, q);
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= path.size()) {
    auto end = path.find('/', start);
    if (end == std::string_view::npos) end = path.size();
    if (end > start) parts.emplace_back(path.substr(start, end - start));
    start = end + 1;
  }
  return parts;
}

std::optional<json> parse_body(const std::string& body) {
  if (body.empty()) return json::object();
  try {
    json parsed = json::parse(body);
    if (!parsed.is_object()) return std::nullopt;
    return parsed;
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

constexpr const char* kRatingKeys[] = {"coherence", "professionalism", "empathy", "authenticity"};

json rating_json(const SessionRating& r) {
  return json{{"coherence", r.coherence},
              {"professionalism", r.professionalism},
              {"empathy", r.empathy},
              {"authenticity", r.authenticity},
              {"submitted_at", r.submitted_at}};
}

}  // namespace

json session_view(const Session& session, const StageConfig& config) {
  json view{{"id", session.id},
            {"mode", to_string(session.mode)},
            {"stage", session.stage.value},
            {"stage_count", config.stage_count},
            {"stage_title", config.contains(session.stage) ? config.stage(session.stage).title : ""},
            {"lifecycle", to_string(session.lifecycle)},
            {"turn_count", session.turn_count},
            {"config_id", session.config_ref.id}};
  if (session.mode == SessionMode::Structured) {
    json stages = json::array();
    for (const auto& visible : visible_topics(session.topics, session.stage)) {
      json topics = json::array();
      for (const auto& topic : visible.topics) {
        topics.push_back({{"key", topic.key}, {"description", topic.description}});
      }
      stages.push_back({{"stage", visible.stage.value},
                        {"title", config.contains(visible.stage) ? config.stage(visible.stage).title : ""},
                        {"topics", std::move(topics)}});
    }
    view["topics"] = std::move(stages);
  }
  return view;
}

json transcript_view(const Session& session) {
  json utterances = json::array();
  for (const auto& u : session.transcript) {
    utterances.push_back({{"speaker", to_string(u.speaker)},
                          {"text", u.text},
                          {"turn_index", u.turn_index},
                          {"stage", u.stage_at_emission.value}});
  }
  return json{{"id", session.id}, {"utterances", std::move(utterances)}};
}

Service::Service(std::shared_ptr<SessionRegistry> registry, ServiceOptions options, std::shared_ptr<Clock> clock)
    : registry_(std::move(registry)), options_(std::move(options)), clock_(std::move(clock)) {
  if (!registry_) throw ConfigError("service needs a session registry");
  if (!clock_) clock_ = std::make_shared<SystemClock>();
}

Service::~Service() { stop(); }

ApiResponse Service::handle(const ApiRequest& request) {
  const auto parts = split_path(request.path);
  if (parts.size() == 1 && parts[0] == "health" && request.method == "GET") {
    return ApiResponse{200, json{{"status", "ok"}}};
  }
  if (parts.empty() || parts[0] != "sessions") {
    return error_response(404, "not_found", "no such endpoint");
  }
  if (!options_.auth_token.empty() && request.authorization != "Bearer " + options_.auth_token) {
    return error_response(401, "unauthorized", "missing or wrong bearer token");
  }

  std::optional<json> body;
  if (request.method == "POST") {
    body = parse_body(request.body);
    if (!body) return error_response(400, "bad_request", "request body must be a JSON object");
  }

  try {
    if (parts.size() == 1 && request.method == "POST") return create_session(*body);
    if (parts.size() >= 2) {
      const std::string& id = parts[1];
      if (parts.size() == 2 && request.method == "GET") {
        return ApiResponse{200, session_view(registry_->snapshot(id), registry_->config_for(id))};
      }
      if (parts.size() == 2 && request.method == "DELETE") {
        return ApiResponse{200, session_view(registry_->abort(id, "closed by client"), registry_->config_for(id))};
      }
      if (parts.size() == 3 && parts[2] == "messages" && request.method == "POST") return post_message(id, *body);
      if (parts.size() == 3 && parts[2] == "transcript" && request.method == "GET") {
        return ApiResponse{200, transcript_view(registry_->snapshot(id))};
      }
      if (parts.size() == 3 && parts[2] == "rating" && request.method == "POST") return post_rating(id, *body);
      if (parts.size() == 3 && parts[2] == "rating" && request.method == "GET") return get_rating(id);
    }
  } catch (const UnknownSession& e) {
    return error_response(404, "unknown_session", e.what());
  } catch (const SessionNotActive& e) {
    return error_response(409, "session_not_active", e.what());
  } catch (const std::exception& e) {
    spdlog::error("{} {}: {}", request.method, request.path, e.what());
    return error_response(500, "internal_error", e.what());
  }
  return error_response(404, "not_found", "no such endpoint");
}

ApiResponse Service::create_session(const json& body) {
  const json mode_value = body.value("mode", json("structured"));
  if (!mode_value.is_string()) return error_response(400, "bad_request", "mode must be text");
  const auto mode = session_mode_from_string(mode_value.get<std::string>());
  if (!mode) {
    return error_response(400, "unknown_mode", "unknown mode '" + mode_value.get<std::string>() + "'",
                          json{{"accepted", {"structured", "baseline"}}});
  }
  std::string config_id = registry_->default_config_id();
  if (body.contains("config_id") && !body.at("config_id").is_null()) {
    if (!body.at("config_id").is_string()) return error_response(400, "bad_request", "config_id must be text");
    config_id = body.at("config_id").get<std::string>();
  }
  if (config_id.empty() || !registry_->has_config(config_id)) {
    if (registry_->default_config_id().empty()) {
      return error_response(503, "backend_unavailable", "no stage config or backend is configured");
    }
    return error_response(400, "unknown_config", "unknown config '" + config_id + "'");
  }
  try {
    const Session session = registry_->create(*mode, config_id);
    return ApiResponse{201, session_view(session, registry_->config_for(session.id))};
  } catch (const ConfigError& e) {
    return error_response(503, "backend_unavailable", e.what());
  }
}

ApiResponse Service::post_message(const std::string& id, const json& body) {
  if (!body.contains("text") || !body.at("text").is_string()) {
    return error_response(400, "bad_request", "text is required");
  }
  try {
    const TurnResult result = registry_->run_turn(id, body.at("text").get<std::string>());
    return ApiResponse{200, json{{"reply", result.reply},
                                 {"stage_before", result.stage_before.value},
                                 {"stage_after", result.stage_after.value},
                                 {"status", to_int(result.status)},
                                 {"completed", result.completed},
                                 {"rejected_topic_keys", result.rejected_topic_keys},
                                 {"repair_tier", result.repair_tier},
                                 {"regen_attempts_used", result.regen_attempts_used}}};
  } catch (const EmptyInput& e) {
    return error_response(400, "empty_input", e.what());
  } catch (const RegenerationExhausted& e) {
    const auto& last = e.last_failure();
    return error_response(422, "regeneration_exhausted", e.what(),
                          json{{"kind", to_string(last.kind)}, {"detail", last.detail}, {"attempts", e.attempts()}});
  } catch (const AuthError& e) {
    return error_response(502, "backend_auth", e.what());
  } catch (const BackendError& e) {
    return error_response(502, "backend_failure", e.what());
  }
}

ApiResponse Service::post_rating(const std::string& id, const json& body) {
  const Session session = registry_->snapshot(id);
  if (session.lifecycle != Lifecycle::Completed) {
    return error_response(409, "session_not_completed", "ratings are accepted once the session is completed");
  }
  SessionRating rating;
  int* targets[] = {&rating.coherence, &rating.professionalism, &rating.empathy, &rating.authenticity};
  for (std::size_t i = 0; i < 4; ++i) {
    const char* key = kRatingKeys[i];
    if (!body.contains(key) || !body.at(key).is_number_integer()) {
      return error_response(400, "invalid_rating", fmt::format("'{}' must be an integer from 1 to 5", key),
                            json{{"field", key}});
    }
    const auto value = body.at(key).get<long long>();
    if (value < 1 || value > 5) {
      return error_response(400, "invalid_rating", fmt::format("'{}' must be an integer from 1 to 5", key),
                            json{{"field", key}});
    }
    *targets[i] = static_cast<int>(value);
  }

  std::lock_guard lock(ratings_mutex_);
  if (const auto it = ratings_.find(id); it != ratings_.end()) {
    return ApiResponse{200, rating_json(it->second)};
  }
  rating.submitted_at = clock_->now();
  ratings_[id] = rating;
  if (!options_.ratings_path.empty()) {
    json line = rating_json(rating);
    line["session_id"] = id;
    std::ofstream out(options_.ratings_path, std::ios::app);
    out << line.dump() << '\n';
    if (!out) spdlog::error("could not append rating to {}", options_.ratings_path.string());
  }
  return ApiResponse{201, rating_json(rating)};
}

ApiResponse Service::get_rating(const std::string& id) {
  registry_->snapshot(id);
  std::lock_guard lock(ratings_mutex_);
  const auto it = ratings_.find(id);
  if (it == ratings_.end()) return error_response(404, "no_rating", "no rating submitted for this session");
  return ApiResponse{200, rating_json(it->second)};
}

int Service::bind() {
  server_ = std::make_unique<httplib::Server>();
  const int workers = std::max(1, options_.worker_threads);
  server_->new_task_queue = [workers] { return new httplib::ThreadPool(static_cast<std::size_t>(workers)); };

  auto forward = [this](const httplib::Request& req, httplib::Response& res) {
    const ApiResponse api = handle(ApiRequest{req.method, req.path, req.body, req.get_header_value("Authorization")});
    res.status = api.status;
    res.set_content(api.body.dump(-1, ' ', false, json::error_handler_t::replace), "application/json");
  };
  server_->set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type, Authorization"},
                                {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"}});
  server_->Get(R"(/(sessions|health)(/.*)?)", forward);
  server_->Post(R"(/sessions(/.*)?)", forward);
  server_->Delete(R"(/sessions(/.*)?)", forward);
  server_->Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  if (!options_.static_dir.empty() && !server_->set_mount_point("/", options_.static_dir.string())) {
    throw ConfigError("static directory not found: " + options_.static_dir.string());
  }

  int port = options_.port;
  if (port == 0) {
    port = server_->bind_to_any_port(options_.host);
  } else if (!server_->bind_to_port(options_.host, port)) {
    port = -1;
  }
  if (port < 0) throw Error(fmt::format("cannot bind {}:{}", options_.host, options_.port));
  return port;
}

int Service::start() {
  const int port = bind();
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port;
}

void Service::run() {
  const int port = bind();
  spdlog::info("listening on {}:{}", options_.host, port);
  server_->listen_after_bind();
}

void Service::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace sudosys
