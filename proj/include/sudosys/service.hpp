#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "sudosys/orchestrator.hpp"

namespace httplib {
class Server;
}

namespace sudosys {

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  // When non-empty every /sessions request needs "Authorization: Bearer <token>".
  std::string auth_token;
  // Served at "/" when set (the browser client).
  std::filesystem::path static_dir;
  // Ratings are appended here as JSON lines when set.
  std::filesystem::path ratings_path;
  int worker_threads = 16;
};

struct ApiRequest {
  std::string method;
  std::string path;
  std::string body;
  std::string authorization;
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

struct SessionRating {
  int coherence = 0;
  int professionalism = 0;
  int empathy = 0;
  int authenticity = 0;
  std::string submitted_at;
};

// View of a session for API clients. Topics cover stages 1..current only and
// are omitted entirely for stage-unaware sessions.
nlohmann::json session_view(const Session& session, const StageConfig& config);
nlohmann::json transcript_view(const Session& session);

class Service {
 public:
  Service(std::shared_ptr<SessionRegistry> registry, ServiceOptions options, std::shared_ptr<Clock> clock = nullptr);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Transport-independent request handling; the HTTP server delegates here.
  ApiResponse handle(const ApiRequest& request);

  // Binds and serves on a background thread. Returns the bound port.
  int start();
  // Blocks serving on the calling thread.
  void run();
  void stop();

 private:
  ApiResponse create_session(const nlohmann::json& body);
  ApiResponse post_message(const std::string& id, const nlohmann::json& body);
  ApiResponse post_rating(const std::string& id, const nlohmann::json& body);
  ApiResponse get_rating(const std::string& id);
  int bind();

  std::shared_ptr<SessionRegistry> registry_;
  ServiceOptions options_;
  std::shared_ptr<Clock> clock_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;

  std::mutex ratings_mutex_;
  std::map<std::string, SessionRating> ratings_;
};

}  // namespace sudosys
