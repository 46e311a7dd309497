#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <string>
#include <unistd.h>

#include "sudosys/core.hpp"
#include "sudosys/llm_gateway.hpp"
#include "sudosys/util.hpp"

namespace testing {

inline std::filesystem::path source_dir() { return SUDOSYS_SOURCE_DIR; }
inline std::filesystem::path fixture(const std::string& relative) { return source_dir() / "fixtures" / relative; }
inline std::filesystem::path shipped_config() { return source_dir() / "config" / "pm_plus_7stage.default"; }

inline std::shared_ptr<const sudosys::StageConfig> load_config(const std::filesystem::path& path = shipped_config()) {
  return std::make_shared<const sudosys::StageConfig>(sudosys::load_stage_config_file(path));
}

// Removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("sudosys-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::shared_ptr<sudosys::ScriptedBackend> scripted(const std::string& yaml) {
  return std::make_shared<sudosys::ScriptedBackend>(sudosys::parse_script(yaml));
}

inline std::shared_ptr<sudosys::ScriptedBackend> scripted_file(const std::string& relative) {
  return std::make_shared<sudosys::ScriptedBackend>(sudosys::load_script(fixture(relative)));
}

}  // namespace testing
