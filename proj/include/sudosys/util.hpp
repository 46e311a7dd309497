#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>

namespace sudosys {

std::string sha256_hex(std::string_view data);

std::string read_text_file(const std::filesystem::path& path);
// Writes via a temporary sibling and rename so readers never see a partial file.
void write_text_file(const std::filesystem::path& path, std::string_view content);

// Replaces ill-formed UTF-8 sequences with U+FFFD so text can be stored in JSON logs.
std::string sanitize_utf8(std::string_view text);

// Source of event timestamps (ISO-8601 UTC, millisecond precision).
class Clock {
 public:
  virtual ~Clock() = default;
  virtual std::string now() = 0;
};

class SystemClock final : public Clock {
 public:
  std::string now() override;
};

// Deterministic clock for reproducible runs: starts at the epoch and advances
// one millisecond per reading.
class LogicalClock final : public Clock {
 public:
  std::string now() override;

 private:
  std::atomic<std::int64_t> ticks_{0};
};

std::string format_utc_millis(std::int64_t millis_since_epoch);

class IdSource {
 public:
  virtual ~IdSource() = default;
  virtual std::string next() = 0;
};

// 128-bit random hex identifiers.
class RandomIdSource final : public IdSource {
 public:
  std::string next() override;
};

// "<prefix>0001", "<prefix>0002", ...
class SequentialIdSource final : public IdSource {
 public:
  explicit SequentialIdSource(std::string prefix = "s") : prefix_(std::move(prefix)) {}
  std::string next() override;

 private:
  std::string prefix_;
  std::atomic<std::uint64_t> counter_{0};
};

}  // namespace sudosys
