#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "sudosys/session.hpp"

namespace sudosys {

// Append-only per-session event storage. A commit is all-or-nothing: either
// every event of the batch becomes visible to load() or none does.
class EventStore {
 public:
  virtual ~EventStore() = default;
  virtual void commit(const std::string& session_id, std::span<const SessionEvent> events) = 0;
  virtual std::vector<SessionEvent> load(const std::string& session_id) const = 0;
  virtual std::vector<std::string> session_ids() const = 0;
};

class MemoryEventStore final : public EventStore {
 public:
  void commit(const std::string& session_id, std::span<const SessionEvent> events) override;
  std::vector<SessionEvent> load(const std::string& session_id) const override;
  std::vector<std::string> session_ids() const override;

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::vector<SessionEvent>> logs_;
};

// One newline-delimited file per session: <directory>/<session_id>.log.
// Each commit is a single buffered write followed by a flush.
class FileEventStore final : public EventStore {
 public:
  explicit FileEventStore(std::filesystem::path directory);

  void commit(const std::string& session_id, std::span<const SessionEvent> events) override;
  std::vector<SessionEvent> load(const std::string& session_id) const override;
  std::vector<std::string> session_ids() const override;

  std::filesystem::path log_path(const std::string& session_id) const;

 private:
  std::filesystem::path directory_;
  mutable std::mutex mutex_;
};

std::vector<SessionEvent> read_event_log(const std::filesystem::path& path);

}  // namespace sudosys
