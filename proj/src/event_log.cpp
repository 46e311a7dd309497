#include "sudosys/event_log.hpp"

#include <algorithm>
#include <fstream>

#include <fmt/format.h>

namespace sudosys {

void MemoryEventStore::commit(const std::string& session_id, std::span<const SessionEvent> events) {
  std::lock_guard lock(mutex_);
  auto& log = logs_[session_id];
  log.insert(log.end(), events.begin(), events.end());
}

std::vector<SessionEvent> MemoryEventStore::load(const std::string& session_id) const {
  std::lock_guard lock(mutex_);
  const auto it = logs_.find(session_id);
  return it == logs_.end() ? std::vector<SessionEvent>{} : it->second;
}

std::vector<std::string> MemoryEventStore::session_ids() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> ids;
  for (const auto& [id, log] : logs_) ids.push_back(id);
  return ids;
}

FileEventStore::FileEventStore(std::filesystem::path directory) : directory_(std::move(directory)) {
  std::filesystem::create_directories(directory_);
}

std::filesystem::path FileEventStore::log_path(const std::string& session_id) const {
  return directory_ / (session_id + ".log");
}

void FileEventStore::commit(const std::string& session_id, std::span<const SessionEvent> events) {
  if (events.empty()) return;
  std::string batch;
  for (const auto& event : events) {
    batch += encode_event(event);
    batch += '\n';
  }
  std::lock_guard lock(mutex_);
  std::ofstream out(log_path(session_id), std::ios::binary | std::ios::app);
  if (!out) {
    throw Error("cannot open event log for session " + session_id);
  }
  out.write(batch.data(), static_cast<std::streamsize>(batch.size()));
  out.flush();
  if (!out) {
    throw Error("failed to append to event log for session " + session_id);
  }
}

std::vector<SessionEvent> FileEventStore::load(const std::string& session_id) const {
  std::lock_guard lock(mutex_);
  if (!std::filesystem::exists(log_path(session_id))) return {};
  return read_event_log(log_path(session_id));
}

std::vector<std::string> FileEventStore::session_ids() const {
  std::vector<std::string> ids;
  for (const auto& entry : std::filesystem::directory_iterator(directory_)) {
    if (entry.path().extension() == ".log") ids.push_back(entry.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<SessionEvent> read_event_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CorruptLog("cannot open event log " + path.string());
  }
  std::vector<SessionEvent> events;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      events.push_back(decode_event(line));
    } catch (const CorruptLog& e) {
      throw CorruptLog(fmt::format("{}:{}: {}", path.string(), number, e.what()));
    }
  }
  return events;
}

}  // namespace sudosys
