#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sudosys/core.hpp"

namespace sudosys {

struct StageTopics {
  StageId stage;
  std::vector<Topic> topics;

  bool operator==(const StageTopics&) const = default;
};

// The topic database: one entry per configured stage, keys in configured order.
class TopicStore {
 public:
  TopicStore() = default;

  // Every description starts empty.
  static TopicStore from_config(const StageConfig& config);
  // Same shape from an explicit key layout (used when replaying logs).
  static TopicStore from_layout(const std::vector<std::vector<std::string>>& keys_by_stage);

  int stage_count() const { return static_cast<int>(by_stage_.size()); }
  const StageTopics& stage(StageId id) const;
  const std::vector<StageTopics>& stages() const { return by_stage_; }

  // Sets a description in place. Returns false if `key` is not configured for `id`.
  bool set_description(StageId id, const std::string& key, std::string description);

  bool operator==(const TopicStore&) const = default;

 private:
  std::vector<StageTopics> by_stage_;
};

struct StageTransition {
  StageId from;
  StageId to;
  DialogueStatus status = DialogueStatus::Stay;
  bool clamped = false;
  bool completed = false;

  bool operator==(const StageTransition&) const = default;
};

// s := s + c, clamped to [1, n_stages]. Advance at the last stage marks completion.
StageTransition advance_stage(StageId current, DialogueStatus status, int n_stages);

struct TopicUpdateResult {
  TopicStore store;
  std::vector<std::string> rejected;
};

// Replaces descriptions for keys configured on `stage`; every other proposed key
// is returned in `rejected` (sorted) and never applied.
TopicUpdateResult apply_topic_update(TopicStore store, StageId stage,
                                     const std::map<std::string, std::string>& proposed);

// Stages 1..stage inclusive, ascending.
std::vector<StageTopics> visible_topics(const TopicStore& store, StageId stage);

}  // namespace sudosys
