#include "sudosys/stage_engine.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace sudosys {

TopicStore TopicStore::from_config(const StageConfig& config) {
  std::vector<std::vector<std::string>> layout;
  layout.reserve(config.stages.size());
  for (const auto& stage : config.stages) {
    layout.push_back(stage.topic_keys);
  }
  return from_layout(layout);
}

TopicStore TopicStore::from_layout(const std::vector<std::vector<std::string>>& keys_by_stage) {
  TopicStore store;
  int index = 1;
  for (const auto& keys : keys_by_stage) {
    StageTopics entry{StageId{index++}, {}};
    for (const auto& key : keys) {
      entry.topics.push_back(Topic{key, {}});
    }
    store.by_stage_.push_back(std::move(entry));
  }
  return store;
}

const StageTopics& TopicStore::stage(StageId id) const {
  if (id.value < 1 || id.value > stage_count()) {
    throw ValidationError(fmt::format("stage {} outside 1..{}", id.value, stage_count()), id.value);
  }
  return by_stage_[static_cast<std::size_t>(id.value - 1)];
}

bool TopicStore::set_description(StageId id, const std::string& key, std::string description) {
  if (id.value < 1 || id.value > stage_count()) return false;
  auto& topics = by_stage_[static_cast<std::size_t>(id.value - 1)].topics;
  const auto it = std::find_if(topics.begin(), topics.end(), [&](const Topic& t) { return t.key == key; });
  if (it == topics.end()) return false;
  it->description = std::move(description);
  return true;
}

StageTransition advance_stage(StageId current, DialogueStatus status, int n_stages) {
  StageTransition transition{current, current, status, false, false};
  const int raw = current.value + to_int(status);
  if (current.value == n_stages && status == DialogueStatus::Advance) {
    transition.completed = true;
    transition.clamped = true;
    return transition;
  }
  transition.to = StageId{std::clamp(raw, 1, n_stages)};
  transition.clamped = raw != transition.to.value;
  return transition;
}

TopicUpdateResult apply_topic_update(TopicStore store, StageId stage,
                                     const std::map<std::string, std::string>& proposed) {
  TopicUpdateResult result{std::move(store), {}};
  for (const auto& [key, description] : proposed) {
    if (!result.store.set_description(stage, key, description)) {
      result.rejected.push_back(key);
    }
  }
  return result;
}

std::vector<StageTopics> visible_topics(const TopicStore& store, StageId stage) {
  const auto& all = store.stages();
  const auto count = static_cast<std::size_t>(std::clamp(stage.value, 0, store.stage_count()));
  return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count)};
}

}  // namespace sudosys
