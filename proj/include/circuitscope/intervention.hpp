#pragma once

#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "circuitscope/cache.hpp"

namespace circuitscope {

enum class Component { kHeadOut, kFfnOut, kResidPre };

std::string to_string(Component component);

struct Site {
  int layer = 0;
  Component component = Component::kHeadOut;
  // Head index for kHeadOut; unset selects every head in the layer.
  std::optional<int> head;
  // Unset selects every position.
  std::optional<std::vector<int>> positions;

  bool covers(int pos) const;
  bool operator==(const Site&) const = default;
};

struct ZeroAction {};

// Explicit values, one d_model row per sequence position (seq_len rows).
struct ReplaceAction {
  std::vector<float> values;
};

// Take the same site's value from another captured run of equal length.
struct PatchAction {
  std::shared_ptr<const ActivationCache> source;
};

// Per-position mean over reference runs; positions past a reference's end
// reuse its last position.
struct MeanAction {
  std::vector<std::shared_ptr<const ActivationCache>> references;
};

using Action = std::variant<ZeroAction, ReplaceAction, PatchAction, MeanAction>;

struct Intervention {
  Site site;
  Action action;
};

struct InterventionPlan {
  std::vector<Intervention> items;

  bool empty() const { return items.empty(); }
  // Bounds, duplicate-site and action-shape checks (kInvalidSite).
  void validate(const ModelConfig& config, int seq_len) const;

  InterventionPlan& zero(Site site);
  InterventionPlan& patch(Site site, std::shared_ptr<const ActivationCache> source);
};

// Value of a site at one position in a captured run.
std::span<const float> site_value(const ActivationCache& cache, Component component,
                                  int layer, int head, int pos);

}  // namespace circuitscope
