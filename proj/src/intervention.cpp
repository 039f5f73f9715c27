#include "circuitscope/intervention.hpp"

#include <algorithm>

#include "circuitscope/error.hpp"

namespace circuitscope {

std::string to_string(Component component) {
  switch (component) {
    case Component::kHeadOut: return "head_out";
    case Component::kFfnOut: return "ffn_out";
    case Component::kResidPre: return "resid_pre";
  }
  return "unknown";
}

bool Site::covers(int pos) const {
  if (!positions) return true;
  return std::find(positions->begin(), positions->end(), pos) != positions->end();
}

InterventionPlan& InterventionPlan::zero(Site site) {
  items.push_back({std::move(site), ZeroAction{}});
  return *this;
}

InterventionPlan& InterventionPlan::patch(Site site,
                                          std::shared_ptr<const ActivationCache> source) {
  items.push_back({std::move(site), PatchAction{std::move(source)}});
  return *this;
}

void InterventionPlan::validate(const ModelConfig& config, int seq_len) const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Site& s = items[i].site;
    const std::string where = "intervention " + std::to_string(i) + ": ";
    if (s.layer < 0 || s.layer >= config.n_layers) {
      fail(ErrorCode::kInvalidSite, where + "layer " + std::to_string(s.layer) + " out of range");
    }
    if (s.head) {
      if (s.component != Component::kHeadOut) {
        fail(ErrorCode::kInvalidSite, where + "head index only applies to head_out");
      }
      if (*s.head < 0 || *s.head >= config.n_heads) {
        fail(ErrorCode::kInvalidSite, where + "head " + std::to_string(*s.head) + " out of range");
      }
    }
    if (s.positions) {
      for (int p : *s.positions) {
        if (p < 0 || p >= seq_len) {
          fail(ErrorCode::kInvalidSite, where + "position " + std::to_string(p) + " out of range");
        }
      }
    }
    std::visit(
        [&](const auto& action) {
          using T = std::decay_t<decltype(action)>;
          if constexpr (std::is_same_v<T, ReplaceAction>) {
            if (s.component == Component::kHeadOut && !s.head) {
              fail(ErrorCode::kInvalidSite, where + "replace on head_out needs a head index");
            }
            if (action.values.size() != static_cast<std::size_t>(seq_len) * config.d_model) {
              fail(ErrorCode::kInvalidSite, where + "replace values must be seq_len x d_model");
            }
          } else if constexpr (std::is_same_v<T, PatchAction>) {
            if (!action.source) fail(ErrorCode::kInvalidSite, where + "patch source missing");
            if (action.source->seq_len() != seq_len ||
                !(action.source->config() == config)) {
              fail(ErrorCode::kInvalidSite, where + "patch source does not match run shape");
            }
          } else if constexpr (std::is_same_v<T, MeanAction>) {
            if (action.references.empty()) {
              fail(ErrorCode::kInvalidSite, where + "mean needs at least one reference run");
            }
            for (const auto& r : action.references) {
              if (!r || !(r->config() == config)) {
                fail(ErrorCode::kInvalidSite, where + "mean reference does not match model");
              }
            }
          }
        },
        items[i].action);
    for (std::size_t j = 0; j < i; ++j) {
      if (items[j].site == s) {
        fail(ErrorCode::kInvalidSite, where + "duplicate action for the same site");
      }
    }
  }
}

std::span<const float> site_value(const ActivationCache& cache, Component component, int layer,
                                  int head, int pos) {
  switch (component) {
    case Component::kHeadOut: return cache.head_out(layer, head, pos);
    case Component::kFfnOut: return cache.ffn_out(layer, pos);
    case Component::kResidPre: return cache.resid_pre(layer, pos);
  }
  return {};
}

}  // namespace circuitscope
