#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "circuitscope/attribution.hpp"
#include "circuitscope/forward.hpp"
#include "circuitscope/tasks.hpp"
#include "json.hpp"

namespace circuitscope {

enum class MetricKind { kLogitDiff, kAnswerLogit, kAnswerRank };
std::string to_string(MetricKind kind);

struct Metric {
  MetricKind kind = MetricKind::kLogitDiff;
  int answer = 0;
  int distractor = -1;

  double evaluate(std::span<const float> logits) const;
};

struct ContrastPair {
  std::string id;
  std::vector<int> clean;
  std::vector<int> corrupted;
  std::map<std::string, int> roles;
  Metric metric;

  int end() const { return roles.at("END"); }
  void validate(const ModelConfig& config) const;
};

// Builds the pair from a dataset example. Throws kMissingCorrupted when the
// example has no corrupted counterpart (e.g. Chinese tense examples). The
// metric defaults to logit_diff when a distractor exists, else answer_logit.
ContrastPair make_contrast_pair(const TaskExample& example,
                                std::optional<MetricKind> metric = std::nullopt);
std::vector<ContrastPair> make_contrast_pairs(std::span<const TaskExample> examples,
                                              std::optional<MetricKind> metric = std::nullopt);

enum class FreezePolicy { kFreezeAttnRecomputeMlp, kFreezeAll };
std::string to_string(FreezePolicy policy);

// Final logits, or a set of downstream heads whose recomputed output is
// patched back into an otherwise clean run.
struct Receiver {
  std::vector<HeadRef> heads;

  bool is_logits() const { return heads.empty(); }
  std::string label() const;
};

// Clean and corrupted captures for one pair, shared read-only by every
// sender evaluated against it.
struct PairRuns {
  std::shared_ptr<const ActivationCache> clean;
  std::shared_ptr<const ActivationCache> corrupted;
  double clean_metric = 0.0;
  double corrupted_metric = 0.0;
};
PairRuns run_pair(const Model& model, const ContrastPair& pair);

// metric(clean run with `site` taken from the corrupted run) - metric(clean).
double activation_patch(const Model& model, const ContrastPair& pair, const Site& site);
double activation_patch(const Model& model, const ContrastPair& pair, const PairRuns& runs,
                        const Site& site);

// Sender is a head_out or ffn_out site. Every other head is frozen to its
// clean value (and FFNs too under kFreezeAll) so only paths from the sender
// to the receiver carry the corrupted signal.
double path_patch(const Model& model, const ContrastPair& pair, const Site& sender,
                  const Receiver& receiver,
                  FreezePolicy freeze = FreezePolicy::kFreezeAttnRecomputeMlp);
double path_patch(const Model& model, const ContrastPair& pair, const PairRuns& runs,
                  const Site& sender, const Receiver& receiver, FreezePolicy freeze);

enum class PatchMode { kPath, kActivation };

struct PatchResult {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> matrix;  // row-major [layer][head], mean (patched - clean)
  double baseline_clean = 0.0;
  double baseline_corrupted = 0.0;
  Receiver receiver;
  FreezePolicy freeze_policy = FreezePolicy::kFreezeAttnRecomputeMlp;
  PatchMode mode = PatchMode::kPath;
  MetricKind metric = MetricKind::kLogitDiff;
  int n_pairs = 0;
  std::optional<std::vector<int>> positions;

  double at(int layer, int head) const { return matrix[static_cast<std::size_t>(layer) * n_heads + head]; }
  // Heads ordered by |delta| descending (ties by layer, head).
  std::vector<std::pair<HeadRef, double>> top_heads(std::size_t n) const;
};

nlohmann::json to_json(const PatchResult& result);
std::string to_csv(const PatchResult& result);

struct SweepOptions {
  Receiver receiver;
  FreezePolicy freeze = FreezePolicy::kFreezeAttnRecomputeMlp;
  PatchMode mode = PatchMode::kPath;
  // Sender positions; unset patches every position.
  std::optional<std::vector<int>> positions;
  // Restrict positions to these role names, resolved per pair (e.g. {"END"}).
  std::vector<std::string> position_roles;
  int workers = 1;
};

// Mean delta per sender head over all pairs. Senders not strictly upstream
// of a head receiver get 0.
PatchResult patch_sweep(const Model& model, std::span<const ContrastPair> pairs,
                        const SweepOptions& options);

struct AblationReport {
  EvalReport baseline;
  EvalReport ablated;
  std::map<std::string, double> rank_shift;  // group name -> mean shift
  double answer_rank_shift = 0.0;            // each example's own answer
};

nlohmann::json to_json(const AblationReport& report);

AblationReport ablate_and_eval(const Model& model, std::span<const TaskExample> examples,
                               const InterventionPlan& plan,
                               const std::map<std::string, std::vector<int>>& groups,
                               int workers = 1);

// Zero-ablation plans.
InterventionPlan zero_ffn_plan(const ModelConfig& config, int first_layer, int last_layer);
InterventionPlan zero_heads_plan(const ModelConfig& config, std::span<const HeadRef> heads);

}  // namespace circuitscope
