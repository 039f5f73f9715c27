#include "circuitscope/patching.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "circuitscope/error.hpp"
#include "circuitscope/parallel.hpp"

namespace circuitscope {

std::string to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::kLogitDiff: return "logit_diff";
    case MetricKind::kAnswerLogit: return "answer_logit";
    case MetricKind::kAnswerRank: return "answer_rank";
  }
  return "?";
}

std::string to_string(FreezePolicy policy) {
  return policy == FreezePolicy::kFreezeAll ? "freeze_all" : "freeze_attn_recompute_mlp";
}

double Metric::evaluate(std::span<const float> logits) const {
  switch (kind) {
    case MetricKind::kLogitDiff: return logit_diff(logits, answer, distractor);
    case MetricKind::kAnswerLogit:
      if (answer < 0 || answer >= static_cast<int>(logits.size())) {
        fail(ErrorCode::kIndexOutOfBounds, "answer token " + std::to_string(answer));
      }
      return logits[answer];
    case MetricKind::kAnswerRank: return token_rank(logits, answer);
  }
  return 0.0;
}

void ContrastPair::validate(const ModelConfig& config) const {
  if (clean.size() != corrupted.size()) {
    fail(ErrorCode::kLengthMismatch, id + ": clean has " + std::to_string(clean.size()) +
                                         " tokens, corrupted " + std::to_string(corrupted.size()));
  }
  validate_tokens(config, clean);
  validate_tokens(config, corrupted);
  if (!roles.count("END")) fail(ErrorCode::kInvalidArgument, id + ": missing END role");
  for (const auto& [name, pos] : roles) {
    if (pos < 0 || pos >= static_cast<int>(clean.size())) {
      fail(ErrorCode::kIndexOutOfBounds, id + ": role " + name);
    }
  }
  auto check = [&](int t) {
    if (t < 0 || t >= config.vocab_size) fail(ErrorCode::kTokenOutOfRange, id + ": metric token");
  };
  check(metric.answer);
  if (metric.kind == MetricKind::kLogitDiff) check(metric.distractor);
}

ContrastPair make_contrast_pair(const TaskExample& example, std::optional<MetricKind> metric) {
  if (!example.corrupted_tokens) {
    fail(ErrorCode::kMissingCorrupted,
         example.id + ": no corrupted counterpart (" + to_string(example.task) + "/" +
             to_string(example.lang) + ")");
  }
  ContrastPair pair;
  pair.id = example.id;
  pair.clean = example.tokens;
  pair.corrupted = *example.corrupted_tokens;
  pair.roles = example.roles;
  pair.metric.answer = example.answer;
  pair.metric.kind = metric.value_or(example.distractor ? MetricKind::kLogitDiff : MetricKind::kAnswerLogit);
  if (pair.metric.kind == MetricKind::kLogitDiff) {
    if (!example.distractor) {
      fail(ErrorCode::kInvalidArgument, example.id + ": logit_diff needs a distractor");
    }
    pair.metric.distractor = *example.distractor;
  }
  if (pair.clean.size() != pair.corrupted.size()) {
    fail(ErrorCode::kLengthMismatch, example.id + ": clean/corrupted lengths differ");
  }
  return pair;
}

std::vector<ContrastPair> make_contrast_pairs(std::span<const TaskExample> examples,
                                              std::optional<MetricKind> metric) {
  std::vector<ContrastPair> pairs;
  pairs.reserve(examples.size());
  for (const auto& e : examples) pairs.push_back(make_contrast_pair(e, metric));
  return pairs;
}

std::string Receiver::label() const {
  if (is_logits()) return "final_logits";
  std::string s;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (i) s += ",";
    s += heads[i].label();
  }
  return s;
}

PairRuns run_pair(const Model& model, const ContrastPair& pair) {
  pair.validate(model.config());
  PairRuns runs;
  auto clean = forward_capture(model, pair.clean);
  auto corrupted = forward_capture(model, pair.corrupted);
  runs.clean_metric = pair.metric.evaluate(clean.logits_at(pair.end()));
  runs.corrupted_metric = pair.metric.evaluate(corrupted.logits_at(pair.end()));
  runs.clean = std::move(clean.cache);
  runs.corrupted = std::move(corrupted.cache);
  return runs;
}

namespace {

void check_sender(const ModelConfig& c, const Site& s) {
  if (s.component == Component::kResidPre) {
    fail(ErrorCode::kInvalidSite, "sender must be a head_out or ffn_out site");
  }
  if (s.layer < 0 || s.layer >= c.n_layers) fail(ErrorCode::kInvalidSite, "sender layer out of range");
  if (s.component == Component::kHeadOut && (!s.head || *s.head < 0 || *s.head >= c.n_heads)) {
    fail(ErrorCode::kInvalidSite, "head_out sender needs a valid head index");
  }
}

double metric_of(const Model& model, const ContrastPair& pair, const InterventionPlan& plan) {
  auto fwd = forward(model, pair.clean, &plan, ForwardOptions{.capture = false, .logits_at = pair.end()});
  return pair.metric.evaluate(fwd.logits_at(pair.end()));
}

}  // namespace

double activation_patch(const Model& model, const ContrastPair& pair, const PairRuns& runs,
                        const Site& site) {
  InterventionPlan plan;
  plan.patch(site, runs.corrupted);
  return metric_of(model, pair, plan) - runs.clean_metric;
}

double activation_patch(const Model& model, const ContrastPair& pair, const Site& site) {
  const auto runs = run_pair(model, pair);
  return activation_patch(model, pair, runs, site);
}

double path_patch(const Model& model, const ContrastPair& pair, const PairRuns& runs,
                  const Site& sender, const Receiver& receiver, FreezePolicy freeze) {
  const auto& c = model.config();
  check_sender(c, sender);
  for (const auto& r : receiver.heads) {
    if (r.layer < 0 || r.layer >= c.n_layers || r.head < 0 || r.head >= c.n_heads) {
      fail(ErrorCode::kInvalidSite, "receiver " + r.label());
    }
    if (r.layer <= sender.layer) {
      fail(ErrorCode::kLayerOrderViolation, "receiver " + r.label() + " is not downstream of sender");
    }
  }
  auto is_receiver = [&](int l, int h) {
    return std::find(receiver.heads.begin(), receiver.heads.end(), HeadRef{l, h}) != receiver.heads.end();
  };

  // Phase 3: sender corrupted, other heads frozen clean, receivers recomputed.
  InterventionPlan plan;
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      if (is_receiver(l, h)) continue;
      plan.patch(Site{l, Component::kHeadOut, h, std::nullopt}, runs.clean);
    }
    if (freeze == FreezePolicy::kFreezeAll) {
      plan.patch(Site{l, Component::kFfnOut, std::nullopt, std::nullopt}, runs.clean);
    }
  }
  Site corrupted_site = sender;
  if (!corrupted_site.positions) corrupted_site.positions = std::vector<int>{};
  if (corrupted_site.positions->empty()) {
    corrupted_site.positions->resize(pair.clean.size());
    for (std::size_t p = 0; p < pair.clean.size(); ++p) (*corrupted_site.positions)[p] = static_cast<int>(p);
  }
  plan.patch(corrupted_site, runs.corrupted);

  if (receiver.is_logits()) return metric_of(model, pair, plan) - runs.clean_metric;

  auto phase3 = forward_capture(model, pair.clean, &plan);
  std::shared_ptr<const ActivationCache> receiver_values = phase3.cache;
  InterventionPlan replay;
  for (const auto& r : receiver.heads) {
    replay.patch(Site{r.layer, Component::kHeadOut, r.head, std::nullopt}, receiver_values);
  }
  return metric_of(model, pair, replay) - runs.clean_metric;
}

double path_patch(const Model& model, const ContrastPair& pair, const Site& sender,
                  const Receiver& receiver, FreezePolicy freeze) {
  const auto runs = run_pair(model, pair);
  return path_patch(model, pair, runs, sender, receiver, freeze);
}

std::vector<std::pair<HeadRef, double>> PatchResult::top_heads(std::size_t n) const {
  std::vector<std::pair<HeadRef, double>> all;
  for (int l = 0; l < n_layers; ++l)
    for (int h = 0; h < n_heads; ++h) all.push_back({HeadRef{l, h}, at(l, h)});
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return std::fabs(a.second) > std::fabs(b.second);
  });
  if (all.size() > n) all.resize(n);
  return all;
}

nlohmann::json to_json(const PatchResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (int l = 0; l < r.n_layers; ++l) {
    nlohmann::json row = nlohmann::json::array();
    for (int h = 0; h < r.n_heads; ++h) row.push_back(r.at(l, h));
    rows.push_back(row);
  }
  nlohmann::json receiver = r.receiver.is_logits() ? nlohmann::json("final_logits") : nlohmann::json::array();
  for (const auto& h : r.receiver.heads) receiver.push_back(h.label());
  nlohmann::json j = {{"n_layers", r.n_layers},
                      {"n_heads", r.n_heads},
                      {"matrix", rows},
                      {"baseline_clean", r.baseline_clean},
                      {"baseline_corrupted", r.baseline_corrupted},
                      {"receiver", receiver},
                      {"freeze_policy", to_string(r.freeze_policy)},
                      {"mode", r.mode == PatchMode::kPath ? "path" : "activation"},
                      {"metric", to_string(r.metric)},
                      {"delta_convention", "patched - baseline_clean"},
                      {"n_pairs", r.n_pairs}};
  j["positions"] = r.positions ? nlohmann::json(*r.positions) : nlohmann::json("all");
  return j;
}

std::string to_csv(const PatchResult& r) {
  std::ostringstream out;
  out.precision(9);
  out << "layer";
  for (int h = 0; h < r.n_heads; ++h) out << ",h" << h;
  out << "\n";
  for (int l = 0; l < r.n_layers; ++l) {
    out << l;
    for (int h = 0; h < r.n_heads; ++h) out << "," << r.at(l, h);
    out << "\n";
  }
  return out.str();
}

PatchResult patch_sweep(const Model& model, std::span<const ContrastPair> pairs,
                        const SweepOptions& options) {
  if (pairs.empty()) fail(ErrorCode::kEmptyDataset, "patch_sweep needs at least one pair");
  const auto& c = model.config();
  const MetricKind metric = pairs.front().metric.kind;
  int min_receiver_layer = c.n_layers;
  for (const auto& r : options.receiver.heads) min_receiver_layer = std::min(min_receiver_layer, r.layer);

  PatchResult result;
  result.n_layers = c.n_layers;
  result.n_heads = c.n_heads;
  result.receiver = options.receiver;
  result.freeze_policy = options.freeze;
  result.mode = options.mode;
  result.metric = metric;
  result.n_pairs = static_cast<int>(pairs.size());
  result.positions = options.positions;

  const std::size_t LH = static_cast<std::size_t>(c.n_layers) * c.n_heads;
  std::vector<double> sums(LH, 0.0);
  double clean_sum = 0.0, corrupted_sum = 0.0;

  for (const auto& pair : pairs) {
    if (pair.metric.kind != metric) fail(ErrorCode::kMixedDataset, "pairs use different metrics");
    const auto runs = run_pair(model, pair);
    clean_sum += runs.clean_metric;
    corrupted_sum += runs.corrupted_metric;

    std::optional<std::vector<int>> positions = options.positions;
    if (!options.position_roles.empty()) {
      positions = std::vector<int>{};
      for (const auto& role : options.position_roles) {
        auto it = pair.roles.find(role);
        if (it == pair.roles.end()) fail(ErrorCode::kInvalidSite, pair.id + ": no role " + role);
        positions->push_back(it->second);
      }
    }

    std::vector<double> deltas(LH, 0.0);
    parallel_for(LH, options.workers, [&](std::size_t i) {
      const int l = static_cast<int>(i) / c.n_heads, h = static_cast<int>(i) % c.n_heads;
      Site sender{l, Component::kHeadOut, h, positions};
      if (options.mode == PatchMode::kActivation) {
        deltas[i] = activation_patch(model, pair, runs, sender);
      } else if (l < min_receiver_layer) {
        deltas[i] = path_patch(model, pair, runs, sender, options.receiver, options.freeze);
      }
    });
    for (std::size_t i = 0; i < LH; ++i) sums[i] += deltas[i];
  }

  const double n = static_cast<double>(pairs.size());
  result.matrix.resize(LH);
  for (std::size_t i = 0; i < LH; ++i) result.matrix[i] = sums[i] / n;
  result.baseline_clean = clean_sum / n;
  result.baseline_corrupted = corrupted_sum / n;
  return result;
}

nlohmann::json to_json(const AblationReport& r) {
  nlohmann::json delta = {{"zero_rank_rate", r.ablated.zero_rank_rate - r.baseline.zero_rank_rate},
                          {"mean_answer_rank", r.ablated.mean_answer_rank - r.baseline.mean_answer_rank}};
  delta["accuracy"] = (r.baseline.accuracy && r.ablated.accuracy)
                          ? nlohmann::json(*r.ablated.accuracy - *r.baseline.accuracy)
                          : nlohmann::json(nullptr);
  return {{"baseline", to_json(r.baseline)},
          {"ablated", to_json(r.ablated)},
          {"delta", delta},
          {"answer_rank_shift", r.answer_rank_shift},
          {"rank_shift", r.rank_shift},
          {"rank_shift_convention", "baseline rank - ablated rank (positive = promoted)"}};
}

AblationReport ablate_and_eval(const Model& model, std::span<const TaskExample> examples,
                               const InterventionPlan& plan,
                               const std::map<std::string, std::vector<int>>& groups, int workers) {
  if (examples.empty()) fail(ErrorCode::kEmptyDataset, "ablation needs examples");
  std::vector<int> tracked;
  for (const auto& [name, tokens] : groups) tracked.insert(tracked.end(), tokens.begin(), tokens.end());
  std::sort(tracked.begin(), tracked.end());
  tracked.erase(std::unique(tracked.begin(), tracked.end()), tracked.end());

  auto base = evaluate_with_ranks(model, examples, nullptr, tracked, workers);
  auto treated = evaluate_with_ranks(model, examples, &plan, tracked, workers);

  AblationReport report;
  report.baseline = std::move(base.report);
  report.ablated = std::move(treated.report);
  for (const auto& [name, tokens] : groups) {
    report.rank_shift[name] = rank_shift(base.ranks, treated.ranks, tokens);
  }
  report.answer_rank_shift = report.baseline.mean_answer_rank - report.ablated.mean_answer_rank;
  return report;
}

InterventionPlan zero_ffn_plan(const ModelConfig& config, int first_layer, int last_layer) {
  if (first_layer < 0 || last_layer >= config.n_layers || first_layer > last_layer) {
    fail(ErrorCode::kInvalidSite, "FFN layer range " + std::to_string(first_layer) + ".." +
                                      std::to_string(last_layer));
  }
  InterventionPlan plan;
  for (int l = first_layer; l <= last_layer; ++l) {
    plan.zero(Site{l, Component::kFfnOut, std::nullopt, std::nullopt});
  }
  return plan;
}

InterventionPlan zero_heads_plan(const ModelConfig& config, std::span<const HeadRef> heads) {
  InterventionPlan plan;
  for (const auto& h : heads) {
    if (h.layer < 0 || h.layer >= config.n_layers || h.head < 0 || h.head >= config.n_heads) {
      fail(ErrorCode::kInvalidSite, "head " + h.label());
    }
    plan.zero(Site{h.layer, Component::kHeadOut, h.head, std::nullopt});
  }
  return plan;
}

}  // namespace circuitscope
