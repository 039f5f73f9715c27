#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "circuitscope/cache.hpp"
#include "circuitscope/rng.hpp"
#include "circuitscope/tasks.hpp"
#include "json.hpp"

namespace circuitscope {

// A component whose output is written into the residual stream. kEmbed is
// the embedding carry (resid_pre of block 0).
struct ComponentSite {
  enum class Kind { kEmbed, kHead, kFfn };
  Kind kind = Kind::kHead;
  int layer = 0;
  int head = -1;

  static ComponentSite embed() { return {Kind::kEmbed, 0, -1}; }
  static ComponentSite attn_head(int layer, int head) { return {Kind::kHead, layer, head}; }
  static ComponentSite ffn(int layer) { return {Kind::kFfn, layer, -1}; }

  std::string label() const;  // "embed", "L3.H5", "L3.FFN"
  bool operator==(const ComponentSite&) const = default;
};

struct AttributionRecord {
  ComponentSite site;
  int position = 0;
  std::map<int, double> token_scores;
  std::vector<std::pair<int, double>> top_k;  // score desc, token id asc
};

nlohmann::json to_json(const AttributionRecord& record, const Vocabulary* vocab = nullptr);

std::vector<float> component_output(const ActivationCache& cache, const ComponentSite& site,
                                    int pos);

// Final layernorm with the normalization scale frozen to the one computed
// from the full residual at `pos`: (x - mean(x)) / scale_full * w. The bias is
// left out; it is a separate term of the decomposition.
std::vector<float> frozen_layer_norm(const ActivationCache& cache, std::span<const float> x,
                                     int pos);

// Direct-effect logit contribution of a site to every vocabulary token.
std::vector<float> direct_logit_scores(const ActivationCache* cache, const ComponentSite& site,
                                       int pos);
// The final layernorm bias projected through the unembedding.
std::vector<float> layernorm_bias_scores(const Model& model);

AttributionRecord direct_logit_attribution(const ActivationCache* cache, const ComponentSite& site,
                                           std::span<const int> target_tokens, int position);

// Descending (token, score) pairs; ties broken by ascending token id.
std::vector<std::pair<int, double>> top_k_scores(std::span<const float> scores, int k);

std::vector<std::pair<int, double>> top_promoted_tokens(const ActivationCache* cache,
                                                        const ComponentSite& site, int position,
                                                        int k);

double verb_group_score(const ActivationCache* cache, int layer, int head, int position,
                        std::span<const int> group);

enum class HeadScoreKind { kPrevToken, kDuplicateToken, kInduction, kCopy, kVerbGroup };
std::string to_string(HeadScoreKind kind);

struct HeadScoreTable {
  HeadScoreKind kind = HeadScoreKind::kPrevToken;
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> values;  // row-major [layer][head]
  nlohmann::json protocol_params = nlohmann::json::object();

  double at(int layer, int head) const { return values[static_cast<std::size_t>(layer) * n_heads + head]; }
};

nlohmann::json to_json(const HeadScoreTable& table, const std::string& model_fingerprint);

struct RandomTokenProtocol {
  int length = 50;  // seq_len for prev-token, half_len for repeated-sequence scores
  int n_samples = 20;
  std::uint64_t seed = 0;
  int workers = 1;
};

// Uniform random token ids, skipping the vocabulary's special ids.
std::vector<int> random_tokens(const Model& model, int length, Rng& rng);

HeadScoreTable prev_token_score(const Model& model, const RandomTokenProtocol& protocol);
HeadScoreTable duplicate_token_score(const Model& model, const RandomTokenProtocol& protocol);
HeadScoreTable induction_score(const Model& model, const RandomTokenProtocol& protocol);

// Per-head score readers over a captured run, shared with the protocols above.
double prev_token_pattern_score(const ActivationCache& cache, int layer, int head);
double duplicate_pattern_score(const ActivationCache& cache, int layer, int head, int half_len);
double induction_pattern_score(const ActivationCache& cache, int layer, int head, int half_len);

struct CopyProbe {
  int k = 5;
};

// Probe vector for a token: its embedding (with the positional embedding of
// a fixed middle position under the learned scheme) plus block 0's FFN
// applied to it.
std::vector<float> copy_probe_vector(const Model& model, int token);
int copy_probe_position(const ModelConfig& config);

double copy_score(const Model& model, int layer, int head, std::span<const int> probe_tokens,
                  int k = 5);
HeadScoreTable copy_score_table(const Model& model, std::span<const int> probe_tokens, int k = 5,
                                int workers = 1);

struct HeadRef {
  int layer = 0;
  int head = 0;
  std::string label() const { return std::to_string(layer) + "." + std::to_string(head); }
  bool operator==(const HeadRef&) const = default;
  auto operator<=>(const HeadRef&) const = default;
};

struct MoverEffect {
  HeadRef mover;
  // Mean attention from END to each role position: baseline, ablated.
  std::map<std::string, std::pair<double, double>> attention;
  // Mean direct-effect scores at END: baseline, ablated.
  std::pair<double, double> io_score;
  std::pair<double, double> s_score;
  std::pair<double, double> logit_diff;  // io_score - s_score
};

struct SInhibitionReport {
  HeadRef candidate;
  int n = 0;
  std::vector<MoverEffect> movers;
};

nlohmann::json to_json(const SInhibitionReport& report);

// Zero-ablates `candidate` and measures how each downstream mover's attention
// to S1/S2/IO and its direct IO-vs-S logit difference change.
SInhibitionReport s_inhibition_effect(const Model& model, std::span<const TaskExample> examples,
                                      HeadRef candidate, std::span<const HeadRef> movers,
                                      int workers = 1);

}  // namespace circuitscope
