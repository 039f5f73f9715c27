#include "circuitscope/attribution.hpp"

#include <algorithm>
#include <array>
#include <numeric>

#include "circuitscope/error.hpp"
#include "circuitscope/forward.hpp"
#include "circuitscope/parallel.hpp"

namespace circuitscope {

std::string ComponentSite::label() const {
  switch (kind) {
    case Kind::kEmbed: return "embed";
    case Kind::kHead: return "L" + std::to_string(layer) + ".H" + std::to_string(head);
    case Kind::kFfn: return "L" + std::to_string(layer) + ".FFN";
  }
  return "?";
}

std::string to_string(HeadScoreKind kind) {
  switch (kind) {
    case HeadScoreKind::kPrevToken: return "prev_token";
    case HeadScoreKind::kDuplicateToken: return "duplicate_token";
    case HeadScoreKind::kInduction: return "induction";
    case HeadScoreKind::kCopy: return "copy";
    case HeadScoreKind::kVerbGroup: return "verb_group";
  }
  return "?";
}

std::vector<float> component_output(const ActivationCache& cache, const ComponentSite& site,
                                    int pos) {
  cache.check_pos(pos);
  std::span<const float> v;
  switch (site.kind) {
    case ComponentSite::Kind::kEmbed:
      v = cache.resid_pre(0, pos);
      break;
    case ComponentSite::Kind::kHead:
      cache.check_layer(site.layer);
      cache.check_head(site.head);
      v = cache.head_out(site.layer, site.head, pos);
      break;
    case ComponentSite::Kind::kFfn:
      cache.check_layer(site.layer);
      v = cache.ffn_out(site.layer, pos);
      break;
  }
  return {v.begin(), v.end()};
}

std::vector<float> frozen_layer_norm(const ActivationCache& cache, std::span<const float> x,
                                     int pos) {
  const auto& c = cache.config();
  const auto& w = cache.model().weights();
  const double scale = layer_norm_scale(cache.final_resid(pos), c.layernorm_epsilon);
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(x.size());
  std::vector<float> out(x.size());
  for (std::size_t d = 0; d < x.size(); ++d) {
    out[d] = static_cast<float>((x[d] - mean) / scale) * w.ln_final_w[d];
  }
  return out;
}

std::vector<float> direct_logit_scores(const ActivationCache* cache, const ComponentSite& site,
                                       int pos) {
  if (!cache) fail(ErrorCode::kCacheMissing, "attribution needs a captured run");
  const auto out = component_output(*cache, site, pos);
  const auto normed = frozen_layer_norm(*cache, out, pos);
  std::vector<float> scores(cache->config().vocab_size);
  cache->model().unembed_all(normed, scores);
  return scores;
}

std::vector<float> layernorm_bias_scores(const Model& model) {
  std::vector<float> scores(model.config().vocab_size);
  model.unembed_all(model.weights().ln_final_b, scores);
  return scores;
}

std::vector<std::pair<int, double>> top_k_scores(std::span<const float> scores, int k) {
  if (k < 1) fail(ErrorCode::kInvalidArgument, "k must be >= 1");
  std::vector<int> ids(scores.size());
  std::iota(ids.begin(), ids.end(), 0);
  const std::size_t kk = std::min<std::size_t>(k, ids.size());
  auto better = [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(ids.begin(), ids.begin() + kk, ids.end(), better);
  std::vector<std::pair<int, double>> out;
  out.reserve(kk);
  for (std::size_t i = 0; i < kk; ++i) out.emplace_back(ids[i], scores[ids[i]]);
  return out;
}

AttributionRecord direct_logit_attribution(const ActivationCache* cache, const ComponentSite& site,
                                           std::span<const int> target_tokens, int position) {
  const auto scores = direct_logit_scores(cache, site, position);
  AttributionRecord rec;
  rec.site = site;
  rec.position = position;
  std::vector<float> subset;
  for (int t : target_tokens) {
    if (t < 0 || t >= static_cast<int>(scores.size())) {
      fail(ErrorCode::kIndexOutOfBounds, "token " + std::to_string(t));
    }
    rec.token_scores[t] = scores[t];
  }
  for (const auto& [t, s] : rec.token_scores) rec.top_k.emplace_back(t, s);
  std::sort(rec.top_k.begin(), rec.top_k.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return rec;
}

std::vector<std::pair<int, double>> top_promoted_tokens(const ActivationCache* cache,
                                                        const ComponentSite& site, int position,
                                                        int k) {
  if (k < 1) fail(ErrorCode::kInvalidArgument, "k must be >= 1");
  return top_k_scores(direct_logit_scores(cache, site, position), k);
}

nlohmann::json to_json(const AttributionRecord& r, const Vocabulary* vocab) {
  nlohmann::json top = nlohmann::json::array();
  for (const auto& [t, s] : r.top_k) {
    nlohmann::json item = {{"token", t}, {"score", s}};
    if (vocab) item["text"] = vocab->display(t);
    top.push_back(item);
  }
  nlohmann::json scores = nlohmann::json::object();
  for (const auto& [t, s] : r.token_scores) scores[std::to_string(t)] = s;
  return {{"site", r.site.label()}, {"position", r.position}, {"token_scores", scores}, {"top_k", top}};
}

double verb_group_score(const ActivationCache* cache, int layer, int head, int position,
                        std::span<const int> group) {
  if (group.empty()) fail(ErrorCode::kInvalidArgument, "verb group is empty");
  const auto scores = direct_logit_scores(cache, ComponentSite::attn_head(layer, head), position);
  double total = 0.0;
  for (int t : group) {
    if (t < 0 || t >= static_cast<int>(scores.size())) {
      fail(ErrorCode::kIndexOutOfBounds, "token " + std::to_string(t));
    }
    total += scores[t];
  }
  return total;
}

nlohmann::json to_json(const HeadScoreTable& table, const std::string& model_fingerprint) {
  return {{"score_kind", to_string(table.kind)},
          {"protocol_params", table.protocol_params},
          {"n_layers", table.n_layers},
          {"n_heads", table.n_heads},
          {"values", table.values},
          {"model_fingerprint", model_fingerprint}};
}

std::vector<int> random_tokens(const Model& model, int length, Rng& rng) {
  const auto& vocab = model.vocab();
  const int V = model.config().vocab_size;
  std::vector<int> allowed;
  allowed.reserve(V);
  for (int t = 0; t < V; ++t) {
    if (!vocab.is_special(t)) allowed.push_back(t);
  }
  if (allowed.empty()) fail(ErrorCode::kInvalidArgument, "every vocabulary id is special");
  std::vector<int> out(length);
  for (auto& t : out) t = allowed[rng.uniform_index(allowed.size())];
  return out;
}

double prev_token_pattern_score(const ActivationCache& cache, int layer, int head) {
  const int P = cache.seq_len();
  double sum = 0.0;
  for (int i = 1; i < P; ++i) sum += cache.attn(layer, head, i, i - 1);
  return P > 1 ? sum / (P - 1) : 0.0;
}

double duplicate_pattern_score(const ActivationCache& cache, int layer, int head, int half_len) {
  double sum = 0.0;
  for (int i = half_len; i < 2 * half_len; ++i) sum += cache.attn(layer, head, i, i - half_len);
  return sum / half_len;
}

double induction_pattern_score(const ActivationCache& cache, int layer, int head, int half_len) {
  double sum = 0.0;
  for (int i = half_len; i < 2 * half_len; ++i) {
    sum += cache.attn(layer, head, i, i - half_len + 1);
  }
  return sum / half_len;
}

namespace {

template <typename Scorer>
HeadScoreTable random_token_table(const Model& model, const RandomTokenProtocol& protocol,
                                  HeadScoreKind kind, bool repeated, Scorer scorer) {
  const auto& c = model.config();
  const int seq_len = repeated ? 2 * protocol.length : protocol.length;
  if (seq_len > c.max_seq_len) {
    fail(ErrorCode::kSequenceTooLong, "protocol sequence length " + std::to_string(seq_len) +
                                          " exceeds max_seq_len");
  }
  if (protocol.n_samples < 1) fail(ErrorCode::kInvalidArgument, "n_samples must be >= 1");

  Rng rng(protocol.seed);
  std::vector<std::vector<int>> inputs(protocol.n_samples);
  for (auto& seq : inputs) {
    seq = random_tokens(model, protocol.length, rng);
    if (repeated) seq.insert(seq.end(), seq.begin(), seq.end());
  }

  const std::size_t LH = static_cast<std::size_t>(c.n_layers) * c.n_heads;
  std::vector<std::vector<double>> per_sample(inputs.size(), std::vector<double>(LH));
  parallel_for(inputs.size(), protocol.workers, [&](std::size_t s) {
    auto fwd = forward_capture(model, inputs[s]);
    for (int l = 0; l < c.n_layers; ++l)
      for (int h = 0; h < c.n_heads; ++h)
        per_sample[s][static_cast<std::size_t>(l) * c.n_heads + h] = scorer(*fwd.cache, l, h);
  });

  HeadScoreTable table;
  table.kind = kind;
  table.n_layers = c.n_layers;
  table.n_heads = c.n_heads;
  table.values.assign(LH, 0.0);
  for (const auto& sample : per_sample)
    for (std::size_t i = 0; i < LH; ++i) table.values[i] += sample[i];
  for (auto& v : table.values) v /= static_cast<double>(inputs.size());
  table.protocol_params = {{repeated ? "half_len" : "seq_len", protocol.length},
                           {"n_samples", protocol.n_samples},
                           {"seed", protocol.seed},
                           {"excluded_special_ids", model.vocab().special_ids}};
  return table;
}

}  // namespace

HeadScoreTable prev_token_score(const Model& model, const RandomTokenProtocol& protocol) {
  if (protocol.length < 2) fail(ErrorCode::kInvalidArgument, "seq_len must be >= 2");
  return random_token_table(model, protocol, HeadScoreKind::kPrevToken, false,
                            [](const ActivationCache& cache, int l, int h) {
                              return prev_token_pattern_score(cache, l, h);
                            });
}

HeadScoreTable duplicate_token_score(const Model& model, const RandomTokenProtocol& protocol) {
  if (protocol.length < 1) fail(ErrorCode::kInvalidArgument, "half_len must be >= 1");
  const int half = protocol.length;
  return random_token_table(model, protocol, HeadScoreKind::kDuplicateToken, true,
                            [half](const ActivationCache& cache, int l, int h) {
                              return duplicate_pattern_score(cache, l, h, half);
                            });
}

HeadScoreTable induction_score(const Model& model, const RandomTokenProtocol& protocol) {
  if (protocol.length < 2) fail(ErrorCode::kInvalidArgument, "half_len must be >= 2");
  const int half = protocol.length;
  return random_token_table(model, protocol, HeadScoreKind::kInduction, true,
                            [half](const ActivationCache& cache, int l, int h) {
                              return induction_pattern_score(cache, l, h, half);
                            });
}

int copy_probe_position(const ModelConfig& config) {
  return config.positional_scheme == PositionalScheme::kLearned ? config.max_seq_len / 2 : 0;
}

std::vector<float> copy_probe_vector(const Model& model, int token) {
  const auto& c = model.config();
  const auto& lw = model.weights().layers[0];
  auto e = embed_token(model, token, copy_probe_position(c));
  std::vector<float> normed(c.d_model), hidden(c.d_mlp);
  layer_norm(e, lw.ln2_w, lw.ln2_b, c.layernorm_epsilon, normed);
  for (int m = 0; m < c.d_mlp; ++m) {
    float acc = lw.b_in[m];
    for (int d = 0; d < c.d_model; ++d) acc += normed[d] * lw.W_in[static_cast<std::size_t>(d) * c.d_mlp + m];
    hidden[m] = gelu(acc, c.activation_fn);
  }
  for (int d = 0; d < c.d_model; ++d) {
    float acc = lw.b_out[d];
    for (int m = 0; m < c.d_mlp; ++m) acc += hidden[m] * lw.W_out[static_cast<std::size_t>(m) * c.d_model + d];
    e[d] += acc;
  }
  return e;
}

namespace {

// Fraction of probes whose own token lands in the head's top-k after the
// probe passes through ln1, the OV circuit, and the final layernorm.
double copy_score_for(const Model& model, int layer, int head,
                      const std::vector<std::vector<float>>& probes, std::span<const int> tokens,
                      int k) {
  const auto& c = model.config();
  const auto& lw = model.weights().layers[layer];
  const auto& w = model.weights();
  std::vector<float> normed(c.d_model), value(c.d_head), final_normed(c.d_model),
      logits(c.vocab_size);
  int hits = 0;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    layer_norm(probes[i], lw.ln1_w, lw.ln1_b, c.layernorm_epsilon, normed);
    const float* wv = lw.W_V.data() + static_cast<std::size_t>(head) * c.d_model * c.d_head;
    for (int e = 0; e < c.d_head; ++e) {
      float acc = lw.b_V[static_cast<std::size_t>(head) * c.d_head + e];
      for (int d = 0; d < c.d_model; ++d) acc += normed[d] * wv[static_cast<std::size_t>(d) * c.d_head + e];
      value[e] = acc;
    }
    const auto out = project_value(model, layer, head, value);
    layer_norm(out, w.ln_final_w, w.ln_final_b, c.layernorm_epsilon, final_normed);
    model.unembed_all(final_normed, logits);
    const auto top = top_k_scores(logits, k);
    if (std::any_of(top.begin(), top.end(), [&](const auto& p) { return p.first == tokens[i]; })) ++hits;
  }
  return probes.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(probes.size());
}

std::vector<std::vector<float>> build_probes(const Model& model, std::span<const int> tokens) {
  std::vector<std::vector<float>> probes;
  probes.reserve(tokens.size());
  for (int t : tokens) {
    if (t < 0 || t >= model.config().vocab_size) {
      fail(ErrorCode::kIndexOutOfBounds, "probe token " + std::to_string(t));
    }
    probes.push_back(copy_probe_vector(model, t));
  }
  return probes;
}

}  // namespace

double copy_score(const Model& model, int layer, int head, std::span<const int> probe_tokens, int k) {
  const auto& c = model.config();
  if (layer < 0 || layer >= c.n_layers) fail(ErrorCode::kIndexOutOfBounds, "layer " + std::to_string(layer));
  if (head < 0 || head >= c.n_heads) fail(ErrorCode::kIndexOutOfBounds, "head " + std::to_string(head));
  if (k < 1) fail(ErrorCode::kInvalidArgument, "k must be >= 1");
  const auto probes = build_probes(model, probe_tokens);
  return copy_score_for(model, layer, head, probes, probe_tokens, k);
}

HeadScoreTable copy_score_table(const Model& model, std::span<const int> probe_tokens, int k,
                                int workers) {
  const auto& c = model.config();
  if (k < 1) fail(ErrorCode::kInvalidArgument, "k must be >= 1");
  const auto probes = build_probes(model, probe_tokens);
  HeadScoreTable table;
  table.kind = HeadScoreKind::kCopy;
  table.n_layers = c.n_layers;
  table.n_heads = c.n_heads;
  table.values.assign(static_cast<std::size_t>(c.n_layers) * c.n_heads, 0.0);
  parallel_for(table.values.size(), workers, [&](std::size_t i) {
    table.values[i] = copy_score_for(model, static_cast<int>(i) / c.n_heads,
                                     static_cast<int>(i) % c.n_heads, probes, probe_tokens, k);
  });
  table.protocol_params = {{"k", k},
                           {"probe_tokens", std::vector<int>(probe_tokens.begin(), probe_tokens.end())},
                           {"probe", "embed+pos@" + std::to_string(copy_probe_position(c)) +
                                         " -> block0 ln2+ffn (residual) -> ln1 -> OV -> ln_final"}};
  return table;
}

nlohmann::json to_json(const SInhibitionReport& r) {
  nlohmann::json movers = nlohmann::json::array();
  auto pair_json = [](const std::pair<double, double>& p) {
    return nlohmann::json{{"baseline", p.first}, {"ablated", p.second}, {"delta", p.second - p.first}};
  };
  for (const auto& m : r.movers) {
    nlohmann::json attn = nlohmann::json::object();
    for (const auto& [role, p] : m.attention) attn[role] = pair_json(p);
    movers.push_back({{"mover", m.mover.label()},
                      {"attention", attn},
                      {"io_score", pair_json(m.io_score)},
                      {"s_score", pair_json(m.s_score)},
                      {"logit_diff", pair_json(m.logit_diff)}});
  }
  return {{"candidate", r.candidate.label()}, {"n", r.n}, {"movers", movers}};
}

SInhibitionReport s_inhibition_effect(const Model& model, std::span<const TaskExample> examples,
                                      HeadRef candidate, std::span<const HeadRef> movers,
                                      int workers) {
  const auto& c = model.config();
  if (examples.empty()) fail(ErrorCode::kEmptyDataset, "s_inhibition_effect needs examples");
  if (candidate.layer < 0 || candidate.layer >= c.n_layers || candidate.head < 0 ||
      candidate.head >= c.n_heads) {
    fail(ErrorCode::kInvalidSite, "candidate " + candidate.label());
  }
  for (const auto& m : movers) {
    if (m.layer < 0 || m.layer >= c.n_layers || m.head < 0 || m.head >= c.n_heads) {
      fail(ErrorCode::kInvalidSite, "mover " + m.label());
    }
    if (m.layer <= candidate.layer) {
      fail(ErrorCode::kLayerOrderViolation,
           "mover " + m.label() + " is not strictly after candidate " + candidate.label());
    }
  }
  InterventionPlan ablate;
  ablate.zero(Site{candidate.layer, Component::kHeadOut, candidate.head, std::nullopt});

  static const char* kRoles[] = {"S1", "S2", "IO"};
  const std::size_t n = examples.size(), M = movers.size();
  // [example][mover][metric]: attn S1, S2, IO, io score, s score; baseline then ablated
  std::vector<std::vector<std::array<double, 10>>> values(n, std::vector<std::array<double, 10>>(M));
  parallel_for(n, workers, [&](std::size_t i) {
    const auto& e = examples[i];
    e.validate(&c);
    if (!e.distractor) fail(ErrorCode::kInvalidDataset, e.id + ": needs a distractor (S token)");
    const int end = e.end();
    for (int variant = 0; variant < 2; ++variant) {
      auto fwd = forward_capture(model, e.tokens, variant ? &ablate : nullptr);
      for (std::size_t m = 0; m < M; ++m) {
        auto& out = values[i][m];
        for (int r = 0; r < 3; ++r) {
          out[variant * 5 + r] = fwd.cache->attn(movers[m].layer, movers[m].head, end, e.role(kRoles[r]));
        }
        const auto scores = direct_logit_scores(fwd.cache.get(),
                                                ComponentSite::attn_head(movers[m].layer, movers[m].head), end);
        out[variant * 5 + 3] = scores[e.answer];
        out[variant * 5 + 4] = scores[*e.distractor];
      }
    }
  });

  SInhibitionReport report;
  report.candidate = candidate;
  report.n = static_cast<int>(n);
  for (std::size_t m = 0; m < M; ++m) {
    std::array<double, 10> mean{};
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 10; ++k) mean[k] += values[i][m][k];
    for (auto& v : mean) v /= static_cast<double>(n);
    MoverEffect eff;
    eff.mover = movers[m];
    for (int r = 0; r < 3; ++r) eff.attention[kRoles[r]] = {mean[r], mean[5 + r]};
    eff.io_score = {mean[3], mean[8]};
    eff.s_score = {mean[4], mean[9]};
    eff.logit_diff = {mean[3] - mean[4], mean[8] - mean[9]};
    report.movers.push_back(eff);
  }
  return report;
}

}  // namespace circuitscope
