#include "circuitscope/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>

#include "circuitscope/attribution.hpp"
#include "circuitscope/error.hpp"
#include "circuitscope/flow.hpp"
#include "circuitscope/forward.hpp"
#include "circuitscope/reference.hpp"
#include "circuitscope/rng.hpp"

namespace circuitscope {

ModelConfig tiny_config(PositionalScheme scheme, int n_layers, int n_heads) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.d_head = 4;
  c.d_model = n_heads * c.d_head;
  c.d_mlp = 4 * c.d_model;
  c.vocab_size = 32;
  c.max_seq_len = 16;
  c.positional_scheme = scheme;
  return c;
}

std::vector<TinyModel> builtin_models(std::uint64_t seed) {
  std::vector<TinyModel> out;
  auto add = [&](std::string name, ModelConfig c, bool embed_ln, std::uint64_t s) {
    RandomInit init;
    init.embed_ln = embed_ln;
    out.push_back({std::move(name), Model::load(make_random_archive(c, s, init), c)});
  };
  add("learned-2L", tiny_config(PositionalScheme::kLearned, 2), false, seed);

  auto alibi = tiny_config(PositionalScheme::kAlibi, 2, 3);
  alibi.activation_fn = Activation::kGeluExact;
  add("alibi-2L", alibi, true, seed + 1);

  auto tied = tiny_config(PositionalScheme::kLearned, 1);
  tied.tie_unembedding = true;
  add("learned-1L-tied", tied, false, seed + 2);
  return out;
}

std::vector<TaskExample> synthetic_examples(const Model& model, int n, int length,
                                            std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TaskExample> out;
  for (int i = 0; i < n; ++i) {
    TaskExample e;
    e.id = "synthetic-" + std::to_string(i);
    e.tokens = random_tokens(model, length, rng);
    auto draw = [&] { return random_tokens(model, 1, rng).front(); };
    auto corrupted = e.tokens;
    const int pos = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(length - 1)));
    while (corrupted[pos] == e.tokens[pos]) corrupted[pos] = draw();
    e.corrupted_tokens = corrupted;
    e.roles = {{"IO", 0}, {"S1", 1}, {"S2", pos}, {"END", length - 1}};
    e.answer = draw();
    do {
      e.distractor = draw();
    } while (*e.distractor == e.answer);
    out.push_back(std::move(e));
  }
  return out;
}

bool SelftestReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
}

nlohmann::json to_json(const SelftestReport& r) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : r.checks) {
    checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  }
  return {{"passed", r.passed()}, {"seconds", r.seconds}, {"checks", checks}};
}

namespace {

constexpr int kSeqLen = 8;

// Largest observed violation against a tolerance.
struct Worst {
  explicit Worst(double tolerance) : tol(tolerance) {}

  double tol;
  double value = 0.0;
  std::string where;

  void see(double v, const std::string& at) {
    if (!(v <= value)) {  // NaN sticks
      value = v;
      where = at;
    }
  }
  bool ok() const { return value <= tol; }
  std::string detail() const {
    std::ostringstream s;
    s << "max " << value << " (tol " << tol << ")";
    if (!where.empty()) s << " at " << where;
    return s.str();
  }
};

double rel_diff(std::span<const float> a, std::span<const double> b) {
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::fabs(a[i] - b[i]));
    norm = std::max(norm, std::fabs(b[i]));
  }
  return diff / std::max(1.0, norm);
}

std::string at(const std::string& model, int l, int p) {
  std::string s = model;
  if (l >= 0) s += " L" + std::to_string(l);
  if (p >= 0) s += " p" + std::to_string(p);
  return s;
}

using Check = std::function<SelftestCheck()>;

SelftestCheck residual_additivity(const std::vector<TinyModel>& models) {
  Worst w{1e-4};
  for (const auto& m : models) {
    const auto& c = m.model.config();
    for (const auto& ex : synthetic_examples(m.model, 3, kSeqLen, 11)) {
      auto run = forward_capture(m.model, ex.tokens);
      const auto& cache = *run.cache;
      for (int l = 0; l < c.n_layers; ++l) {
        for (int p = 0; p < kSeqLen; ++p) {
          std::vector<double> mid(c.d_model), post(c.d_model);
          for (int d = 0; d < c.d_model; ++d) {
            mid[d] = cache.resid_pre(l, p)[d];
            for (int h = 0; h < c.n_heads; ++h) mid[d] += cache.head_out(l, h, p)[d];
            post[d] = cache.resid_mid(l, p)[d] + cache.ffn_out(l, p)[d];
          }
          w.see(rel_diff(cache.resid_mid(l, p), mid), at(m.name, l, p) + " mid");
          w.see(rel_diff(cache.resid_post(l, p), post), at(m.name, l, p) + " post");
        }
      }
    }
  }
  return {"residual_additivity", w.ok(), w.detail()};
}

SelftestCheck attention_stochasticity(const std::vector<TinyModel>& models) {
  Worst w{1e-5};
  for (const auto& m : models) {
    const auto& c = m.model.config();
    for (const auto& ex : synthetic_examples(m.model, 3, kSeqLen, 12)) {
      auto run = forward_capture(m.model, ex.tokens);
      for (int l = 0; l < c.n_layers; ++l) {
        for (int h = 0; h < c.n_heads; ++h) {
          for (int i = 0; i < kSeqLen; ++i) {
            double sum = 0.0;
            for (int j = 0; j < kSeqLen; ++j) {
              const float a = run.cache->attn(l, h, i, j);
              if (j > i) w.see(std::fabs(a), at(m.name, l, i) + " masked");
              if (a < 0.0f) w.see(-a, at(m.name, l, i) + " negative");
              sum += a;
            }
            w.see(std::fabs(sum - 1.0), at(m.name, l, i) + " h" + std::to_string(h));
          }
        }
      }
    }
  }
  return {"attention_stochasticity", w.ok(), w.detail()};
}

SelftestCheck forward_oracle(const std::vector<TinyModel>& models) {
  Worst w{1e-4};
  for (const auto& m : models) {
    for (const auto& ex : synthetic_examples(m.model, 2, kSeqLen, 13)) {
      auto run = forward(m.model, ex.tokens);
      const auto ref = reference::run(m.model, ex.tokens);
      for (int p = 0; p < kSeqLen; ++p) w.see(rel_diff(run.logits_at(p), ref.logits[p]), at(m.name, -1, p));
    }
  }
  return {"forward_matches_reference", w.ok(), w.detail()};
}

SelftestCheck dla_completeness(const std::vector<TinyModel>& models) {
  Worst w{1e-3};
  for (const auto& m : models) {
    const auto& c = m.model.config();
    const auto bias = layernorm_bias_scores(m.model);
    for (const auto& ex : synthetic_examples(m.model, 2, kSeqLen, 14)) {
      auto run = forward_capture(m.model, ex.tokens);
      for (int p = 0; p < kSeqLen; ++p) {
        std::vector<double> total(bias.begin(), bias.end());
        auto accumulate = [&](const ComponentSite& site) {
          const auto s = direct_logit_scores(run.cache.get(), site, p);
          for (std::size_t t = 0; t < s.size(); ++t) total[t] += s[t];
        };
        accumulate(ComponentSite::embed());
        for (int l = 0; l < c.n_layers; ++l) {
          for (int h = 0; h < c.n_heads; ++h) accumulate(ComponentSite::attn_head(l, h));
          accumulate(ComponentSite::ffn(l));
        }
        const auto logits = run.logits_at(p);
        for (std::size_t t = 0; t < total.size(); ++t) {
          w.see(std::fabs(total[t] - logits[t]), at(m.name, -1, p) + " token " + std::to_string(t));
        }
      }
    }
  }
  return {"dla_completeness", w.ok(), w.detail()};
}

SelftestCheck dla_oracle(const std::vector<TinyModel>& models) {
  Worst w{1e-4};
  for (const auto& m : models) {
    const auto& c = m.model.config();
    const auto ex = synthetic_examples(m.model, 1, kSeqLen, 15).front();
    auto run = forward_capture(m.model, ex.tokens);
    const int p = kSeqLen - 1;
    std::vector<ComponentSite> sites{ComponentSite::embed()};
    for (int l = 0; l < c.n_layers; ++l) {
      for (int h = 0; h < c.n_heads; ++h) sites.push_back(ComponentSite::attn_head(l, h));
      sites.push_back(ComponentSite::ffn(l));
    }
    for (const auto& site : sites) {
      const auto got = direct_logit_scores(run.cache.get(), site, p);
      const auto want = reference::direct_logit_scores(m.model, ex.tokens, site, p);
      w.see(rel_diff(got, want), m.name + " " + site.label());
    }
  }
  return {"dla_matches_reference", w.ok(), w.detail()};
}

SelftestCheck patch_noop(const std::vector<TinyModel>& models) {
  Worst w{1e-5};
  for (const auto& m : models) {
    const auto& c = m.model.config();
    for (const auto& ex : synthetic_examples(m.model, 2, kSeqLen, 16)) {
      auto pair = make_contrast_pair(ex);
      pair.corrupted = pair.clean;
      const auto runs = run_pair(m.model, pair);
      for (int l = 0; l < c.n_layers; ++l) {
        for (int h = 0; h < c.n_heads; ++h) {
          const Site s{l, Component::kHeadOut, h, std::nullopt};
          w.see(std::fabs(activation_patch(m.model, pair, runs, s)), at(m.name, l, -1) + " act h" + std::to_string(h));
          w.see(std::fabs(path_patch(m.model, pair, runs, s, Receiver{}, FreezePolicy::kFreezeAttnRecomputeMlp)),
                at(m.name, l, -1) + " path h" + std::to_string(h));
        }
        const Site f{l, Component::kFfnOut, std::nullopt, std::nullopt};
        w.see(std::fabs(activation_patch(m.model, pair, runs, f)), at(m.name, l, -1) + " ffn");
        const Site r{l, Component::kResidPre, std::nullopt, std::nullopt};
        w.see(std::fabs(activation_patch(m.model, pair, runs, r)), at(m.name, l, -1) + " resid");
      }
    }
  }
  return {"patch_noop", w.ok(), w.detail()};
}

SelftestCheck full_patch_recovery(const std::vector<TinyModel>& models) {
  Worst w{1e-4};
  for (const auto& m : models) {
    const auto& c = m.model.config();
    for (const auto& ex : synthetic_examples(m.model, 3, kSeqLen, 17)) {
      const auto pair = make_contrast_pair(ex);
      const auto runs = run_pair(m.model, pair);
      InterventionPlan plan;
      plan.patch(Site{0, Component::kResidPre, std::nullopt, std::nullopt}, runs.corrupted);
      for (int l = 0; l < c.n_layers; ++l) {
        for (int h = 0; h < c.n_heads; ++h) plan.patch(Site{l, Component::kHeadOut, h, std::nullopt}, runs.corrupted);
        plan.patch(Site{l, Component::kFfnOut, std::nullopt, std::nullopt}, runs.corrupted);
      }
      const auto patched = forward(m.model, pair.clean, &plan);
      const double got = pair.metric.evaluate(patched.logits_at(pair.end()));
      w.see(std::fabs(got - runs.corrupted_metric), m.name + " " + ex.id);
    }
  }
  return {"full_patch_recovery", w.ok(), w.detail()};
}

SelftestCheck activation_patch_oracle(const std::vector<TinyModel>& models) {
  Worst w{1e-4};
  for (const auto& m : models) {
    const auto& c = m.model.config();
    const auto pair = make_contrast_pair(synthetic_examples(m.model, 1, kSeqLen, 18).front());
    const auto runs = run_pair(m.model, pair);
    for (int l = 0; l < c.n_layers; ++l) {
      std::vector<Site> sites{Site{l, Component::kFfnOut, std::nullopt, std::nullopt}};
      for (int h = 0; h < c.n_heads; ++h) sites.push_back(Site{l, Component::kHeadOut, h, std::nullopt});
      for (const auto& s : sites) {
        const double got = activation_patch(m.model, pair, runs, s);
        const double want = reference::activation_patch(m.model, pair, s);
        w.see(std::fabs(got - want), at(m.name, l, -1) + " " + to_string(s.component));
      }
    }
  }
  return {"activation_patch_oracle", w.ok(), w.detail()};
}

SelftestCheck path_patch_oracle(const std::vector<TinyModel>& models) {
  Worst w{1e-4};
  int compared = 0;
  for (const auto& m : models) {
    const auto& c = m.model.config();
    for (const auto& ex : synthetic_examples(m.model, 2, kSeqLen, 19)) {
      const auto pair = make_contrast_pair(ex);
      const auto runs = run_pair(m.model, pair);
      for (auto freeze : {FreezePolicy::kFreezeAll, FreezePolicy::kFreezeAttnRecomputeMlp}) {
        for (int l = 0; l < c.n_layers; ++l) {
          std::vector<Site> senders{Site{l, Component::kFfnOut, std::nullopt, std::nullopt}};
          for (int h = 0; h < c.n_heads; ++h) senders.push_back(Site{l, Component::kHeadOut, h, std::nullopt});
          std::vector<Receiver> receivers{Receiver{}};
          for (int rl = l + 1; rl < c.n_layers; ++rl) {
            for (int rh = 0; rh < c.n_heads; ++rh) receivers.push_back(Receiver{{HeadRef{rl, rh}}});
            receivers.push_back(Receiver{{HeadRef{rl, 0}, HeadRef{rl, c.n_heads - 1}}});
          }
          for (const auto& s : senders) {
            for (const auto& r : receivers) {
              const double got = path_patch(m.model, pair, runs, s, r, freeze);
              const double want = reference::path_patch(m.model, pair, s, r, freeze);
              ++compared;
              w.see(std::fabs(got - want), at(m.name, l, -1) + " " + to_string(s.component) +
                                               (s.head ? std::to_string(*s.head) : "") + " -> " +
                                               r.label() + " " + to_string(freeze));
            }
          }
        }
      }
      // One layer: sibling heads do not read the sender, so with the FFN
      // recomputed path patching equals activation patching.
      if (c.n_layers == 1) {
        for (int h = 0; h < c.n_heads; ++h) {
          const Site s{0, Component::kHeadOut, h, std::nullopt};
          w.see(std::fabs(path_patch(m.model, pair, runs, s, Receiver{}, FreezePolicy::kFreezeAttnRecomputeMlp) -
                          activation_patch(m.model, pair, runs, s)),
                m.name + " 1-layer equivalence h" + std::to_string(h));
        }
      }
    }
  }
  auto r = SelftestCheck{"path_patch_oracle", w.ok(), w.detail()};
  r.detail += ", " + std::to_string(compared) + " comparisons";
  return r;
}

SelftestCheck flow_signed_sum(const std::vector<TinyModel>& models) {
  Worst w{1e-4};
  for (const auto& m : models) {
    const auto& c = m.model.config();
    for (const auto& ex : synthetic_examples(m.model, 2, kSeqLen, 20)) {
      auto run = forward_capture(m.model, ex.tokens);
      for (int l = 0; l < c.n_layers; ++l) {
        for (int p = 0; p < kSeqLen; ++p) {
          const auto rec = residual_contributions(run.cache.get(), l, p);
          if (rec.degenerate) continue;
          double sum = 0.0;
          for (const auto& [id, v] : rec.signed_terms) sum += v;
          w.see(std::fabs(sum - 1.0), at(m.name, l, p));
        }
      }
    }
  }
  return {"flow_signed_sum", w.ok(), w.detail()};
}

SelftestCheck flow_normalized_sum(const std::vector<TinyModel>& models) {
  Worst w{1e-6};
  for (const auto& m : models) {
    const auto& c = m.model.config();
    for (const auto& ex : synthetic_examples(m.model, 2, kSeqLen, 21)) {
      auto run = forward_capture(m.model, ex.tokens);
      for (int l = 0; l < c.n_layers; ++l) {
        for (int p = 0; p < kSeqLen; ++p) {
          const auto rec = residual_contributions(run.cache.get(), l, p);
          if (rec.degenerate) continue;
          double sum = 0.0;
          for (const auto& [id, v] : rec.normalized) {
            if (v < 0.0) w.see(-v, at(m.name, l, p) + " negative");
            sum += v;
          }
          w.see(std::fabs(sum - 1.0), at(m.name, l, p));
        }
      }
    }
  }
  return {"flow_normalized_sum", w.ok(), w.detail()};
}

SelftestCheck flow_oracle(const std::vector<TinyModel>& models) {
  int mismatches = 0, compared = 0;
  std::string where;
  for (const auto& m : models) {
    for (const auto& ex : synthetic_examples(m.model, 2, kSeqLen, 22)) {
      auto run = forward_capture(m.model, ex.tokens);
      for (double tau : {0.0, 0.03, 0.1, 0.3}) {
        const auto g = build_flow_graph(run.cache.get(), tau, ex.end());
        const auto want = reference::flow_nodes(m.model, ex.tokens, tau, ex.end());
        ++compared;
        if (std::set<FlowNode>(g.nodes.begin(), g.nodes.end()) != want) {
          ++mismatches;
          where = m.name + " tau " + std::to_string(tau);
        }
      }
    }
  }
  std::string detail = std::to_string(mismatches) + "/" + std::to_string(compared) + " node sets differ";
  if (!where.empty()) detail += " (last: " + where + ")";
  return {"flow_graph_oracle", mismatches == 0, detail};
}

SelftestCheck tau_monotonicity(const std::vector<TinyModel>& models, int workers) {
  const std::vector<double> taus{0.0, 0.01, 0.03, 0.05, 0.1, 0.2, 0.4, 0.7, 1.0};
  int violations = 0;
  std::string where;
  for (const auto& m : models) {
    const auto examples = synthetic_examples(m.model, 6, kSeqLen, 23);
    for (const auto& ex : examples) {
      auto run = forward_capture(m.model, ex.tokens);
      std::vector<FlowNode> prev;
      for (std::size_t i = 0; i < taus.size(); ++i) {
        const auto g = build_flow_graph(run.cache.get(), taus[i], ex.end());
        if (i > 0 && !std::includes(prev.begin(), prev.end(), g.nodes.begin(), g.nodes.end())) {
          ++violations;
          where = m.name + " " + ex.id + " graph at tau " + std::to_string(taus[i]);
        }
        prev = g.nodes;
      }
    }
    std::vector<double> prev_freq;
    for (double tau : taus) {
      const auto f = activation_frequency(m.model, examples, tau, workers);
      for (std::size_t i = 0; i < prev_freq.size(); ++i) {
        if (f.values[i] > prev_freq[i]) {
          ++violations;
          where = m.name + " frequency at tau " + std::to_string(tau);
        }
      }
      prev_freq = f.values;
    }
  }
  std::string detail = std::to_string(violations) + " violations";
  if (!where.empty()) detail += " (last: " + where + ")";
  return {"tau_monotonicity", violations == 0, detail};
}

SelftestCheck determinism(const std::vector<TinyModel>& models, int workers) {
  auto snapshot = [&](const Model& model, int w) {
    const auto examples = synthetic_examples(model, 4, kSeqLen, 24);
    const auto pairs = make_contrast_pairs(examples);
    nlohmann::json j;
    SweepOptions opts;
    opts.workers = w;
    j["sweep"] = to_json(patch_sweep(model, pairs, opts));
    j["frequency"] = to_json(activation_frequency(model, examples, 0.03, w));
    j["eval"] = to_json(evaluate(model, examples, nullptr, w));
    RandomTokenProtocol proto;
    proto.length = 6;
    proto.n_samples = 3;
    proto.seed = 7;
    proto.workers = w;
    j["induction"] = to_json(induction_score(model, proto), model.fingerprint());
    return j.dump();
  };
  int differences = 0;
  std::string where;
  for (const auto& m : models) {
    const auto first = snapshot(m.model, 1);
    for (int w : {1, std::max(2, workers)}) {
      if (snapshot(m.model, w) != first) {
        ++differences;
        where = m.name + " workers " + std::to_string(w);
      }
    }
    const auto again = Model::load(make_random_archive(m.model.config(), 99), m.model.config());
    const auto again2 = Model::load(make_random_archive(m.model.config(), 99), m.model.config());
    if (again.fingerprint() != again2.fingerprint()) {
      ++differences;
      where = m.name + " random init";
    }
  }
  std::string detail = std::to_string(differences) + " differing runs";
  if (!where.empty()) detail += " (last: " + where + ")";
  return {"determinism", differences == 0, detail};
}

}  // namespace

SelftestReport run_selftest(std::uint64_t seed, int workers) {
  const auto start = std::chrono::steady_clock::now();
  const auto models = builtin_models(seed);
  const std::vector<Check> checks{
      [&] { return residual_additivity(models); },
      [&] { return attention_stochasticity(models); },
      [&] { return forward_oracle(models); },
      [&] { return dla_completeness(models); },
      [&] { return dla_oracle(models); },
      [&] { return patch_noop(models); },
      [&] { return full_patch_recovery(models); },
      [&] { return activation_patch_oracle(models); },
      [&] { return path_patch_oracle(models); },
      [&] { return flow_signed_sum(models); },
      [&] { return flow_normalized_sum(models); },
      [&] { return flow_oracle(models); },
      [&] { return tau_monotonicity(models, workers); },
      [&] { return determinism(models, workers); },
  };
  SelftestReport report;
  for (const auto& check : checks) {
    try {
      report.checks.push_back(check());
    } catch (const std::exception& e) {
      report.checks.push_back({"(check threw)", false, e.what()});
    }
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace circuitscope
