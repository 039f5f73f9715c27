#include "circuitscope/reference.hpp"

#include <algorithm>
#include <cmath>

#include "circuitscope/error.hpp"

namespace circuitscope::reference {

namespace {

Rows zeros(int rows, int cols) { return Rows(rows, std::vector<double>(cols, 0.0)); }

std::vector<double> norm(std::span<const double> x, const std::vector<float>& w,
                         const std::vector<float>& b, double eps) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double scale = std::sqrt(var + eps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / scale * w[i] + b[i];
  return out;
}

double activation(double x, Activation kind) {
  if (kind == Activation::kGeluExact) return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double k = std::sqrt(2.0 / 3.14159265358979323846);
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

double unembed_weight(const Model& model, int d, int t) {
  const auto& c = model.config();
  const auto& w = model.weights();
  if (w.W_U.empty()) return w.W_E[static_cast<std::size_t>(t) * c.d_model + d];
  return w.W_U[static_cast<std::size_t>(d) * c.vocab_size + t];
}

Rows add(const Rows& a, const Rows& b) {
  Rows out = a;
  for (std::size_t p = 0; p < out.size(); ++p)
    for (std::size_t d = 0; d < out[p].size(); ++d) out[p][d] += b[p][d];
  return out;
}

struct HeadPass {
  Rows out, values, pattern;
};

HeadPass head_pass(const Model& model, int layer, int head, const Rows& resid) {
  const auto& c = model.config();
  const auto& lw = model.weights().layers[layer];
  const int P = static_cast<int>(resid.size()), D = c.d_model, Dh = c.d_head, H = c.n_heads;
  Rows q = zeros(P, Dh), k = zeros(P, Dh), v = zeros(P, Dh);
  for (int p = 0; p < P; ++p) {
    const auto x = norm(resid[p], lw.ln1_w, lw.ln1_b, c.layernorm_epsilon);
    for (int e = 0; e < Dh; ++e) {
      const std::size_t bi = static_cast<std::size_t>(head) * Dh + e;
      double sq = lw.b_Q[bi], sk = lw.b_K[bi], sv = lw.b_V[bi];
      for (int d = 0; d < D; ++d) {
        const std::size_t wi = (static_cast<std::size_t>(head) * D + d) * Dh + e;
        sq += x[d] * lw.W_Q[wi];
        sk += x[d] * lw.W_K[wi];
        sv += x[d] * lw.W_V[wi];
      }
      q[p][e] = sq;
      k[p][e] = sk;
      v[p][e] = sv;
    }
  }
  const auto slopes = c.positional_scheme == PositionalScheme::kAlibi ? alibi_slopes(H)
                                                                      : std::vector<double>{};
  HeadPass r{zeros(P, D), v, zeros(P, P)};
  for (int i = 0; i < P; ++i) {
    std::vector<double> s(i + 1);
    for (int j = 0; j <= i; ++j) {
      double dotp = 0.0;
      for (int e = 0; e < Dh; ++e) dotp += q[i][e] * k[j][e];
      s[j] = dotp / std::sqrt(static_cast<double>(Dh));
      if (!slopes.empty()) s[j] -= slopes[head] * (i - j);
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double total = 0.0;
    for (double& x : s) total += (x = std::exp(x - mx));
    for (int j = 0; j <= i; ++j) r.pattern[i][j] = s[j] / total;
    std::vector<double> z(Dh, 0.0);
    for (int j = 0; j <= i; ++j)
      for (int e = 0; e < Dh; ++e) z[e] += r.pattern[i][j] * v[j][e];
    for (int d = 0; d < D; ++d) {
      double acc = lw.b_O[d] / H;
      for (int e = 0; e < Dh; ++e) acc += z[e] * lw.W_O[(static_cast<std::size_t>(head) * Dh + e) * D + d];
      r.out[i][d] = acc;
    }
  }
  return r;
}

}  // namespace

std::vector<double> alibi_slopes(int n) {
  int closest = 1;
  while (closest * 2 <= n) closest *= 2;
  std::vector<double> s;
  for (int i = 1; i <= closest; ++i) s.push_back(std::pow(2.0, -8.0 * i / closest));
  for (int i = 0; closest + i < n; ++i) s.push_back(std::pow(2.0, -4.0 * (2 * i + 1) / closest));
  return s;
}

Rows head_forward(const Model& model, int layer, int head, const Rows& resid) {
  return head_pass(model, layer, head, resid).out;
}

Rows ffn_forward(const Model& model, int layer, const Rows& resid) {
  const auto& c = model.config();
  const auto& lw = model.weights().layers[layer];
  const int P = static_cast<int>(resid.size()), D = c.d_model, M = c.d_mlp;
  Rows out = zeros(P, D);
  for (int p = 0; p < P; ++p) {
    const auto x = norm(resid[p], lw.ln2_w, lw.ln2_b, c.layernorm_epsilon);
    std::vector<double> hidden(M);
    for (int m = 0; m < M; ++m) {
      double acc = lw.b_in[m];
      for (int d = 0; d < D; ++d) acc += x[d] * lw.W_in[static_cast<std::size_t>(d) * M + m];
      hidden[m] = activation(acc, c.activation_fn);
    }
    for (int d = 0; d < D; ++d) {
      double acc = lw.b_out[d];
      for (int m = 0; m < M; ++m) acc += hidden[m] * lw.W_out[static_cast<std::size_t>(m) * D + d];
      out[p][d] = acc;
    }
  }
  return out;
}

std::vector<double> logits_of(const Model& model, std::span<const double> resid) {
  const auto& c = model.config();
  const auto& w = model.weights();
  const auto x = norm(resid, w.ln_final_w, w.ln_final_b, c.layernorm_epsilon);
  std::vector<double> out(c.vocab_size, 0.0);
  for (int t = 0; t < c.vocab_size; ++t)
    for (int d = 0; d < c.d_model; ++d) out[t] += x[d] * unembed_weight(model, d, t);
  return out;
}

namespace {

std::vector<double> embed_vector(const Model& model, int token, int pos) {
  const auto& c = model.config();
  const auto& w = model.weights();
  std::vector<double> e(c.d_model);
  for (int d = 0; d < c.d_model; ++d) {
    e[d] = w.W_E[static_cast<std::size_t>(token) * c.d_model + d];
    if (c.positional_scheme == PositionalScheme::kLearned) {
      e[d] += w.W_pos[static_cast<std::size_t>(pos) * c.d_model + d];
    }
  }
  if (w.has_embed_ln()) e = norm(e, w.embed_ln_w, w.embed_ln_b, c.layernorm_epsilon);
  return e;
}

}  // namespace

Trace run(const Model& model, std::span<const int> tokens, const Overrides& overrides) {
  const auto& c = model.config();
  const int P = static_cast<int>(tokens.size());
  Trace t;
  for (int p = 0; p < P; ++p) t.embed.push_back(embed_vector(model, tokens[p], p));
  Rows x = t.embed;
  t.heads.resize(c.n_layers);
  t.values.resize(c.n_layers);
  t.patterns.resize(c.n_layers);
  for (int l = 0; l < c.n_layers; ++l) {
    Rows mid = x;
    for (int h = 0; h < c.n_heads; ++h) {
      auto pass = head_pass(model, l, h, x);
      if (auto it = overrides.heads.find({l, h}); it != overrides.heads.end()) pass.out = it->second;
      mid = add(mid, pass.out);
      t.heads[l].push_back(std::move(pass.out));
      t.values[l].push_back(std::move(pass.values));
      t.patterns[l].push_back(std::move(pass.pattern));
    }
    Rows f = ffn_forward(model, l, mid);
    if (auto it = overrides.ffn.find(l); it != overrides.ffn.end()) f = it->second;
    x = add(mid, f);
    t.ffn.push_back(std::move(f));
  }
  t.final_resid = x;
  for (int p = 0; p < P; ++p) t.logits.push_back(logits_of(model, x[p]));
  return t;
}

Rows resid_pre(const Trace& t, int layer) {
  Rows x = t.embed;
  for (int l = 0; l < layer; ++l) {
    for (const auto& h : t.heads[l]) x = add(x, h);
    x = add(x, t.ffn[l]);
  }
  return x;
}

Rows resid_post(const Trace& t, int layer) { return resid_pre(t, layer + 1); }

double metric_of(const Metric& metric, std::span<const double> logits) {
  std::vector<float> f(logits.begin(), logits.end());
  return metric.evaluate(f);
}

namespace {

void require_whole_site(const Site& site) {
  if (site.positions) fail(ErrorCode::kInvalidSite, "reference oracle patches whole sites only");
  if (site.component == Component::kResidPre) fail(ErrorCode::kInvalidSite, "reference oracle patches outputs only");
}

}  // namespace

double activation_patch(const Model& model, const ContrastPair& pair, const Site& site) {
  require_whole_site(site);
  const auto clean = run(model, pair.clean);
  const auto corrupted = run(model, pair.corrupted);
  Overrides o;
  if (site.component == Component::kFfnOut) {
    o.ffn[site.layer] = corrupted.ffn[site.layer];
  } else {
    for (int h = 0; h < model.config().n_heads; ++h) {
      if (!site.head || *site.head == h) o.heads[{site.layer, h}] = corrupted.heads[site.layer][h];
    }
  }
  const auto patched = run(model, pair.clean, o);
  const int e = pair.end();
  return metric_of(pair.metric, patched.logits[e]) - metric_of(pair.metric, clean.logits[e]);
}

double path_patch(const Model& model, const ContrastPair& pair, const Site& sender,
                  const Receiver& receiver, FreezePolicy freeze) {
  require_whole_site(sender);
  if (sender.component == Component::kHeadOut && !sender.head) {
    fail(ErrorCode::kInvalidSite, "reference oracle needs a single sender head");
  }
  const auto& c = model.config();
  const auto clean = run(model, pair.clean);
  const auto corrupted = run(model, pair.corrupted);
  const int e = pair.end();
  const double base = metric_of(pair.metric, clean.logits[e]);

  auto is_sender_head = [&](int l, int h) {
    return sender.component == Component::kHeadOut && sender.layer == l && *sender.head == h;
  };
  auto is_receiver = [&](int l, int h) {
    return std::find(receiver.heads.begin(), receiver.heads.end(), HeadRef{l, h}) != receiver.heads.end();
  };

  // Graph state: every node starts at its clean output.
  Trace g = clean;
  if (sender.component == Component::kFfnOut) {
    g.ffn[sender.layer] = corrupted.ffn[sender.layer];
  } else {
    g.heads[sender.layer][*sender.head] = corrupted.heads[sender.layer][*sender.head];
  }
  for (int l = 0; l < c.n_layers; ++l) {
    const Rows pre = resid_pre(g, l);
    for (int h = 0; h < c.n_heads; ++h) {
      if (is_receiver(l, h) && !is_sender_head(l, h)) g.heads[l][h] = head_forward(model, l, h, pre);
    }
    const bool ffn_is_sender = sender.component == Component::kFfnOut && sender.layer == l;
    if (freeze == FreezePolicy::kFreezeAttnRecomputeMlp && !ffn_is_sender) {
      Rows mid = pre;
      for (const auto& h : g.heads[l]) mid = add(mid, h);
      g.ffn[l] = ffn_forward(model, l, mid);
    }
  }

  if (receiver.is_logits()) {
    const Rows final_resid = resid_post(g, c.n_layers - 1);
    return metric_of(pair.metric, logits_of(model, final_resid[e])) - base;
  }
  Overrides o;
  for (const auto& r : receiver.heads) o.heads[{r.layer, r.head}] = g.heads[r.layer][r.head];
  const auto replay = run(model, pair.clean, o);
  return metric_of(pair.metric, replay.logits[e]) - base;
}

std::vector<double> embedding_only_logits(const Model& model, int token, int pos) {
  return logits_of(model, embed_vector(model, token, pos));
}

std::vector<double> direct_logit_scores(const Model& model, std::span<const int> tokens,
                                        const ComponentSite& site, int pos) {
  const auto& c = model.config();
  const auto& w = model.weights();
  const auto t = run(model, tokens);
  const auto& full = t.final_resid[pos];
  const double D = c.d_model;
  double mean = 0.0, var = 0.0;
  for (double v : full) mean += v;
  mean /= D;
  for (double v : full) var += (v - mean) * (v - mean);
  const double scale = std::sqrt(var / D + c.layernorm_epsilon);

  std::vector<double> comp;
  switch (site.kind) {
    case ComponentSite::Kind::kEmbed: comp = t.embed[pos]; break;
    case ComponentSite::Kind::kHead: comp = t.heads[site.layer][site.head][pos]; break;
    case ComponentSite::Kind::kFfn: comp = t.ffn[site.layer][pos]; break;
  }
  double cmean = 0.0;
  for (double v : comp) cmean += v;
  cmean /= D;
  std::vector<double> frozen(c.d_model);
  for (int d = 0; d < c.d_model; ++d) frozen[d] = (comp[d] - cmean) / scale * w.ln_final_w[d];
  std::vector<double> out(c.vocab_size, 0.0);
  for (int v = 0; v < c.vocab_size; ++v)
    for (int d = 0; d < c.d_model; ++d) out[v] += frozen[d] * unembed_weight(model, d, v);
  return out;
}

std::set<FlowNode> flow_nodes(const Model& model, std::span<const int> tokens, double tau,
                              int sink_pos) {
  const auto& c = model.config();
  const auto& lw_all = model.weights().layers;
  const auto t = run(model, tokens);
  using C = FlowNode::Component;
  const int L = c.n_layers, H = c.n_heads, D = c.d_model, Dh = c.d_head;

  // Every addend of resid_post[l][p]: label -> vector.
  struct Term {
    C kind;
    int head, source;
    std::vector<double> v;
  };
  auto terms_at = [&](int l, int p) {
    std::vector<Term> terms;
    terms.push_back({C::kResid, -1, p, resid_pre(t, l)[p]});
    for (int h = 0; h < H; ++h) {
      for (int j = 0; j <= p; ++j) {
        std::vector<double> v(D, 0.0);
        const double a = t.patterns[l][h][p][j];
        for (int d = 0; d < D; ++d) {
          double acc = lw_all[l].b_O[d] / H;
          for (int e = 0; e < Dh; ++e)
            acc += t.values[l][h][j][e] * lw_all[l].W_O[(static_cast<std::size_t>(h) * Dh + e) * D + d];
          v[d] = a * acc;
        }
        terms.push_back({C::kHead, h, j, std::move(v)});
      }
    }
    terms.push_back({C::kFfn, -1, p, t.ffn[l][p]});
    return terms;
  };

  std::set<FlowNode> nodes{FlowNode{L - 1, sink_pos, C::kResid, -1}};
  std::set<std::pair<int, int>> seen;
  std::vector<std::pair<int, int>> stack{{L - 1, sink_pos}};
  while (!stack.empty()) {
    const auto [l, p] = stack.back();
    stack.pop_back();
    if (!seen.insert({l, p}).second) continue;
    const auto terms = terms_at(l, p);
    const auto o = resid_post(t, l)[p];
    double oo = 0.0;
    for (double x : o) oo += x * x;
    if (std::sqrt(oo) < 1e-12) continue;
    std::vector<double> pos_share(terms.size());
    double total = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
      double s = 0.0;
      for (int d = 0; d < D; ++d) s += terms[i].v[d] * o[d];
      pos_share[i] = std::max(0.0, s / oo);
      total += pos_share[i];
    }
    for (std::size_t i = 0; i < terms.size(); ++i) {
      const double w = total > 0.0 ? pos_share[i] / total : 0.0;
      if (!(w > tau)) continue;
      const auto& term = terms[i];
      const int src = term.source;
      const FlowNode up = l == 0 ? FlowNode{0, src, C::kEmbed, -1} : FlowNode{l - 1, src, C::kResid, -1};
      nodes.insert(up);
      if (term.kind == C::kHead) nodes.insert(FlowNode{l, src, C::kHead, term.head});
      if (term.kind == C::kFfn) nodes.insert(FlowNode{l, p, C::kFfn, -1});
      if (l > 0) stack.push_back({l - 1, src});
    }
  }
  return nodes;
}

}  // namespace circuitscope::reference
