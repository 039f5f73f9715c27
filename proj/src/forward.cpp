#include "circuitscope/forward.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "circuitscope/error.hpp"
#include "kernels.hpp"

namespace circuitscope {

std::span<const float> ForwardResult::logits_at(int pos) const {
  if (pos < 0 || pos >= seq_len) fail(ErrorCode::kIndexOutOfBounds, "position " + std::to_string(pos));
  return std::span(logits.data() + static_cast<std::size_t>(pos) * vocab_size,
                   static_cast<std::size_t>(vocab_size));
}

void validate_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) fail(ErrorCode::kInvalidArgument, "empty token sequence");
  if (static_cast<int>(tokens.size()) > config.max_seq_len) {
    fail(ErrorCode::kSequenceTooLong, std::to_string(tokens.size()) + " tokens > max_seq_len " +
                                          std::to_string(config.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config.vocab_size) {
      fail(ErrorCode::kTokenOutOfRange,
           "token " + std::to_string(tokens[i]) + " at position " + std::to_string(i));
    }
  }
}

float layer_norm_scale(std::span<const float> x, float eps) {
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  return static_cast<float>(std::sqrt(var + eps));
}

float layer_norm(std::span<const float> x, std::span<const float> w, std::span<const float> b,
                 float eps, std::span<float> out) {
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  const double scale = std::sqrt(var + eps);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>((x[i] - mean) / scale) * w[i] + b[i];
  }
  return static_cast<float>(scale);
}

float gelu(float x, Activation kind) {
  if (kind == Activation::kGeluExact) {
    return 0.5f * x * (1.0f + std::erf(x * static_cast<float>(M_SQRT1_2)));
  }
  constexpr float kC = 0.7978845608028654f;  // sqrt(2 / pi)
  return 0.5f * x * (1.0f + std::tanh(kC * (x + 0.044715f * x * x * x)));
}

std::vector<float> embed_token(const Model& model, int token, int pos) {
  const auto& c = model.config();
  const auto& w = model.weights();
  std::vector<float> e(c.d_model);
  for (int d = 0; d < c.d_model; ++d) {
    e[d] = w.W_E[static_cast<std::size_t>(token) * c.d_model + d];
    if (c.positional_scheme == PositionalScheme::kLearned) {
      e[d] += w.W_pos[static_cast<std::size_t>(pos) * c.d_model + d];
    }
  }
  if (w.has_embed_ln()) {
    std::vector<float> out(c.d_model);
    layer_norm(e, w.embed_ln_w, w.embed_ln_b, c.layernorm_epsilon, out);
    return out;
  }
  return e;
}

namespace {

// Interventions grouped by (layer, component) in plan order.
struct PlanIndex {
  std::vector<std::vector<const Intervention*>> head, ffn, resid;

  PlanIndex(const InterventionPlan* plan, int n_layers)
      : head(n_layers), ffn(n_layers), resid(n_layers) {
    if (!plan) return;
    for (const auto& it : plan->items) {
      switch (it.site.component) {
        case Component::kHeadOut: head[it.site.layer].push_back(&it); break;
        case Component::kFfnOut: ffn[it.site.layer].push_back(&it); break;
        case Component::kResidPre: resid[it.site.layer].push_back(&it); break;
      }
    }
  }
};

void apply(const Intervention& it, Component comp, int layer, int head, float* buf, int P,
           int D) {
  for (int p = 0; p < P; ++p) {
    if (!it.site.covers(p)) continue;
    float* dst = buf + static_cast<std::size_t>(p) * D;
    std::visit(
        [&](const auto& action) {
          using T = std::decay_t<decltype(action)>;
          if constexpr (std::is_same_v<T, ZeroAction>) {
            std::fill(dst, dst + D, 0.0f);
          } else if constexpr (std::is_same_v<T, ReplaceAction>) {
            std::copy_n(action.values.data() + static_cast<std::size_t>(p) * D, D, dst);
          } else if constexpr (std::is_same_v<T, PatchAction>) {
            auto src = site_value(*action.source, comp, layer, head, p);
            std::copy(src.begin(), src.end(), dst);
          } else {
            std::vector<double> acc(D, 0.0);
            for (const auto& ref : action.references) {
              const int rp = std::min(p, ref->seq_len() - 1);
              auto src = site_value(*ref, comp, layer, head, rp);
              for (int d = 0; d < D; ++d) acc[d] += src[d];
            }
            const double n = static_cast<double>(action.references.size());
            for (int d = 0; d < D; ++d) dst[d] = static_cast<float>(acc[d] / n);
          }
        },
        it.action);
  }
}

}  // namespace

ForwardResult forward(const Model& model, std::span<const int> tokens,
                      const InterventionPlan* plan, ForwardOptions options) {
  const auto& c = model.config();
  const auto& w = model.weights();
  validate_tokens(c, tokens);
  const int P = static_cast<int>(tokens.size());
  if (plan) plan->validate(c, P);
  if (options.logits_at && (*options.logits_at < 0 || *options.logits_at >= P)) {
    fail(ErrorCode::kIndexOutOfBounds, "logits position " + std::to_string(*options.logits_at));
  }

  const int D = c.d_model, H = c.n_heads, Dh = c.d_head, M = c.d_mlp, V = c.vocab_size;
  const std::size_t PD = static_cast<std::size_t>(P) * D;
  const float eps = c.layernorm_epsilon;
  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(Dh));
  const auto slopes = model.alibi_slopes();

  ForwardResult result;
  result.seq_len = P;
  result.vocab_size = V;
  std::shared_ptr<ActivationCache> cache;
  if (options.capture) {
    cache = std::make_shared<ActivationCache>(model, std::vector<int>(tokens.begin(), tokens.end()));
  }

  PlanIndex index(plan, c.n_layers);

  std::vector<float> x(PD);
  for (int p = 0; p < P; ++p) {
    auto e = embed_token(model, tokens[p], p);
    std::copy(e.begin(), e.end(), x.begin() + static_cast<std::size_t>(p) * D);
  }

  std::vector<float> normed(PD), attn_sum(PD), head_buf(PD), ffn_buf(PD);
  std::vector<float> q(static_cast<std::size_t>(P) * Dh), k(q.size()), v(q.size()), z(q.size());
  std::vector<float> pattern(static_cast<std::size_t>(P) * P);
  std::vector<float> hidden(static_cast<std::size_t>(P) * M);
  std::vector<float> bias_share(D);

  for (int l = 0; l < c.n_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    for (const auto* it : index.resid[l]) apply(*it, Component::kResidPre, l, -1, x.data(), P, D);
    if (cache) {
      for (int p = 0; p < P; ++p) {
        std::copy_n(x.data() + static_cast<std::size_t>(p) * D, D, cache->resid_pre_mut(l, p).data());
      }
    }

    for (int p = 0; p < P; ++p) {
      std::span<const float> row(x.data() + static_cast<std::size_t>(p) * D, D);
      layer_norm(row, lw.ln1_w, lw.ln1_b, eps, std::span(normed.data() + static_cast<std::size_t>(p) * D, D));
    }

    std::fill(attn_sum.begin(), attn_sum.end(), 0.0f);
    for (int d = 0; d < D; ++d) bias_share[d] = lw.b_O[d] / static_cast<float>(H);

    for (int h = 0; h < H; ++h) {
      const std::size_t wq_off = static_cast<std::size_t>(h) * D * Dh;
      kernels::matmul(normed.data(), lw.W_Q.data() + wq_off, q.data(), P, D, Dh);
      kernels::matmul(normed.data(), lw.W_K.data() + wq_off, k.data(), P, D, Dh);
      kernels::matmul(normed.data(), lw.W_V.data() + wq_off, v.data(), P, D, Dh);
      kernels::add_bias(q.data(), lw.b_Q.data() + static_cast<std::size_t>(h) * Dh, P, Dh);
      kernels::add_bias(k.data(), lw.b_K.data() + static_cast<std::size_t>(h) * Dh, P, Dh);
      kernels::add_bias(v.data(), lw.b_V.data() + static_cast<std::size_t>(h) * Dh, P, Dh);

      for (int i = 0; i < P; ++i) {
        float* row = pattern.data() + static_cast<std::size_t>(i) * P;
        float max_score = -std::numeric_limits<float>::infinity();
        for (int j = 0; j <= i; ++j) {
          float s = 0.0f;
          const float* qi = q.data() + static_cast<std::size_t>(i) * Dh;
          const float* kj = k.data() + static_cast<std::size_t>(j) * Dh;
          for (int d = 0; d < Dh; ++d) s += qi[d] * kj[d];
          s *= inv_sqrt_dh;
          if (!slopes.empty()) s += slopes[h] * static_cast<float>(j - i);
          row[j] = s;
          max_score = std::max(max_score, s);
        }
        double denom = 0.0;
        for (int j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - max_score);
          denom += row[j];
        }
        for (int j = 0; j <= i; ++j) row[j] = static_cast<float>(row[j] / denom);
        for (int j = i + 1; j < P; ++j) row[j] = 0.0f;
      }

      kernels::matmul(pattern.data(), v.data(), z.data(), P, P, Dh);
      kernels::matmul(z.data(), lw.W_O.data() + static_cast<std::size_t>(h) * Dh * D, head_buf.data(),
                      P, Dh, D);
      kernels::add_bias(head_buf.data(), bias_share.data(), P, D);

      for (const auto* it : index.head[l]) {
        if (!it->site.head || *it->site.head == h) {
          apply(*it, Component::kHeadOut, l, h, head_buf.data(), P, D);
        }
      }
      for (std::size_t i = 0; i < PD; ++i) attn_sum[i] += head_buf[i];

      if (cache) {
        for (int p = 0; p < P; ++p) {
          std::copy_n(head_buf.data() + static_cast<std::size_t>(p) * D, D, cache->head_out_mut(l, h, p).data());
          std::copy_n(v.data() + static_cast<std::size_t>(p) * Dh, Dh, cache->value_vec_mut(l, h, p).data());
        }
        std::copy(pattern.begin(), pattern.end(), cache->attn_pattern_mut(l, h).begin());
      }
    }

    for (std::size_t i = 0; i < PD; ++i) x[i] += attn_sum[i];
    if (cache) {
      for (int p = 0; p < P; ++p) {
        std::copy_n(x.data() + static_cast<std::size_t>(p) * D, D, cache->resid_mid_mut(l, p).data());
      }
    }

    for (int p = 0; p < P; ++p) {
      std::span<const float> row(x.data() + static_cast<std::size_t>(p) * D, D);
      layer_norm(row, lw.ln2_w, lw.ln2_b, eps, std::span(normed.data() + static_cast<std::size_t>(p) * D, D));
    }
    kernels::matmul(normed.data(), lw.W_in.data(), hidden.data(), P, D, M);
    kernels::add_bias(hidden.data(), lw.b_in.data(), P, M);
    for (auto& hv : hidden) hv = gelu(hv, c.activation_fn);
    kernels::matmul(hidden.data(), lw.W_out.data(), ffn_buf.data(), P, M, D);
    kernels::add_bias(ffn_buf.data(), lw.b_out.data(), P, D);
    for (const auto* it : index.ffn[l]) apply(*it, Component::kFfnOut, l, -1, ffn_buf.data(), P, D);

    for (std::size_t i = 0; i < PD; ++i) x[i] += ffn_buf[i];
    if (cache) {
      for (int p = 0; p < P; ++p) {
        std::copy_n(ffn_buf.data() + static_cast<std::size_t>(p) * D, D, cache->ffn_out_mut(l, p).data());
        std::copy_n(x.data() + static_cast<std::size_t>(p) * D, D, cache->resid_post_mut(l, p).data());
      }
    }
  }

  result.logits.assign(static_cast<std::size_t>(P) * V, 0.0f);
  std::vector<float> final_normed(D);
  for (int p = 0; p < P; ++p) {
    if (options.logits_at && *options.logits_at != p) continue;
    std::span<const float> row(x.data() + static_cast<std::size_t>(p) * D, D);
    layer_norm(row, w.ln_final_w, w.ln_final_b, eps, final_normed);
    std::span<float> out(result.logits.data() + static_cast<std::size_t>(p) * V, V);
    model.unembed_all(final_normed, out);
    if (cache) std::copy(out.begin(), out.end(), cache->final_logits_mut(p).begin());
  }
  result.cache = std::move(cache);
  return result;
}

std::vector<ResidualTerm> decompose_residual(const ActivationCache* cache, int layer, int pos) {
  if (!cache) fail(ErrorCode::kCacheMissing, "decompose_residual needs a captured run");
  cache->check_layer(layer);
  cache->check_pos(pos);
  std::vector<ResidualTerm> terms;
  auto carry = cache->resid_pre(layer, pos);
  terms.push_back({ResidualTerm::Kind::kCarry, -1, {carry.begin(), carry.end()}});
  for (int h = 0; h < cache->config().n_heads; ++h) {
    auto out = cache->head_out(layer, h, pos);
    terms.push_back({ResidualTerm::Kind::kHead, h, {out.begin(), out.end()}});
  }
  auto ffn = cache->ffn_out(layer, pos);
  terms.push_back({ResidualTerm::Kind::kFfn, -1, {ffn.begin(), ffn.end()}});
  return terms;
}

std::vector<float> project_value(const Model& model, int layer, int head,
                                 std::span<const float> value) {
  const auto& c = model.config();
  const auto& lw = model.weights().layers[layer];
  std::vector<float> out(c.d_model);
  const float* wo = lw.W_O.data() + static_cast<std::size_t>(head) * c.d_head * c.d_model;
  for (int d = 0; d < c.d_model; ++d) out[d] = lw.b_O[d] / static_cast<float>(c.n_heads);
  for (int e = 0; e < c.d_head; ++e) {
    const float ve = value[e];
    const float* row = wo + static_cast<std::size_t>(e) * c.d_model;
    for (int d = 0; d < c.d_model; ++d) out[d] += ve * row[d];
  }
  return out;
}

std::vector<std::vector<float>> head_output_per_source(const ActivationCache* cache, int layer,
                                                       int head, int query_pos) {
  if (!cache) fail(ErrorCode::kCacheMissing, "head_output_per_source needs a captured run");
  cache->check_layer(layer);
  cache->check_head(head);
  cache->check_pos(query_pos);
  std::vector<std::vector<float>> terms(cache->seq_len(), std::vector<float>(cache->config().d_model, 0.0f));
  for (int j = 0; j <= query_pos; ++j) {
    const float a = cache->attn(layer, head, query_pos, j);
    if (a == 0.0f) continue;
    auto projected = project_value(cache->model(), layer, head, cache->value_vec(layer, head, j));
    for (std::size_t d = 0; d < projected.size(); ++d) terms[j][d] = a * projected[d];
  }
  return terms;
}

}  // namespace circuitscope
