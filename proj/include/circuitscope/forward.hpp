#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "circuitscope/cache.hpp"
#include "circuitscope/intervention.hpp"

namespace circuitscope {

struct ForwardOptions {
  bool capture = false;
  // When set, logits are only computed at this position (others stay zero).
  std::optional<int> logits_at;
};

struct ForwardResult {
  int seq_len = 0;
  int vocab_size = 0;
  std::vector<float> logits;  // [seq_len, vocab]
  std::shared_ptr<ActivationCache> cache;  // set iff capture was requested

  std::span<const float> logits_at(int pos) const;
};

// One sequence per call. Interventions are applied after a component computes
// its output and before that output joins the residual stream; resid_pre
// interventions overwrite the stream at the start of the layer.
ForwardResult forward(const Model& model, std::span<const int> tokens,
                      const InterventionPlan* plan = nullptr, ForwardOptions options = {});

inline ForwardResult forward_capture(const Model& model, std::span<const int> tokens,
                                     const InterventionPlan* plan = nullptr) {
  return forward(model, tokens, plan, ForwardOptions{.capture = true, .logits_at = std::nullopt});
}

void validate_tokens(const ModelConfig& config, std::span<const int> tokens);

// y = (x - mean) / sqrt(var + eps) * w + b. Returns the divisor.
float layer_norm(std::span<const float> x, std::span<const float> w, std::span<const float> b,
                 float eps, std::span<float> out);
float layer_norm_scale(std::span<const float> x, float eps);

float gelu(float x, Activation kind);

// The vector the stream holds before block 0 for a token at a position:
// token embedding, plus positional embedding (learned scheme), through the
// embedding layernorm when the model has one.
std::vector<float> embed_token(const Model& model, int token, int pos);

struct ResidualTerm {
  enum class Kind { kCarry, kHead, kFfn };
  Kind kind;
  int head = -1;
  std::vector<float> value;
};

// Addends of resid_post[layer][pos]: the carried resid_pre, every head's
// output, and the FFN output.
std::vector<ResidualTerm> decompose_residual(const ActivationCache* cache, int layer, int pos);

// Per-source split of one head's output at a query position:
// term_j = attn[q][j] * (value_j W_O + b_O / n_heads). Terms sum to head_out.
std::vector<std::vector<float>> head_output_per_source(const ActivationCache* cache, int layer,
                                                       int head, int query_pos);

// The head's output for a single value vector (value W_O + b_O / n_heads).
std::vector<float> project_value(const Model& model, int layer, int head,
                                 std::span<const float> value);

}  // namespace circuitscope
