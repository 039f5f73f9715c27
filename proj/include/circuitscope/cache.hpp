#pragma once

#include <span>
#include <vector>

#include "circuitscope/model.hpp"

namespace circuitscope {

// Record of one forward pass. All vectors are flat row-major buffers; the
// accessors return views sized to one vector or matrix. The cache keeps a
// handle to its model so attribution can reach the projection weights.
class ActivationCache {
 public:
  ActivationCache(Model model, std::vector<int> tokens);

  const Model& model() const { return model_; }
  const ModelConfig& config() const { return model_.config(); }
  const std::vector<int>& tokens() const { return tokens_; }
  int seq_len() const { return static_cast<int>(tokens_.size()); }

  std::span<const float> resid_pre(int layer, int pos) const;
  std::span<const float> resid_mid(int layer, int pos) const;
  std::span<const float> resid_post(int layer, int pos) const;
  std::span<const float> head_out(int layer, int head, int pos) const;
  std::span<const float> ffn_out(int layer, int pos) const;
  std::span<const float> value_vec(int layer, int head, int pos) const;
  // Full seq x seq attention matrix for one head.
  std::span<const float> attn_pattern(int layer, int head) const;
  float attn(int layer, int head, int query, int key) const;
  std::span<const float> final_logits(int pos) const;
  // The residual the final layernorm reads at pos.
  std::span<const float> final_resid(int pos) const { return resid_post(config().n_layers - 1, pos); }

  // Bounds helpers throwing kIndexOutOfBounds.
  void check_layer(int layer) const;
  void check_head(int head) const;
  void check_pos(int pos) const;

  // Mutable views, used by the forward pass that fills the cache.
  std::span<float> resid_pre_mut(int layer, int pos);
  std::span<float> resid_mid_mut(int layer, int pos);
  std::span<float> resid_post_mut(int layer, int pos);
  std::span<float> head_out_mut(int layer, int head, int pos);
  std::span<float> ffn_out_mut(int layer, int pos);
  std::span<float> value_vec_mut(int layer, int head, int pos);
  std::span<float> attn_pattern_mut(int layer, int head);
  std::span<float> final_logits_mut(int pos);

 private:
  std::size_t lp(int layer, int pos) const;
  std::size_t lhp(int layer, int head, int pos) const;

  Model model_;
  std::vector<int> tokens_;
  std::vector<float> resid_pre_, resid_mid_, resid_post_;
  std::vector<float> head_out_, ffn_out_, value_vec_, attn_pattern_;
  std::vector<float> final_logits_;
};

}  // namespace circuitscope
