#include "circuitscope/cache.hpp"

#include "circuitscope/error.hpp"

namespace circuitscope {

ActivationCache::ActivationCache(Model model, std::vector<int> tokens)
    : model_(std::move(model)), tokens_(std::move(tokens)) {
  const auto& c = model_.config();
  const std::size_t L = c.n_layers, H = c.n_heads, P = tokens_.size(), D = c.d_model,
                    Dh = c.d_head, V = c.vocab_size;
  resid_pre_.assign(L * P * D, 0.0f);
  resid_mid_.assign(L * P * D, 0.0f);
  resid_post_.assign(L * P * D, 0.0f);
  head_out_.assign(L * H * P * D, 0.0f);
  ffn_out_.assign(L * P * D, 0.0f);
  value_vec_.assign(L * H * P * Dh, 0.0f);
  attn_pattern_.assign(L * H * P * P, 0.0f);
  final_logits_.assign(P * V, 0.0f);
}

void ActivationCache::check_layer(int layer) const {
  if (layer < 0 || layer >= config().n_layers) {
    fail(ErrorCode::kIndexOutOfBounds, "layer " + std::to_string(layer));
  }
}
void ActivationCache::check_head(int head) const {
  if (head < 0 || head >= config().n_heads) {
    fail(ErrorCode::kIndexOutOfBounds, "head " + std::to_string(head));
  }
}
void ActivationCache::check_pos(int pos) const {
  if (pos < 0 || pos >= seq_len()) {
    fail(ErrorCode::kIndexOutOfBounds, "position " + std::to_string(pos));
  }
}

std::size_t ActivationCache::lp(int layer, int pos) const {
  check_layer(layer);
  check_pos(pos);
  return static_cast<std::size_t>(layer) * tokens_.size() + pos;
}
std::size_t ActivationCache::lhp(int layer, int head, int pos) const {
  check_layer(layer);
  check_head(head);
  check_pos(pos);
  return (static_cast<std::size_t>(layer) * config().n_heads + head) * tokens_.size() + pos;
}

#define CS_VEC_VIEW(buf, index, width) \
  std::span(buf.data() + (index) * static_cast<std::size_t>(width), static_cast<std::size_t>(width))

std::span<const float> ActivationCache::resid_pre(int l, int p) const {
  return CS_VEC_VIEW(resid_pre_, lp(l, p), config().d_model);
}
std::span<const float> ActivationCache::resid_mid(int l, int p) const {
  return CS_VEC_VIEW(resid_mid_, lp(l, p), config().d_model);
}
std::span<const float> ActivationCache::resid_post(int l, int p) const {
  return CS_VEC_VIEW(resid_post_, lp(l, p), config().d_model);
}
std::span<const float> ActivationCache::head_out(int l, int h, int p) const {
  return CS_VEC_VIEW(head_out_, lhp(l, h, p), config().d_model);
}
std::span<const float> ActivationCache::ffn_out(int l, int p) const {
  return CS_VEC_VIEW(ffn_out_, lp(l, p), config().d_model);
}
std::span<const float> ActivationCache::value_vec(int l, int h, int p) const {
  return CS_VEC_VIEW(value_vec_, lhp(l, h, p), config().d_head);
}
std::span<const float> ActivationCache::attn_pattern(int l, int h) const {
  check_layer(l);
  check_head(h);
  const std::size_t P = tokens_.size();
  return std::span(attn_pattern_.data() + (static_cast<std::size_t>(l) * config().n_heads + h) * P * P,
                   P * P);
}
float ActivationCache::attn(int l, int h, int q, int k) const {
  check_pos(q);
  check_pos(k);
  return attn_pattern(l, h)[static_cast<std::size_t>(q) * tokens_.size() + k];
}
std::span<const float> ActivationCache::final_logits(int p) const {
  check_pos(p);
  return CS_VEC_VIEW(final_logits_, static_cast<std::size_t>(p), config().vocab_size);
}

std::span<float> ActivationCache::resid_pre_mut(int l, int p) {
  return CS_VEC_VIEW(resid_pre_, lp(l, p), config().d_model);
}
std::span<float> ActivationCache::resid_mid_mut(int l, int p) {
  return CS_VEC_VIEW(resid_mid_, lp(l, p), config().d_model);
}
std::span<float> ActivationCache::resid_post_mut(int l, int p) {
  return CS_VEC_VIEW(resid_post_, lp(l, p), config().d_model);
}
std::span<float> ActivationCache::head_out_mut(int l, int h, int p) {
  return CS_VEC_VIEW(head_out_, lhp(l, h, p), config().d_model);
}
std::span<float> ActivationCache::ffn_out_mut(int l, int p) {
  return CS_VEC_VIEW(ffn_out_, lp(l, p), config().d_model);
}
std::span<float> ActivationCache::value_vec_mut(int l, int h, int p) {
  return CS_VEC_VIEW(value_vec_, lhp(l, h, p), config().d_head);
}
std::span<float> ActivationCache::attn_pattern_mut(int l, int h) {
  const std::size_t P = tokens_.size();
  return std::span(attn_pattern_.data() + (static_cast<std::size_t>(l) * config().n_heads + h) * P * P,
                   P * P);
}
std::span<float> ActivationCache::final_logits_mut(int p) {
  return CS_VEC_VIEW(final_logits_, static_cast<std::size_t>(p), config().vocab_size);
}

#undef CS_VEC_VIEW

}  // namespace circuitscope
