#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "circuitscope/error.hpp"
#include "circuitscope/forward.hpp"
#include "circuitscope/model.hpp"
#include "circuitscope/selftest.hpp"
#include "doctest.h"

namespace cs = circuitscope;

namespace testing {

inline cs::NamedTensorArchive archive_for(const cs::ModelConfig& c, std::uint64_t seed = 0,
                                          const cs::RandomInit& init = {}) {
  return cs::make_random_archive(c, seed, init);
}

inline cs::Model random_model(cs::PositionalScheme scheme = cs::PositionalScheme::kLearned,
                              int layers = 2, int heads = 4, std::uint64_t seed = 0) {
  const auto c = cs::tiny_config(scheme, layers, heads);
  return cs::Model::load(archive_for(c, seed), c);
}

inline void fill(cs::NamedTensorArchive& a, const std::string& name, float value) {
  auto t = a.at(name);
  std::fill(t.data.begin(), t.data.end(), value);
  a.insert(name, std::move(t));
}

inline void edit(cs::NamedTensorArchive& a, const std::string& name,
                 const std::function<void(std::vector<float>&)>& fn) {
  auto t = a.at(name);
  fn(t.data);
  a.insert(name, std::move(t));
}

inline std::string block(int l, const std::string& suffix) {
  return "blocks." + std::to_string(l) + "." + suffix;
}

// Attention and FFN weights and biases of every block set to zero.
inline void zero_blocks(cs::NamedTensorArchive& a, const cs::ModelConfig& c) {
  for (int l = 0; l < c.n_layers; ++l) {
    for (const char* s : {"attn.W_Q", "attn.W_K", "attn.W_V", "attn.W_O", "attn.b_Q", "attn.b_K",
                          "attn.b_V", "attn.b_O", "mlp.W_in", "mlp.b_in", "mlp.W_out", "mlp.b_out"}) {
      fill(a, block(l, s), 0.0f);
    }
  }
}

inline cs::ErrorCode error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const cs::Error& e) {
    return e.code();
  }
  FAIL("expected a typed error");
  return cs::ErrorCode::kInvalidArgument;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
  return m;
}

inline double max_abs_diff(std::span<const float> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace testing
