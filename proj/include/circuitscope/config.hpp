#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

namespace circuitscope {

enum class PositionalScheme { kLearned, kAlibi };
enum class Activation { kGeluTanh, kGeluExact };

struct ModelConfig {
  int n_layers = 1;
  int n_heads = 1;
  int d_model = 1;
  int d_head = 1;
  int d_mlp = 1;
  int vocab_size = 1;
  int max_seq_len = 1;
  PositionalScheme positional_scheme = PositionalScheme::kLearned;
  Activation activation_fn = Activation::kGeluTanh;
  float layernorm_epsilon = 1e-5f;
  bool tie_unembedding = false;

  // Throws kInvalidConfig when an invariant (d_model = n_heads * d_head,
  // positive counts, positive epsilon) does not hold.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
ModelConfig load_model_config(const std::filesystem::path& path);

std::string to_string(PositionalScheme scheme);
std::string to_string(Activation activation);

}  // namespace circuitscope
