#include "circuitscope/config.hpp"

#include <fstream>

#include "circuitscope/error.hpp"

namespace circuitscope {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) fail(ErrorCode::kInvalidConfig, std::string(name) + " must be >= 1");
  };
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_model, "d_model");
  positive(d_head, "d_head");
  positive(d_mlp, "d_mlp");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (d_model != n_heads * d_head) {
    fail(ErrorCode::kInvalidConfig,
         "d_model (" + std::to_string(d_model) + ") != n_heads * d_head (" +
             std::to_string(n_heads) + " * " + std::to_string(d_head) + ")");
  }
  if (!(layernorm_epsilon > 0.0f)) {
    fail(ErrorCode::kInvalidConfig, "layernorm_epsilon must be positive");
  }
}

std::string to_string(PositionalScheme scheme) {
  return scheme == PositionalScheme::kLearned ? "learned" : "alibi";
}

std::string to_string(Activation activation) {
  return activation == Activation::kGeluTanh ? "gelu_tanh" : "gelu_exact";
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"n_layers", c.n_layers},
      {"n_heads", c.n_heads},
      {"d_model", c.d_model},
      {"d_head", c.d_head},
      {"d_mlp", c.d_mlp},
      {"vocab_size", c.vocab_size},
      {"max_seq_len", c.max_seq_len},
      {"positional_scheme", to_string(c.positional_scheme)},
      {"activation_fn", to_string(c.activation_fn)},
      {"layernorm_epsilon", c.layernorm_epsilon},
      {"tie_unembedding", c.tie_unembedding},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_head = j.contains("d_head") ? j.at("d_head").get<int>()
                                    : (c.n_heads > 0 ? c.d_model / c.n_heads : 0);
    c.d_mlp = j.at("d_mlp").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.layernorm_epsilon = j.value("layernorm_epsilon", 1e-5f);
    c.tie_unembedding = j.value("tie_unembedding", false);

    const std::string scheme = j.value("positional_scheme", "learned");
    if (scheme == "learned") {
      c.positional_scheme = PositionalScheme::kLearned;
    } else if (scheme == "alibi") {
      c.positional_scheme = PositionalScheme::kAlibi;
    } else {
      fail(ErrorCode::kUnsupportedScheme, "positional_scheme '" + scheme + "'");
    }

    const std::string act = j.value("activation_fn", "gelu_tanh");
    if (act == "gelu_tanh" || act == "gelu_new" || act == "gelu_fast") {
      c.activation_fn = Activation::kGeluTanh;
    } else if (act == "gelu_exact" || act == "gelu") {
      c.activation_fn = Activation::kGeluExact;
    } else {
      fail(ErrorCode::kUnsupportedScheme, "activation_fn '" + act + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kParse, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  return model_config_from_json(j);
}

}  // namespace circuitscope
