#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "circuitscope/archive.hpp"
#include "circuitscope/config.hpp"

namespace circuitscope {

struct LayerWeights {
  std::vector<float> ln1_w, ln1_b;  // [d_model]
  std::vector<float> W_Q, W_K, W_V; // [n_heads, d_model, d_head]
  std::vector<float> b_Q, b_K, b_V; // [n_heads, d_head]
  std::vector<float> W_O;           // [n_heads, d_head, d_model]
  std::vector<float> b_O;           // [d_model]
  std::vector<float> ln2_w, ln2_b;  // [d_model]
  std::vector<float> W_in;          // [d_model, d_mlp]
  std::vector<float> b_in;          // [d_mlp]
  std::vector<float> W_out;         // [d_mlp, d_model]
  std::vector<float> b_out;         // [d_model]
};

struct ModelWeights {
  std::vector<float> W_E;   // [vocab, d_model]
  std::vector<float> W_pos; // [max_seq_len, d_model], learned scheme only
  std::vector<float> embed_ln_w, embed_ln_b;  // empty when absent
  std::vector<LayerWeights> layers;
  std::vector<float> ln_final_w, ln_final_b;
  std::vector<float> W_U;   // [d_model, vocab]; empty when tied to W_E

  bool has_embed_ln() const { return !embed_ln_w.empty(); }
};

// Display strings and control ids from the vocab sidecar. Models loaded
// without one get "<id>" placeholders and no special ids.
struct Vocabulary {
  std::vector<std::string> tokens;
  std::vector<int> special_ids;

  std::string display(int id) const;
  bool is_special(int id) const;
};

Vocabulary load_vocabulary(const std::filesystem::path& path, int vocab_size);

// Immutable, cheaply copyable handle to resident f32 weights. Safe to share
// across threads.
class Model {
 public:
  // Validates completeness and shapes against the canonical naming table.
  static Model load(const NamedTensorArchive& archive, const ModelConfig& config,
                    Vocabulary vocab = {});
  // Reads model.safetensors, config.json and (optionally) vocab.json.
  static Model load_dir(const std::filesystem::path& dir);

  const ModelConfig& config() const;
  const ModelWeights& weights() const;
  const Vocabulary& vocab() const;
  // SHA-256 of the canonical archive serialization.
  const std::string& fingerprint() const;
  // Per-head ALiBi slopes (empty for the learned scheme).
  std::span<const float> alibi_slopes() const;

  // Column `token` of the unembedding dotted with x.
  float unembed(std::span<const float> x, int token) const;
  void unembed_all(std::span<const float> x, std::span<float> out) const;
  // Column `token` of the unembedding, copied into out (length d_model).
  void unembed_column(int token, std::span<float> out) const;

 private:
  struct Impl;
  explicit Model(std::shared_ptr<const Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<const Impl> impl_;
};

// Canonical tensor names and shapes required by a config.
struct TensorSpec {
  std::string name;
  std::vector<std::int64_t> shape;
  bool optional = false;
};
std::vector<TensorSpec> canonical_tensor_specs(const ModelConfig& config);

// Standard ALiBi slope sequence (geometric per head, interleaved extras for
// head counts that are not a power of two).
std::vector<float> alibi_slopes(int n_heads);

struct RandomInit {
  float weight_std = 0.3f;
  float bias_std = 0.05f;
  float embed_std = 1.0f;
  bool embed_ln = false;
};
NamedTensorArchive make_random_archive(const ModelConfig& config, std::uint64_t seed,
                                       const RandomInit& init = {});

}  // namespace circuitscope
