#include "circuitscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "circuitscope/error.hpp"
#include "circuitscope/rng.hpp"
#include "json.hpp"

namespace circuitscope {

struct Model::Impl {
  ModelConfig config;
  ModelWeights weights;
  Vocabulary vocab;
  std::string fingerprint;
  std::vector<float> slopes;
};

std::string Vocabulary::display(int id) const {
  if (id >= 0 && static_cast<std::size_t>(id) < tokens.size()) return tokens[id];
  return "<" + std::to_string(id) + ">";
}

bool Vocabulary::is_special(int id) const {
  return std::find(special_ids.begin(), special_ids.end(), id) != special_ids.end();
}

Vocabulary load_vocabulary(const std::filesystem::path& path, int vocab_size) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open vocab file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  Vocabulary v;
  v.tokens.resize(vocab_size);
  for (int i = 0; i < vocab_size; ++i) v.tokens[i] = "<" + std::to_string(i) + ">";

  const nlohmann::json& table = j.contains("tokens") ? j.at("tokens") : j;
  if (table.is_array()) {
    for (std::size_t i = 0; i < table.size() && i < v.tokens.size(); ++i) {
      v.tokens[i] = table[i].get<std::string>();
    }
  } else if (table.is_object()) {
    for (const auto& [key, value] : table.items()) {
      if (!value.is_string()) continue;
      char* end = nullptr;
      const long id = std::strtol(key.c_str(), &end, 10);
      if (end == key.c_str() || *end != '\0') continue;
      if (id >= 0 && id < vocab_size) v.tokens[id] = value.get<std::string>();
    }
  }
  if (j.contains("special_ids")) {
    v.special_ids = j.at("special_ids").get<std::vector<int>>();
    std::sort(v.special_ids.begin(), v.special_ids.end());
  }
  return v;
}

std::vector<float> alibi_slopes(int n_heads) {
  const int closest = 1 << static_cast<int>(std::floor(std::log2(n_heads)));
  const double base = std::pow(2.0, -std::pow(2.0, -(std::log2(closest) - 3.0)));
  std::vector<float> slopes;
  slopes.reserve(n_heads);
  for (int i = 1; i <= closest; ++i) slopes.push_back(static_cast<float>(std::pow(base, i)));
  if (closest != n_heads) {
    const double extra_base = std::pow(2.0, -std::pow(2.0, -(std::log2(2 * closest) - 3.0)));
    const int remaining = std::min(closest, n_heads - closest);
    for (int i = 0; i < remaining; ++i) {
      slopes.push_back(static_cast<float>(std::pow(extra_base, 2 * i + 1)));
    }
  }
  return slopes;
}

std::vector<TensorSpec> canonical_tensor_specs(const ModelConfig& c) {
  const std::int64_t H = c.n_heads, D = c.d_model, Dh = c.d_head, M = c.d_mlp,
                     V = c.vocab_size;
  std::vector<TensorSpec> specs;
  specs.push_back({"embed.W_E", {V, D}});
  if (c.positional_scheme == PositionalScheme::kLearned) {
    specs.push_back({"pos_embed.W_pos", {c.max_seq_len, D}});
  }
  specs.push_back({"embed_ln.w", {D}, true});
  specs.push_back({"embed_ln.b", {D}, true});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    specs.push_back({p + "ln1.w", {D}});
    specs.push_back({p + "ln1.b", {D}});
    specs.push_back({p + "attn.W_Q", {H, D, Dh}});
    specs.push_back({p + "attn.W_K", {H, D, Dh}});
    specs.push_back({p + "attn.W_V", {H, D, Dh}});
    specs.push_back({p + "attn.W_O", {H, Dh, D}});
    specs.push_back({p + "attn.b_Q", {H, Dh}});
    specs.push_back({p + "attn.b_K", {H, Dh}});
    specs.push_back({p + "attn.b_V", {H, Dh}});
    specs.push_back({p + "attn.b_O", {D}});
    specs.push_back({p + "ln2.w", {D}});
    specs.push_back({p + "ln2.b", {D}});
    specs.push_back({p + "mlp.W_in", {D, M}});
    specs.push_back({p + "mlp.b_in", {M}});
    specs.push_back({p + "mlp.W_out", {M, D}});
    specs.push_back({p + "mlp.b_out", {D}});
  }
  specs.push_back({"ln_final.w", {D}});
  specs.push_back({"ln_final.b", {D}});
  if (!c.tie_unembedding) specs.push_back({"unembed.W_U", {D, V}});
  return specs;
}

namespace {

std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace

Model Model::load(const NamedTensorArchive& archive, const ModelConfig& config,
                  Vocabulary vocab) {
  config.validate();
  const auto specs = canonical_tensor_specs(config);

  bool has_embed_ln = archive.contains("embed_ln.w") || archive.contains("embed_ln.b");
  for (const auto& spec : specs) {
    if (spec.optional && !has_embed_ln) continue;
    if (!archive.contains(spec.name)) fail(ErrorCode::kMissingTensor, spec.name);
    const auto& t = archive.at(spec.name);
    if (t.shape != spec.shape) {
      fail(ErrorCode::kShapeMismatch, spec.name + ": expected " + shape_string(spec.shape) +
                                          ", got " + shape_string(t.shape));
    }
  }

  auto take = [&](const std::string& name) { return archive.at(name).data; };

  auto impl = std::make_shared<Impl>();
  impl->config = config;
  ModelWeights& w = impl->weights;
  w.W_E = take("embed.W_E");
  if (config.positional_scheme == PositionalScheme::kLearned) w.W_pos = take("pos_embed.W_pos");
  if (has_embed_ln) {
    w.embed_ln_w = take("embed_ln.w");
    w.embed_ln_b = take("embed_ln.b");
  }
  w.layers.resize(config.n_layers);
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    LayerWeights& lw = w.layers[l];
    lw.ln1_w = take(p + "ln1.w");
    lw.ln1_b = take(p + "ln1.b");
    lw.W_Q = take(p + "attn.W_Q");
    lw.W_K = take(p + "attn.W_K");
    lw.W_V = take(p + "attn.W_V");
    lw.W_O = take(p + "attn.W_O");
    lw.b_Q = take(p + "attn.b_Q");
    lw.b_K = take(p + "attn.b_K");
    lw.b_V = take(p + "attn.b_V");
    lw.b_O = take(p + "attn.b_O");
    lw.ln2_w = take(p + "ln2.w");
    lw.ln2_b = take(p + "ln2.b");
    lw.W_in = take(p + "mlp.W_in");
    lw.b_in = take(p + "mlp.b_in");
    lw.W_out = take(p + "mlp.W_out");
    lw.b_out = take(p + "mlp.b_out");
  }
  w.ln_final_w = take("ln_final.w");
  w.ln_final_b = take("ln_final.b");
  if (!config.tie_unembedding) w.W_U = take("unembed.W_U");

  if (vocab.tokens.empty()) {
    vocab.tokens.resize(config.vocab_size);
    for (int i = 0; i < config.vocab_size; ++i) vocab.tokens[i] = "<" + std::to_string(i) + ">";
  }
  impl->vocab = std::move(vocab);
  if (config.positional_scheme == PositionalScheme::kAlibi) {
    impl->slopes = circuitscope::alibi_slopes(config.n_heads);
  }

  // Fingerprint covers exactly the tensors the model uses plus the config.
  NamedTensorArchive used;
  for (const auto& spec : specs) {
    if (archive.contains(spec.name)) used.insert(spec.name, archive.at(spec.name));
  }
  impl->fingerprint = sha256_hex(used.digest() + to_json(config).dump());
  return Model(std::move(impl));
}

Model Model::load_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    fail(ErrorCode::kIo, "model directory does not exist: " + dir.string());
  }
  const ModelConfig config = load_model_config(dir / "config.json");
  const auto archive = NamedTensorArchive::read_safetensors(dir / "model.safetensors");
  Vocabulary vocab;
  if (std::filesystem::exists(dir / "vocab.json")) {
    vocab = load_vocabulary(dir / "vocab.json", config.vocab_size);
  }
  return load(archive, config, std::move(vocab));
}

const ModelConfig& Model::config() const { return impl_->config; }
const ModelWeights& Model::weights() const { return impl_->weights; }
const Vocabulary& Model::vocab() const { return impl_->vocab; }
const std::string& Model::fingerprint() const { return impl_->fingerprint; }
std::span<const float> Model::alibi_slopes() const { return impl_->slopes; }

float Model::unembed(std::span<const float> x, int token) const {
  const auto& c = impl_->config;
  const auto& w = impl_->weights;
  double acc = 0.0;
  if (c.tie_unembedding) {
    const float* row = w.W_E.data() + static_cast<std::size_t>(token) * c.d_model;
    for (int d = 0; d < c.d_model; ++d) acc += static_cast<double>(x[d]) * row[d];
  } else {
    for (int d = 0; d < c.d_model; ++d) {
      acc += static_cast<double>(x[d]) * w.W_U[static_cast<std::size_t>(d) * c.vocab_size + token];
    }
  }
  return static_cast<float>(acc);
}

void Model::unembed_all(std::span<const float> x, std::span<float> out) const {
  const auto& c = impl_->config;
  const auto& w = impl_->weights;
  const std::size_t V = c.vocab_size;
  if (c.tie_unembedding) {
    for (std::size_t t = 0; t < V; ++t) {
      const float* row = w.W_E.data() + t * c.d_model;
      float acc = 0.0f;
      for (int d = 0; d < c.d_model; ++d) acc += x[d] * row[d];
      out[t] = acc;
    }
  } else {
    std::fill(out.begin(), out.begin() + V, 0.0f);
    for (int d = 0; d < c.d_model; ++d) {
      const float xd = x[d];
      const float* row = w.W_U.data() + static_cast<std::size_t>(d) * V;
      for (std::size_t t = 0; t < V; ++t) out[t] += xd * row[t];
    }
  }
}

void Model::unembed_column(int token, std::span<float> out) const {
  const auto& c = impl_->config;
  const auto& w = impl_->weights;
  for (int d = 0; d < c.d_model; ++d) {
    out[d] = c.tie_unembedding
                 ? w.W_E[static_cast<std::size_t>(token) * c.d_model + d]
                 : w.W_U[static_cast<std::size_t>(d) * c.vocab_size + token];
  }
}

NamedTensorArchive make_random_archive(const ModelConfig& config, std::uint64_t seed,
                                       const RandomInit& init) {
  config.validate();
  Rng rng(seed);
  NamedTensorArchive archive;
  for (const auto& spec : canonical_tensor_specs(config)) {
    if (spec.optional && !init.embed_ln) continue;
    Tensor t;
    t.shape = spec.shape;
    t.data.resize(static_cast<std::size_t>(t.numel()));
    const std::string& n = spec.name;
    const bool is_ln_weight = n.ends_with("ln1.w") || n.ends_with("ln2.w") ||
                              n == "ln_final.w" || n == "embed_ln.w";
    const bool is_bias = n.ends_with(".b") || n.find(".b_") != std::string::npos;
    const bool is_embed = n == "embed.W_E" || n == "pos_embed.W_pos";
    for (auto& v : t.data) {
      const double z = rng.normal();
      if (is_ln_weight) {
        v = static_cast<float>(1.0 + 0.1 * z);
      } else if (is_bias) {
        v = static_cast<float>(init.bias_std * z);
      } else if (is_embed) {
        v = static_cast<float>(init.embed_std * z);
      } else {
        v = static_cast<float>(init.weight_std * z);
      }
    }
    archive.insert(spec.name, std::move(t));
  }
  return archive;
}

}  // namespace circuitscope
