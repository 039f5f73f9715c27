#include <bit>
#include <filesystem>
#include <fstream>

#include "circuitscope/archive.hpp"
#include "circuitscope/config.hpp"
#include "circuitscope/intervention.hpp"
#include "circuitscope/reference.hpp"
#include "support.hpp"

using namespace testing;
using cs::ErrorCode;

namespace {

cs::ModelConfig example_config() {
  cs::ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 16;
  c.d_head = 4;
  c.d_mlp = 64;
  c.vocab_size = 50;
  c.max_seq_len = 32;
  return c;
}

std::vector<int> seq(int n, int vocab) {
  std::vector<int> t(n);
  for (int i = 0; i < n; ++i) t[i] = (7 * i + 3) % vocab;
  return t;
}

std::vector<std::uint8_t> single_tensor_file(const std::string& dtype, std::vector<std::int64_t> shape,
                                             const std::vector<std::uint8_t>& payload) {
  nlohmann::json header = {{"t", {{"dtype", dtype}, {"shape", shape},
                                  {"data_offsets", {0, payload.size()}}}}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(8);
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out[i] = static_cast<std::uint8_t>(len >> (8 * i));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation rejects broken invariants") {
  auto c = example_config();
  CHECK_NOTHROW(c.validate());
  c.d_head = 5;
  CHECK(error_of([&] { c.validate(); }) == ErrorCode::kInvalidConfig);
  c = example_config();
  c.n_layers = 0;
  CHECK(error_of([&] { c.validate(); }) == ErrorCode::kInvalidConfig);
  c = example_config();
  c.layernorm_epsilon = 0.0f;
  CHECK(error_of([&] { c.validate(); }) == ErrorCode::kInvalidConfig);
}

TEST_CASE("config json round trip and unknown schemes") {
  auto c = example_config();
  c.positional_scheme = cs::PositionalScheme::kAlibi;
  c.activation_fn = cs::Activation::kGeluExact;
  c.tie_unembedding = true;
  CHECK(cs::model_config_from_json(cs::to_json(c)) == c);

  auto j = cs::to_json(c);
  j["positional_scheme"] = "rotary";
  CHECK(error_of([&] { cs::model_config_from_json(j); }) == ErrorCode::kUnsupportedScheme);
  j = cs::to_json(c);
  j.erase("n_layers");
  CHECK(error_of([&] { cs::model_config_from_json(j); }) == ErrorCode::kParse);
}

TEST_CASE("safetensors round trip is byte stable") {
  const auto c = example_config();
  const auto a = archive_for(c, 3);
  const auto bytes = a.to_safetensors();
  const auto b = cs::NamedTensorArchive::parse_safetensors(bytes);
  REQUIRE(a.size() == b.size());
  for (const auto& [name, t] : a.entries()) {
    CHECK(b.at(name).shape == t.shape);
    CHECK(b.at(name).data == t.data);
  }
  CHECK(b.to_safetensors() == bytes);
  CHECK(a.digest() == b.digest());
  CHECK(a.digest().size() == 64);
  CHECK(archive_for(c, 4).digest() != a.digest());
}

TEST_CASE("half precision tensors convert to f32") {
  CHECK(cs::half_to_float(0x3c00) == 1.0f);
  CHECK(cs::half_to_float(0xc000) == -2.0f);
  CHECK(cs::half_to_float(0x0001) == doctest::Approx(5.960464477539063e-8));
  CHECK(cs::bfloat16_to_float(0x3f80) == 1.0f);
  CHECK(cs::bfloat16_to_float(0x4049) == doctest::Approx(3.140625));

  const auto f16 = cs::NamedTensorArchive::parse_safetensors(
      single_tensor_file("F16", {2}, {0x00, 0x3c, 0x00, 0xc0}));
  CHECK(f16.at("t").data == std::vector<float>{1.0f, -2.0f});
  const auto bf16 = cs::NamedTensorArchive::parse_safetensors(
      single_tensor_file("BF16", {1}, {0x80, 0x3f}));
  CHECK(bf16.at("t").data == std::vector<float>{1.0f});
}

TEST_CASE("malformed archives raise typed errors") {
  CHECK(error_of([] { cs::NamedTensorArchive::parse_safetensors(std::vector<std::uint8_t>{1, 2}); }) ==
        ErrorCode::kParse);
  CHECK(error_of([] {
          cs::NamedTensorArchive::parse_safetensors(single_tensor_file("F32", {3}, {0, 0, 0, 0}));
        }) == ErrorCode::kShapeMismatch);
  CHECK(error_of([] {
          cs::NamedTensorArchive::parse_safetensors(single_tensor_file("I8", {1}, {0}));
        }) == ErrorCode::kUnsupportedFormat);
  CHECK(error_of([] { cs::NamedTensorArchive::read_safetensors("/nonexistent/model.safetensors"); }) ==
        ErrorCode::kIo);
  cs::NamedTensorArchive a;
  CHECK(error_of([&] { a.insert("x", cs::Tensor{{2, 2}, {1.0f}}); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("model load checks names and shapes") {
  const auto c = example_config();
  auto a = archive_for(c);
  CHECK_NOTHROW(cs::Model::load(a, c));

  auto missing = a;
  missing.erase("blocks.1.attn.W_K");
  CHECK(error_of([&] { cs::Model::load(missing, c); }) == ErrorCode::kMissingTensor);

  auto bad = a;
  bad.insert("blocks.0.mlp.W_in", cs::Tensor{{64, 16}, std::vector<float>(1024, 0.0f)});
  CHECK(error_of([&] { cs::Model::load(bad, c); }) == ErrorCode::kShapeMismatch);

  auto tied = c;
  tied.tie_unembedding = true;
  auto no_unembed = a;
  no_unembed.erase("unembed.W_U");
  CHECK_NOTHROW(cs::Model::load(no_unembed, tied));
}

TEST_CASE("model fingerprint follows the archive") {
  const auto c = example_config();
  const auto m1 = cs::Model::load(archive_for(c, 1), c);
  const auto m2 = cs::Model::load(archive_for(c, 1), c);
  const auto m3 = cs::Model::load(archive_for(c, 2), c);
  CHECK(m1.fingerprint() == m2.fingerprint());
  CHECK(m1.fingerprint() != m3.fingerprint());
}

TEST_CASE("vocabulary sidecar") {
  const auto dir = std::filesystem::temp_directory_path() / "cs_vocab_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "vocab.json";
  {
    std::ofstream out(path);
    out << R"({"tokens": ["<eos>", "a", "b"], "special_ids": [0]})";
  }
  const auto v = cs::load_vocabulary(path, 3);
  CHECK(v.display(1) == "a");
  CHECK(v.is_special(0));
  CHECK_FALSE(v.is_special(2));
  CHECK(cs::Vocabulary{}.display(5) == "<5>");
  CHECK(cs::load_vocabulary(path, 4).display(3) == "<3>");
  CHECK(error_of([&] { cs::load_vocabulary(dir / "missing.json", 3); }) == ErrorCode::kIo);
  std::filesystem::remove_all(dir);
}

TEST_CASE("forward logits are finite and shaped") {
  const auto c = example_config();
  const auto m = cs::Model::load(archive_for(c), c);
  const auto tokens = seq(10, c.vocab_size);
  const auto r = cs::forward(m, tokens);
  CHECK(r.seq_len == 10);
  CHECK(r.vocab_size == 50);
  REQUIRE(r.logits.size() == 500);
  for (float x : r.logits) CHECK(std::isfinite(x));
}

TEST_CASE("empty plan is bitwise identical to no plan") {
  for (const auto& tm : cs::builtin_models(5)) {
    const auto tokens = seq(9, tm.model.config().vocab_size);
    cs::InterventionPlan empty;
    const auto a = cs::forward(tm.model, tokens);
    const auto b = cs::forward(tm.model, tokens, &empty);
    CHECK(a.logits == b.logits);
  }
}

TEST_CASE("causal mask: later tokens do not change earlier logits") {
  for (const auto& tm : cs::builtin_models(1)) {
    const int V = tm.model.config().vocab_size;
    auto tokens = seq(8, V);
    const auto a = cs::forward(tm.model, tokens);
    tokens[7] = (tokens[7] + 1) % V;
    tokens[6] = (tokens[6] + 5) % V;
    const auto b = cs::forward(tm.model, tokens);
    for (int p = 0; p < 6; ++p) {
      CHECK(max_abs_diff(a.logits_at(p), b.logits_at(p)) < 1e-5);
    }
    const auto prefix = cs::forward(tm.model, std::span<const int>(tokens).first(4));
    for (int p = 0; p < 4; ++p) {
      CHECK(max_abs_diff(a.logits_at(p), prefix.logits_at(p)) < 1e-5);
    }
  }
}

TEST_CASE("cache invariants hold") {
  for (const auto& tm : cs::builtin_models(2)) {
    const auto& c = tm.model.config();
    const auto tokens = seq(11, c.vocab_size);
    const auto r = cs::forward_capture(tm.model, tokens);
    const auto& cache = *r.cache;
    for (int l = 0; l < c.n_layers; ++l) {
      for (int p = 0; p < 11; ++p) {
        std::vector<double> mid(cache.resid_pre(l, p).begin(), cache.resid_pre(l, p).end());
        for (int h = 0; h < c.n_heads; ++h)
          for (int d = 0; d < c.d_model; ++d) mid[d] += cache.head_out(l, h, p)[d];
        CHECK(max_abs_diff(cache.resid_mid(l, p), mid) < 1e-4);
        std::vector<double> post(mid);
        for (int d = 0; d < c.d_model; ++d) post[d] += cache.ffn_out(l, p)[d];
        CHECK(max_abs_diff(cache.resid_post(l, p), post) < 1e-4);
      }
      for (int h = 0; h < c.n_heads; ++h) {
        for (int q = 0; q < 11; ++q) {
          double row = 0.0;
          for (int k = 0; k < 11; ++k) {
            row += cache.attn(l, h, q, k);
            if (k > q) CHECK(cache.attn(l, h, q, k) == 0.0f);
          }
          CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
        }
      }
    }
    CHECK(error_of([&] { (void)cache.resid_pre(c.n_layers, 0); }) == ErrorCode::kIndexOutOfBounds);
    CHECK(error_of([&] { (void)cache.head_out(0, c.n_heads, 0); }) == ErrorCode::kIndexOutOfBounds);
    CHECK(error_of([&] { (void)cache.resid_pre(0, 11); }) == ErrorCode::kIndexOutOfBounds);
  }
}

TEST_CASE("forward matches the double-precision oracle") {
  for (const auto& tm : cs::builtin_models(7)) {
    const auto tokens = seq(12, tm.model.config().vocab_size);
    const auto r = cs::forward(tm.model, tokens);
    const auto t = cs::reference::run(tm.model, tokens);
    for (int p = 0; p < 12; ++p) {
      CHECK(max_abs_diff(r.logits_at(p), t.logits[p]) < 1e-4);
    }
  }
}

TEST_CASE("zeroed blocks leave embedding-only logits") {
  auto c = cs::tiny_config(cs::PositionalScheme::kLearned, 2);
  auto a = archive_for(c, 9);
  zero_blocks(a, c);
  const auto m = cs::Model::load(a, c);
  const auto tokens = seq(6, c.vocab_size);
  const auto r = cs::forward(m, tokens);
  for (int p = 0; p < 6; ++p) {
    CHECK(max_abs_diff(r.logits_at(p), cs::reference::embedding_only_logits(m, tokens[p], p)) < 1e-4);
  }
}

TEST_CASE("token and length validation") {
  const auto m = random_model();
  const int V = m.config().vocab_size;
  CHECK(error_of([&] { cs::forward(m, std::vector<int>{0, V}); }) == ErrorCode::kTokenOutOfRange);
  CHECK(error_of([&] { cs::forward(m, std::vector<int>{-1}); }) == ErrorCode::kTokenOutOfRange);
  CHECK(error_of([&] { cs::forward(m, std::vector<int>(m.config().max_seq_len + 1, 1)); }) ==
        ErrorCode::kSequenceTooLong);
  CHECK(error_of([&] { cs::forward(m, std::vector<int>{}); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("residual decomposition sums to resid_post") {
  const auto m = random_model(cs::PositionalScheme::kAlibi, 2, 4, 11);
  const auto r = cs::forward_capture(m, seq(7, 32));
  const auto& c = m.config();
  for (int l = 0; l < c.n_layers; ++l) {
    for (int p = 0; p < 7; ++p) {
      const auto terms = cs::decompose_residual(r.cache.get(), l, p);
      CHECK(terms.size() == static_cast<std::size_t>(c.n_heads + 2));
      std::vector<double> sum(c.d_model, 0.0);
      for (const auto& t : terms)
        for (int d = 0; d < c.d_model; ++d) sum[d] += t.value[d];
      CHECK(max_abs_diff(r.cache->resid_post(l, p), sum) < 1e-4);
    }
  }
}

TEST_CASE("zeroed head contributes a zero term") {
  const auto m = random_model();
  cs::InterventionPlan plan;
  plan.zero({1, cs::Component::kHeadOut, 2, std::nullopt});
  const auto r = cs::forward_capture(m, seq(5, 32), &plan);
  for (const auto& t : cs::decompose_residual(r.cache.get(), 1, 4)) {
    if (t.kind == cs::ResidualTerm::Kind::kHead && t.head == 2) {
      for (float v : t.value) CHECK(v == 0.0f);
    }
  }
}

TEST_CASE("per-source head terms") {
  const auto m = random_model(cs::PositionalScheme::kLearned, 2, 4, 4);
  const auto r = cs::forward_capture(m, seq(6, 32));
  const auto& c = m.config();
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      for (int q = 0; q < 6; ++q) {
        const auto parts = cs::head_output_per_source(r.cache.get(), l, h, q);
        REQUIRE(parts.size() >= static_cast<std::size_t>(q + 1));
        std::vector<double> sum(c.d_model, 0.0);
        for (std::size_t j = 0; j < parts.size(); ++j) {
          for (int d = 0; d < c.d_model; ++d) sum[d] += parts[j][d];
          if (j > static_cast<std::size_t>(q))
            for (float v : parts[j]) CHECK(v == 0.0f);
        }
        CHECK(max_abs_diff(r.cache->head_out(l, h, q), sum) < 1e-5);
      }
      // Query 0 attends only to itself: one term equal to the head output.
      const auto first = cs::head_output_per_source(r.cache.get(), l, h, 0);
      CHECK(max_abs_diff(first[0], r.cache->head_out(l, h, 0)) < 1e-6);
    }
  }
}

TEST_CASE("uniform attention over equal values gives equal per-source terms") {
  auto c = cs::tiny_config(cs::PositionalScheme::kLearned, 1);
  auto a = archive_for(c, 2);
  fill(a, "blocks.0.attn.W_Q", 0.0f);
  fill(a, "blocks.0.attn.b_Q", 0.0f);
  fill(a, "blocks.0.attn.W_V", 0.0f);
  fill(a, "pos_embed.W_pos", 0.0f);
  const auto m = cs::Model::load(a, c);
  const auto r = cs::forward_capture(m, std::vector<int>{3, 3, 3, 3});
  const auto parts = cs::head_output_per_source(r.cache.get(), 0, 1, 3);
  for (int j = 1; j < 4; ++j) CHECK(max_abs_diff(parts[0], parts[j]) < 1e-6);
  for (int k = 0; k < 4; ++k) CHECK(r.cache->attn(0, 1, 3, k) == doctest::Approx(0.25));
}

TEST_CASE("zero is replace with zeros; replace with own value is a no-op") {
  const auto m = random_model(cs::PositionalScheme::kLearned, 2, 4, 6);
  const auto tokens = seq(5, 32);
  const auto base = cs::forward_capture(m, tokens);
  const int D = m.config().d_model;

  for (auto comp : {cs::Component::kHeadOut, cs::Component::kFfnOut, cs::Component::kResidPre}) {
    const std::optional<int> head = comp == cs::Component::kHeadOut ? std::optional<int>(1) : std::nullopt;
    const cs::Site site{1, comp, head, std::nullopt};
    cs::InterventionPlan zero;
    zero.zero(site);
    cs::InterventionPlan replace_zero;
    replace_zero.items.push_back({site, cs::ReplaceAction{std::vector<float>(5 * D, 0.0f)}});
    CHECK(cs::forward(m, tokens, &zero).logits == cs::forward(m, tokens, &replace_zero).logits);

    std::vector<float> own;
    for (int p = 0; p < 5; ++p) {
      const auto v = cs::site_value(*base.cache, comp, 1, head.value_or(-1), p);
      own.insert(own.end(), v.begin(), v.end());
    }
    cs::InterventionPlan replace_own;
    replace_own.items.push_back({site, cs::ReplaceAction{own}});
    CHECK(max_abs_diff(cs::forward(m, tokens, &replace_own).logits, base.logits) < 1e-6);

    cs::InterventionPlan self_patch;
    self_patch.patch(site, base.cache);
    CHECK(max_abs_diff(cs::forward(m, tokens, &self_patch).logits, base.logits) < 1e-6);
  }
}

TEST_CASE("mean action over a single reference equals patching from it") {
  const auto m = random_model();
  const auto tokens = seq(6, 32);
  auto other = tokens;
  other[2] = (other[2] + 9) % 32;
  const auto ref = cs::forward_capture(m, other);
  const cs::Site site{0, cs::Component::kFfnOut, std::nullopt, std::nullopt};
  cs::InterventionPlan mean;
  mean.items.push_back({site, cs::MeanAction{{ref.cache}}});
  cs::InterventionPlan patch;
  patch.patch(site, ref.cache);
  CHECK(max_abs_diff(cs::forward(m, tokens, &mean).logits, cs::forward(m, tokens, &patch).logits) < 1e-6);
}

TEST_CASE("position-restricted interventions leave other positions alone") {
  const auto m = random_model();
  const auto tokens = seq(6, 32);
  const auto base = cs::forward(m, tokens);
  cs::InterventionPlan plan;
  plan.zero({0, cs::Component::kHeadOut, 0, std::vector<int>{4}});
  const auto r = cs::forward(m, tokens, &plan);
  for (int p = 0; p < 4; ++p) CHECK(max_abs_diff(r.logits_at(p), base.logits_at(p)) < 1e-6);
  CHECK(max_abs_diff(r.logits_at(4), base.logits_at(4)) > 0.0);
}

TEST_CASE("plan validation") {
  const auto m = random_model();
  const auto tokens = seq(4, 32);
  auto check = [&](cs::InterventionPlan plan) {
    return error_of([&] { cs::forward(m, tokens, &plan); });
  };
  CHECK(check(cs::InterventionPlan{}.zero({2, cs::Component::kFfnOut, std::nullopt, std::nullopt})) ==
        ErrorCode::kInvalidSite);
  CHECK(check(cs::InterventionPlan{}.zero({0, cs::Component::kHeadOut, 4, std::nullopt})) ==
        ErrorCode::kInvalidSite);
  CHECK(check(cs::InterventionPlan{}.zero({0, cs::Component::kHeadOut, 0, std::vector<int>{4}})) ==
        ErrorCode::kInvalidSite);
  CHECK(check(cs::InterventionPlan{}.zero({0, cs::Component::kFfnOut, 1, std::nullopt})) ==
        ErrorCode::kInvalidSite);
  const cs::Site dup{1, cs::Component::kFfnOut, std::nullopt, std::nullopt};
  CHECK(check(cs::InterventionPlan{}.zero(dup).zero(dup)) == ErrorCode::kInvalidSite);
  cs::InterventionPlan short_replace;
  short_replace.items.push_back({dup, cs::ReplaceAction{std::vector<float>(3, 0.0f)}});
  CHECK(check(short_replace) == ErrorCode::kInvalidSite);
  const auto longer = cs::forward_capture(m, seq(5, 32));
  CHECK(check(cs::InterventionPlan{}.patch(dup, longer.cache)) == ErrorCode::kInvalidSite);
}

TEST_CASE("alibi slopes") {
  const auto s8 = cs::alibi_slopes(8);
  REQUIRE(s8.size() == 8);
  for (int h = 0; h < 8; ++h) CHECK(s8[h] == doctest::Approx(std::pow(2.0, -(h + 1))));
  const auto s3 = cs::alibi_slopes(3);
  REQUIRE(s3.size() == 3);
  CHECK(s3[0] == doctest::Approx(std::pow(2.0, -4)));
  CHECK(s3[1] == doctest::Approx(std::pow(2.0, -8)));
  CHECK(s3[2] == doctest::Approx(std::pow(2.0, -2)));
  for (int n : {1, 3, 6, 12}) {
    const auto a = cs::alibi_slopes(n);
    const auto b = cs::reference::alibi_slopes(n);
    for (int h = 0; h < n; ++h) CHECK(a[h] == doctest::Approx(b[h]));
  }
}

TEST_CASE("alibi model ignores the missing positional table") {
  const auto c = cs::tiny_config(cs::PositionalScheme::kAlibi, 1, 2);
  const auto a = archive_for(c);
  CHECK_FALSE(a.contains("pos_embed.W_pos"));
  CHECK_NOTHROW(cs::Model::load(a, c));
}

}  // TEST_SUITE
