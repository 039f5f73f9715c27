#include "circuitscope/attribution.hpp"
#include "circuitscope/reference.hpp"
#include "support.hpp"

using namespace testing;
using cs::ErrorCode;

namespace {

std::vector<int> seq(int n, int vocab, int mul = 5) {
  std::vector<int> t(n);
  for (int i = 0; i < n; ++i) t[i] = (mul * i + 1) % vocab;
  return t;
}

std::vector<cs::ComponentSite> all_sites(const cs::ModelConfig& c) {
  std::vector<cs::ComponentSite> sites{cs::ComponentSite::embed()};
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) sites.push_back(cs::ComponentSite::attn_head(l, h));
    sites.push_back(cs::ComponentSite::ffn(l));
  }
  return sites;
}

// Query weights zeroed everywhere, so every head attends uniformly.
cs::Model uniform_attention_model(int layers = 2) {
  const auto c = cs::tiny_config(cs::PositionalScheme::kLearned, layers);
  auto a = archive_for(c, 13);
  for (int l = 0; l < layers; ++l) {
    fill(a, block(l, "attn.W_Q"), 0.0f);
    fill(a, block(l, "attn.b_Q"), 0.0f);
  }
  return cs::Model::load(a, c);
}

// One head whose OV circuit is the identity on one-hot tied embeddings.
cs::Model identity_copy_model(bool zero_values) {
  cs::ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_model = 8;
  c.d_head = 8;
  c.d_mlp = 8;
  c.vocab_size = 8;
  c.max_seq_len = 8;
  c.tie_unembedding = true;
  auto a = archive_for(c, 2);
  a.erase("unembed.W_U");
  auto identity = [](std::vector<float>& w) {
    std::fill(w.begin(), w.end(), 0.0f);
    for (int i = 0; i < 8; ++i) w[i * 8 + i] = 1.0f;
  };
  edit(a, "embed.W_E", identity);
  fill(a, "pos_embed.W_pos", 0.0f);
  for (const char* s : {"mlp.W_out", "mlp.b_out", "attn.b_V", "attn.b_O"}) fill(a, block(0, s), 0.0f);
  for (const char* s : {"ln1.w", "ln2.w"}) fill(a, block(0, s), 1.0f);
  for (const char* s : {"ln1.b", "ln2.b"}) fill(a, block(0, s), 0.0f);
  fill(a, "ln_final.w", 1.0f);
  fill(a, "ln_final.b", 0.0f);
  edit(a, block(0, "attn.W_O"), identity);
  if (zero_values) {
    fill(a, block(0, "attn.W_V"), 0.0f);
  } else {
    edit(a, block(0, "attn.W_V"), identity);
  }
  return cs::Model::load(a, c);
}

}  // namespace

TEST_SUITE("attribution") {

TEST_CASE("zeroed head has zero direct scores") {
  const auto m = random_model();
  cs::InterventionPlan plan;
  plan.zero({1, cs::Component::kHeadOut, 3, std::nullopt});
  const auto r = cs::forward_capture(m, seq(6, 32), &plan);
  for (float s : cs::direct_logit_scores(r.cache.get(), cs::ComponentSite::attn_head(1, 3), 5)) {
    CHECK(s == 0.0f);
  }
}

TEST_CASE("frozen-scale completeness reproduces the logits") {
  for (const auto& tm : cs::builtin_models(3)) {
    const auto& c = tm.model.config();
    const auto r = cs::forward_capture(tm.model, seq(10, c.vocab_size));
    const auto bias = cs::layernorm_bias_scores(tm.model);
    for (int pos : {0, 4, 9}) {
      std::vector<double> total(bias.begin(), bias.end());
      for (const auto& site : all_sites(c)) {
        const auto s = cs::direct_logit_scores(r.cache.get(), site, pos);
        for (int t = 0; t < c.vocab_size; ++t) total[t] += s[t];
      }
      CHECK(max_abs_diff(r.logits_at(pos), total) < 1e-3);
    }
  }
}

TEST_CASE("direct scores match the oracle") {
  for (const auto& tm : cs::builtin_models(4)) {
    const auto& c = tm.model.config();
    const auto tokens = seq(7, c.vocab_size);
    const auto r = cs::forward_capture(tm.model, tokens);
    for (const auto& site : all_sites(c)) {
      const auto engine = cs::direct_logit_scores(r.cache.get(), site, 6);
      const auto oracle = cs::reference::direct_logit_scores(tm.model, tokens, site, 6);
      CHECK(max_abs_diff(engine, oracle) < 1e-4);
    }
  }
}

TEST_CASE("attribution requires a cache and valid sites") {
  const auto m = random_model();
  CHECK(error_of([] { cs::direct_logit_scores(nullptr, cs::ComponentSite::embed(), 0); }) ==
        ErrorCode::kCacheMissing);
  const auto r = cs::forward_capture(m, seq(4, 32));
  CHECK(error_of([&] { cs::direct_logit_scores(r.cache.get(), cs::ComponentSite::attn_head(2, 0), 0); }) ==
        ErrorCode::kIndexOutOfBounds);
  CHECK(error_of([&] { cs::direct_logit_scores(r.cache.get(), cs::ComponentSite::ffn(0), 4); }) ==
        ErrorCode::kIndexOutOfBounds);
}

TEST_CASE("top_k ordering and ties") {
  const std::vector<float> scores{1.0f, 3.0f, 3.0f, 2.0f, -1.0f};
  const auto top = cs::top_k_scores(scores, 3);
  REQUIRE(top.size() == 3);
  CHECK(top[0] == std::pair<int, double>{1, 3.0});
  CHECK(top[1] == std::pair<int, double>{2, 3.0});
  CHECK(top[2] == std::pair<int, double>{3, 2.0});
  const auto all = cs::top_k_scores(scores, 99);
  CHECK(all.size() == 5);
  CHECK(all.back().first == 4);
  CHECK(error_of([&] { cs::top_k_scores(scores, 0); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("attribution record lists targets in score order") {
  const auto m = random_model();
  const auto r = cs::forward_capture(m, seq(5, 32));
  const auto site = cs::ComponentSite::attn_head(0, 1);
  const std::vector<int> targets{3, 9, 17};
  const auto rec = cs::direct_logit_attribution(r.cache.get(), site, targets, 4);
  const auto scores = cs::direct_logit_scores(r.cache.get(), site, 4);
  CHECK(rec.token_scores.size() == 3);
  for (int t : targets) CHECK(rec.token_scores.at(t) == doctest::Approx(scores[t]));
  for (std::size_t i = 1; i < rec.top_k.size(); ++i) CHECK(rec.top_k[i - 1].second >= rec.top_k[i].second);
  const auto promoted = cs::top_promoted_tokens(r.cache.get(), site, 4, 5);
  CHECK(promoted == cs::top_k_scores(scores, 5));
  CHECK(cs::to_json(rec, &m.vocab())["site"] == "L0.H1");
}

TEST_CASE("verb group score") {
  const auto m = random_model();
  const auto r = cs::forward_capture(m, seq(5, 32));
  const auto scores = cs::direct_logit_scores(r.cache.get(), cs::ComponentSite::attn_head(1, 2), 4);
  const std::vector<int> single{7};
  const std::vector<int> pair{7, 11};
  CHECK(cs::verb_group_score(r.cache.get(), 1, 2, 4, single) == doctest::Approx(scores[7]));
  CHECK(cs::verb_group_score(r.cache.get(), 1, 2, 4, pair) ==
        doctest::Approx(static_cast<double>(scores[7]) + scores[11]));
  CHECK(error_of([&] { cs::verb_group_score(r.cache.get(), 1, 2, 4, std::vector<int>{}); }) ==
        ErrorCode::kInvalidArgument);
}

TEST_CASE("uniform attention closed forms") {
  const auto m = uniform_attention_model();
  const int n = 6;
  cs::RandomTokenProtocol p;
  p.length = n;
  p.n_samples = 3;
  double prev = 0.0;
  for (int i = 1; i < n; ++i) prev += 1.0 / (i + 1);
  prev /= n - 1;
  double repeated = 0.0;
  for (int i = n; i < 2 * n; ++i) repeated += 1.0 / (i + 1);
  repeated /= n;

  const auto pt = cs::prev_token_score(m, p);
  const auto dup = cs::duplicate_token_score(m, p);
  const auto ind = cs::induction_score(m, p);
  for (double v : pt.values) CHECK(v == doctest::Approx(prev).epsilon(1e-5));
  for (double v : dup.values) CHECK(v == doctest::Approx(repeated).epsilon(1e-5));
  for (double v : ind.values) CHECK(v == doctest::Approx(repeated).epsilon(1e-5));
  CHECK(pt.protocol_params["seq_len"] == n);
  CHECK(dup.protocol_params["half_len"] == n);
}

TEST_CASE("pattern scores agree with the oracle patterns") {
  const auto m = random_model(cs::PositionalScheme::kAlibi, 2, 4, 21);
  const int n = 5;
  auto tokens = seq(n, 32, 7);
  tokens.insert(tokens.end(), tokens.begin(), tokens.end());
  const auto r = cs::forward_capture(m, tokens);
  const auto t = cs::reference::run(m, tokens);
  for (int l = 0; l < 2; ++l) {
    for (int h = 0; h < 4; ++h) {
      const auto& pat = t.patterns[l][h];
      double prev = 0.0, dup = 0.0, ind = 0.0;
      for (int i = 1; i < 2 * n; ++i) prev += pat[i][i - 1];
      for (int i = n; i < 2 * n; ++i) {
        dup += pat[i][i - n];
        ind += pat[i][i - n + 1];
      }
      CHECK(cs::prev_token_pattern_score(*r.cache, l, h) == doctest::Approx(prev / (2 * n - 1)).epsilon(1e-5));
      CHECK(cs::duplicate_pattern_score(*r.cache, l, h, n) == doctest::Approx(dup / n).epsilon(1e-5));
      CHECK(cs::induction_pattern_score(*r.cache, l, h, n) == doctest::Approx(ind / n).epsilon(1e-5));
    }
  }
}

TEST_CASE("attention scores are bounded and reproducible") {
  for (const auto& tm : cs::builtin_models(6)) {
    cs::RandomTokenProtocol p;
    p.length = 6;
    p.n_samples = 5;
    p.seed = 9;
    const auto a = cs::duplicate_token_score(tm.model, p);
    const auto b = cs::induction_score(tm.model, p);
    const auto c = cs::prev_token_score(tm.model, p);
    for (std::size_t i = 0; i < a.values.size(); ++i) {
      for (double v : {a.values[i], b.values[i], c.values[i]}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      // Rows sum to one, so a head cannot fully attend to both targets.
      CHECK(a.values[i] + b.values[i] <= 1.0 + 1e-6);
    }
    CHECK(a.values.size() == static_cast<std::size_t>(tm.model.config().n_layers * tm.model.config().n_heads));
    p.workers = 4;
    CHECK(cs::duplicate_token_score(tm.model, p).values == a.values);
    p.seed = 10;
    CHECK(cs::duplicate_token_score(tm.model, p).values != a.values);
  }
}

TEST_CASE("protocol length is checked against the model") {
  const auto m = random_model();
  cs::RandomTokenProtocol p;
  p.length = 9;  // repeated sequence of 18 > max_seq_len 16
  CHECK(error_of([&] { cs::induction_score(m, p); }) == ErrorCode::kSequenceTooLong);
  p.length = 4;
  p.n_samples = 0;
  CHECK(error_of([&] { cs::prev_token_score(m, p); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("random tokens skip special ids") {
  const auto c = cs::tiny_config(cs::PositionalScheme::kLearned, 1);
  cs::Vocabulary vocab;
  for (int i = 0; i < c.vocab_size; ++i) vocab.tokens.push_back("t" + std::to_string(i));
  vocab.special_ids = {0, 1, 2};
  const auto m = cs::Model::load(archive_for(c), c, vocab);
  cs::Rng rng(0);
  for (int t : cs::random_tokens(m, 500, rng)) CHECK(t >= 3);
}

TEST_CASE("copy score of an identity OV head is one") {
  const auto m = identity_copy_model(false);
  const std::vector<int> probes{0, 1, 2, 3, 4, 5, 6, 7};
  CHECK(cs::copy_score(m, 0, 0, probes, 1) == doctest::Approx(1.0));
  CHECK(cs::copy_score_table(m, probes, 1).values == std::vector<double>{1.0});
}

TEST_CASE("copy score with zero values is k over the vocabulary") {
  const auto m = identity_copy_model(true);
  const std::vector<int> probes{0, 1, 2, 3, 4, 5, 6, 7};
  for (int k : {1, 3, 5}) CHECK(cs::copy_score(m, 0, 0, probes, k) == doctest::Approx(k / 8.0));
}

TEST_CASE("copy score arguments") {
  const auto m = random_model();
  const std::vector<int> probes{1, 2, 3};
  CHECK(error_of([&] { cs::copy_score(m, 2, 0, probes); }) == ErrorCode::kIndexOutOfBounds);
  CHECK(error_of([&] { cs::copy_score(m, 0, 0, probes, 0); }) == ErrorCode::kInvalidArgument);
  CHECK(error_of([&] { cs::copy_score(m, 0, 0, std::vector<int>{99}); }) == ErrorCode::kIndexOutOfBounds);
  const auto t = cs::copy_score_table(m, probes, 2, 3);
  CHECK(t.values == cs::copy_score_table(m, probes, 2, 1).values);
  for (double v : t.values) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(cs::to_json(t, m.fingerprint())["score_kind"] == cs::to_string(cs::HeadScoreKind::kCopy));
}

TEST_CASE("s-inhibition deltas vanish for a head with no output") {
  const auto c = cs::tiny_config(cs::PositionalScheme::kLearned, 2);
  auto a = archive_for(c, 5);
  edit(a, block(0, "attn.W_O"), [&](auto& w) {
    const std::size_t per_head = static_cast<std::size_t>(c.d_head) * c.d_model;
    std::fill(w.begin() + per_head, w.begin() + 2 * per_head, 0.0f);
  });
  // b_O is shared across heads, so it must be zero for head 1 to contribute nothing.
  fill(a, block(0, "attn.b_O"), 0.0f);
  const auto m = cs::Model::load(a, c);
  const auto examples = cs::synthetic_examples(m, 6, 8, 2);
  const std::vector<cs::HeadRef> movers{{1, 0}, {1, 3}};
  const auto report = cs::s_inhibition_effect(m, examples, {0, 1}, movers, 2);
  CHECK(report.n == 6);
  REQUIRE(report.movers.size() == 2);
  for (const auto& eff : report.movers) {
    for (const auto& [role, p] : eff.attention) CHECK(p.second - p.first == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(eff.logit_diff.second - eff.logit_diff.first == doctest::Approx(0.0).epsilon(1e-6));
  }

  const auto live = cs::s_inhibition_effect(m, examples, {0, 2}, movers);
  double moved = 0.0;
  for (const auto& eff : live.movers) moved += std::fabs(eff.logit_diff.second - eff.logit_diff.first);
  CHECK(moved > 0.0);
}

TEST_CASE("s-inhibition layer order and empty input") {
  const auto m = random_model();
  const auto examples = cs::synthetic_examples(m, 2, 6, 0);
  const std::vector<cs::HeadRef> same_layer{{1, 0}};
  CHECK(error_of([&] { cs::s_inhibition_effect(m, examples, {1, 1}, same_layer); }) ==
        ErrorCode::kLayerOrderViolation);
  CHECK(error_of([&] { cs::s_inhibition_effect(m, {}, {0, 1}, same_layer); }) == ErrorCode::kEmptyDataset);
  const std::vector<cs::HeadRef> bad{{1, 7}};
  CHECK(error_of([&] { cs::s_inhibition_effect(m, examples, {0, 1}, bad); }) == ErrorCode::kInvalidSite);
}

}  // TEST_SUITE
