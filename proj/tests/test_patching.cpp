#include "circuitscope/patching.hpp"
#include "circuitscope/reference.hpp"
#include "support.hpp"

using namespace testing;
using cs::ErrorCode;

namespace {

cs::Site head_site(int l, int h) { return {l, cs::Component::kHeadOut, h, std::nullopt}; }
cs::Site ffn_site(int l) { return {l, cs::Component::kFfnOut, std::nullopt, std::nullopt}; }

std::vector<cs::ContrastPair> pairs_for(const cs::Model& m, int n, int length, std::uint64_t seed) {
  return cs::make_contrast_pairs(cs::synthetic_examples(m, n, length, seed));
}

}  // namespace

TEST_SUITE("patching") {

TEST_CASE("metrics") {
  const std::vector<float> logits{0.5f, 3.0f, -1.0f, 2.0f};
  CHECK(cs::Metric{cs::MetricKind::kLogitDiff, 1, 3}.evaluate(logits) == doctest::Approx(1.0));
  CHECK(cs::Metric{cs::MetricKind::kAnswerLogit, 3, -1}.evaluate(logits) == doctest::Approx(2.0));
  CHECK(cs::Metric{cs::MetricKind::kAnswerRank, 3, -1}.evaluate(logits) == doctest::Approx(1.0));
}

TEST_CASE("patching with identical runs is a no-op") {
  for (const auto& tm : cs::builtin_models(2)) {
    auto pairs = pairs_for(tm.model, 3, 8, 1);
    for (auto& p : pairs) p.corrupted = p.clean;
    const auto& c = tm.model.config();
    for (const auto& pair : pairs) {
      const auto runs = cs::run_pair(tm.model, pair);
      for (int l = 0; l < c.n_layers; ++l) {
        CHECK(std::fabs(cs::activation_patch(tm.model, pair, runs, ffn_site(l))) < 1e-5);
        for (int h = 0; h < c.n_heads; ++h) {
          CHECK(std::fabs(cs::activation_patch(tm.model, pair, runs, head_site(l, h))) < 1e-5);
          for (auto freeze : {cs::FreezePolicy::kFreezeAll, cs::FreezePolicy::kFreezeAttnRecomputeMlp}) {
            CHECK(std::fabs(cs::path_patch(tm.model, pair, runs, head_site(l, h), {}, freeze)) < 1e-5);
          }
        }
      }
    }
  }
}

TEST_CASE("patching everything recovers the corrupted metric") {
  for (const auto& tm : cs::builtin_models(3)) {
    const auto& c = tm.model.config();
    for (const auto& pair : pairs_for(tm.model, 3, 9, 2)) {
      const auto runs = cs::run_pair(tm.model, pair);
      cs::InterventionPlan plan;
      plan.patch({0, cs::Component::kResidPre, std::nullopt, std::nullopt}, runs.corrupted);
      for (int l = 0; l < c.n_layers; ++l) {
        for (int h = 0; h < c.n_heads; ++h) plan.patch(head_site(l, h), runs.corrupted);
        plan.patch(ffn_site(l), runs.corrupted);
      }
      const auto fwd = cs::forward(tm.model, pair.clean, &plan);
      CHECK(pair.metric.evaluate(fwd.logits_at(pair.end())) ==
            doctest::Approx(runs.corrupted_metric).epsilon(1e-4).scale(1.0));
    }
  }
}

TEST_CASE("a head with zero output weights has zero patch effect") {
  const auto c = cs::tiny_config(cs::PositionalScheme::kLearned, 2);
  auto a = archive_for(c, 7);
  edit(a, block(0, "attn.W_O"), [&](auto& w) {
    const std::size_t per_head = static_cast<std::size_t>(c.d_head) * c.d_model;
    std::fill(w.begin() + 2 * per_head, w.begin() + 3 * per_head, 0.0f);
  });
  const auto m = cs::Model::load(a, c);
  for (const auto& pair : pairs_for(m, 3, 8, 3)) {
    CHECK(std::fabs(cs::activation_patch(m, pair, head_site(0, 2))) < 1e-5);
    CHECK(std::fabs(cs::path_patch(m, pair, head_site(0, 2), {})) < 1e-5);
  }
}

TEST_CASE("activation patching matches the oracle") {
  for (const auto& tm : cs::builtin_models(4)) {
    const auto& c = tm.model.config();
    for (const auto& pair : pairs_for(tm.model, 2, 8, 4)) {
      const auto runs = cs::run_pair(tm.model, pair);
      for (int l = 0; l < c.n_layers; ++l) {
        std::vector<cs::Site> sites{ffn_site(l)};
        for (int h = 0; h < c.n_heads; ++h) sites.push_back(head_site(l, h));
        for (const auto& s : sites) {
          CHECK(cs::activation_patch(tm.model, pair, runs, s) ==
                doctest::Approx(cs::reference::activation_patch(tm.model, pair, s)).epsilon(1e-4).scale(1.0));
        }
      }
    }
  }
}

TEST_CASE("path patching matches the edge-reroute oracle") {
  for (const auto& tm : cs::builtin_models(5)) {
    const auto& c = tm.model.config();
    for (const auto& pair : pairs_for(tm.model, 2, 7, 5)) {
      const auto runs = cs::run_pair(tm.model, pair);
      for (auto freeze : {cs::FreezePolicy::kFreezeAll, cs::FreezePolicy::kFreezeAttnRecomputeMlp}) {
        std::vector<cs::Site> senders;
        for (int l = 0; l < c.n_layers; ++l) {
          senders.push_back(ffn_site(l));
          for (int h = 0; h < c.n_heads; ++h) senders.push_back(head_site(l, h));
        }
        for (const auto& s : senders) {
          std::vector<cs::Receiver> receivers{cs::Receiver{}};
          if (s.layer + 1 < c.n_layers) {
            receivers.push_back({{{s.layer + 1, 0}}});
            receivers.push_back({{{s.layer + 1, 0}, {s.layer + 1, c.n_heads - 1}}});
          }
          for (const auto& r : receivers) {
            const double engine = cs::path_patch(tm.model, pair, runs, s, r, freeze);
            const double oracle = cs::reference::path_patch(tm.model, pair, s, r, freeze);
            CHECK(engine == doctest::Approx(oracle).epsilon(1e-4).scale(1.0));
          }
        }
      }
    }
  }
}

TEST_CASE("single-layer path patch to logits equals activation patch") {
  const auto m = random_model(cs::PositionalScheme::kLearned, 1, 4, 8);
  for (const auto& pair : pairs_for(m, 3, 8, 6)) {
    const auto runs = cs::run_pair(m, pair);
    for (int h = 0; h < 4; ++h) {
      CHECK(cs::path_patch(m, pair, runs, head_site(0, h), {}, cs::FreezePolicy::kFreezeAttnRecomputeMlp) ==
            doctest::Approx(cs::activation_patch(m, pair, runs, head_site(0, h))).epsilon(1e-5));
    }
  }
}

TEST_CASE("sweep over one pair equals per-head path patching") {
  const auto m = random_model(cs::PositionalScheme::kAlibi, 2, 4, 9);
  const auto pairs = pairs_for(m, 1, 8, 7);
  cs::SweepOptions opt;
  opt.workers = 3;
  const auto r = cs::patch_sweep(m, pairs, opt);
  const auto runs = cs::run_pair(m, pairs[0]);
  CHECK(r.baseline_clean == doctest::Approx(runs.clean_metric));
  CHECK(r.baseline_corrupted == doctest::Approx(runs.corrupted_metric));
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 4; ++h)
      CHECK(r.at(l, h) == doctest::Approx(cs::path_patch(m, pairs[0], head_site(l, h), {})));

  opt.mode = cs::PatchMode::kActivation;
  const auto act = cs::patch_sweep(m, pairs, opt);
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 4; ++h)
      CHECK(act.at(l, h) == doctest::Approx(cs::activation_patch(m, pairs[0], head_site(l, h))));
}

TEST_CASE("sweep mean is unchanged by duplicating every pair") {
  const auto m = random_model();
  const auto pairs = pairs_for(m, 3, 8, 8);
  auto doubled = pairs;
  doubled.insert(doubled.end(), pairs.begin(), pairs.end());
  cs::SweepOptions opt;
  const auto a = cs::patch_sweep(m, pairs, opt);
  const auto b = cs::patch_sweep(m, doubled, opt);
  for (std::size_t i = 0; i < a.matrix.size(); ++i) CHECK(a.matrix[i] == doctest::Approx(b.matrix[i]));
  CHECK(b.n_pairs == 6);
}

TEST_CASE("sweep results do not depend on worker count") {
  const auto m = random_model(cs::PositionalScheme::kLearned, 2, 4, 3);
  const auto pairs = pairs_for(m, 4, 8, 9);
  cs::SweepOptions opt;
  opt.receiver = {{{1, 1}}};
  opt.workers = 1;
  const auto a = cs::patch_sweep(m, pairs, opt);
  opt.workers = 4;
  const auto b = cs::patch_sweep(m, pairs, opt);
  CHECK(a.matrix == b.matrix);
  for (int h = 0; h < 4; ++h) CHECK(a.at(1, h) == 0.0);  // not upstream of the receiver
}

TEST_CASE("sweep restricted to a role position") {
  const auto m = random_model();
  const auto pairs = pairs_for(m, 2, 8, 10);
  cs::SweepOptions by_role;
  by_role.position_roles = {"END"};
  cs::SweepOptions by_index;
  by_index.positions = std::vector<int>{7};
  const auto a = cs::patch_sweep(m, pairs, by_role);
  const auto b = cs::patch_sweep(m, pairs, by_index);
  CHECK(a.matrix == b.matrix);
  by_role.position_roles = {"XYZ"};
  CHECK(error_of([&] { cs::patch_sweep(m, pairs, by_role); }) == ErrorCode::kInvalidSite);
}

TEST_CASE("contrast pair construction errors") {
  const auto m = random_model();
  auto examples = cs::synthetic_examples(m, 1, 6, 0);
  cs::TaskExample zh;
  zh.id = "zh-tense";
  zh.task = cs::Task::kTense;
  zh.lang = cs::Lang::kZh;
  zh.tokens = {1, 2, 3};
  zh.roles = {{"END", 2}};
  zh.answer = 4;
  CHECK(error_of([&] { cs::make_contrast_pair(zh); }) == ErrorCode::kMissingCorrupted);

  auto pair = cs::make_contrast_pair(examples[0]);
  CHECK(pair.metric.kind == cs::MetricKind::kLogitDiff);
  pair.corrupted.pop_back();
  CHECK(error_of([&] { cs::run_pair(m, pair); }) == ErrorCode::kLengthMismatch);
  CHECK(error_of([&] { cs::patch_sweep(m, std::vector<cs::ContrastPair>{}, {}); }) == ErrorCode::kEmptyDataset);

  zh.corrupted_tokens = std::vector<int>{1, 5, 3};
  CHECK(cs::make_contrast_pair(zh).metric.kind == cs::MetricKind::kAnswerLogit);
  CHECK(error_of([&] { cs::make_contrast_pair(zh, cs::MetricKind::kLogitDiff); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("path patch site and layer-order errors") {
  const auto m = random_model();
  const auto pair = pairs_for(m, 1, 6, 11)[0];
  CHECK(error_of([&] { cs::path_patch(m, pair, head_site(1, 0), {{{1, 2}}}); }) ==
        ErrorCode::kLayerOrderViolation);
  CHECK(error_of([&] { cs::path_patch(m, pair, head_site(1, 0), {{{0, 2}}}); }) ==
        ErrorCode::kLayerOrderViolation);
  CHECK(error_of([&] { cs::path_patch(m, pair, head_site(0, 0), {{{1, 9}}}); }) == ErrorCode::kInvalidSite);
  CHECK(error_of([&] { cs::path_patch(m, pair, head_site(0, 4), {}); }) == ErrorCode::kInvalidSite);
  CHECK(error_of([&] {
          cs::path_patch(m, pair, {0, cs::Component::kResidPre, std::nullopt, std::nullopt}, {});
        }) == ErrorCode::kInvalidSite);
}

TEST_CASE("top heads and csv") {
  cs::PatchResult r;
  r.n_layers = 2;
  r.n_heads = 2;
  r.matrix = {0.1, -0.5, 0.5, 0.0};
  const auto top = r.top_heads(3);
  REQUIRE(top.size() == 3);
  CHECK(top[0].first == cs::HeadRef{0, 1});
  CHECK(top[1].first == cs::HeadRef{1, 0});
  CHECK(top[2].first == cs::HeadRef{0, 0});
  CHECK(r.top_heads(10).size() == 4);
  CHECK(cs::to_csv(r) == "layer,h0,h1\n0,0.1,-0.5\n1,0.5,0\n");
  const auto j = cs::to_json(r);
  CHECK(j["receiver"] == "final_logits");
}

TEST_CASE("ablation with an empty plan changes nothing") {
  const auto m = random_model();
  const auto examples = cs::synthetic_examples(m, 6, 8, 12);
  const std::map<std::string, std::vector<int>> groups{{"g", {1, 2, 3}}};
  const auto r = cs::ablate_and_eval(m, examples, cs::InterventionPlan{}, groups, 2);
  CHECK(r.rank_shift.at("g") == 0.0);
  CHECK(r.answer_rank_shift == 0.0);
  CHECK(cs::to_json(r.baseline) == cs::to_json(r.ablated));
}

TEST_CASE("full ablation leaves embedding-only predictions") {
  const auto m = random_model(cs::PositionalScheme::kLearned, 2, 4, 14);
  const auto& c = m.config();
  std::vector<cs::HeadRef> heads;
  for (int l = 0; l < c.n_layers; ++l)
    for (int h = 0; h < c.n_heads; ++h) heads.push_back({l, h});
  auto plan = cs::zero_heads_plan(c, heads);
  for (const auto& item : cs::zero_ffn_plan(c, 0, c.n_layers - 1).items) plan.items.push_back(item);
  const auto examples = cs::synthetic_examples(m, 4, 7, 13);
  const auto r = cs::ablate_and_eval(m, examples, plan, {});
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    const auto logits = cs::reference::embedding_only_logits(m, e.tokens[e.end()], e.end());
    int rank = 0;
    for (int t = 0; t < c.vocab_size; ++t) {
      if (logits[t] > logits[e.answer] || (logits[t] == logits[e.answer] && t < e.answer)) ++rank;
    }
    CHECK(r.ablated.per_example[i].answer_rank == rank);
    CHECK(*r.ablated.per_example[i].logit_diff ==
          doctest::Approx(logits[e.answer] - logits[*e.distractor]).epsilon(1e-4).scale(1.0));
  }
}

TEST_CASE("zero plans validate ranges") {
  const auto c = cs::tiny_config(cs::PositionalScheme::kLearned, 2);
  CHECK(cs::zero_ffn_plan(c, 0, 1).items.size() == 2);
  CHECK(error_of([&] { cs::zero_ffn_plan(c, 1, 2); }) == ErrorCode::kInvalidSite);
  CHECK(error_of([&] { cs::zero_ffn_plan(c, 1, 0); }) == ErrorCode::kInvalidSite);
  const std::vector<cs::HeadRef> bad{{0, 4}};
  CHECK(error_of([&] { cs::zero_heads_plan(c, bad); }) == ErrorCode::kInvalidSite);
}

}  // TEST_SUITE
