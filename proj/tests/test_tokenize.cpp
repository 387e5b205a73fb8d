// Tokenization layer: patch embedding, TokenLearner, action binning, prompts.
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <set>
#include <vector>

#include "dualmind/gradcheck.hpp"
#include "dualmind/tokenize.hpp"

using t64 = dm::tensor<double>;

namespace {
dm::patch_config toy_patch() {
  dm::patch_config c;
  c.image_size = 16;
  c.patch_size = 8;
  c.channels = 3;
  c.embed_dim = 8;
  return c;
}
}  // namespace

TEST_CASE("patch counts follow (image/patch)^2") {
  dm::patch_config big{224, 16, 3, 32};
  CHECK(big.tokens() == 196);
  dm::patch_config desk{64, 16, 3, 32};
  CHECK(desk.tokens() == 16);
  dm::patch_config bad{65, 16, 3, 32};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("not divisible"), std::invalid_argument);
}

TEST_CASE("zero image with zero weights embeds to zero tokens") {
  auto cfg = toy_patch();
  dm::patch_embed_params<double> p;
  p.w = dm::zero_tensor<double>({cfg.patch_dim(), cfg.embed_dim});
  p.b = dm::zero_tensor<double>({cfg.embed_dim});
  p.pos = dm::zero_tensor<double>({cfg.tokens(), cfg.embed_dim});
  dm::image img = dm::image::make(16, 16, 3, 0);
  auto toks = dm::patch_embed(dm::patches_from_image<double>(img, cfg), p, cfg);
  CHECK(toks.dim(0) == 4);
  CHECK(toks.dim(1) == 8);
  for (double v : toks.value()) CHECK(v == 0.0);
}

TEST_CASE("patch extraction is row-major in patches and pixels, scaled to [0,1]") {
  auto cfg = toy_patch();
  dm::image img = dm::image::make(16, 16, 3, 0);
  img.at(0, 8, 0) = 255;   // patch (0,1) => patch index 1, local pixel (0,0,0)
  img.at(9, 1, 2) = 51;    // patch (1,0) => patch index 2, local (1,1,2)
  auto x = dm::patches_from_image<double>(img, cfg);
  CHECK(x.value()[std::size_t(1 * cfg.patch_dim() + 0)] == 1.0);
  CHECK(x.value()[std::size_t(2 * cfg.patch_dim() + (1 * 8 + 1) * 3 + 2)] ==
        doctest::Approx(51.0 / 255.0).epsilon(1e-12));
  double sum = 0;
  for (double v : x.value()) sum += v;
  CHECK(sum == doctest::Approx(1.0 + 51.0 / 255.0).epsilon(1e-12));
}

TEST_CASE("with zero position embeddings, permuting patches permutes tokens identically") {
  auto cfg = toy_patch();
  dm::rng r(7);
  dm::patch_embed_params<double> p = dm::patch_embed_params<double>::init(cfg, r);
  for (auto& v : p.pos.value()) v = 0.0;
  std::vector<double> raw(std::size_t(cfg.tokens()) * cfg.patch_dim());
  for (auto& v : raw) v = r.uniform();
  auto x = t64::from({cfg.tokens(), cfg.patch_dim()}, raw, false);
  const std::vector<int> perm = {2, 0, 3, 1};
  std::vector<double> praw(raw.size());
  for (int i = 0; i < 4; ++i)
    std::copy_n(raw.begin() + std::ptrdiff_t(perm[std::size_t(i)] * cfg.patch_dim()),
                cfg.patch_dim(), praw.begin() + std::ptrdiff_t(i * cfg.patch_dim()));
  auto xp = t64::from({cfg.tokens(), cfg.patch_dim()}, praw, false);
  auto a = dm::patch_embed(x, p, cfg), b = dm::patch_embed(xp, p, cfg);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < cfg.embed_dim; ++j)
      CHECK(b.value()[std::size_t(i * cfg.embed_dim + j)] ==
            a.value()[std::size_t(perm[std::size_t(i)] * cfg.embed_dim + j)]);
}

TEST_CASE("token_learner: uniform scoring averages, rows sum to 1, convex hull holds") {
  dm::token_learner_config cfg{4, 2, 8, 6};
  dm::rng r(3);
  auto p = dm::token_learner_params<double>::init(cfg, r);
  for (auto& v : p.w2.value()) v = 0.0;  // zero scores -> uniform softmax
  for (auto& v : p.b2.value()) v = 0.0;
  auto x = dm::gaussian_tensor<double>({8, 8}, 1.0, r, false);  // two stacked images
  auto out = dm::token_learner(x, p, cfg);
  CHECK(out.z.dim(0) == 4);
  CHECK(out.weights.dim(0) == 4);
  CHECK(out.weights.dim(1) == 4);
  for (int n = 0; n < 2; ++n)
    for (int j = 0; j < 2; ++j)
      for (int c = 0; c < 8; ++c) {
        double mean = 0;
        for (int i = 0; i < 4; ++i) mean += x.value()[std::size_t(((n * 4) + i) * 8 + c)] / 4.0;
        CHECK(out.z.value()[std::size_t(((n * 2) + j) * 8 + c)] ==
              doctest::Approx(mean).epsilon(1e-12));
      }
  // Non-uniform scoring: weight rows still sum to 1 and z stays in the hull.
  auto p2 = dm::token_learner_params<double>::init(cfg, r);
  auto out2 = dm::token_learner(x, p2, cfg);
  for (int row = 0; row < 4; ++row) {
    double s = 0;
    for (int i = 0; i < 4; ++i) s += out2.weights.value()[std::size_t(row * 4 + i)];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 8; ++c) {
      double lo = 1e30, hi = -1e30;
      for (int i = 0; i < 4; ++i) {
        const double v = x.value()[std::size_t(((n * 4) + i) * 8 + c)];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      for (int j = 0; j < 2; ++j) {
        const double z = out2.z.value()[std::size_t(((n * 2) + j) * 8 + c)];
        CHECK(z >= lo - 1e-9);
        CHECK(z <= hi + 1e-9);
      }
    }
}

TEST_CASE("token_learner gradient w.r.t. inputs matches finite differences") {
  dm::token_learner_config cfg{4, 2, 6, 5};
  dm::rng r(11);
  auto p = dm::token_learner_params<double>::init(cfg, r);
  auto x = dm::gaussian_tensor<double>({4, 6}, 1.0, r, true);
  auto rep = dm::finite_difference_check(
      [&](const t64& in) { return dm::sum_all(dm::token_learner(in, p, cfg).z); }, x);
  CHECK(rep.all_finite);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("K=1 with uniform weights reduces to mean pooling") {
  dm::token_learner_config cfg{4, 1, 8, 6};
  dm::rng r(5);
  auto p = dm::token_learner_params<double>::init(cfg, r);
  for (auto& v : p.w2.value()) v = 0.0;
  for (auto& v : p.b2.value()) v = 0.0;
  auto x = dm::gaussian_tensor<double>({4, 8}, 1.0, r, false);
  auto out = dm::token_learner(x, p, cfg);
  for (int c = 0; c < 8; ++c) {
    double mean = 0;
    for (int i = 0; i < 4; ++i) mean += x.value()[std::size_t(i * 8 + c)] / 4.0;
    CHECK(std::abs(out.z.value()[std::size_t(c)] - mean) < 1e-6);
  }
}

TEST_CASE("action binning: boundaries, midpoint, row-major order, monotonicity") {
  dm::action_spec spec;
  spec.domain = "reach";
  spec.discrete = false;
  spec.lo = {-1.0, 0.0};
  spec.hi = {1.0, 10.0};
  CHECK(dm::tokenize_action({-1.0, 0.0}, spec) == std::vector<int>{0, 0});
  CHECK(dm::tokenize_action({1.0, 10.0}, spec) == std::vector<int>{255, 255});
  CHECK(dm::tokenize_action({0.0, 5.0}, spec) == std::vector<int>{128, 128});
  CHECK(dm::tokenize_action({-5.0, 100.0}, spec) == std::vector<int>{0, 255});  // clamps
  // Monotone non-decreasing per dimension over a sweep.
  dm::rng r(17);
  int prev = 0;
  for (int i = 0; i <= 1000; ++i) {
    const int id = dm::tokenize_action({-1.0 + 2.0 * i / 1000.0, 0.0}, spec)[0];
    CHECK(id >= prev);
    prev = id;
  }
  CHECK_THROWS_WITH_AS(dm::tokenize_action({std::nan(""), 0.0}, spec),
                       doctest::Contains("non-finite"), std::invalid_argument);
}

TEST_CASE("detokenize returns bin centers; round trip within half a bin") {
  dm::action_spec spec;
  spec.domain = "reach";
  spec.discrete = false;
  spec.lo = {-1.0};
  spec.hi = {1.0};
  CHECK(dm::detokenize_action({0}, spec)[0] == doctest::Approx(-0.99609375).epsilon(1e-15));
  CHECK(dm::detokenize_action({255}, spec)[0] == doctest::Approx(0.99609375).epsilon(1e-15));
  dm::rng r(23);
  for (int i = 0; i < 10000; ++i) {
    const double a = r.uniform(-1.3, 1.3);  // include out-of-range values (clamped)
    const double c = std::min(1.0, std::max(-1.0, a));
    const double back = dm::detokenize_action(dm::tokenize_action({a}, spec), spec)[0];
    CHECK(std::abs(back - c) <= 2.0 / 512.0 + 1e-12);
  }
  CHECK_THROWS_WITH_AS(dm::detokenize_action({256}, spec), doctest::Contains("outside"),
                       std::invalid_argument);
}

TEST_CASE("discrete actions tokenize to themselves and round trip exactly") {
  dm::action_spec spec;
  spec.domain = "grid";
  spec.discrete = true;
  spec.cardinality = 4;
  for (int a = 0; a < 4; ++a) {
    auto ids = dm::tokenize_action({double(a)}, spec);
    CHECK(ids == std::vector<int>{a});
    CHECK(dm::detokenize_action(ids, spec)[0] == double(a));
  }
  CHECK_THROWS_WITH_AS(dm::tokenize_action({4.0}, spec), doctest::Contains("cardinality"),
                       std::invalid_argument);
}

TEST_CASE("prompt vocabulary: TSV round trip and unknown-word listing") {
  auto v = dm::prompt_vocab::from_words({"reach", "the", "red", "target"});
  const std::string path = "vocab_test.tsv";
  v.save(path);
  auto v2 = dm::prompt_vocab::load(path);
  CHECK(v2.words == v.words);
  CHECK(v2.lookup("red") == 2);
  CHECK_THROWS_WITH_AS(v2.lookup("blue"), doctest::Contains("known vocabulary"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(v2.lookup("blue"), doctest::Contains("3:target"), std::invalid_argument);
  std::remove(path.c_str());
}

TEST_CASE("prompt encoder: determinism, token counts, gradient reaches only the projection") {
  auto pcfg = toy_patch();
  auto vocab = dm::prompt_vocab::from_words({"reach", "the", "red", "target"});
  auto enc = dm::prompt_encoder<double>::init(pcfg, vocab, 99);
  auto enc2 = dm::prompt_encoder<double>::init(pcfg, vocab, 99);

  dm::task_prompt obj;
  obj.kind = dm::prompt_kind::object_id;
  obj.object = 2;
  auto t1 = enc.encode(obj), t2 = enc2.encode(obj);
  CHECK(t1.dim(0) == 1);
  CHECK(t1.value() == t2.value());  // same seed -> identical trunk and projection

  dm::task_prompt lang;
  lang.kind = dm::prompt_kind::language;
  lang.text = "reach the red target";
  CHECK(enc.encode(lang).dim(0) == 4);

  dm::task_prompt goal;
  goal.kind = dm::prompt_kind::goal_image;
  goal.img = dm::image::make(16, 16, 3, 40);
  CHECK(enc.encode(goal).dim(0) == 1);
  CHECK(enc.encode(goal).value() == enc.encode(goal).value());

  dm::task_prompt bad;
  bad.kind = dm::prompt_kind::object_id;
  bad.object = 9;
  CHECK_THROWS_WITH_AS(enc.encode(bad), doctest::Contains("known vocabulary"),
                       std::invalid_argument);

  dm::tape<double> tp;
  {
    dm::tape_scope<double> sc(tp);
    tp.backward_from(dm::sum_all(enc.encode(lang)));
  }
  CHECK(enc.proj_w.has_grad());
  CHECK(enc.proj_b.has_grad());
  CHECK_FALSE(enc.trunk_vocab.has_grad());
  CHECK_FALSE(enc.trunk_patch.w.has_grad());
}
