#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "dualmind/checkpoint.hpp"
#include "dualmind/gradcheck.hpp"
#include "dualmind/ops.hpp"
#include "dualmind/optim.hpp"
#include "dualmind/rng.hpp"

using t64 = dm::tensor<double>;

TEST_CASE("adamw first step with unit gradient moves by about -lr") {
  auto p = t64::from({1}, {0.0}, true);
  dm::adamw_config cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  dm::adamw<double> opt({{"p", p}}, cfg);
  p.grad()[0] = 1.0;
  opt.apply();
  // bias-corrected mhat = 1, vhat = 1 -> update = -lr * 1/(1 + eps)
  CHECK(std::abs(p.value()[0] + 0.1) < 1e-6);
  CHECK(opt.step_count() == 1);
}

TEST_CASE("adamw matches an independent recurrence over several steps") {
  auto p = t64::from({2}, {0.5, -1.25}, true);
  dm::adamw_config cfg;
  cfg.lr = 0.02;
  cfg.weight_decay = 0.004;
  dm::adamw<double> opt({{"p", p}}, cfg);

  // independent hand recurrence
  double theta[2] = {0.5, -1.25}, m[2] = {0, 0}, v[2] = {0, 0};
  dm::rng r(33);
  for (int t = 1; t <= 7; ++t) {
    double g[2] = {r.gaussian(), r.gaussian()};
    p.grad()[0] = g[0];
    p.grad()[1] = g[1];
    opt.apply();
    opt.zero_grad();
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mhat = m[i] / (1.0 - std::pow(0.9, t));
      const double vhat = v[i] / (1.0 - std::pow(0.999, t));
      theta[i] -= 0.02 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.004 * theta[i]);
    }
  }
  CHECK(p.value()[0] == doctest::Approx(theta[0]).epsilon(1e-12));
  CHECK(p.value()[1] == doctest::Approx(theta[1]).epsilon(1e-12));
}

TEST_CASE("decoupled weight decay shrinks a parameter with zero gradient") {
  auto p = t64::from({1}, {1.0}, true);
  dm::adamw_config cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.1;
  dm::adamw<double> opt({{"p", p}}, cfg);
  p.ensure_grad();  // explicit zero gradient
  opt.apply();
  CHECK(p.value()[0] == doctest::Approx(1.0 - 0.01 * 0.1).epsilon(1e-12));

  // absent gradient: parameter untouched entirely
  auto q = t64::from({1}, {2.0}, true);
  dm::adamw<double> opt2({{"q", q}}, cfg);
  opt2.apply();
  CHECK(q.value()[0] == 2.0);
}

TEST_CASE("non-finite gradients are rejected per parameter and counted") {
  auto p = t64::from({2}, {1.0, 1.0}, true);
  auto q = t64::from({1}, {1.0}, true);
  dm::adamw_config cfg;
  cfg.lr = 0.5;
  dm::adamw<double> opt({{"p", p}, {"q", q}}, cfg);
  p.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  p.grad()[1] = 1.0;
  q.grad()[0] = 1.0;
  opt.apply();
  CHECK(p.value()[0] == 1.0);  // whole group skipped
  CHECK(p.value()[1] == 1.0);
  CHECK(q.value()[0] < 1.0);  // healthy group stepped
  CHECK(opt.skipped() == 1);
  CHECK(opt.step_count() == 1);

  p.clear_grad();
  p.grad()[0] = std::numeric_limits<double>::infinity();
  p.grad()[1] = 0.0;
  opt.apply();
  CHECK(opt.skipped() == 2);
  CHECK(opt.step_count() == 2);
}

TEST_CASE("checkpoint round-trip is bit-exact and validates its header") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dm_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "w.dmck").string();

  dm::rng r(5);
  std::vector<std::pair<std::string, t64>> entries;
  auto mk = [&](dm::shape_t s) {
    std::vector<double> v(std::size_t(dm::shape_numel(s)));
    for (auto& x : v) x = r.gaussian() * 1e3;  // exercise many bit patterns
    return t64::from(std::move(s), std::move(v));
  };
  entries.emplace_back("decoder.block0.attn.wq", mk({8, 8}));
  entries.emplace_back("embed.action", mk({258, 4}));
  entries.emplace_back("meta.step", t64::scalar(12345.0));
  dm::save_checkpoint(path, entries);

  auto loaded = dm::load_checkpoint<double>(path);
  REQUIRE(loaded.size() == 3);
  for (const auto& [name, t] : entries) {
    REQUIRE(loaded.count(name) == 1);
    CHECK(loaded.at(name).shape() == t.shape());
    CHECK(loaded.at(name).value() == t.value());  // bitwise
  }

  // identical bytes on re-save
  const std::string path2 = (dir / "w2.dmck").string();
  dm::save_checkpoint(path2, entries);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  // magic validation
  const std::string bad = (dir / "bad.dmck").string();
  std::ofstream bf(bad, std::ios::binary);
  bf << "NOPE" << std::string(64, '\0');
  bf.close();
  CHECK_THROWS_AS((void)dm::load_checkpoint<double>(bad), std::invalid_argument);

  // dtype tag validation: f64 file refused by f32 loader
  CHECK_THROWS_AS((void)dm::load_checkpoint<float>(path), std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("seed splitter streams are independent and stable") {
  dm::seed_splitter sp(42);
  CHECK(sp.derive("train.batch") == dm::seed_splitter(42).derive("train.batch"));
  CHECK(sp.derive("train.batch") != sp.derive("train.mask"));
  CHECK(sp.derive("train.batch", 0) != sp.derive("train.batch", 1));
  dm::rng a = sp.stream("x");
  dm::rng b = sp.stream("x");
  for (int i = 0; i < 5; ++i) CHECK(a.next_u64() == b.next_u64());
  // uniform stays in range, gaussian has sane mass
  dm::rng c = sp.stream("y");
  double acc = 0;
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    acc += c.gaussian();
  }
  CHECK(std::abs(acc / 1000.0) < 0.2);
}
