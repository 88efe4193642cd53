#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "radicalign/nn.hpp"
#include "support/checks.hpp"
#include "support/gradcheck.hpp"

using namespace radicalign;
namespace tz = radicalign::tensor;
using radicalign::testing::DVar;

TEST_CASE("analytic gradients match central differences") {
  for (const auto& r : radicalign::testing::run_all_gradient_checks()) {
    INFO(r.name);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("tensor buffers are 64-byte aligned") {
  for (int n : {1, 3, 17, 1000}) {
    const auto v = tz::Var<float>::constant({n}, std::vector<float>(static_cast<std::size_t>(n), 1.0f));
    CHECK(reinterpret_cast<std::uintptr_t>(v.values().data()) % 64 == 0);
  }
}

TEST_CASE("global_avg_pool of a constant map") {
  const auto x = tz::Var<float>::constant({1, 2, 3, 3}, std::vector<float>(18, 3.0f));
  const auto y = tz::global_avg_pool(x);
  REQUIRE(y.numel() == 2);
  CHECK(y.values()[0] == doctest::Approx(3.0));
  CHECK(y.values()[1] == doctest::Approx(3.0));
}

TEST_CASE("softmax rows") {
  const auto eq = tz::softmax(tz::Var<float>::constant({1, 4}, std::vector<float>(4, 2.5f)));
  for (float p : eq.values()) CHECK(p == doctest::Approx(0.25));

  Rng rng(3);
  std::vector<float> v(5 * 7);
  for (float& x : v) x = static_cast<float>(rng.uniform(-30.0, 30.0));
  const auto s = tz::softmax(tz::Var<float>::constant({5, 7}, v));
  for (int r = 0; r < 5; ++r) {
    double sum = 0;
    for (int c = 0; c < 7; ++c) sum += s.values()[static_cast<std::size_t>(r * 7 + c)];
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("adam: zero gradient is a no-op and steps oppose the gradient") {
  nn::AdamConfig cfg;
  cfg.lr = 0.01;
  std::vector<float> p{1.0f, -2.0f, 0.5f};
  const std::vector<float> keep = p;
  nn::AdamMoments m;
  nn::adam_step(p, std::vector<float>(3, 0.0f), m, cfg, 1);
  CHECK(p == keep);

  nn::AdamMoments m2;
  nn::adam_step(p, std::vector<float>{0.3f, -0.7f, 0.0f}, m2, cfg, 1);
  CHECK(p[0] < keep[0]);
  CHECK(p[1] > keep[1]);
  CHECK(p[2] == keep[2]);
}

TEST_CASE("adam minimises a quadratic") {
  nn::AdamConfig cfg;
  cfg.lr = 0.05;
  std::vector<float> p{0.0f};
  nn::AdamMoments m;
  for (long t = 1; t <= 100; ++t) nn::adam_step(p, std::vector<float>{2.0f * (p[0] - 3.0f)}, m, cfg, t);
  CHECK(std::abs(p[0] - 3.0f) < 0.1f);
}

TEST_CASE("causal attention ignores later positions") {
  Rng rng(17);
  auto make = [&](tz::Shape s) {
    std::vector<float> v(tz::numel(s));
    for (float& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return v;
  };
  const tz::Shape shape{1, 5, 8};
  auto q = make(shape), k = make(shape), v = make(shape);
  tz::AttentionMask mask;
  mask.causal = true;
  const auto base = tz::attention(tz::Var<float>::constant(shape, q), tz::Var<float>::constant(shape, k),
                                  tz::Var<float>::constant(shape, v), 2, mask);
  // perturb position 3 of keys and values; rows 0..2 must not move
  for (int d = 0; d < 8; ++d) {
    k[static_cast<std::size_t>(3 * 8 + d)] += 5.0f;
    v[static_cast<std::size_t>(3 * 8 + d)] -= 5.0f;
  }
  const auto after = tz::attention(tz::Var<float>::constant(shape, q), tz::Var<float>::constant(shape, k),
                                   tz::Var<float>::constant(shape, v), 2, mask);
  for (int i = 0; i < 3 * 8; ++i) CHECK(after.values()[static_cast<std::size_t>(i)] == base.values()[static_cast<std::size_t>(i)]);
  bool moved = false;
  for (int i = 3 * 8; i < 5 * 8; ++i) moved |= after.values()[static_cast<std::size_t>(i)] != base.values()[static_cast<std::size_t>(i)];
  CHECK(moved);
}

TEST_CASE("error kinds") {
  const auto a = tz::Var<float>::constant({2, 3}, std::vector<float>(6, 1.0f));
  const auto b = tz::Var<float>::constant({3, 2}, std::vector<float>(6, 1.0f));
  CHECK_THROWS_KIND(tz::add(a, b), ErrorKind::ShapeMismatch);
  CHECK_THROWS_KIND(tz::matmul_nt(a, b), ErrorKind::ShapeMismatch);
  const std::vector<float> bad{1.0f, std::numeric_limits<float>::quiet_NaN()};
  CHECK_THROWS_KIND(tz::check_finite(std::span<const float>(bad), "test"), ErrorKind::NonFiniteValue);
  const std::vector<float> inf{std::numeric_limits<float>::infinity()};
  CHECK_THROWS_KIND(tz::check_finite(std::span<const float>(inf), "test"), ErrorKind::NonFiniteValue);
}

TEST_CASE("checkpoint reload is bit-identical") {
  Rng rng(5);
  nn::ParamStore ps;
  ps.add("layer.w", {4, 3}, 4, rng);
  ps.add("layer.b", {3}, 4, rng);
  const auto path = std::filesystem::temp_directory_path() / "radicalign_tensor_test.ckpt";
  nn::save_checkpoint(path, nn::snapshot(ps, "model = test\n"));
  const nn::Checkpoint back = nn::load_checkpoint(path);
  CHECK(back.metadata == "model = test\n");

  Rng other(99);
  nn::ParamStore fresh;
  fresh.add("layer.w", {4, 3}, 4, other);
  fresh.add("layer.b", {3}, 4, other);
  nn::restore(fresh, back);
  for (const auto& [name, t] : ps.params()) {
    const auto u = fresh.get(name);
    REQUIRE(u.numel() == t.numel());
    CHECK(std::memcmp(u.values().data(), t.values().data(), t.numel() * sizeof(float)) == 0);
  }

  nn::ParamStore wrong;
  wrong.add("layer.w", {3, 4}, 3, other);
  CHECK_THROWS(nn::restore(wrong, back));
  std::filesystem::remove(path);
}
