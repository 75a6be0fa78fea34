#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "lvf/degrade.hpp"
#include "lvf/flow.hpp"
#include "lvf/rng.hpp"
#include "util.hpp"

using namespace lvf;
using namespace lvf::test;

TEST_CASE("path endpoints and midpoint") {
  Rng rng(1);
  Tensor x0 = rand_t(rng, {3, 4, 4});
  Tensor x1 = rand_t(rng, {3, 4, 4});

  CHECK(same_values(sample_path(x0, x1, 0.0), x0));
  CHECK(same_values(sample_path(x0, x1, 1.0), x1));

  Tensor mid = sample_path(neg(x1), x1, 0.5);
  for (double v : mid.data()) CHECK(v == 0.0);

  Tensor q = sample_path(x0, x1, 0.25);
  CHECK(q.at({0, 0, 0}) ==
        doctest::Approx(0.75 * x0.at({0, 0, 0}) + 0.25 * x1.at({0, 0, 0})));

  CHECK_THROWS_AS(sample_path(x0, rand_t(rng, {3, 2, 2}), 0.5), ShapeError);
  CHECK_THROWS_AS(sample_path(x0, x1, -0.1), ContractError);
  CHECK_THROWS_AS(sample_path(x0, x1, 1.5), ContractError);
}

TEST_CASE("objective draws are deterministic and well spread") {
  Shape shape{3, 4, 4};
  FlowDraw a = cfm_draw(99, 5, shape);
  FlowDraw b = cfm_draw(99, 5, shape);
  FlowDraw c = cfm_draw(99, 6, shape);
  CHECK(a.t == b.t);
  CHECK(same_values(a.x0, b.x0));
  CHECK(a.t != c.t);
  CHECK(max_abs_diff(a.x0, c.x0) > 1e-6);

  // Kolmogorov-Smirnov statistic of 10k t draws against Uniform[0,1]
  const int n = 10000;
  std::vector<double> ts;
  ts.reserve(n);
  for (int i = 0; i < n; ++i) ts.push_back(cfm_draw(123, i, {1}).t);
  std::sort(ts.begin(), ts.end());
  double d = 0.0;
  for (int i = 0; i < n; ++i) {
    CHECK(ts[static_cast<size_t>(i)] >= 0.0);
    CHECK(ts[static_cast<size_t>(i)] < 1.0);
    d = std::max(d, std::abs((i + 1.0) / n - ts[static_cast<size_t>(i)]));
    d = std::max(d, std::abs(ts[static_cast<size_t>(i)] - static_cast<double>(i) / n));
  }
  CHECK(d < 0.02);
}

TEST_CASE("perfect predictor gives exactly zero loss") {
  Rng rng(7);
  Shape shape{3, 8, 8};
  const uint64_t seed = 31;

  std::vector<FlowSample> batch(2);
  batch[0].x1 = rand_t(rng, shape, -0.9, 0.9);
  batch[0].task_id = "0";
  batch[1].x1 = rand_t(rng, shape, -0.9, 0.9);
  batch[1].task_id = "1";
  for (auto& s : batch) s.cond = Tensor::zeros(shape);

  auto oracle = [&](const Tensor&, double, const FlowSample& s) {
    int64_t idx = std::stoll(s.task_id);
    FlowDraw d = cfm_draw(seed, idx, shape);
    return sub(s.x1, d.x0);
  };
  CfmLossOut out = cfm_loss(oracle, batch, seed);
  CHECK(out.loss.value() == 0.0);
  CHECK(out.ts.size() == 2);

  CHECK_THROWS_AS(cfm_loss(oracle, {}, seed), ContractError);
}

TEST_CASE("zero model loss matches the Monte-Carlo mean-square target") {
  Image clean = gen_clean(555, 16);
  Tensor x1 = signed_from_image(clean);
  double mean_sq = 0.0;
  for (double v : x1.data()) mean_sq += v * v;
  mean_sq /= static_cast<double>(x1.size());
  const double expected = mean_sq + 1.0;  // E[(x1-x0)^2] with x0 ~ N(0,1)

  std::vector<FlowSample> batch(1000);
  for (auto& s : batch) {
    s.x1 = x1;
    s.cond = x1;
  }
  auto zero_model = [](const Tensor& x_t, double, const FlowSample&) {
    return Tensor::zeros(x_t.shape());
  };
  NoGrad ng;
  CfmLossOut out = cfm_loss(zero_model, batch, 808);
  CHECK(out.loss.value() == doctest::Approx(expected).epsilon(0.02));
}

TEST_CASE("loss is uniform-average over the batch") {
  Rng rng(17);
  Shape shape{3, 4, 4};
  std::vector<FlowSample> batch(3);
  for (auto& s : batch) {
    s.x1 = rand_t(rng, shape, -0.9, 0.9);
    s.cond = s.x1;
  }
  auto zero_model = [](const Tensor& x_t, double, const FlowSample&) {
    return Tensor::zeros(x_t.shape());
  };
  NoGrad ng;
  double whole = cfm_loss(zero_model, batch, 3).loss.value();
  double parts = 0.0;
  for (size_t i = 0; i < 3; ++i) {
    // same draw stream as position i of the full batch
    FlowDraw d = cfm_draw(3, static_cast<int64_t>(i), shape);
    Tensor diff = sub(batch[i].x1, d.x0);
    parts += mean_all(mul(diff, diff)).value();
  }
  CHECK(whole == doctest::Approx(parts / 3.0).epsilon(1e-12));
}

TEST_CASE("loss gradient on a micro model") {
  Rng rng(23);
  Shape shape{3, 16, 16};
  Tensor W = rand_t(rng, {48, 48}, -0.2, 0.2);
  W.set_requires_grad(true);

  std::vector<FlowSample> batch(2);
  for (auto& s : batch) {
    s.x1 = rand_t(rng, shape, -0.9, 0.9);
    s.cond = s.x1;
  }
  auto model = [&](const Tensor& x_t, double, const FlowSample&) {
    return unpatchify_raw(matmul(patchify_raw(x_t, 4), W), 3, 16, 16, 4);
  };
  auto f = [&]() { return cfm_loss(model, batch, 404).loss; };
  CHECK(grad_check_params(f, {W}) < 1e-4);
}

TEST_CASE("one-step exactness under a constant field") {
  Rng rng(41);
  Shape shape{3, 8, 8};
  Tensor x1 = rand_t(rng, shape, -0.9, 0.9);
  const uint64_t seed = 77;
  Tensor x0 = sample_noise(seed, shape);
  auto field = [&](const Tensor&, double) { return sub(x1, x0); };

  Tensor one = euler_sample(field, shape, 1, seed);
  CHECK(max_abs_diff(one, x1) < 1e-12);

  Tensor fifty = euler_sample(field, shape, 50, seed);
  CHECK(max_abs_diff(fifty, one) < 1e-10);
}

TEST_CASE("sampler determinism and seed sensitivity") {
  Shape shape{3, 8, 8};
  auto field = [](const Tensor& x, double) { return scale(x, -0.5); };
  Tensor a = euler_sample(field, shape, 20, 5);
  Tensor b = euler_sample(field, shape, 20, 5);
  Tensor c = euler_sample(field, shape, 20, 6);
  CHECK(same_values(a, b));
  CHECK(max_abs_diff(a, c) > 1e-9);
  CHECK_THROWS_AS(euler_sample(field, shape, 0, 5), ContractError);
}

TEST_CASE("clamp happens only after the last step") {
  Shape shape{3, 4, 4};
  // +4 then -4: trajectory leaves [-1,1] mid-way but must come back untouched
  auto swing = [](const Tensor& x, double t) {
    return Tensor::full(x.shape(), t < 0.5 ? 4.0 : -4.0);
  };
  Tensor out = euler_sample(swing, shape, 2, 909);
  Tensor x0 = sample_noise(909, shape);
  Tensor expect = x0.clone();
  for (auto& v : expect.data()) v = std::min(1.0, std::max(-1.0, v));
  CHECK(max_abs_diff(out, expect) < 1e-14);

  // a one-way push is clamped at the boundary
  auto push = [](const Tensor& x, double) { return Tensor::full(x.shape(), 4.0); };
  Tensor high = euler_sample(push, shape, 2, 909);
  for (double v : high.data()) {
    CHECK(v <= 1.0);
    CHECK(v >= -1.0);
  }
}

TEST_CASE("divergence names the failing step") {
  Shape shape{3, 4, 4};
  auto blowup = [](const Tensor& x, double t) {
    if (t >= 0.5) {
      Tensor bad = Tensor::full(x.shape(), 0.0);
      bad.data()[0] = std::numeric_limits<double>::quiet_NaN();
      return bad;
    }
    return Tensor::zeros(x.shape());
  };
  bool threw = false;
  try {
    euler_sample(blowup, shape, 4, 11);
  } catch (const NumericError& e) {
    threw = true;
    CHECK(std::string(e.what()).find("step 2") != std::string::npos);
  }
  CHECK(threw);
}
