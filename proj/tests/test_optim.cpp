#include <cmath>

#include "ac/optim.hpp"
#include "doctest.h"
#include "test_helpers.hpp"

using ac::Adam;
using ac::RmsProp;
using ac::Tensor;

TEST_CASE("adam first step matches the closed form") {
  // With bias correction, step 1 moves every coordinate by
  // lr · g/(|g| + eps·√(1−β₂)) ≈ lr·sign(g) regardless of magnitude.
  Tensor p({3}, {1.0f, -2.0f, 0.5f});
  Tensor g({3}, {0.4f, -0.01f, 3.0f});
  Adam opt(0.001f);
  opt.step({&p}, {&g});
  CHECK(p[0] == doctest::Approx(1.0 - 0.001).epsilon(1e-4));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.001).epsilon(1e-4));
  CHECK(p[2] == doctest::Approx(0.5 - 0.001).epsilon(1e-4));
  CHECK(opt.steps() == 1);
}

TEST_CASE("adam two steps match a scalar hand computation") {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double m = 0, v = 0, x = 2.0;
  const double g1 = 3.0, g2 = -1.0;
  // step 1
  m = b1 * m + (1 - b1) * g1;
  v = b2 * v + (1 - b2) * g1 * g1;
  x -= lr * (m / (1 - b1)) / (std::sqrt(v / (1 - b2)) + eps);
  // step 2
  m = b1 * m + (1 - b1) * g2;
  v = b2 * v + (1 - b2) * g2 * g2;
  x -= lr * (m / (1 - std::pow(b1, 2))) / (std::sqrt(v / (1 - std::pow(b2, 2))) + eps);

  Tensor p({1}, {2.0f});
  Tensor ga({1}, {3.0f}), gb({1}, {-1.0f});
  Adam opt(0.01f);
  opt.step({&p}, {&ga});
  opt.step({&p}, {&gb});
  CHECK(p[0] == doctest::Approx(x).epsilon(1e-5));
}

TEST_CASE("rmsprop step matches a scalar hand computation") {
  const double lr = 0.02, decay = 0.9, eps = 1e-8;
  double s = 0, x = 1.0;
  for (double g : {0.5, 0.25}) {
    s = decay * s + (1 - decay) * g * g;
    x -= lr * g / (std::sqrt(s) + eps);
  }
  Tensor p({1}, {1.0f});
  Tensor g1({1}, {0.5f}), g2({1}, {0.25f});
  RmsProp opt(0.02f);
  opt.step({&p}, {&g1});
  opt.step({&p}, {&g2});
  CHECK(p[0] == doctest::Approx(x).epsilon(1e-5));
}

TEST_CASE("global norm clip halves a norm-2 gradient set to norm 1") {
  Tensor a({2}, {1.0f, 1.0f});
  Tensor b({2}, {1.0f, 1.0f});  // joint norm = 2
  const double pre = ac::clip_global_norm({&a, &b}, 1.0);
  CHECK(pre == doctest::Approx(2.0));
  double ss = 0;
  for (int i = 0; i < 2; ++i) ss += a[i] * a[i] + b[i] * b[i];
  CHECK(std::sqrt(ss) == doctest::Approx(1.0));
  CHECK(a[0] == doctest::Approx(0.5));
}

TEST_CASE("global norm clip leaves small gradients alone") {
  Tensor a({2}, {0.3f, 0.4f});  // norm 0.5
  const double pre = ac::clip_global_norm({&a}, 1.0);
  CHECK(pre == doctest::Approx(0.5));
  CHECK(a[0] == doctest::Approx(0.3f));
  CHECK(a[1] == doctest::Approx(0.4f));
}

TEST_CASE("optimizers reject mismatched lists") {
  Tensor p({2}), g({3});
  Adam opt(0.1f);
  expect_error(ac::ErrorKind::Dimension, [&] { opt.step({&p}, {&g}); });
  Adam opt2(0.1f);
  expect_error(ac::ErrorKind::Consistency, [&] { opt2.step({&p}, {}); });
}

TEST_CASE("a zero gradient leaves parameters untouched") {
  Tensor p({3}, {1.0f, -2.0f, 0.5f});
  Tensor g({3});  // zeros
  Adam adam(0.1f);
  adam.step({&p}, {&g});
  CHECK(p[0] == 1.0f);
  CHECK(p[1] == -2.0f);
  CHECK(p[2] == 0.5f);

  Tensor q({2}, {4.0f, -4.0f});
  Tensor gz({2});
  RmsProp rms(0.1f);
  rms.step({&q}, {&gz});
  CHECK(q[0] == 4.0f);
  CHECK(q[1] == -4.0f);
}

TEST_CASE("a NaN gradient raises a training error naming the parameter") {
  Tensor p0({2}, {1.0f, 2.0f}), p1({3}, {3.0f, 4.0f, 5.0f});
  Tensor g0({2}, {0.1f, 0.2f});
  Tensor g1({3}, {0.1f, std::nanf(""), 0.3f});

  Adam adam(0.1f);
  bool threw = false;
  try {
    adam.step({&p0, &p1}, {&g0, &g1});
  } catch (const ac::Error& e) {
    threw = true;
    CHECK(e.kind() == ac::ErrorKind::Training);
    CHECK(std::string(e.what()).find("parameter 1") != std::string::npos);
  }
  CHECK(threw);
  // the failed step must not have moved anything
  CHECK(p0[0] == 1.0f);
  CHECK(p1[2] == 5.0f);
  CHECK(adam.steps() == 0);

  RmsProp rms(0.1f);
  expect_error(ac::ErrorKind::Training, [&] { rms.step({&p0, &p1}, {&g0, &g1}); });
  CHECK(p1[0] == 3.0f);
}
