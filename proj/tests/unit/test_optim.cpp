#include <doctest.h>

#include <cmath>
#include <numbers>

#include "attmask/error.hpp"
#include "attmask/ops.hpp"
#include "attmask/optim.hpp"

using attmask::Tensor;
namespace ops = attmask::ops;

namespace {

// Sets w's gradient to g by back-propagating <g, w>.
void set_grad(Tensor<double>& w, const std::vector<double>& g) {
  w.zero_grad();
  ops::sum(ops::mul(w, Tensor<double>::from(w.shape(), g))).backward();
}

}  // namespace

TEST_SUITE("optim") {

TEST_CASE("lr = 0 leaves parameters unchanged") {
  auto w = Tensor<double>::from({2}, {1.5, -2}, true);
  std::vector<Tensor<double>> params{w};
  auto state = attmask::OptimizerState<double>::for_parameters(params);
  set_grad(w, {0.3, -0.1});
  attmask::adamw_step<double>(params, state, 0.0, 0.5);
  CHECK(w.data()[0] == 1.5);
  CHECK(w.data()[1] == -2.0);
}

TEST_CASE("first AdamW step on 0.5 w^2 moves by lr") {
  // m1 = 0.1 g, v1 = 0.001 g^2; bias correction gives mhat = g, vhat = g^2,
  // so the update is lr * g / (|g| + eps) = 0.1 for g = 1.
  auto w = Tensor<double>::from({1}, {1.0}, true);
  std::vector<Tensor<double>> params{w};
  auto state = attmask::OptimizerState<double>::for_parameters(params);
  set_grad(w, {1.0});
  attmask::adamw_step<double>(params, state, 0.1, 0.0);
  CHECK(w.data()[0] == doctest::Approx(1.0 - 0.1 * 1.0 / (1.0 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("two steps match an independent scalar AdamW") {
  auto w = Tensor<double>::from({1}, {0.7}, true);
  std::vector<Tensor<double>> params{w};
  auto state = attmask::OptimizerState<double>::for_parameters(params);
  double x = 0.7, m = 0, v = 0;
  const double lr = 0.05, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 2; ++t) {
    const double g = 3 * x * x;  // f = x^3
    set_grad(w, {g});
    attmask::adamw_step<double>(params, state, lr, wd);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    x = x * (1 - lr * wd) - lr * mh / (std::sqrt(vh) + eps);
    CHECK(w.data()[0] == doctest::Approx(x).epsilon(1e-13));
  }
}

TEST_CASE("pure decay and the decay mask") {
  auto a = Tensor<double>::from({1}, {1.0}, true);
  auto b = Tensor<double>::from({1}, {1.0}, true);
  std::vector<Tensor<double>> params{a, b};
  auto state = attmask::OptimizerState<double>::for_parameters(params);
  const bool mask[] = {true, false};
  attmask::adamw_step<double>(params, state, 1.0, 0.1, mask);
  CHECK(a.data()[0] == doctest::Approx(0.9));
  CHECK(b.data()[0] == 1.0);
}

TEST_CASE("non-finite gradient names the parameter and changes nothing") {
  auto a = Tensor<double>::from({1}, {1.0}, true);
  auto b = Tensor<double>::from({1}, {2.0}, true);
  std::vector<Tensor<double>> params{a, b};
  auto state = attmask::OptimizerState<double>::for_parameters(params);
  set_grad(a, {1.0});
  set_grad(b, {std::nan("")});
  const std::string names[] = {"alpha", "beta"};
  try {
    attmask::adamw_step<double>(params, state, 0.1, 0.0, {}, names);
    FAIL("expected NumericError");
  } catch (const attmask::NumericError& e) {
    CHECK(std::string(e.what()).find("beta") != std::string::npos);
  }
  CHECK(a.data()[0] == 1.0);
  CHECK(state.step == 0);
}

TEST_CASE("warmup-cosine schedule landmarks") {
  const attmask::ScheduleSpec s{attmask::ScheduleKind::WarmupCosine, 0.0, 1.0, 0.2, 10, 110};
  CHECK(attmask::eval_schedule(s, 0) == 0.0);
  CHECK(attmask::eval_schedule(s, 5) == doctest::Approx(0.5));
  CHECK(attmask::eval_schedule(s, 10) == 1.0);
  CHECK(attmask::eval_schedule(s, 60) == doctest::Approx(0.6));
  CHECK(attmask::eval_schedule(s, 110) == doctest::Approx(0.2));
  CHECK_THROWS_AS(attmask::eval_schedule(s, 111), attmask::RangeError);
  CHECK_THROWS_AS(attmask::eval_schedule(s, -1), attmask::RangeError);
}

TEST_CASE("cosine and linear schedules") {
  const attmask::ScheduleSpec c{attmask::ScheduleKind::Cosine, 0.04, 0.0, 0.4, 0, 100};
  CHECK(attmask::eval_schedule(c, 0) == doctest::Approx(0.04));
  CHECK(attmask::eval_schedule(c, 50) == doctest::Approx(0.22));
  CHECK(attmask::eval_schedule(c, 100) == doctest::Approx(0.4));
  const attmask::ScheduleSpec l{attmask::ScheduleKind::Linear, 0.04, 0.0, 0.07, 30, 100};
  CHECK(attmask::eval_schedule(l, 15) == doctest::Approx(0.055));
  CHECK(attmask::eval_schedule(l, 30) == doctest::Approx(0.07));
  CHECK(attmask::eval_schedule(l, 90) == doctest::Approx(0.07));
  const attmask::ScheduleSpec bad{attmask::ScheduleKind::WarmupCosine, 0, 1, 0, 20, 10};
  CHECK_THROWS_AS(bad.validate(), attmask::ParameterError);
}

}
