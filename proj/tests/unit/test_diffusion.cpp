#include <doctest.h>
#include <torch/torch.h>

#include <cmath>
#include <random>

#include "ctrlloop/diffusion.hpp"
#include "ctrlloop/error.hpp"

using namespace ctrlloop;
using namespace ctrlloop::diffusion;

namespace {

double max_abs(const torch::Tensor& a, const torch::Tensor& b) { return (a - b).abs().max().item<double>(); }

// Noise that makes predict_x0(x_t, eps, t) equal c exactly.
torch::Tensor noise_toward(const torch::Tensor& x_t, const torch::Tensor& c, int t, const NoiseSchedule& s) {
  const double ab = s.alpha_bar_at(t);
  return (x_t - std::sqrt(ab) * c) / std::sqrt(1.0 - ab);
}

}  // namespace

TEST_SUITE("schedule") {
  TEST_CASE("single step") {
    const auto s = linear_schedule(1, 0.3, 0.3);
    REQUIRE(s.steps() == 1);
    CHECK(s.alpha_bar_at(1) == doctest::Approx(0.7));
    CHECK(s.alpha_bar_at(0) == 1.0);
  }

  TEST_CASE("default schedule") {
    const auto s = linear_schedule(100, 1e-4, 0.02);
    // Independent product of (1 - beta_t) with the interpolated betas.
    double prod = 1.0;
    for (int t = 1; t <= 100; ++t) {
      const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 99.0;
      prod *= 1.0 - beta;
      CHECK(s.alpha_bar_at(t) == doctest::Approx(prod).epsilon(1e-12));
      if (t > 1) CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
    }
    CHECK(s.alpha_bar_at(1) >= 0.99);
    CHECK(s.alpha_bar_at(100) > 0.0);
    CHECK(s.alpha_bar_at(100) < 0.5);
  }

  TEST_CASE("constant betas give a geometric alpha_bar") {
    const double b = 0.05;
    const auto s = linear_schedule(20, b, b);
    for (int t = 1; t <= 20; ++t) CHECK(s.alpha_bar_at(t) == doctest::Approx(std::pow(1 - b, t)).epsilon(1e-12));
  }

  TEST_CASE("invalid parameters") {
    CHECK_THROWS_AS(linear_schedule(0, 1e-4, 0.02), ValidationError);
    CHECK_THROWS_AS(linear_schedule(10, 0.0, 0.02), ValidationError);
    CHECK_THROWS_AS(linear_schedule(10, 0.03, 0.02), ValidationError);
    CHECK_THROWS_AS(linear_schedule(10, 1e-4, 1.0), ValidationError);
    CHECK_THROWS_AS(schedule_from_betas({0.1, 1.5}), ValidationError);
    CHECK_THROWS_AS(schedule_from_betas({}), ValidationError);
  }

  TEST_CASE("schedule round-trips through its betas") {
    const auto a = linear_schedule(50, 1e-3, 0.1);
    const auto b = schedule_from_betas(a.beta);
    CHECK(a.alpha_bar == b.alpha_bar);
  }
}

TEST_SUITE("forward") {
  TEST_CASE("zero noise scales x0") {
    const auto s = linear_schedule(100, 1e-4, 0.02);
    const auto x0 = torch::rand({2, 3, 4, 4}, torch::kDouble);
    for (int t : {1, 37, 100})
      CHECK(max_abs(forward_noise(x0, t, torch::zeros_like(x0), s), std::sqrt(s.alpha_bar_at(t)) * x0) < 1e-15);
  }

  TEST_CASE("early steps stay close to x0") {
    const auto s = linear_schedule(100, 1e-4, 0.02);
    const auto x0 = torch::rand({3, 8, 8}, torch::kDouble);
    const auto eps = torch::randn({3, 8, 8}, torch::kDouble);
    const auto xt = forward_noise(x0, 1, eps, s);
    const double bound = std::sqrt(1.0 - s.alpha_bar_at(1)) * eps.norm().item<double>() +
                         (1.0 - std::sqrt(s.alpha_bar_at(1))) * x0.norm().item<double>();
    CHECK((xt - x0).norm().item<double>() <= bound + 1e-12);
  }

  TEST_CASE("moments over many noise draws") {
    const auto s = linear_schedule(100, 1e-4, 0.02);
    const int n = 10000, t = 60;
    const auto x0 = torch::linspace(-1.0, 1.0, 16, torch::kDouble);
    const auto eps = gaussian(123, {n, 16}, torch::kDouble);
    const auto xt = forward_noise(x0.expand({n, 16}).contiguous(), t, eps, s);
    const double ab = s.alpha_bar_at(t);
    const auto mean = xt.mean(0);
    const auto var = xt.var(0);
    const double se_mean = std::sqrt((1 - ab) / n);
    const double se_var = (1 - ab) * std::sqrt(2.0 / (n - 1));
    CHECK((mean - std::sqrt(ab) * x0).abs().max().item<double>() <= 4 * se_mean);
    CHECK((var - (1 - ab)).abs().max().item<double>() <= 4 * se_var);
  }

  TEST_CASE("per-item timesteps match scalar calls") {
    const auto s = linear_schedule(100, 1e-4, 0.02);
    const auto x0 = torch::rand({3, 2, 4, 4}, torch::kDouble);
    const auto eps = torch::randn({3, 2, 4, 4}, torch::kDouble);
    const std::vector<int> ts{5, 50, 100};
    const auto batched = forward_noise(x0, ts, eps, s);
    for (int i = 0; i < 3; ++i) CHECK(max_abs(batched[i], forward_noise(x0[i], ts[i], eps[i], s)) == 0.0);
  }

  TEST_CASE("shape and range errors") {
    const auto s = linear_schedule(10, 1e-4, 0.02);
    CHECK_THROWS_AS(forward_noise(torch::zeros({2, 2}), 1, torch::zeros({2, 3}), s), ValidationError);
    CHECK_THROWS_AS(forward_noise(torch::zeros({2, 2}), 11, torch::zeros({2, 2}), s), ValidationError);
    CHECK_THROWS_AS(forward_noise(torch::zeros({2, 2}), 0, torch::zeros({2, 2}), s), ValidationError);
  }
}

TEST_SUITE("inverse") {
  TEST_CASE("predict_x0 inverts forward_noise") {
    const auto s = linear_schedule(100, 1e-4, 0.02);
    for (int t = 1; t <= 100; ++t) {
      const auto x0 = torch::rand({4, 4}, torch::kDouble) * 2 - 1;
      const auto eps = torch::randn({4, 4}, torch::kDouble);
      CHECK(max_abs(predict_x0(forward_noise(x0, t, eps, s), eps, t, s), x0) < 1e-5);
    }
  }

  TEST_CASE("zero noise estimate rescales x_t") {
    const auto s = linear_schedule(100, 1e-4, 0.02);
    const auto xt = torch::randn({5}, torch::kDouble);
    CHECK(max_abs(predict_x0(xt, torch::zeros_like(xt), 70, s), xt / std::sqrt(s.alpha_bar_at(70))) < 1e-15);
  }

  TEST_CASE("forward_noise of the prediction recovers x_t") {
    const auto s = linear_schedule(100, 1e-4, 0.02);
    for (int t : {1, 10, 55, 100}) {
      const auto xt = torch::randn({3, 3}, torch::kDouble);
      const auto eh = torch::randn({3, 3}, torch::kDouble);
      CHECK(max_abs(forward_noise(predict_x0(xt, eh, t, s), t, eh, s), xt) < 1e-5);
    }
  }
}

TEST_SUITE("ddim") {
  TEST_CASE("terminal step with exact noise returns x0") {
    const auto s = linear_schedule(100, 1e-4, 0.02);
    const auto x0 = torch::rand({2, 3, 4, 4}, torch::kDouble);
    const auto eps = torch::randn_like(x0);
    for (int t : {1, 20, 100}) CHECK(max_abs(ddim_step(forward_noise(x0, t, eps, s), eps, t, 0, s), x0) < 1e-12);
  }

  TEST_CASE("chain with a constant x0 prediction ends at that constant") {
    const auto s = linear_schedule(100, 1e-4, 0.02);
    const auto c = torch::rand({3, 4, 4}, torch::kDouble);
    auto x = torch::randn({3, 4, 4}, torch::kDouble);
    const auto plan = strided_plan(100, 7);
    for (std::size_t i = 0; i < plan.steps.size(); ++i) {
      const int t = plan.steps[i];
      const int tp = i + 1 < plan.steps.size() ? plan.steps[i + 1] : 0;
      const auto eps = noise_toward(x, c, t, s);
      const auto next = ddim_step(x, eps, t, tp, s);
      // Unrolled by hand: sqrt(abar_prev) c + sqrt(1 - abar_prev) eps.
      const auto expect = std::sqrt(s.alpha_bar_at(tp)) * c + std::sqrt(1 - s.alpha_bar_at(tp)) * eps;
      CHECK(max_abs(next, expect) < 1e-12);
      x = next;
    }
    CHECK(max_abs(x, c) < 1e-12);
  }

  TEST_CASE("footnote variant matches the standard step at t=1 and separates after") {
    // alpha_1 = 0.999 so alpha_bar_1 = 0.999.
    const auto s = linear_schedule(1, 1e-3, 1e-3);
    const auto x = torch::tensor({0.5, -0.25}, torch::kDouble);
    const auto eh = torch::tensor({0.1, 0.2}, torch::kDouble);
    const auto std_out = ddim_step(x, eh, 1, 0, s, StepVariant::Standard);
    const auto foot = ddim_step(x, eh, 1, 0, s, StepVariant::PaperFootnote);
    const double ab = 0.999, a = 0.999;
    const auto expect_std = (x - std::sqrt(1 - ab) * eh) / std::sqrt(ab);
    const auto expect_foot = (x - (1 - a) / std::sqrt(1 - ab) * eh) / std::sqrt(ab);
    CHECK(max_abs(std_out, expect_std) < 1e-15);
    CHECK(max_abs(foot, expect_foot) < 1e-15);
    // At t=1 alpha equals alpha_bar, so both formulas coincide; they separate from t=2 on.
    CHECK(max_abs(std_out, foot) < 1e-15);
    const auto s2 = linear_schedule(2, 1e-3, 2e-3);
    const auto d2 = max_abs(ddim_step(x, eh, 2, 1, s2, StepVariant::Standard),
                            ddim_step(x, eh, 2, 1, s2, StepVariant::PaperFootnote));
    // Regression value for the gap at t=2.
    const double ab2 = (1 - 1e-3) * (1 - 2e-3), a2 = 1 - 2e-3;
    const double gap = (std::sqrt(1 - ab2) - (1 - a2) / std::sqrt(1 - ab2)) / std::sqrt(ab2);
    CHECK(gap > 0.0);
    CHECK(d2 > 1e-4);
  }

  TEST_CASE("clipped step clamps the x0 prediction") {
    const auto s = linear_schedule(100, 1e-4, 0.02);
    const auto x = torch::full({4}, 3.0, torch::kDouble);
    const auto eh = torch::zeros({4}, torch::kDouble);
    CHECK(max_abs(ddim_step_clipped(x, eh, 10, 0, s, -1.0, 1.0), torch::ones({4}, torch::kDouble)) < 1e-15);
    // Inside the range it is the standard step.
    const auto y = torch::randn({4}, torch::kDouble) * 0.1;
    CHECK(max_abs(ddim_step_clipped(y, eh, 3, 1, s, -1.0, 1.0), ddim_step(y, eh, 3, 1, s)) < 1e-12);
  }

  TEST_CASE("invalid step order") {
    const auto s = linear_schedule(10, 1e-4, 0.02);
    const auto x = torch::zeros({2});
    CHECK_THROWS_AS(ddim_step(x, x, 5, 5, s), ValidationError);
    CHECK_THROWS_AS(ddim_step(x, x, 5, 7, s), ValidationError);
    CHECK_THROWS_AS(ddim_step(x, x, 5, -1, s), ValidationError);
  }
}

TEST_SUITE("plan") {
  TEST_CASE("T=100, n=10") {
    CHECK((strided_plan(100, 10).steps == std::vector<int>{100, 90, 80, 70, 60, 50, 40, 30, 20, 10}));
  }
  TEST_CASE("n=1 is a single step") { CHECK(strided_plan(37, 1).steps == std::vector<int>{37}); }
  TEST_CASE("T=1000, n=50") {
    const auto p = strided_plan(1000, 50);
    CHECK(p.steps.size() == 50);
    CHECK(p.steps.front() == 1000);
    CHECK(p.steps[0] - p.steps[1] == 20);
  }
  TEST_CASE("invariants for every n") {
    for (int T : {1, 7, 100, 113})
      for (int n = 1; n <= T; ++n) {
        const auto p = strided_plan(T, n);
        const int stride = (T + n - 1) / n;
        REQUIRE(p.steps.front() == T);
        for (std::size_t i = 0; i < p.steps.size(); ++i) {
          CHECK(p.steps[i] >= 1);
          CHECK(p.steps[i] == T - static_cast<int>(i) * stride);
        }
        CHECK(p.steps.back() - stride < 1);
        CHECK(static_cast<int>(p.steps.size()) <= n);
      }
  }
  TEST_CASE("out of range") {
    CHECK_THROWS_AS(strided_plan(10, 0), ValidationError);
    CHECK_THROWS_AS(strided_plan(10, 11), ValidationError);
  }
}

TEST_SUITE("sampler") {
  TEST_CASE("oracle denoiser reaches the target for any step count") {
    const auto s = linear_schedule(100, 1e-4, 0.02);
    const auto c = torch::rand({2, 3, 8, 8}, torch::kDouble) * 2 - 1;
    const DenoiseFn oracle = [&](const torch::Tensor& x, const torch::Tensor&, int t) {
      return noise_toward(x, c, t, s);
    };
    const auto cond = torch::zeros({2, 1}, torch::kDouble);
    for (int n : {1, 10, 50, 100}) {
      const auto out = sample(oracle, cond, strided_plan(100, n), s, 77, {2, 3, 8, 8}, torch::kDouble);
      CHECK(max_abs(out, c) < 1e-4);
    }
  }

  TEST_CASE("determinism and seed sensitivity") {
    const auto s = linear_schedule(50, 1e-4, 0.02);
    const DenoiseFn fn = [](const torch::Tensor& x, const torch::Tensor&, int t) { return 0.1 * x * t / 50.0; };
    const auto cond = torch::zeros({1, 1});
    const auto a = sample(fn, cond, strided_plan(50, 5), s, 1, {1, 3, 4, 4});
    const auto b = sample(fn, cond, strided_plan(50, 5), s, 1, {1, 3, 4, 4});
    const auto c = sample(fn, cond, strided_plan(50, 5), s, 2, {1, 3, 4, 4});
    CHECK(torch::equal(a, b));
    CHECK(max_abs(a, c) > 0.0);
  }

  TEST_CASE("non-finite intermediates raise a numerical error") {
    const auto s = linear_schedule(10, 1e-4, 0.02);
    const DenoiseFn bad = [](const torch::Tensor& x, const torch::Tensor&, int) {
      return torch::full_like(x, std::numeric_limits<double>::quiet_NaN());
    };
    CHECK_THROWS_AS(sample(bad, torch::zeros({1, 1}), strided_plan(10, 2), s, 0, {1, 2}), NumericalError);
  }

  TEST_CASE("gradients flow through every step") {
    const auto s = linear_schedule(20, 1e-4, 0.05);
    auto w = torch::tensor({0.3}, torch::dtype(torch::kDouble).requires_grad(true));
    const DenoiseFn fn = [&](const torch::Tensor& x, const torch::Tensor&, int) { return w * x; };
    const auto out = sample(fn, torch::zeros({1, 1}, torch::kDouble), strided_plan(20, 4), s, 3, {1, 6},
                            torch::kDouble);
    out.pow(2).sum().backward();
    REQUIRE(w.grad().defined());
    CHECK(std::abs(w.grad().item<double>()) > 0.0);
  }

  TEST_CASE("seeded gaussian draws") {
    CHECK(torch::equal(gaussian(5, {3, 4}), gaussian(5, {3, 4})));
    const std::vector<std::uint64_t> seeds{5, 6};
    const auto batch = gaussian_batch(seeds, {3, 4});
    CHECK(torch::equal(batch[0], gaussian(5, {3, 4})));
    CHECK(torch::equal(batch[1], gaussian(6, {3, 4})));
  }
}
