#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"
#include "tino/diffusion.hpp"
#include "tino/schedule.hpp"

using namespace tino;
using tino::testing::central_difference;
using tino::testing::rel_err;

// ---------------------------------------------------------------- schedule

TEST(Schedule, CosineAtZeroIsOneBeforeClampAndAlphaMaxAfter) {
  const auto s = Schedule::cosine();
  EXPECT_EQ(s.raw(0.0).first, 1.0);
  EXPECT_EQ(alpha(s, 0.0), kAlphaMax);
}

TEST(Schedule, CosineAtHalfIsHalf) { EXPECT_NEAR(alpha(Schedule::cosine(), 0.5), 0.5, 1e-15); }

TEST(Schedule, TableInterpolatesLinearly) {
  const auto s = Schedule::from_table({1.0, 0.5, 0.0});
  EXPECT_DOUBLE_EQ(s.raw(0.25).first, 0.75);
  EXPECT_DOUBLE_EQ(alpha(s, 0.25), 0.75);
  EXPECT_EQ(alpha(s, 1.0), kAlphaMin);
}

TEST(Schedule, RejectsIncreasingTable) { EXPECT_THROW(Schedule::from_table({0.5, 0.9}), ConfigError); }

TEST(Schedule, OutOfRangeTimestepIsDomainError) {
  EXPECT_THROW(alpha(Schedule::cosine(), -0.1), DomainError);
  EXPECT_THROW(alpha(Schedule::cosine(), 1.5), DomainError);
}

TEST(Schedule, ClampedRegionHasZeroDerivative) {
  const auto s = Schedule::cosine();
  EXPECT_EQ(s.eval(0.0).second, 0.0);
  EXPECT_EQ(s.eval(1.0).second, 0.0);
  EXPECT_NE(s.eval(0.4).second, 0.0);
}

TEST(Schedule, DerivativeMatchesFiniteDifference) {
  for (const auto& s : {Schedule::cosine(), Schedule::scaled_linear()}) {
    for (double t : {0.1234, 0.3337, 0.6215, 0.9043}) {
      const double fd = central_difference([&](double x) { return alpha(s, x); }, t, 1e-7);
      EXPECT_LT(rel_err(s.eval(t).second, fd), 1e-4) << "t=" << t;
    }
  }
}

TEST(Schedule, ScaledLinearTableIsMonotoneAndStartsAtOne) {
  const auto s = Schedule::scaled_linear(1000);
  EXPECT_EQ(s.table().size(), 1001u);
  EXPECT_EQ(s.table().front(), 1.0);
  EXPECT_LT(s.table().back(), 0.01);
}

TEST(TimestepVector, UniformDefaults) {
  const auto t = TimestepVector::uniform(10, 0.75);
  ASSERT_EQ(t.K(), 10u);
  EXPECT_EQ(t[0], 0.0);
  EXPECT_DOUBLE_EQ(t[1], 0.075);
  EXPECT_DOUBLE_EQ(t[5], 0.375);
  EXPECT_DOUBLE_EQ(t[10], 0.75);
}

TEST(TimestepVector, ClampsToRangeAndPinsZero) {
  TimestepVector t({0.3, -1.0, 2.0});
  EXPECT_EQ(t[0], 0.0);
  EXPECT_EQ(t[1], kTimestepMin);
  EXPECT_EQ(t[2], kTimestepMax);
}

// ---------------------------------------------------------------- DDIM algebra

namespace {
Schedule exact_endpoints() {
  Schedule s = Schedule::from_table({1.0, 0.25, 0.0});
  s.set_clamp(1e-300, 1.0);
  return s;
}
}  // namespace

TEST(ForwardDiffuse, AlphaOneReturnsLatentAndAlphaZeroReturnsNoise) {
  Schedule s = Schedule::from_table({1.0, 0.0});
  s.set_clamp(1e-300, 1.0);
  const Tensor L = randn(Shape{2, 3, 3}, 1);
  const Tensor N = randn(Shape{2, 3, 3}, 2);
  EXPECT_EQ(forward_diffuse(L, N, 0.0, s), L);
  // alpha hits the lower clamp; sqrt(1e-300) * L is below 1e-149.
  EXPECT_LT(max_abs_diff(forward_diffuse(L, N, 1.0, s), N), 1e-140);
}

TEST(ForwardDiffuse, QuarterAlphaOnOnes) {
  const Tensor out = forward_diffuse(Tensor(Shape{1, 2, 2}, 1.0), Tensor(Shape{1, 2, 2}, 0.0), 0.5, exact_endpoints());
  for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(ForwardDiffuse, ShapeMismatchThrows) {
  EXPECT_THROW(forward_diffuse(Tensor(Shape{1, 2, 2}), Tensor(Shape{1, 2, 3}), 0.5, Schedule::cosine()), ShapeError);
}

TEST(ReverseStep, TrueNoiseInvertsForward) {
  const auto s = Schedule::cosine();
  const Tensor L = randn(Shape{4, 8, 8}, 3);
  const Tensor N = randn(Shape{4, 8, 8}, 4);
  const Tensor xt = forward_diffuse(L, N, 0.8, s);
  EXPECT_LE(max_abs_diff(reverse_step(xt, N, 0.8, 0.3, s), forward_diffuse(L, N, 0.3, s)), 1e-12);
}

TEST(ReverseStep, SameTimestepIsIdentity) {
  const auto s = Schedule::cosine();
  const Tensor x = randn(Shape{1, 3, 3}, 5);
  EXPECT_LE(max_abs_diff(reverse_step(x, randn(Shape{1, 3, 3}, 6), 0.4, 0.4, s), x), 1e-14);
}

TEST(ReverseStep, ZeroNoiseScalesByAlphaRatio) {
  const auto s = Schedule::cosine();
  const Tensor x = randn(Shape{1, 3, 3}, 7);
  const Tensor out = reverse_step(x, Tensor(x.shape()), 0.7, 0.2, s);
  const double ratio = std::sqrt(alpha(s, 0.2) / alpha(s, 0.7));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(out[i], ratio * x[i], 1e-14);
}

TEST(DdimProperty, InversionIdentityOver100Cases) {
  std::mt19937_64 gen(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) {
    const auto s = c % 2 ? Schedule::cosine() : Schedule::scaled_linear();
    const auto u32 = static_cast<std::size_t>(c);
    const Shape shape{1 + u32 % 4, 2 + u32 % 5, 2 + u32 % 3};
    const Tensor L = randn(shape, gen());
    const Tensor N = randn(shape, gen());
    const double ta = u(gen), tb = u(gen);
    const Tensor lhs = reverse_step(forward_diffuse(L, N, ta, s), N, ta, tb, s);
    worst = std::max(worst, max_abs_diff(lhs, forward_diffuse(L, N, tb, s)));
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(DdimProperty, VariancePreservation) {
  const auto s = Schedule::cosine();
  for (int i = 0; i <= 1000; ++i) {
    const double a = alpha(s, i / 1000.0);
    EXPECT_NEAR(std::pow(std::sqrt(a), 2) + std::pow(std::sqrt(1.0 - a), 2), 1.0, 4e-16);
  }
}

// ---------------------------------------------------------------- blending

TEST(MaskedBlend, OnesAndZeros) {
  const Tensor e = randn(Shape{3, 2, 2}, 1);
  const Tensor o = randn(Shape{3, 2, 2}, 2);
  EXPECT_EQ(masked_blend(e, o, Tensor(Shape{1, 2, 2}, 1.0)), e);
  EXPECT_EQ(masked_blend(e, o, Tensor(Shape{1, 2, 2}, 0.0)), o);
}

TEST(MaskedBlend, ElementwiseOnOneByTwo) {
  const Tensor out = masked_blend(Tensor(Shape{1, 1, 2}, {1.0, 2.0}), Tensor(Shape{1, 1, 2}, {3.0, 4.0}),
                                  Tensor(Shape{1, 1, 2}, {1.0, 0.0}));
  EXPECT_EQ(out, Tensor(Shape{1, 1, 2}, {1.0, 4.0}));
}

TEST(MaskedBlend, RejectsValuesOutsideUnitInterval) {
  const Tensor e(Shape{1, 1, 2});
  EXPECT_THROW(masked_blend(e, e, Tensor(Shape{1, 1, 2}, {1.5, 0.0})), DomainError);
  EXPECT_THROW(masked_blend(e, e, Tensor(Shape{1, 1, 2}, {-0.1, 0.0})), DomainError);
}

TEST(MaskedBlend, MaskShapeMismatchThrows) {
  const Tensor e(Shape{1, 2, 2});
  EXPECT_THROW(masked_blend(e, e, Tensor(Shape{1, 1, 2})), ShapeError);
}

// ---------------------------------------------------------------- trajectory

namespace {

/// Always returns the same fixed noise tensor.
class FixedNoiseDenoiser final : public DenoiserBackend {
 public:
  FixedNoiseDenoiser(Tensor noise, Schedule s) : noise_(std::move(noise)), s_(std::move(s)) {}
  Var predict(const Var&, const Var&, const ConditionEmbedding&) const override { return Var::constant(noise_); }
  Shape latent_shape() const override { return noise_.shape(); }
  std::size_t condition_dim() const override { return 0; }
  const Schedule& schedule() const override { return s_; }

 private:
  Tensor noise_;
  Schedule s_;
};

class ThrowingDenoiser final : public DenoiserBackend {
 public:
  Var predict(const Var&, const Var& t, const ConditionEmbedding&) const override {
    if (t.item() < 0.5) throw std::runtime_error("backbone exploded");
    return Var::constant(Tensor(Shape{1, 2, 2}));
  }
  Shape latent_shape() const override { return Shape{1, 2, 2}; }
  std::size_t condition_dim() const override { return 0; }
  const Schedule& schedule() const override { return s_; }

 private:
  Schedule s_ = Schedule::cosine();
};

}  // namespace

TEST(DenoiseTrajectory, SingleStepWithTrueNoiseRecoversOriginal) {
  Schedule s = Schedule::cosine();
  s.set_clamp(kAlphaMin, 1.0);
  const Tensor L = randn(Shape{1, 4, 4}, 1);
  const Tensor N = randn(Shape{1, 4, 4}, 2);
  FixedNoiseDenoiser d(N, s);
  const Var start = Var::constant(forward_diffuse(L, N, 0.6, s));
  auto out = denoise_trajectory(start, constant_timesteps(TimestepVector({0.0, 0.6})), {}, d,
                                Tensor(Shape{1, 4, 4}, 1.0), Var::constant(L), s);
  EXPECT_LE(max_abs_diff(out.final_latent.tensor(), L), 1e-14);
}

TEST(DenoiseTrajectory, ZeroMaskReturnsOriginalExactly) {
  const auto s = Schedule::cosine();
  const Tensor L = randn(Shape{2, 4, 4}, 1);
  auto d = make_gaussian_analytic_denoiser(Tensor(Shape{2, 4, 4}, 0.3), 0.7, s);
  auto out = denoise_trajectory(Var::constant(randn(L.shape(), 9)), constant_timesteps(TimestepVector::uniform(5, 0.8)),
                                {}, *d, Tensor(Shape{1, 4, 4}, 0.0), Var::constant(L), s);
  EXPECT_EQ(out.final_latent.tensor(), L);
  ASSERT_EQ(out.intermediates.size(), 5u);
}

TEST(DenoiseTrajectory, MatchesHandRolledLoop) {
  const auto s = Schedule::cosine();
  const Shape shape{1, 4, 4};
  const Tensor mu = randn(shape, 3);
  auto d = make_gaussian_analytic_denoiser(mu, 0.6, s);
  const Tensor L = randn(shape, 4);
  const Tensor start = randn(shape, 5);
  Tensor mask(Shape{1, 4, 4});
  for (std::size_t i = 0; i < 16; i += 3) mask[i] = 1.0;
  const TimestepVector t({0.0, 0.2, 0.45, 0.7});

  // Oracle: plain-double implementation of the same recursion.
  std::vector<double> x(start.values().begin(), start.values().end());
  for (int k = 3; k >= 1; --k) {
    const double a = alpha(s, t[k]);
    const double a_to = alpha(s, t[k - 1]);
    const double gain = std::sqrt(a) * 0.36 / (a * 0.36 + 1 - a);
    for (std::size_t i = 0; i < 16; ++i) {
      const double post = mu[i] + gain * (x[i] - std::sqrt(a) * mu[i]);
      const double eps = (x[i] - std::sqrt(a) * post) / std::sqrt(1 - a);
      const double clean = (x[i] - std::sqrt(1 - a) * eps) / std::sqrt(a);
      const double next = std::sqrt(a_to) * clean + std::sqrt(1 - a_to) * eps;
      x[i] = mask[i] * next + (1 - mask[i]) * L[i];
    }
  }
  auto out = denoise_trajectory(Var::constant(start), constant_timesteps(t), {}, *d, mask, Var::constant(L), s);
  EXPECT_LE(max_abs_diff(out.final_latent.tensor(), Tensor(shape, x)), 1e-12);
}

TEST(DenoiseTrajectory, MaskedCellsBitIdenticalAfterEveryStep) {
  const auto s = Schedule::cosine();
  const Shape shape{3, 4, 4};
  auto d = make_gaussian_analytic_denoiser(randn(shape, 1), 0.5, s);
  const Tensor L = randn(shape, 2);
  const Tensor mask = uniform(Shape{1, 4, 4}, 3);
  Tensor bin(mask.shape());
  for (std::size_t i = 0; i < 16; ++i) bin[i] = mask[i] > 0.5 ? 1.0 : 0.0;
  auto out = denoise_trajectory(Var::constant(randn(shape, 4)), constant_timesteps(TimestepVector::uniform(6, 0.9)), {},
                                *d, bin, Var::constant(L), s);
  for (const auto& step : out.intermediates)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 16; ++i) {
        if (bin[i] == 0.0) {
          EXPECT_EQ(step[c * 16 + i], L[c * 16 + i]);
        }
      }
}

TEST(DenoiseTrajectory, BackendFailureCarriesStepIndex) {
  ThrowingDenoiser d;
  const Tensor L(Shape{1, 2, 2});
  try {
    denoise_trajectory(Var::constant(L), constant_timesteps(TimestepVector({0.0, 0.3, 0.6, 0.9})), {}, d,
                       Tensor(Shape{1, 2, 2}, 1.0), Var::constant(L), Schedule::cosine());
    FAIL() << "expected BackendError";
  } catch (const BackendError& e) {
    EXPECT_EQ(e.step(), 1);
    EXPECT_NE(std::string(e.what()).find("backbone exploded"), std::string::npos);
  }
}

TEST(DenoiseTrajectory, GradientsMatchFiniteDifferences) {
  const auto s = Schedule::cosine();
  const Shape shape{1, 4, 4};
  auto d = make_gaussian_analytic_denoiser(randn(shape, 11), 0.8, s);
  const Tensor L = randn(shape, 12);
  const Tensor L_K = randn(shape, 13);
  const Tensor weights = randn(shape, 14);
  Tensor mask(Shape{1, 4, 4}, 1.0);
  mask[0] = 0.0;
  mask[5] = 0.0;
  const std::vector<double> t0{0.0, 0.21, 0.47, 0.74};

  auto objective = [&](const std::vector<Var>& t, const Var& start) {
    auto out = denoise_trajectory(start, t, {}, *d, mask, Var::constant(L), s);
    return ad::dot(ad::tanh(out.final_latent), Var::constant(weights));
  };
  std::vector<Var> tv{Var::scalar(0.0)};
  for (std::size_t k = 1; k < t0.size(); ++k) tv.push_back(Var::scalar(t0[k], true));
  const Var start = Var::parameter(L_K);
  objective(tv, start).backward();

  for (std::size_t k = 1; k < t0.size(); ++k) {
    auto f = [&](double v) {
      auto t = t0;
      t[k] = v;
      std::vector<Var> c;
      for (double x : t) c.push_back(Var::scalar(x));
      return objective(c, Var::constant(L_K)).item();
    };
    const double fd = central_difference(f, t0[k]);
    EXPECT_LT(rel_err(tv[k].grad_item(), fd), 1e-3) << "t_" << k;
  }
  const Tensor g = start.grad();
  for (std::size_t i = 0; i < L_K.size(); ++i) {
    auto f = [&](double v) {
      Tensor x = L_K;
      x[i] = v;
      std::vector<Var> c;
      for (double tt : t0) c.push_back(Var::scalar(tt));
      return objective(c, Var::constant(x)).item();
    };
    const double fd = central_difference(f, L_K[i]);
    EXPECT_LT(rel_err(g[i], fd), 1e-3) << "L_K[" << i << "]";
  }
}

// ---------------------------------------------------------------- Gaussian denoiser

TEST(GaussianDenoiser, NoiselessMeanPredictsZeroNoise) {
  const auto s = Schedule::cosine();
  const Tensor mu = randn(Shape{1, 2, 2}, 1);
  auto d = make_gaussian_analytic_denoiser(mu, 0.7, s);
  for (double t : {0.1, 0.5, 0.9}) {
    const double sa = std::sqrt(alpha(s, t));
    Tensor x = mu;
    for (auto& v : x.values()) v *= sa;
    const Tensor eps = d->predict(Var::constant(x), Var::scalar(t), {}).tensor();
    for (double e : eps.values()) EXPECT_NEAR(e, 0.0, 1e-14);
  }
}

TEST(GaussianDenoiser, SmallSigmaLimit) {
  const auto s = Schedule::cosine();
  const Tensor mu = randn(Shape{1, 2, 2}, 2);
  const Tensor x = randn(Shape{1, 2, 2}, 3);
  auto d = make_gaussian_analytic_denoiser(mu, 1e-9, s);
  const double t = 0.4;
  const double a = alpha(s, t);
  const Tensor eps = d->predict(Var::constant(x), Var::scalar(t), {}).tensor();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(eps[i], (x[i] - std::sqrt(a) * mu[i]) / std::sqrt(1 - a), 1e-12);
}

TEST(GaussianDenoiser, RejectsNonPositiveSigma) {
  EXPECT_THROW(make_gaussian_analytic_denoiser(Tensor(Shape{1, 2, 2}), 0.0), DomainError);
}

TEST(GaussianDenoiser, MatchesMonteCarloPosteriorMean) {
  const auto s = Schedule::cosine();
  std::mt19937_64 gen(77);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int c = 0; c < 10; ++c) {
    const Tensor mu = randn(Shape{1, 2, 2}, gen());
    const double sigma = 0.3 + 0.7 * u(gen);
    const double t = 0.3 + 0.6 * u(gen);
    const double a = alpha(s, t);
    const Tensor xt = forward_diffuse(randn(Shape{1, 2, 2}, gen()), randn(Shape{1, 2, 2}, gen()), t, s);
    auto d = make_gaussian_analytic_denoiser(mu, sigma, s);
    const Tensor eps = d->predict(Var::constant(xt), Var::scalar(t), {}).tensor();
    const auto mc = tino::testing::mc_posterior_noise(mu, sigma, a, xt, 1'000'000, gen());
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_LE(std::abs(eps[i] - mc.mean[i]), 3.0 * mc.standard_error[i])
          << "config " << c << " entry " << i << " closed form " << eps[i] << " mc " << mc.mean[i];
    }
  }
}

TEST(GaussianDenoiser, GradientsWrtTimestepAndInput) {
  const auto s = Schedule::cosine();
  const Tensor mu = randn(Shape{1, 2, 2}, 4);
  auto d = make_gaussian_analytic_denoiser(mu, 0.6, s);
  const Tensor x0 = randn(Shape{1, 2, 2}, 5);
  const Tensor w = randn(Shape{1, 2, 2}, 6);
  const double t0 = 0.55;
  auto f = [&](const Var& x, const Var& t) { return ad::dot(d->predict(x, t, {}), Var::constant(w)); };
  const Var x = Var::parameter(x0);
  const Var t = Var::scalar(t0, true);
  f(x, t).backward();
  const double fd_t = central_difference([&](double v) { return f(Var::constant(x0), Var::scalar(v)).item(); }, t0, 1e-6);
  EXPECT_LT(rel_err(t.grad_item(), fd_t), 1e-4);
  for (std::size_t i = 0; i < 4; ++i) {
    const double fd = central_difference(
        [&](double v) {
          Tensor xx = x0;
          xx[i] = v;
          return f(Var::constant(xx), Var::scalar(t0)).item();
        },
        x0[i], 1e-6);
    EXPECT_LT(rel_err(x.grad()[i], fd), 1e-4);
  }
}
