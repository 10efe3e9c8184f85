#include <gtest/gtest.h>

#include <map>

#include "support.hpp"
#include "tino/losses.hpp"
#include "tino/metrics.hpp"

using namespace tino;
using tino::testing::central_difference;
using tino::testing::rel_err;

namespace {

/// Reads a (1, 1, 4) latent as [embedding(2) | features(2)].
class SplitVisual final : public VisualEmbedder {
 public:
  Var embed_pixel(const Var& x) const override { return embed_latent(x); }
  Var embed_latent(const Var& x) const override { return ad::concat({ad::element(x, 0), ad::element(x, 1)}); }
  FeatureStack features_pixel(const Var& x) const override { return features_latent(x); }
  FeatureStack features_latent(const Var& x) const override {
    return FeatureStack{{ad::concat({ad::element(x, 2), ad::element(x, 3)})}};
  }
  std::size_t dim() const override { return 2; }
};

class TableText final : public TextEmbedder {
 public:
  std::map<std::string, Tensor> table;
  Tensor pooled_embed(const std::string& p) const override { return table.at(p); }
  ConditionEmbedding embed(const std::string& p) const override { return {table.at(p).vec()}; }
  std::size_t dim() const override { return 2; }
};

Tensor vec4(double a, double b, double c, double d) { return Tensor(Shape{1, 1, 4}, {a, b, c, d}); }

struct StubWorld {
  SplitVisual visual;
  TableText text;
  LossContext ctx() const { return LossContext{&text, &visual, nullptr, LossDomain::latent}; }
  StubWorld() {
    text.table["src"] = Tensor(Shape{2, 1, 1}, {1.0, 0.0});
    text.table["tgt"] = Tensor(Shape{2, 1, 1}, {0.7, std::sqrt(1 - 0.49)});
  }
};

}  // namespace

TEST(LossSem, IdenticalImagesAndPromptsGiveZeroInEveryMode) {
  const Shape s{1, 4, 4};
  const Backends b = tino::testing::tiny_backends(s, 2);
  LossContext ctx{b.text.get(), b.visual.get(), b.autoencoder.get(), LossDomain::latent};
  const Var L = Var::constant(uniform(s, 1));
  for (auto mode : {SemLossMode::raw_difference, SemLossMode::absolute_difference, SemLossMode::squared_difference}) {
    EXPECT_NEAR(loss_sem(L, L, "a cat", "a cat", ctx, mode).item(), 0.0, 1e-15);
  }
}

TEST(LossSem, ModesOnKnownCosines) {
  StubWorld w;
  const double s = std::sqrt(1 - 0.81);
  const Var L = Var::constant(vec4(1, 0, 0, 0));
  const Var L0 = Var::constant(vec4(0.9, s, 0, 0));
  EXPECT_NEAR(loss_sem(L, L0, "src", "tgt", w.ctx(), SemLossMode::raw_difference).item(), 0.2, 1e-12);
  EXPECT_NEAR(loss_sem(L, L0, "src", "tgt", w.ctx(), SemLossMode::absolute_difference).item(), 0.2, 1e-12);
  EXPECT_NEAR(loss_sem(L, L0, "src", "tgt", w.ctx(), SemLossMode::squared_difference).item(), 0.04, 1e-12);
}

TEST(LossSem, MatchesDotProductOracleOnToyEmbedders) {
  const Shape s{3, 16, 16};
  const Backends b = tino::testing::tiny_backends(s, 4, 5);
  LossContext ctx{b.text.get(), b.visual.get(), b.autoencoder.get(), LossDomain::latent};
  const Tensor L = uniform(s, 1);
  const Tensor L0 = uniform(s, 2);
  auto cos = [](const Tensor& a, const Tensor& c) {
    double d = 0, na = 0, nc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * c[i], na += a[i] * a[i], nc += c[i] * c[i];
    return d / std::sqrt(na * nc);
  };
  const double img =
      cos(b.visual->embed_latent(Var::constant(L)).tensor(), b.visual->embed_latent(Var::constant(L0)).tensor());
  const double txt = cos(b.text->pooled_embed("a photo of a cat"), b.text->pooled_embed("a photo of a dog"));
  EXPECT_NEAR(loss_sem(Var::constant(L), Var::constant(L0), "a photo of a cat", "a photo of a dog", ctx,
                       SemLossMode::raw_difference)
                  .item(),
              img - txt, 1e-12);
}

TEST(LossSem, AbsoluteAndSquaredAreSymmetric) {
  for (double d : {-0.3, 0.0, 0.25}) {
    for (auto m : {SemLossMode::absolute_difference, SemLossMode::squared_difference}) {
      EXPECT_EQ(sem_penalty(Var::scalar(d), m).item(), sem_penalty(Var::scalar(-d), m).item());
    }
  }
}

TEST(LossSem, ParseModes) {
  EXPECT_EQ(parse_sem_mode("abs"), SemLossMode::absolute_difference);
  EXPECT_EQ(to_string(SemLossMode::squared_difference), "squared");
  EXPECT_THROW(parse_sem_mode("huber"), ConfigError);
}

TEST(LossRef, IdenticalIsZeroOrthogonalIsOne) {
  StubWorld w;
  const Var a = Var::constant(vec4(0.3, 0.4, 0, 0));
  EXPECT_NEAR(loss_ref(a, a, w.ctx()).item(), 0.0, 1e-15);
  EXPECT_NEAR(loss_ref(a, Var::constant(vec4(-0.4, 0.3, 0, 0)), w.ctx()).item(), 1.0, 1e-15);
}

TEST(LossRef, MatchesCosineOracleOnToyEmbedders) {
  const Shape s{3, 16, 16};
  const Backends b = tino::testing::tiny_backends(s, 4, 6);
  LossContext ctx{b.text.get(), b.visual.get(), b.autoencoder.get(), LossDomain::latent};
  const Tensor a = uniform(s, 3), r = uniform(s, 4);
  const double expect =
      1.0 - cosine(b.visual->embed_latent(Var::constant(a)).tensor(), b.visual->embed_latent(Var::constant(r)).tensor());
  EXPECT_NEAR(loss_ref(Var::constant(a), Var::constant(r), ctx).item(), expect, 1e-12);
}

TEST(LossPerc, IdenticalIsZeroAndConstantOffsetGivesOffset) {
  StubWorld w;
  const Var a = Var::constant(vec4(0.3, 0.4, 0.1, -0.2));
  EXPECT_EQ(loss_perc(a, a, w.ctx()).item(), 0.0);
  EXPECT_NEAR(loss_perc(a, Var::constant(vec4(0.3, 0.4, 0.35, 0.05)), w.ctx()).item(), 0.25, 1e-15);
}

TEST(LossPerc, MatchesBruteForceFeatureDifference) {
  const Shape s{3, 16, 16};
  const Backends b = tino::testing::tiny_backends(s, 4, 7);
  LossContext ctx{b.text.get(), b.visual.get(), b.autoencoder.get(), LossDomain::latent};
  const Tensor a = uniform(s, 5), c = uniform(s, 6);
  const auto fa = b.visual->features_latent(Var::constant(a));
  const auto fc = b.visual->features_latent(Var::constant(c));
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t m = 0; m < fa.maps.size(); ++m)
    for (std::size_t i = 0; i < fa.maps[m].size(); ++i, ++n) acc += std::abs(fa.maps[m][i] - fc.maps[m][i]);
  EXPECT_NEAR(loss_perc(Var::constant(a), Var::constant(c), ctx).item(), acc / static_cast<double>(n), 1e-12);
}

TEST(LossTotal, IdenticalInputsNoReferenceIsZero) {
  const Shape s{1, 4, 4};
  const Backends b = tino::testing::tiny_backends(s, 2);
  LossContext ctx{b.text.get(), b.visual.get(), b.autoencoder.get(), LossDomain::latent};
  const Var L = Var::constant(uniform(s, 1));
  auto r = loss_total(L, L, "a cat", "a cat", Var{}, LossWeights{}, SemLossMode::absolute_difference, ctx);
  EXPECT_NEAR(r.components.total, 0.0, 1e-15);
  EXPECT_FALSE(r.components.ref.has_value());
}

TEST(LossTotal, WeightedSumWithDefaults) {
  StubWorld w;
  const double s = std::sqrt(1 - 0.81);
  const Var L = Var::constant(vec4(1, 0, 0, 0));
  const Var L0 = Var::constant(vec4(0.9, s, 0.4, -0.4));
  auto r = loss_total(L, L0, "src", "tgt", Var{}, LossWeights{}, SemLossMode::absolute_difference, w.ctx());
  EXPECT_NEAR(r.components.sem, 0.2, 1e-12);
  EXPECT_NEAR(r.components.perc, 0.4, 1e-12);
  EXPECT_NEAR(r.components.total, 0.4, 1e-12);

  // Reference whose embedding sits at cosine 0.7 from the edited one.
  const double ang = std::atan2(s, 0.9) + std::acos(0.7);
  const Var ref = Var::constant(vec4(std::cos(ang), std::sin(ang), 0, 0));
  auto rr = loss_total(L, L0, "src", "tgt", ref, LossWeights{}, SemLossMode::absolute_difference, w.ctx());
  ASSERT_TRUE(rr.components.ref.has_value());
  EXPECT_NEAR(*rr.components.ref, 0.3, 1e-12);
  EXPECT_NEAR(rr.components.total, 0.7, 1e-12);
}

TEST(LossTotal, NonNegativeInAbsAndSquaredModes) {
  const Shape s{1, 4, 4};
  const Backends b = tino::testing::tiny_backends(s, 2);
  LossContext ctx{b.text.get(), b.visual.get(), b.autoencoder.get(), LossDomain::latent};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (auto m : {SemLossMode::absolute_difference, SemLossMode::squared_difference}) {
      auto r = loss_total(Var::constant(randn(s, seed)), Var::constant(randn(s, seed + 100)), "a cat", "a dog",
                          Var::constant(randn(s, seed + 200)), LossWeights{}, m, ctx);
      EXPECT_GE(r.components.sem, 0.0);
      EXPECT_GE(*r.components.ref, 0.0);
      EXPECT_GE(r.components.perc, 0.0);
      EXPECT_GE(r.components.total, 0.0);
    }
  }
}

TEST(LossTotal, ZeroWeightRemovesGradientContributionExactly) {
  const Shape s{1, 4, 4};
  const Backends b = tino::testing::tiny_backends(s, 2);
  LossContext ctx{b.text.get(), b.visual.get(), b.autoencoder.get(), LossDomain::latent};
  const Var L = Var::constant(randn(s, 1));
  const Tensor x0 = randn(s, 2);

  const Var all_zero = Var::parameter(x0);
  auto r0 = loss_total(L, all_zero, "a cat", "a dog", Var{}, LossWeights{0, 0, 0}, SemLossMode::absolute_difference,
                       ctx);
  r0.total.backward();
  EXPECT_EQ(all_zero.grad(), Tensor(s));

  const Var sem_only = Var::parameter(x0);
  loss_total(L, sem_only, "a cat", "a dog", Var{}, LossWeights{1, 0, 0}, SemLossMode::absolute_difference, ctx)
      .total.backward();
  const Var direct = Var::parameter(x0);
  loss_sem(L, direct, "a cat", "a dog", ctx, SemLossMode::absolute_difference).backward();
  EXPECT_EQ(sem_only.grad(), direct.grad());
}

TEST(LossTotal, NegativeWeightIsRejected) {
  EXPECT_THROW((LossWeights{1, -0.5, 1}.validate()), ConfigError);
}

TEST(LossGradients, EachLossMatchesFiniteDifferencesOnTwoByTwoLatents) {
  const Shape s{1, 2, 2};
  const Backends b = tino::testing::tiny_backends(s, 2, 3);
  LossContext ctx{b.text.get(), b.visual.get(), b.autoencoder.get(), LossDomain::latent};
  const Var L = Var::constant(uniform(s, 10));
  const Var R = Var::constant(uniform(s, 11));
  const Tensor x0 = uniform(s, 12);
  const std::vector<std::function<Var(const Var&)>> losses{
      [&](const Var& x) { return loss_sem(L, x, "a cat", "a dog", ctx, SemLossMode::squared_difference); },
      [&](const Var& x) { return loss_sem(L, x, "a cat", "a dog", ctx, SemLossMode::raw_difference); },
      [&](const Var& x) { return loss_ref(x, R, ctx); },
      [&](const Var& x) { return loss_perc(L, x, ctx); },
      [&](const Var& x) {
        return loss_total(L, x, "a cat", "a dog", R, LossWeights{}, SemLossMode::absolute_difference, ctx).total;
      }};
  for (std::size_t li = 0; li < losses.size(); ++li) {
    const Var x = Var::parameter(x0);
    losses[li](x).backward();
    for (std::size_t i = 0; i < x0.size(); ++i) {
      const double fd = central_difference(
          [&](double v) {
            Tensor xx = x0;
            xx[i] = v;
            return losses[li](Var::constant(xx)).item();
          },
          x0[i]);
      EXPECT_LT(rel_err(x.grad()[i], fd), 1e-3) << "loss " << li << " entry " << i;
    }
  }
}

TEST(LossDomain, PixelDomainMatchesLatentWithoutDistilledEncoders) {
  const Shape img{3, 16, 16};
  const Backends b = tino::testing::tiny_backends(img, 4, 1, 0.5, 2);
  const Tensor L = b.autoencoder->encode(uniform(img, 1));
  const Tensor L0 = b.autoencoder->encode(uniform(img, 2));
  LossContext lat{b.text.get(), b.visual.get(), b.autoencoder.get(), LossDomain::latent};
  LossContext pix{b.text.get(), b.visual.get(), b.autoencoder.get(), LossDomain::pixel};
  auto a = loss_total(Var::constant(L), Var::constant(L0), "a cat", "a dog", Var{}, LossWeights{},
                      SemLossMode::absolute_difference, lat);
  auto c = loss_total(Var::constant(L), Var::constant(L0), "a cat", "a dog", Var{}, LossWeights{},
                      SemLossMode::absolute_difference, pix);
  EXPECT_EQ(a.components.total, c.components.total);
}

TEST(LossContext, MissingEmbeddersAreConfigErrors) {
  LossContext ctx;
  const Var x = Var::constant(Tensor(Shape{1, 2, 2}));
  EXPECT_THROW(loss_perc(x, x, ctx), ConfigError);
}

// ---------------------------------------------------------------- metrics

TEST(Metrics, SelfSimilarityIsOne) {
  const Shape s{3, 16, 16};
  const Backends b = tino::testing::tiny_backends(s, 4);
  const Tensor img = uniform(s, 1);
  EXPECT_NEAR(metric_clip_i(img, img, b.visual.get()), 1.0, 1e-6);
  EXPECT_NEAR(metric_dino_i(img, img, b.dino.get()), 1.0, 1e-6);
}

TEST(Metrics, OrthogonalEmbeddingsGiveZero) {
  SplitVisual v;
  EXPECT_NEAR(metric_clip_i(vec4(1, 0, 0, 0), vec4(0, 2, 0, 0), &v), 0.0, 1e-15);
}

TEST(Metrics, MatchIndependentRecomputationAndStayInRange) {
  const Shape s{3, 16, 16};
  const Backends b = tino::testing::tiny_backends(s, 4, 9);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor out = uniform(s, seed), orig = uniform(s, seed + 50);
    const Tensor eo = b.visual->embed_pixel(Var::constant(out)).tensor();
    const Tensor ei = b.visual->embed_pixel(Var::constant(orig)).tensor();
    const Tensor et = b.text->pooled_embed("a photo of a dog");
    double di = 0, dt = 0;
    for (std::size_t i = 0; i < eo.size(); ++i) di += eo[i] * ei[i], dt += eo[i] * et[i];
    const double ci = metric_clip_i(out, orig, b.visual.get());
    const double ct = metric_clip_t(out, "a photo of a dog", b.visual.get(), b.text.get());
    EXPECT_NEAR(ci, di, 1e-12);
    EXPECT_NEAR(ct, dt, 1e-12);
    for (double v : {ci, ct, metric_clip_i_star(out, orig, b.visual.get()), metric_dino_i(out, orig, b.dino.get())}) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Metrics, MissingBackendIsConfigError) {
  const Tensor img(Shape{3, 8, 8});
  EXPECT_THROW(metric_clip_t(img, "x", nullptr, nullptr), ConfigError);
  EXPECT_THROW(metric_dino_i(img, img, nullptr), ConfigError);
}
