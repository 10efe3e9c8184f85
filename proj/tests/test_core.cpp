#include <gtest/gtest.h>

#include <functional>

#include "support.hpp"
#include "tino/core/autodiff.hpp"
#include "tino/core/tensor.hpp"

using namespace tino;
using tino::testing::rel_err;

TEST(Tensor, ShapeMismatchOnConstructionThrows) {
  EXPECT_THROW(Tensor(Shape{1, 2, 2}, std::vector<double>(3)), ShapeError);
}

TEST(Tensor, RandnIsDeterministicPerSeed) {
  EXPECT_EQ(randn(Shape{2, 3, 3}, 5), randn(Shape{2, 3, 3}, 5));
  EXPECT_FALSE(randn(Shape{2, 3, 3}, 5) == randn(Shape{2, 3, 3}, 6));
}

TEST(Tensor, AtUsesChannelMajorLayout) {
  Tensor t(Shape{2, 2, 3});
  t.at(1, 1, 2) = 7.0;
  EXPECT_EQ(t[1 * 6 + 1 * 3 + 2], 7.0);
}

TEST(Tensor, AllFiniteDetectsNan) {
  Tensor t(Shape{1, 1, 2});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::nan("");
  EXPECT_FALSE(t.all_finite());
}

namespace {

/// Checks d f(x) / dx against central differences for every entry of x.
void check_gradient(const std::function<Var(const Var&)>& f, const Tensor& x0, double tol = 1e-5) {
  const Var x = Var::parameter(x0);
  const Var y = f(x);
  y.backward();
  const Tensor g = x.grad();
  for (std::size_t i = 0; i < x0.size(); ++i) {
    auto fi = [&](double v) {
      Tensor xp = x0;
      xp[i] = v;
      return f(Var::constant(xp)).item();
    };
    const double fd = tino::testing::central_difference(fi, x0[i], 1e-5);
    EXPECT_LT(rel_err(g[i], fd, 1e-4), tol) << "entry " << i << " analytic " << g[i] << " fd " << fd;
  }
}

}  // namespace

TEST(Autodiff, ArithmeticAndBroadcastGradients) {
  const Tensor b = uniform(Shape{2, 2, 2}, 3, 0.5, 1.5);
  check_gradient(
      [&](const Var& x) {
        const Var s = ad::element(x, 0);
        return ad::sum((x * Var::constant(b) - s) / (Var::constant(b) + s * s) + 2.0 * x);
      },
      uniform(Shape{2, 2, 2}, 4, 0.1, 1.0));
}

TEST(Autodiff, ElementwiseGradients) {
  check_gradient([](const Var& x) { return ad::sum(ad::tanh(x) * ad::sqrt(x) + ad::square(x) + ad::abs(x - 0.5)); },
                 uniform(Shape{1, 3, 3}, 9, 0.05, 1.0));
}

TEST(Autodiff, AbsSubgradientAtZeroIsZero) {
  const Var x = Var::parameter(Tensor(Shape{1, 1, 1}, 0.0));
  ad::sum(ad::abs(x)).backward();
  EXPECT_EQ(x.grad_item(), 0.0);
}

TEST(Autodiff, ReductionGradients) {
  const Tensor other = randn(Shape{2, 2, 2}, 11);
  check_gradient([&](const Var& x) { return ad::cosine(x, Var::constant(other)) + ad::mean(x) * ad::norm(x); },
                 randn(Shape{2, 2, 2}, 12));
}

TEST(Autodiff, SpatialOpGradients) {
  const Tensor mix = orthogonal_matrix(2, 3, false);
  const Tensor w = randn(Shape{2, 1, 1}, 1);
  check_gradient(
      [&](const Var& x) {
        const Var pooled = ad::avg_pool(x, 2);
        const Var up = ad::upsample_nearest(ad::channel_mix(pooled, mix), 2);
        return ad::dot(ad::channel_mean(ad::tanh(up * x)), Var::constant(w));
      },
      randn(Shape{2, 4, 4}, 5));
}

TEST(Autodiff, LayerGradientsWrtInputAndWeights) {
  const Tensor x0 = randn(Shape{2, 4, 4}, 21);
  const Tensor w0 = randn(Shape{3, 2 * 2 * 2, 1}, 22);
  const Tensor b0 = randn(Shape{3, 1, 1}, 23);
  const Tensor m0 = randn(Shape{2, 3, 1}, 24);
  const Tensor mb = randn(Shape{2, 1, 1}, 25);
  const Tensor l0 = randn(Shape{4, 2, 1}, 26);
  const Tensor lb = randn(Shape{4, 1, 1}, 27);
  auto net = [&](const Var& x, const Var& w) {
    const Var h = ad::tanh(ad::patch_linear(x, w, Var::constant(b0), 2));
    const Var h2 = ad::tanh(ad::pointwise_linear(h, Var::constant(m0), Var::constant(mb)));
    return ad::sum(ad::square(ad::linear(ad::channel_mean(h2), Var::constant(l0), Var::constant(lb))));
  };
  check_gradient([&](const Var& x) { return net(x, Var::constant(w0)); }, x0);
  check_gradient([&](const Var& w) { return net(Var::constant(x0), w); }, w0);
}

TEST(Autodiff, BlendPassesExactValuesAtMaskExtremes) {
  const Tensor e = randn(Shape{2, 2, 2}, 1);
  const Tensor o = randn(Shape{2, 2, 2}, 2);
  Tensor m(Shape{1, 2, 2});
  m[0] = 1.0;
  m[3] = 1.0;
  const Var out = ad::blend(Var::constant(e), Var::constant(o), m);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 4; ++i) {
      const double expect = m[i] == 1.0 ? e[c * 4 + i] : o[c * 4 + i];
      EXPECT_EQ(out[c * 4 + i], expect);
    }
}

TEST(Autodiff, ConstantSubgraphsCarryNoParents) {
  const Var a = Var::constant(randn(Shape{1, 2, 2}, 1));
  const Var b = ad::tanh(a * 2.0);
  EXPECT_FALSE(b.requires_grad());
  EXPECT_TRUE(b.node().parents.empty());
}

TEST(Autodiff, BackwardRequiresScalar) {
  const Var a = Var::parameter(randn(Shape{1, 2, 2}, 1));
  EXPECT_THROW(a.backward(), ShapeError);
}

TEST(Autodiff, GradientAccumulatesAcrossSharedUses) {
  const Var x = Var::scalar(3.0, true);
  (x * x + x).backward();
  EXPECT_DOUBLE_EQ(x.grad_item(), 7.0);
}

TEST(Autodiff, GraphBytesGrowsWithGraph) {
  const Var x = Var::parameter(randn(Shape{1, 4, 4}, 1));
  const Var small = ad::sum(x);
  const Var large = ad::sum(ad::tanh(ad::tanh(x) * x));
  EXPECT_GT(graph_bytes(large), graph_bytes(small));
}
