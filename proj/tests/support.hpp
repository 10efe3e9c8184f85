#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "tino/backends/toy.hpp"
#include "tino/core/autodiff.hpp"
#include "tino/optimizer.hpp"

namespace tino::testing {

/// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero gradients from
/// turning finite-difference round-off into a large ratio.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double central_difference(const std::function<double(double)>& f, double x, double h = 1e-4) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// Small backends on a (C, H, W) image with a factor-1 autoencoder, so latent = pixel.
/// `patch` must divide H and W.
inline Backends tiny_backends(Shape image, std::size_t patch = 2, std::uint64_t seed = 0, double sigma = 0.5,
                              std::size_t factor = 1) {
  ToyBackendOptions o;
  o.factor = factor;
  o.patch = patch;
  o.seed = seed;
  o.prior_sigma = sigma;
  o.dim = 16;
  return make_toy_backends(image, o);
}

inline EditRequest style_request(const PixelImage& image, std::uint64_t seed = 0) {
  EditRequest r;
  r.image = image;
  r.source_prompt = "a photo of a cat";
  r.target_prompt = "a watercolor painting of a cat";
  r.task = EditTaskKind::style_transfer;
  r.seed = seed;
  return r;
}

struct McEstimate {
  std::vector<double> mean;
  std::vector<double> standard_error;
};

/// Self-normalized importance-sampling estimate of E[eps | x_t] for x0 ~ N(mu, sigma^2 I),
/// using the prior as proposal: weights are the Gaussian likelihood of x_t given x0.
inline McEstimate mc_posterior_noise(const Tensor& mu, double sigma, double a, const Tensor& xt, std::size_t samples,
                                     std::uint64_t seed) {
  const std::size_t n = mu.size();
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  const double sa = std::sqrt(a);
  const double s1a = std::sqrt(1.0 - a);
  std::vector<double> logw(samples);
  std::vector<double> eps(samples * n);
  for (std::size_t s = 0; s < samples; ++s) {
    double lw = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double x0 = mu[i] + sigma * z(gen);
      const double e = (xt[i] - sa * x0) / s1a;
      eps[s * n + i] = e;
      lw += -0.5 * e * e;
    }
    logw[s] = lw;
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  std::vector<double> w(samples);
  double wsum = 0.0;
  for (std::size_t s = 0; s < samples; ++s) wsum += (w[s] = std::exp(logw[s] - mx));
  McEstimate out{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  for (std::size_t s = 0; s < samples; ++s)
    for (std::size_t i = 0; i < n; ++i) out.mean[i] += w[s] * eps[s * n + i];
  for (auto& m : out.mean) m /= wsum;
  for (std::size_t s = 0; s < samples; ++s)
    for (std::size_t i = 0; i < n; ++i) {
      const double d = w[s] * (eps[s * n + i] - out.mean[i]);
      out.standard_error[i] += d * d;
    }
  for (auto& v : out.standard_error) v = std::sqrt(v) / wsum;
  return out;
}

}  // namespace tino::testing
