#pragma once

// Small patch-stem encoder used as the toy CLIP/VGG stand-in and as the body of
// distilled latent-domain encoders.
//
//   h1  = tanh(patch_linear(x, stem))      (hidden, H/p, W/p)
//   h2  = tanh(pointwise_linear(h1, mid))  (hidden2, H/p, W/p)
//   emb = linear(channel_mean(h2), head)   (dim)
//
// The stem is the only geometry-dependent layer, so a latent twin is a copy with a
// different stem (input channels and patch size).

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tino/core/autodiff.hpp"
#include "tino/core/tensor.hpp"

namespace tino {

struct FeatureNetConfig {
  std::size_t in_channels = 3;
  std::size_t patch = 8;
  std::size_t hidden = 32;
  std::size_t hidden2 = 32;
  std::size_t dim = 64;

  std::size_t fan_in() const { return in_channels * patch * patch; }
  friend bool operator==(const FeatureNetConfig&, const FeatureNetConfig&) = default;
};

struct FeatureNetOutput {
  Var h1;
  Var h2;
  Var embedding;  // unnormalized
};

class FeatureNet {
 public:
  static constexpr std::size_t kParamCount = 6;
  static constexpr std::array<const char*, kParamCount> kParamNames{"stem_w", "stem_b", "mid_w",
                                                                   "mid_b",  "head_w", "head_b"};

  FeatureNet() = default;
  FeatureNet(FeatureNetConfig config, std::array<Tensor, kParamCount> params)
      : config_(config), params_(std::move(params)) {
    check();
  }

  /// Random encoder. Stem filters are box-smoothed inside each patch so most of their
  /// energy sits at low spatial frequency, like the first layer of a trained CNN.
  static FeatureNet random(const FeatureNetConfig& config, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::array<Tensor, kParamCount> p;
    p[0] = random_stem(config.hidden, config.in_channels, config.patch, gen);
    p[1] = Tensor(Shape{config.hidden, 1, 1});
    for (auto& v : p[1].values()) v = 0.1 * n01(gen);
    p[2] = Tensor(Shape{config.hidden2, config.hidden, 1});
    for (auto& v : p[2].values()) v = n01(gen) / std::sqrt(static_cast<double>(config.hidden));
    p[3] = Tensor(Shape{config.hidden2, 1, 1});
    for (auto& v : p[3].values()) v = 0.1 * n01(gen);
    p[4] = Tensor(Shape{config.dim, config.hidden2, 1});
    for (auto& v : p[4].values()) v = n01(gen) / std::sqrt(static_cast<double>(config.hidden2));
    p[5] = Tensor(Shape{config.dim, 1, 1});
    for (auto& v : p[5].values()) v = 0.1 * n01(gen);
    return FeatureNet(config, std::move(p));
  }

  /// Stem of `hidden` unit-norm filters over (channels, patch, patch) inputs.
  static Tensor random_stem(std::size_t hidden, std::size_t channels, std::size_t patch, std::mt19937_64& gen) {
    std::normal_distribution<double> n01(0.0, 1.0);
    const std::size_t fan_in = channels * patch * patch;
    Tensor raw(Shape{hidden, fan_in, 1});
    for (auto& v : raw.values()) v = n01(gen);
    Tensor smooth(raw.shape());
    const int r = patch >= 4 ? 1 : 0;
    for (std::size_t o = 0; o < hidden; ++o)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x) {
            double acc = 0.0;
            int count = 0;
            for (int dy = -r; dy <= r; ++dy)
              for (int dx = -r; dx <= r; ++dx) {
                const int yy = static_cast<int>(y) + dy;
                const int xx = static_cast<int>(x) + dx;
                if (yy < 0 || xx < 0 || yy >= static_cast<int>(patch) || xx >= static_cast<int>(patch)) continue;
                acc += raw[o * fan_in + (c * patch + yy) * patch + xx];
                ++count;
              }
            smooth[o * fan_in + (c * patch + y) * patch + x] = acc / count;
          }
    // Unit-norm filters keep pre-activations O(1) for inputs in [0, 1].
    for (std::size_t o = 0; o < hidden; ++o) {
      double nrm = 0.0;
      for (std::size_t k = 0; k < fan_in; ++k) nrm += smooth[o * fan_in + k] * smooth[o * fan_in + k];
      nrm = std::sqrt(nrm);
      for (std::size_t k = 0; k < fan_in; ++k) smooth[o * fan_in + k] /= nrm;
    }
    return smooth;
  }

  const FeatureNetConfig& config() const noexcept { return config_; }
  const std::array<Tensor, kParamCount>& params() const noexcept { return params_; }
  std::array<Tensor, kParamCount>& params() noexcept { return params_; }

  FeatureNetOutput forward(const Var& x) const {
    std::array<Var, kParamCount> vars;
    for (std::size_t i = 0; i < kParamCount; ++i) vars[i] = Var::constant(params_[i]);
    return forward(x, vars);
  }

  /// Forward pass with caller-owned parameter nodes (for training).
  FeatureNetOutput forward(const Var& x, const std::array<Var, kParamCount>& p) const {
    if (x.shape().c != config_.in_channels) {
      throw ShapeError("feature net expects " + std::to_string(config_.in_channels) + " channels, got " +
                       x.shape().str());
    }
    FeatureNetOutput out;
    out.h1 = ad::tanh(ad::patch_linear(x, p[0], p[1], config_.patch));
    out.h2 = ad::tanh(ad::pointwise_linear(out.h1, p[2], p[3]));
    out.embedding = ad::linear(ad::channel_mean(out.h2), p[4], p[5]);
    return out;
  }

  /// Copy with the stem replaced to read (channels, patch, patch) inputs.
  FeatureNet with_stem(std::size_t channels, std::size_t patch, Tensor stem_w) const {
    FeatureNetConfig cfg = config_;
    cfg.in_channels = channels;
    cfg.patch = patch;
    auto p = params_;
    p[0] = std::move(stem_w);
    return FeatureNet(cfg, std::move(p));
  }

 private:
  void check() const {
    const auto& c = config_;
    const std::array<Shape, kParamCount> expect{Shape{c.hidden, c.fan_in(), 1}, Shape{c.hidden, 1, 1},
                                                Shape{c.hidden2, c.hidden, 1},  Shape{c.hidden2, 1, 1},
                                                Shape{c.dim, c.hidden2, 1},     Shape{c.dim, 1, 1}};
    for (std::size_t i = 0; i < kParamCount; ++i) {
      if (!(params_[i].shape() == expect[i])) {
        throw ShapeError(std::string("feature net parameter ") + kParamNames[i] + " has shape " +
                         params_[i].shape().str() + ", expected " + expect[i].str());
      }
    }
  }

  FeatureNetConfig config_{};
  std::array<Tensor, kParamCount> params_{};
};

}  // namespace tino
