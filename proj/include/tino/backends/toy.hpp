#pragma once

// Self-contained backends that need no pretrained weights:
//   GaussianDenoiser   closed-form posterior-mean noise predictor for a Gaussian data prior
//   ToyAutoencoder     average-pool encoder / nearest-upsample decoder with an orthogonal channel lift
//   ToyTextEmbedder    seeded bag-of-token random projection
//   ToyVisualEmbedder  random FeatureNet teacher, optionally with distilled latent twins installed
//   BlobSegmenter      deterministic soft disc per query word

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tino/backends/feature_net.hpp"
#include "tino/backends/interfaces.hpp"
#include "tino/core/autodiff.hpp"
#include "tino/core/error.hpp"
#include "tino/core/tensor.hpp"
#include "tino/schedule.hpp"
#include "tino/text.hpp"

namespace tino {

/// Noise predictor that is exact for data x0 ~ Normal(mu, sigma^2 I):
///   E[x0 | x_t] = mu + sqrt(a) sigma^2 / (a sigma^2 + 1 - a) * (x_t - sqrt(a) mu)
///   eps_hat     = (x_t - sqrt(a) E[x0 | x_t]) / sqrt(1 - a)
/// The conditioning vector is ignored.
class GaussianDenoiser final : public DenoiserBackend {
 public:
  GaussianDenoiser(Tensor mu, double sigma, Schedule schedule, std::size_t condition_dim = 0)
      : mu_(std::move(mu)), sigma_(sigma), schedule_(std::move(schedule)), condition_dim_(condition_dim) {
    if (!(sigma_ > 0.0)) throw DomainError("gaussian denoiser: sigma must be > 0");
  }

  Var predict(const Var& latent, const Var& t, const ConditionEmbedding&) const override {
    require_same_shape(latent.shape(), mu_.shape(), "gaussian denoiser");
    const Var a = alpha(schedule_, t);
    const Var sa = ad::sqrt(a);
    const double s2 = sigma_ * sigma_;
    const Var gain = sa * s2 / (a * s2 + (1.0 - a));
    const Var mu = Var::constant(mu_);
    const Var posterior_mean = mu + gain * (latent - sa * mu);
    return (latent - sa * posterior_mean) / ad::sqrt(1.0 - a);
  }

  Shape latent_shape() const override { return mu_.shape(); }
  std::size_t condition_dim() const override { return condition_dim_; }
  const Schedule& schedule() const override { return schedule_; }
  const Tensor& mu() const noexcept { return mu_; }
  double sigma() const noexcept { return sigma_; }

 private:
  Tensor mu_;
  double sigma_;
  Schedule schedule_;
  std::size_t condition_dim_;
};

inline std::shared_ptr<GaussianDenoiser> make_gaussian_analytic_denoiser(Tensor mu, double sigma,
                                                                         Schedule schedule = Schedule::cosine(),
                                                                         std::size_t condition_dim = 0) {
  return std::make_shared<GaussianDenoiser>(std::move(mu), sigma, std::move(schedule), condition_dim);
}

/// Fixed orthogonal (C x C) matrix; identity when `identity` is set.
inline Tensor orthogonal_matrix(std::size_t n, std::uint64_t seed, bool identity) {
  Tensor q(Shape{n, n, 1});
  if (identity) {
    for (std::size_t i = 0; i < n; ++i) q[i * n + i] = 1.0;
    return q;
  }
  Tensor a = randn(Shape{n, n, 1}, seed);
  // Modified Gram-Schmidt over rows.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < n; ++k) d += a[i * n + k] * q[j * n + k];
      for (std::size_t k = 0; k < n; ++k) a[i * n + k] -= d * q[j * n + k];
    }
    double nrm = 0.0;
    for (std::size_t k = 0; k < n; ++k) nrm += a[i * n + k] * a[i * n + k];
    nrm = std::sqrt(nrm);
    for (std::size_t k = 0; k < n; ++k) q[i * n + k] = a[i * n + k] / nrm;
  }
  return q;
}

inline Tensor transpose(const Tensor& m) {
  const std::size_t r = m.shape().c;
  const std::size_t c = m.shape().h;
  Tensor t(Shape{c, r, 1});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = m[i * c + j];
  return t;
}

/// encode = channel lift of factor x factor average pooling;
/// decode = nearest upsampling of the inverse (transposed) lift.
/// encode(decode(z)) == z for every latent; decode(encode(I)) == I on block-constant images.
class ToyAutoencoder final : public AutoencoderBackend {
 public:
  ToyAutoencoder(std::size_t factor, std::size_t channels = 3, std::uint64_t seed = 7)
      : factor_(factor), channels_(channels) {
    if (factor != 1 && factor != 2 && factor != 4 && factor != 8) {
      throw ConfigError("toy autoencoder factor must be one of 1, 2, 4, 8");
    }
    lift_ = orthogonal_matrix(channels, seed, factor == 1);
    project_ = transpose(lift_);
  }

  Var encode(const Var& image) const override {
    const Shape s = image.shape();
    if (s.c != channels_) throw ShapeError("toy autoencoder expects " + std::to_string(channels_) + " channels");
    if (s.h % factor_ || s.w % factor_) {
      throw ShapeError("image " + s.str() + " not divisible by autoencoder factor " + std::to_string(factor_));
    }
    if (factor_ == 1) return image;
    return ad::channel_mix(ad::avg_pool(image, factor_), lift_);
  }

  Var decode(const Var& latent) const override {
    if (latent.shape().c != channels_) throw ShapeError("toy autoencoder: latent " + latent.shape().str());
    if (factor_ == 1) return latent;
    return ad::upsample_nearest(ad::channel_mix(latent, project_), factor_);
  }

  using AutoencoderBackend::decode;
  using AutoencoderBackend::encode;

  std::size_t spatial_factor() const override { return factor_; }
  std::size_t latent_channels() const override { return channels_; }
  double reconstruction_tolerance() const override { return factor_ == 1 ? 0.0 : 1.0; }
  const Tensor& lift() const noexcept { return lift_; }
  const Tensor& projection() const noexcept { return project_; }

 private:
  std::size_t factor_;
  std::size_t channels_;
  Tensor lift_;
  Tensor project_;
};

inline std::shared_ptr<ToyAutoencoder> make_toy_autoencoder(std::size_t factor, std::size_t channels = 3) {
  return std::make_shared<ToyAutoencoder>(factor, channels);
}

/// Bag-of-tokens text encoder: each token maps to a seeded Gaussian direction; the
/// prompt feature is their normalized sum. Concept tokens may be registered with
/// explicit vectors (the DreamBooth/Textual-Inversion hook).
class ToyTextEmbedder final : public TextEmbedder {
 public:
  ToyTextEmbedder(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim < 8) throw ConfigError("toy embedder dim must be >= 8");
  }

  void add_concept(const std::string& token, Tensor vector) {
    if (vector.size() != dim_) throw ShapeError("concept vector dim mismatch");
    concepts_[token] = std::move(vector);
  }

  Tensor pooled_embed(const std::string& prompt) const override {
    auto tokens = tokenize(prompt);
    if (tokens.empty()) tokens.emplace_back();
    Tensor acc(Shape{dim_, 1, 1});
    for (const auto& tok : tokens) {
      const Tensor v = token_vector(tok);
      for (std::size_t i = 0; i < dim_; ++i) acc[i] += v[i];
    }
    double nrm = 0.0;
    for (double v : acc.values()) nrm += v * v;
    nrm = std::sqrt(nrm);
    for (auto& v : acc.values()) v /= nrm;
    return acc;
  }

  ConditionEmbedding embed(const std::string& prompt) const override { return {pooled_embed(prompt).vec()}; }
  std::size_t dim() const override { return dim_; }
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  Tensor token_vector(const std::string& tok) const {
    if (auto it = concepts_.find(tok); it != concepts_.end()) return it->second;
    return randn(Shape{dim_, 1, 1}, mix_seed(seed_, fnv1a(tok)));
  }

  std::size_t dim_;
  std::uint64_t seed_;
  std::map<std::string, Tensor> concepts_;
};

inline Var concat_features(const FeatureStack& stack) { return ad::concat(stack.maps); }

/// FeatureNet teacher on pixels. Latent-domain queries go through installed distilled
/// encoders when present, otherwise through teacher(decode(latent)).
class ToyVisualEmbedder final : public VisualEmbedder {
 public:
  ToyVisualEmbedder(FeatureNet teacher, std::shared_ptr<const AutoencoderBackend> autoencoder)
      : teacher_(std::move(teacher)), autoencoder_(std::move(autoencoder)) {}

  Var embed_pixel(const Var& image) const override { return ad::normalize(teacher_.forward(image).embedding); }

  Var embed_latent(const Var& latent) const override {
    if (latent_clip_) return ad::normalize(latent_clip_->forward(latent).embedding);
    return embed_pixel(decode(latent));
  }

  FeatureStack features_pixel(const Var& image) const override {
    auto out = teacher_.forward(image);
    return FeatureStack{{out.h1, out.h2}};
  }

  FeatureStack features_latent(const Var& latent) const override {
    if (latent_vgg_) {
      auto out = latent_vgg_->forward(latent);
      return FeatureStack{{out.h1, out.h2}};
    }
    return features_pixel(decode(latent));
  }

  std::size_t dim() const override { return teacher_.config().dim; }

  /// Copy with distilled latent encoders installed (either may be empty).
  std::shared_ptr<ToyVisualEmbedder> with_latent_encoders(std::optional<FeatureNet> clip,
                                                          std::optional<FeatureNet> vgg) const {
    auto copy = std::make_shared<ToyVisualEmbedder>(*this);
    if (clip) copy->latent_clip_ = std::make_shared<const FeatureNet>(std::move(*clip));
    if (vgg) copy->latent_vgg_ = std::make_shared<const FeatureNet>(std::move(*vgg));
    return copy;
  }

  const FeatureNet& teacher() const noexcept { return teacher_; }
  const std::shared_ptr<const AutoencoderBackend>& autoencoder() const noexcept { return autoencoder_; }
  bool has_latent_clip() const noexcept { return static_cast<bool>(latent_clip_); }
  bool has_latent_vgg() const noexcept { return static_cast<bool>(latent_vgg_); }

 private:
  Var decode(const Var& latent) const {
    if (!autoencoder_) throw ConfigError("latent embedding requested without a distilled encoder or autoencoder");
    return autoencoder_->decode(latent);
  }

  FeatureNet teacher_;
  std::shared_ptr<const AutoencoderBackend> autoencoder_;
  std::shared_ptr<const FeatureNet> latent_clip_;
  std::shared_ptr<const FeatureNet> latent_vgg_;
};

struct ToyEmbedderOptions {
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t hidden = 32;
  std::size_t hidden2 = 32;
};

struct ToyEmbedders {
  std::shared_ptr<ToyTextEmbedder> text;
  std::shared_ptr<ToyVisualEmbedder> visual;
};

inline ToyEmbedders make_toy_embedders(std::size_t dim, std::uint64_t seed,
                                       std::shared_ptr<const AutoencoderBackend> autoencoder = nullptr,
                                       ToyEmbedderOptions options = {}) {
  if (dim < 8) throw ConfigError("toy embedder dim must be >= 8");
  FeatureNetConfig cfg{options.channels, options.patch, options.hidden, options.hidden2, dim};
  ToyEmbedders out;
  out.text = std::make_shared<ToyTextEmbedder>(dim, mix_seed(seed, 1));
  out.visual = std::make_shared<ToyVisualEmbedder>(FeatureNet::random(cfg, mix_seed(seed, 2)), std::move(autoencoder));
  return out;
}

/// Soft disc whose centre is derived from a hash of the query text.
class BlobSegmenter final : public SegmenterBackend {
 public:
  explicit BlobSegmenter(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor segment(const PixelImage& image, const std::string& text) const override {
    const Shape s = image.shape();
    const std::uint64_t h = mix_seed(seed_, fnv1a(text));
    const double cx = (0.25 + 0.5 * static_cast<double>(h & 0xffff) / 65535.0) * static_cast<double>(s.w);
    const double cy = (0.25 + 0.5 * static_cast<double>((h >> 16) & 0xffff) / 65535.0) * static_cast<double>(s.h);
    const double r = 0.2 * static_cast<double>(std::min(s.h, s.w));
    Tensor mask(Shape{1, s.h, s.w});
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const double dy = static_cast<double>(y) + 0.5 - cy;
        mask.at(0, y, x) = std::exp(-(dx * dx + dy * dy) / (2.0 * r * r) * std::log(4.0));
      }
    return mask;
  }

 private:
  std::uint64_t seed_;
};

/// Adapter around a callable; handy for fixtures.
class FunctionSegmenter final : public SegmenterBackend {
 public:
  using Fn = std::function<Tensor(const PixelImage&, const std::string&)>;
  explicit FunctionSegmenter(Fn fn) : fn_(std::move(fn)) {}
  Tensor segment(const PixelImage& image, const std::string& text) const override { return fn_(image, text); }

 private:
  Fn fn_;
};

struct ToyBackendOptions {
  std::size_t factor = 8;
  std::size_t dim = 64;
  std::uint64_t seed = 0;
  double prior_sigma = 0.5;
  std::size_t patch = 8;
  std::size_t schedule_steps = 1000;
  bool with_dino = true;
};

/// In-memory equivalent of a toy bundle sized for `image_shape`: Gaussian denoiser
/// centred on the latent of a mid-grey image, toy autoencoder and embedders, blob
/// segmenter, and an independently seeded embedder for DINO-I.
inline Backends make_toy_backends(const Shape& image_shape, const ToyBackendOptions& o = {}) {
  if (image_shape.h % o.patch || image_shape.w % o.patch || image_shape.h % o.factor || image_shape.w % o.factor) {
    throw ShapeError("image " + image_shape.str() + " must be divisible by the embedder patch " +
                     std::to_string(o.patch) + " and autoencoder factor " + std::to_string(o.factor));
  }
  auto ae = make_toy_autoencoder(o.factor, image_shape.c);
  ToyEmbedderOptions eo;
  eo.channels = image_shape.c;
  eo.patch = o.patch;
  auto emb = make_toy_embedders(o.dim, o.seed, ae, eo);
  Backends b;
  b.autoencoder = ae;
  b.denoiser = make_gaussian_analytic_denoiser(ae->encode(Tensor(image_shape, 0.5)), o.prior_sigma,
                                               Schedule::cosine(o.schedule_steps), o.dim);
  b.text = emb.text;
  b.visual = emb.visual;
  b.segmenter = std::make_shared<BlobSegmenter>(o.seed);
  if (o.with_dino) b.dino = make_toy_embedders(o.dim, o.seed + 1000, ae, eo).visual;
  return b;
}

}  // namespace tino
