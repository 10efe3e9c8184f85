#pragma once

// Backend contracts consumed by the editor. Real model runtimes implement these;
// the toy implementations in toy.hpp satisfy them without any pretrained weights.

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "tino/core/autodiff.hpp"
#include "tino/core/tensor.hpp"
#include "tino/schedule.hpp"

namespace tino {

/// (C, H, W) image with values in [0, 1].
using PixelImage = Tensor;

/// Predicts the noise component of a noisy latent. Must be differentiable in both
/// the latent and the continuous timestep.
class DenoiserBackend {
 public:
  virtual ~DenoiserBackend() = default;
  virtual Var predict(const Var& latent, const Var& t, const ConditionEmbedding& condition) const = 0;
  virtual Shape latent_shape() const = 0;
  virtual std::size_t condition_dim() const = 0;
  virtual const Schedule& schedule() const = 0;
};

class AutoencoderBackend {
 public:
  virtual ~AutoencoderBackend() = default;
  virtual Var encode(const Var& image) const = 0;
  virtual Var decode(const Var& latent) const = 0;
  virtual std::size_t spatial_factor() const = 0;
  virtual std::size_t latent_channels() const = 0;
  /// Max per-pixel error of decode(encode(I)) the backend guarantees on in-range images.
  virtual double reconstruction_tolerance() const = 0;

  Tensor encode(const Tensor& image) const { return encode(Var::constant(image)).tensor(); }
  Tensor decode(const Tensor& latent) const { return decode(Var::constant(latent)).tensor(); }
  Shape latent_shape_for(const Shape& image) const {
    const std::size_t f = spatial_factor();
    return Shape{latent_channels(), image.h / f, image.w / f};
  }
};

class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  /// Conditioning passed to the denoiser.
  virtual ConditionEmbedding embed(const std::string& prompt) const = 0;
  /// Unit-norm pooled feature, shares a space with VisualEmbedder::embed_*.
  virtual Tensor pooled_embed(const std::string& prompt) const = 0;
  virtual std::size_t dim() const = 0;
};

/// Ordered feature maps of a perceptual encoder.
struct FeatureStack {
  std::vector<Var> maps;
};

class VisualEmbedder {
 public:
  virtual ~VisualEmbedder() = default;
  virtual Var embed_pixel(const Var& image) const = 0;
  virtual Var embed_latent(const Var& latent) const = 0;
  virtual FeatureStack features_pixel(const Var& image) const = 0;
  virtual FeatureStack features_latent(const Var& latent) const = 0;
  virtual std::size_t dim() const = 0;
};

class SegmenterBackend {
 public:
  virtual ~SegmenterBackend() = default;
  /// Soft (1, H, W) mask in [0, 1] for the region matching `text`.
  virtual Tensor segment(const PixelImage& image, const std::string& text) const = 0;
};

/// Everything one editing run needs. Segmenter and DINO embedder are optional.
struct Backends {
  std::shared_ptr<const DenoiserBackend> denoiser;
  std::shared_ptr<const AutoencoderBackend> autoencoder;
  std::shared_ptr<const TextEmbedder> text;
  std::shared_ptr<const VisualEmbedder> visual;
  std::shared_ptr<const SegmenterBackend> segmenter;
  std::shared_ptr<const VisualEmbedder> dino;
};

}  // namespace tino
