#pragma once

// Latent-domain editing objective:
//   total = lambda_sem * sem + lambda_ref * ref (when a reference exists) + lambda_perc * perc

#include <cmath>
#include <optional>
#include <string>

#include "tino/backends/interfaces.hpp"
#include "tino/core/autodiff.hpp"
#include "tino/core/error.hpp"

namespace tino {

struct LossWeights {
  double lambda_sem = 1.0;
  double lambda_perc = 0.5;
  double lambda_ref = 1.0;

  void validate() const {
    if (lambda_sem < 0 || lambda_perc < 0 || lambda_ref < 0) throw ConfigError("loss weights must be >= 0");
  }
};

/// How the gap between image-pair and prompt-pair cosines is penalized.
enum class SemLossMode { raw_difference, absolute_difference, squared_difference };

inline std::string to_string(SemLossMode m) {
  switch (m) {
    case SemLossMode::raw_difference: return "raw";
    case SemLossMode::absolute_difference: return "abs";
    case SemLossMode::squared_difference: return "squared";
  }
  return "abs";
}

inline SemLossMode parse_sem_mode(const std::string& s) {
  if (s == "raw") return SemLossMode::raw_difference;
  if (s == "abs") return SemLossMode::absolute_difference;
  if (s == "squared") return SemLossMode::squared_difference;
  throw ConfigError("unknown semantic loss mode '" + s + "' (raw|abs|squared)");
}

/// Which feature domain the image-side losses read. `pixel` decodes first and uses the
/// pixel encoders; it exists for cost comparisons.
enum class LossDomain { latent, pixel };

struct LossContext {
  const TextEmbedder* text = nullptr;
  const VisualEmbedder* visual = nullptr;
  const AutoencoderBackend* autoencoder = nullptr;  // needed for LossDomain::pixel
  LossDomain domain = LossDomain::latent;

  void require() const {
    if (!text) throw ConfigError("loss: text embedder not installed");
    if (!visual) throw ConfigError("loss: visual embedder not installed");
    if (domain == LossDomain::pixel && !autoencoder) throw ConfigError("loss: pixel domain needs an autoencoder");
  }

  Var embed(const Var& latent) const {
    if (domain == LossDomain::latent) return visual->embed_latent(latent);
    return visual->embed_pixel(autoencoder->decode(latent));
  }
  FeatureStack features(const Var& latent) const {
    if (domain == LossDomain::latent) return visual->features_latent(latent);
    return visual->features_pixel(autoencoder->decode(latent));
  }
};

inline double cosine(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("cosine: size mismatch");
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / std::sqrt(na * nb);
}

/// Applies the semantic-loss mode to d = image_cos - text_cos.
inline Var sem_penalty(const Var& d, SemLossMode mode) {
  switch (mode) {
    case SemLossMode::raw_difference: return d;
    case SemLossMode::absolute_difference: return ad::abs(d);
    case SemLossMode::squared_difference: return ad::square(d);
  }
  return d;
}

inline Var loss_sem(const Var& original, const Var& edited, const std::string& source_prompt,
                    const std::string& target_prompt, const LossContext& ctx, SemLossMode mode) {
  ctx.require();
  const Var image_cos = ad::cosine(ctx.embed(original), ctx.embed(edited));
  const double text_cos = cosine(ctx.text->pooled_embed(source_prompt), ctx.text->pooled_embed(target_prompt));
  return sem_penalty(image_cos - text_cos, mode);
}

/// 1 - cos(edited, reference): pulls the edited output toward the reference.
inline Var loss_ref(const Var& edited, const Var& reference, const LossContext& ctx) {
  ctx.require();
  if (!reference.valid()) throw ConfigError("loss_ref: no reference latent");
  return 1.0 - ad::cosine(ctx.embed(edited), ctx.embed(reference));
}

/// Mean absolute difference over the concatenated perceptual feature maps.
inline Var loss_perc(const Var& original, const Var& edited, const LossContext& ctx) {
  ctx.require();
  require_same_shape(original.shape(), edited.shape(), "loss_perc");
  const Var fa = ad::concat(ctx.features(original).maps);
  const Var fb = ad::concat(ctx.features(edited).maps);
  return ad::mean(ad::abs(fa - fb));
}

struct LossComponents {
  double sem = 0.0;
  std::optional<double> ref;
  double perc = 0.0;
  double total = 0.0;
};

struct LossResult {
  Var total;
  LossComponents components;
};

/// Weighted sum. A zero weight drops the term from the graph entirely.
inline LossResult loss_total(const Var& original, const Var& edited, const std::string& source_prompt,
                             const std::string& target_prompt, const Var& reference, const LossWeights& weights,
                             SemLossMode mode, const LossContext& ctx) {
  weights.validate();
  LossResult r;
  Var total = Var::scalar(0.0);
  const Var sem = loss_sem(original, edited, source_prompt, target_prompt, ctx, mode);
  r.components.sem = sem.item();
  if (weights.lambda_sem != 0.0) total = total + weights.lambda_sem * sem;
  if (reference.valid()) {
    const Var ref = loss_ref(edited, reference, ctx);
    r.components.ref = ref.item();
    if (weights.lambda_ref != 0.0) total = total + weights.lambda_ref * ref;
  }
  const Var perc = loss_perc(original, edited, ctx);
  r.components.perc = perc.item();
  if (weights.lambda_perc != 0.0) total = total + weights.lambda_perc * perc;
  r.total = total;
  r.components.total = total.item();
  return r;
}

}  // namespace tino
