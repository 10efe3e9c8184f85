#pragma once

// Pixel-domain similarity metrics. These always use the unmodified pixel encoders,
// never the distilled latent ones.

#include "tino/backends/interfaces.hpp"
#include "tino/core/error.hpp"
#include "tino/losses.hpp"

namespace tino {

/// cos(visual(output), text(prompt))
inline double metric_clip_t(const PixelImage& output, const std::string& prompt, const VisualEmbedder* visual,
                            const TextEmbedder* text) {
  if (!visual || !text) throw ConfigError("CLIP-T needs visual and text embedders");
  return cosine(visual->embed_pixel(Var::constant(output)).tensor(), text->pooled_embed(prompt));
}

/// cos(visual(output), visual(other)); CLIP-I when `other` is the original image,
/// CLIP-I_* when it is a reference / stroke / composed image.
inline double metric_clip_i(const PixelImage& output, const PixelImage& other, const VisualEmbedder* visual) {
  if (!visual) throw ConfigError("CLIP-I needs a visual embedder");
  return cosine(visual->embed_pixel(Var::constant(output)).tensor(), visual->embed_pixel(Var::constant(other)).tensor());
}

inline double metric_clip_i_star(const PixelImage& output, const PixelImage& aux, const VisualEmbedder* visual) {
  return metric_clip_i(output, aux, visual);
}

inline double metric_dino_i(const PixelImage& output, const PixelImage& original, const VisualEmbedder* dino) {
  if (!dino) throw ConfigError("DINO-I needs a DINO embedder");
  return metric_clip_i(output, original, dino);
}

}  // namespace tino
