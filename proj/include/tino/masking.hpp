#pragma once

// Edit-region selection: which latent cells the editor may touch for each task kind.

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tino/backends/interfaces.hpp"
#include "tino/core/error.hpp"
#include "tino/core/tensor.hpp"
#include "tino/text.hpp"

namespace tino {

enum class EditTaskKind { replace_object, style_transfer, add_object, stroke, compose };

inline std::string to_string(EditTaskKind k) {
  switch (k) {
    case EditTaskKind::replace_object: return "replace_object";
    case EditTaskKind::style_transfer: return "style_transfer";
    case EditTaskKind::add_object: return "add_object";
    case EditTaskKind::stroke: return "stroke";
    case EditTaskKind::compose: return "compose";
  }
  return "unknown";
}

inline EditTaskKind parse_task_kind(const std::string& s) {
  for (auto k : {EditTaskKind::replace_object, EditTaskKind::style_transfer, EditTaskKind::add_object,
                 EditTaskKind::stroke, EditTaskKind::compose}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown task kind '" + s + "'");
}

enum class MaskResolution { pixel, latent };

/// (1, H, W) tensor with values in [0, 1].
struct Mask {
  Tensor data;
  MaskResolution resolution = MaskResolution::pixel;

  static Mask filled(std::size_t h, std::size_t w, double v, MaskResolution res = MaskResolution::pixel) {
    return Mask{Tensor(Shape{1, h, w}, v), res};
  }
  std::size_t height() const { return data.shape().h; }
  std::size_t width() const { return data.shape().w; }
  bool all(double v) const {
    return std::all_of(data.values().begin(), data.values().end(), [v](double x) { return x == v; });
  }
  std::size_t count_nonzero() const {
    return static_cast<std::size_t>(
        std::count_if(data.values().begin(), data.values().end(), [](double x) { return x != 0.0; }));
  }
};

struct AuxInputs {
  std::optional<PixelImage> reference;       // I_r
  std::optional<PixelImage> stroke_image;    // I_s
  std::optional<PixelImage> composed_image;  // I_c
  std::optional<Mask> region_mask;           // M_a
};

struct EditRequest {
  PixelImage image;
  std::string source_prompt;
  std::string target_prompt;
  EditTaskKind task = EditTaskKind::replace_object;
  AuxInputs aux;
  std::uint64_t seed = 0;
  /// Overrides token_diff for replace_object.
  std::optional<std::string> edit_object;

  /// Throws ConfigError when an input required by the task is missing.
  void validate() const {
    if (image.empty()) throw ConfigError("edit request has no image");
    switch (task) {
      case EditTaskKind::add_object:
        if (!aux.region_mask) throw ConfigError("add_object requires a region mask (--mask)");
        break;
      case EditTaskKind::stroke:
        if (!aux.stroke_image) throw ConfigError("stroke editing requires a stroke image (--stroke-image)");
        break;
      case EditTaskKind::compose:
        if (!aux.composed_image) throw ConfigError("composition requires a composed image (--composed-image)");
        break;
      default: break;
    }
  }
};

struct TokenDiffOptions {
  std::vector<std::string> stopwords;
};

/// Tokens of `source` absent from `target`, in source order, de-duplicated.
inline std::vector<std::string> token_diff(const std::string& source, const std::string& target,
                                           const TokenDiffOptions& options = {}) {
  const auto src = tokenize(source);
  const auto tgt = tokenize(target);
  const std::set<std::string> target_set(tgt.begin(), tgt.end());
  const std::set<std::string> stop(options.stopwords.begin(), options.stopwords.end());
  std::vector<std::string> out;
  std::set<std::string> emitted;
  for (const auto& tok : src) {
    if (target_set.count(tok) || stop.count(tok) || emitted.count(tok)) continue;
    emitted.insert(tok);
    out.push_back(tok);
  }
  return out;
}

inline constexpr double kDeltaTolerance = 2.0 / 255.0;

/// 1 where any channel differs by more than `tol`, else 0 (pixel resolution).
/// tol = 0 gives exact Kronecker-delta equality.
inline Mask difference_mask(const PixelImage& a, const PixelImage& b, double tol = kDeltaTolerance) {
  require_same_shape(a.shape(), b.shape(), "difference_mask");
  const Shape s = a.shape();
  Mask m = Mask::filled(s.h, s.w, 0.0);
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x)
      for (std::size_t c = 0; c < s.c; ++c) {
        if (std::abs(a.at(c, y, x) - b.at(c, y, x)) > tol) {
          m.data.at(0, y, x) = 1.0;
          break;
        }
      }
  return m;
}

inline Mask binarize(const Mask& m, double threshold) {
  Mask out = m;
  for (auto& v : out.data.values()) v = v >= threshold ? 1.0 : 0.0;
  return out;
}

struct MaskOptions {
  double threshold = 0.5;
  double delta_tolerance = kDeltaTolerance;
  TokenDiffOptions token_diff;
};

struct MaskOutcome {
  Mask mask;
  std::vector<std::string> warnings;
};

/// Pixel-resolution binary edit mask for a request.
inline MaskOutcome compute_mask(const EditRequest& request, const SegmenterBackend* segmenter,
                                const MaskOptions& options = {}) {
  request.validate();
  const Shape s = request.image.shape();
  MaskOutcome out;
  switch (request.task) {
    case EditTaskKind::style_transfer:
      out.mask = Mask::filled(s.h, s.w, 1.0);
      break;
    case EditTaskKind::add_object: {
      const Mask& m = *request.aux.region_mask;
      if (m.height() != s.h || m.width() != s.w) {
        throw ShapeError("region mask " + m.data.shape().str() + " does not match image " + s.str());
      }
      for (double v : m.data.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("region mask values must lie in [0, 1]");
      }
      out.mask = m;
      break;
    }
    case EditTaskKind::stroke:
      out.mask = difference_mask(request.image, *request.aux.stroke_image, options.delta_tolerance);
      break;
    case EditTaskKind::compose:
      out.mask = difference_mask(request.image, *request.aux.composed_image, options.delta_tolerance);
      break;
    case EditTaskKind::replace_object: {
      std::vector<std::string> objects;
      if (request.edit_object) {
        objects.push_back(*request.edit_object);
      } else {
        objects = token_diff(request.source_prompt, request.target_prompt, options.token_diff);
      }
      if (objects.empty()) throw ConfigError("no replace-target found; supply --edit-object");
      if (!segmenter) throw ConfigError("replace_object needs a segmenter backend (or supply --mask)");
      Mask unioned = Mask::filled(s.h, s.w, 0.0);
      for (const auto& obj : objects) {
        const Tensor soft = segmenter->segment(request.image, obj);
        if (soft.shape() != Shape{1, s.h, s.w}) throw ShapeError("segmenter output " + soft.shape().str());
        for (std::size_t i = 0; i < soft.size(); ++i) {
          if (!(soft[i] >= 0.0 && soft[i] <= 1.0)) throw DomainError("segmenter output outside [0, 1]");
          if (soft[i] >= options.threshold) unioned.data[i] = 1.0;
        }
      }
      out.mask = std::move(unioned);
      break;
    }
  }
  if (out.mask.all(0.0)) out.warnings.emplace_back("empty edit region");
  return out;
}

/// Max-pools a pixel mask by `factor`: a latent cell is editable if any covered pixel is.
inline Mask to_latent_resolution(const Mask& m, std::size_t factor) {
  if (m.resolution != MaskResolution::pixel) throw ConfigError("to_latent_resolution expects a pixel mask");
  const std::size_t h = m.height();
  const std::size_t w = m.width();
  if (factor == 0 || h % factor || w % factor) {
    throw ShapeError("mask " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by " +
                     std::to_string(factor));
  }
  Mask out = Mask::filled(h / factor, w / factor, 0.0, MaskResolution::latent);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double& cell = out.data.at(0, y / factor, x / factor);
      cell = std::max(cell, m.data.at(0, y, x) > 0.0 ? 1.0 : 0.0);
    }
  return out;
}

}  // namespace tino
