#pragma once

// DDIM corruption/denoising algebra and the masked denoising trajectory.
//
// Everything here is a pure function of its inputs and is differentiable through
// tino::ad with respect to latents, noise, and the (continuous) timesteps.

#include <string>
#include <vector>

#include "tino/backends/interfaces.hpp"
#include "tino/core/autodiff.hpp"
#include "tino/core/error.hpp"
#include "tino/core/tensor.hpp"
#include "tino/schedule.hpp"

namespace tino {

/// sqrt(alpha) L + sqrt(1 - alpha) N.
inline Var forward_diffuse(const Var& latent, const Var& noise, const Var& t, const Schedule& schedule) {
  require_same_shape(latent.shape(), noise.shape(), "forward_diffuse");
  const Var a = alpha(schedule, t);
  return ad::sqrt(a) * latent + ad::sqrt(1.0 - a) * noise;
}

inline Tensor forward_diffuse(const Tensor& latent, const Tensor& noise, double t, const Schedule& schedule) {
  return forward_diffuse(Var::constant(latent), Var::constant(noise), Var::scalar(t), schedule).tensor();
}

/// One deterministic DDIM step from t_from to t_to given a noise estimate.
inline Var reverse_step(const Var& noisy, const Var& predicted_noise, const Var& t_from, const Var& t_to,
                        const Schedule& schedule) {
  require_same_shape(noisy.shape(), predicted_noise.shape(), "reverse_step");
  const Var a_from = alpha(schedule, t_from);
  const Var a_to = alpha(schedule, t_to);
  const Var clean = (noisy - ad::sqrt(1.0 - a_from) * predicted_noise) / ad::sqrt(a_from);
  return ad::sqrt(a_to) * clean + ad::sqrt(1.0 - a_to) * predicted_noise;
}

inline Tensor reverse_step(const Tensor& noisy, const Tensor& predicted_noise, double t_from, double t_to,
                           const Schedule& schedule) {
  return reverse_step(Var::constant(noisy), Var::constant(predicted_noise), Var::scalar(t_from), Var::scalar(t_to),
                      schedule)
      .tensor();
}

inline void validate_mask_values(const Tensor& mask) {
  for (double v : mask.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("mask value " + std::to_string(v) + " outside [0, 1]");
  }
}

/// edit * M + orig * (1 - M). The mask is (1, H, W) and broadcasts over channels.
inline Var masked_blend(const Var& edit, const Var& orig, const Tensor& mask) {
  validate_mask_values(mask);
  return ad::blend(edit, orig, mask);
}

inline Tensor masked_blend(const Tensor& edit, const Tensor& orig, const Tensor& mask) {
  return masked_blend(Var::constant(edit), Var::constant(orig), mask).tensor();
}

struct TrajectoryOutput {
  Var final_latent;
  std::vector<Var> intermediates;  // L_{K-1}, ..., L_0 after blending
};

/// Runs k = K..1: predict noise at (L_k, t_k), DDIM-step to t_{k-1}, re-blend with the
/// original latent. `timesteps` holds K+1 scalar nodes so the caller decides which are
/// optimized.
inline TrajectoryOutput denoise_trajectory(const Var& start, const std::vector<Var>& timesteps,
                                           const ConditionEmbedding& condition, const DenoiserBackend& denoiser,
                                           const Tensor& mask, const Var& original, const Schedule& schedule) {
  if (timesteps.size() < 2) throw ConfigError("denoise_trajectory: need K+1 >= 2 timesteps");
  require_same_shape(start.shape(), original.shape(), "denoise_trajectory");
  validate_mask_values(mask);
  TrajectoryOutput out;
  Var current = start;
  for (std::size_t k = timesteps.size() - 1; k >= 1; --k) {
    Var eps;
    try {
      eps = denoiser.predict(current, timesteps[k], condition);
    } catch (const BackendError& e) {
      throw BackendError(e.what(), static_cast<int>(k));
    } catch (const std::exception& e) {
      throw BackendError(e.what(), static_cast<int>(k));
    }
    require_same_shape(eps.shape(), current.shape(), "denoiser output");
    current = reverse_step(current, eps, timesteps[k], timesteps[k - 1], schedule);
    current = ad::blend(current, original, mask);
    out.intermediates.push_back(current);
  }
  out.final_latent = current;
  return out;
}

inline std::vector<Var> constant_timesteps(const TimestepVector& t) {
  std::vector<Var> out;
  out.reserve(t.values().size());
  for (double v : t.values()) out.push_back(Var::scalar(v));
  return out;
}

}  // namespace tino
