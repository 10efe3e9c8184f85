#pragma once

// Timestep-and-noise optimization loop.
//
// Each outer step forward-diffuses the original latent with the current noise to
// t_K, denoises through every t_k with the edit mask re-applied after each step,
// scores the result, and back-propagates through the whole unrolled chain into the
// noise tensor and t_1..t_K. Two AdamW optimizers update the two groups.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tino/backends/interfaces.hpp"
#include "tino/core/autodiff.hpp"
#include "tino/core/error.hpp"
#include "tino/core/tensor.hpp"
#include "tino/diffusion.hpp"
#include "tino/losses.hpp"
#include "tino/masking.hpp"
#include "tino/metrics.hpp"

namespace tino {

struct AblationFlags {
  bool freeze_timesteps = false;
  bool freeze_noise = false;
  bool full_mask = false;
};

struct RunConfig {
  std::size_t K = 10;
  double T = 0.75;
  std::size_t W = 50;
  /// Timestep learning rate, in units of training timesteps (t * S).
  double lr_t = 1.0;
  double lr_noise = 0.005;
  LossWeights weights{};
  SemLossMode sem_mode = SemLossMode::absolute_difference;
  std::uint64_t seed = 0;
  AblationFlags ablation{};
  bool enforce_monotonic_t = false;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  MaskOptions mask{};
  LossDomain loss_domain = LossDomain::latent;

  void validate() const {
    if (K < 1) throw ConfigError("K must be >= 1");
    // T above t_max is accepted and clamped with the other timesteps.
    if (!(T > 0.0 && T <= 1.0)) throw ConfigError("T must lie in (0, 1]");
    if (!(lr_t >= 0 && lr_noise >= 0)) throw ConfigError("learning rates must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
    weights.validate();
  }
};

/// Decoupled-weight-decay Adam over a flat parameter group.
struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  /// `step` is 1-based.
  void update(std::span<double> params, std::span<const double> grads, std::vector<double>& m, std::vector<double>& v,
              std::size_t step) const {
    if (m.size() != params.size()) m.assign(params.size(), 0.0);
    if (v.size() != params.size()) v.assign(params.size(), 0.0);
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i] -= lr * weight_decay * params[i];
      m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
      params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
};

struct OptimizerState {
  TimestepVector timesteps;
  Tensor noise;
  std::size_t step = 0;
  std::vector<double> t_m, t_v;          // moments for t_1..t_K
  std::vector<double> noise_m, noise_v;  // moments for N
};

struct Gradients {
  std::vector<double> timesteps;  // K+1 entries; index 0 ignored
  Tensor noise;
};

inline OptimizerState init_state(const RunConfig& config, const Shape& latent_shape) {
  config.validate();
  OptimizerState s;
  s.timesteps = TimestepVector::uniform(config.K, config.T);
  s.noise = randn(latent_shape, config.seed);
  s.t_m.assign(config.K, 0.0);
  s.t_v.assign(config.K, 0.0);
  s.noise_m.assign(latent_shape.size(), 0.0);
  s.noise_v.assign(latent_shape.size(), 0.0);
  return s;
}

/// One AdamW step on each group. Timesteps are stepped in units of `timestep_scale`
/// (the schedule's training-step count) and then clamped (and sorted if requested).
inline OptimizerState apply_update(OptimizerState state, const Gradients& grads, const RunConfig& config,
                                   double timestep_scale) {
  const std::size_t K = state.timesteps.K();
  if (grads.timesteps.size() != K + 1) throw ShapeError("timestep gradient must have K+1 entries");
  for (double g : grads.timesteps) {
    if (!std::isfinite(g)) throw NumericError("non-finite timestep gradient");
  }
  if (!grads.noise.all_finite()) throw NumericError("non-finite noise gradient");
  require_same_shape(grads.noise.shape(), state.noise.shape(), "noise gradient");

  ++state.step;
  if (!config.ablation.freeze_timesteps) {
    std::vector<double> u(K), gu(K);
    for (std::size_t k = 1; k <= K; ++k) {
      u[k - 1] = state.timesteps[k] * timestep_scale;
      gu[k - 1] = grads.timesteps[k] / timestep_scale;
    }
    AdamW opt{config.lr_t, config.beta1, config.beta2, config.eps, config.weight_decay};
    opt.update(u, gu, state.t_m, state.t_v, state.step);
    for (std::size_t k = 1; k <= K; ++k) state.timesteps[k] = u[k - 1] / timestep_scale;
    state.timesteps.clamp();
    if (config.enforce_monotonic_t) state.timesteps.sort_ascending();
  }
  if (!config.ablation.freeze_noise) {
    AdamW opt{config.lr_noise, config.beta1, config.beta2, config.eps, config.weight_decay};
    opt.update(state.noise.values(), grads.noise.values(), state.noise_m, state.noise_v, state.step);
  }
  return state;
}

struct NoiseStats {
  double min = 0, max = 0, mean = 0, std = 0;
};

inline NoiseStats noise_stats(const Tensor& n) {
  NoiseStats s;
  if (n.empty()) return s;
  s.min = *std::min_element(n.values().begin(), n.values().end());
  s.max = *std::max_element(n.values().begin(), n.values().end());
  double sum = 0;
  for (double v : n.values()) sum += v;
  s.mean = sum / static_cast<double>(n.size());
  double var = 0;
  for (double v : n.values()) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(n.size()));
  return s;
}

struct TrajectoryRecord {
  std::size_t w = 0;
  std::vector<double> t;
  NoiseStats noise;
  LossComponents loss;
};

struct TrajectoryLog {
  nlohmann::json config;
  std::vector<TrajectoryRecord> steps;
};

enum class RunStatus { completed, diverged };

struct EditResult {
  PixelImage output;
  Tensor final_latent;
  TrajectoryLog trajectory;
  Mask pixel_mask;
  Mask latent_mask;
  std::vector<std::string> warnings;
  OptimizerState final_state;
  RunStatus status = RunStatus::completed;
  double wall_seconds = 0.0;
};

inline nlohmann::json config_to_json(const RunConfig& c) {
  return {{"K", c.K},
          {"T", c.T},
          {"W", c.W},
          {"lr_t", c.lr_t},
          {"lr_noise", c.lr_noise},
          {"lambda_sem", c.weights.lambda_sem},
          {"lambda_perc", c.weights.lambda_perc},
          {"lambda_ref", c.weights.lambda_ref},
          {"sem_mode", to_string(c.sem_mode)},
          {"seed", c.seed},
          {"freeze_timesteps", c.ablation.freeze_timesteps},
          {"freeze_noise", c.ablation.freeze_noise},
          {"full_mask", c.ablation.full_mask},
          {"enforce_monotonic_t", c.enforce_monotonic_t},
          {"betas", {c.beta1, c.beta2}},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"mask_threshold", c.mask.threshold},
          {"delta_tolerance", c.mask.delta_tolerance},
          {"loss_domain", c.loss_domain == LossDomain::latent ? "latent" : "pixel"}};
}

inline nlohmann::json trajectory_to_json(const TrajectoryLog& log) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& r : log.steps) {
    nlohmann::json loss{{"sem", r.loss.sem}, {"perc", r.loss.perc}, {"total", r.loss.total}};
    loss["ref"] = r.loss.ref ? nlohmann::json(*r.loss.ref) : nlohmann::json(nullptr);
    steps.push_back({{"w", r.w},
                     {"t", r.t},
                     {"noise", {{"min", r.noise.min}, {"max", r.noise.max}, {"mean", r.noise.mean}, {"std", r.noise.std}}},
                     {"loss", loss}});
  }
  return {{"config", log.config}, {"steps", steps}};
}

inline TrajectoryLog trajectory_from_json(const nlohmann::json& j) {
  TrajectoryLog log;
  log.config = j.at("config");
  for (const auto& s : j.at("steps")) {
    TrajectoryRecord r;
    r.w = s.at("w").get<std::size_t>();
    r.t = s.at("t").get<std::vector<double>>();
    const auto& n = s.at("noise");
    r.noise = {n.at("min").get<double>(), n.at("max").get<double>(), n.at("mean").get<double>(),
               n.at("std").get<double>()};
    const auto& l = s.at("loss");
    r.loss.sem = l.at("sem").get<double>();
    r.loss.perc = l.at("perc").get<double>();
    r.loss.total = l.at("total").get<double>();
    if (!l.at("ref").is_null()) r.loss.ref = l.at("ref").get<double>();
    log.steps.push_back(std::move(r));
  }
  return log;
}

/// Two-panel plot series: timesteps per step, and noise statistics per step.
struct PlotData {
  std::string timesteps_csv;
  std::string noise_csv;
};

inline PlotData export_plot_data(const TrajectoryLog& log) {
  PlotData p;
  std::ostringstream ts, ns;
  ts.precision(17);
  ns.precision(17);
  const std::size_t K1 = log.steps.empty() ? 0 : log.steps.front().t.size();
  ts << "w";
  for (std::size_t k = 0; k < K1; ++k) ts << ",t" << k;
  ts << "\n";
  ns << "w,min,max,mean,std\n";
  for (const auto& r : log.steps) {
    ts << r.w;
    for (double t : r.t) ts << "," << t;
    ts << "\n";
    ns << r.w << "," << r.noise.min << "," << r.noise.max << "," << r.noise.mean << "," << r.noise.std << "\n";
  }
  p.timesteps_csv = ts.str();
  p.noise_csv = ns.str();
  return p;
}

namespace detail {

struct PassOutput {
  Var final_latent;
  std::vector<Var> intermediates;
  LossResult loss;
  std::vector<Var> t_vars;
  Var noise_var;
};

struct PreparedRun {
  Tensor latent;
  Tensor latent_mask;
  Var reference;
  ConditionEmbedding condition;
  Mask pixel_mask;
  Mask latent_mask_full;
  std::vector<std::string> warnings;
};

inline void require_backends(const Backends& b) {
  if (!b.denoiser) throw ConfigError("no denoiser backend");
  if (!b.autoencoder) throw ConfigError("no autoencoder backend");
  if (!b.text) throw ConfigError("no text embedder");
  if (!b.visual) throw ConfigError("no visual embedder");
}

inline PreparedRun prepare(const EditRequest& request, const Backends& b, const RunConfig& config) {
  require_backends(b);
  request.validate();
  PreparedRun p;
  p.latent = b.autoencoder->encode(request.image);
  if (!(p.latent.shape() == b.denoiser->latent_shape())) {
    throw ShapeError("autoencoder latent " + p.latent.shape().str() + " does not match denoiser latent_shape " +
                     b.denoiser->latent_shape().str());
  }
  const Shape is = request.image.shape();
  if (config.ablation.full_mask) {
    p.pixel_mask = Mask::filled(is.h, is.w, 1.0);
  } else {
    auto outcome = compute_mask(request, b.segmenter.get(), config.mask);
    p.pixel_mask = std::move(outcome.mask);
    p.warnings = std::move(outcome.warnings);
  }
  p.latent_mask_full = to_latent_resolution(p.pixel_mask, b.autoencoder->spatial_factor());
  p.latent_mask = p.latent_mask_full.data;
  if (request.aux.reference) p.reference = Var::constant(b.autoencoder->encode(*request.aux.reference));
  p.condition = b.text->embed(request.target_prompt);
  return p;
}

inline PassOutput forward_pass(const OptimizerState& state, const PreparedRun& prep, const EditRequest& request,
                               const Backends& b, const RunConfig& config, bool track_grads) {
  PassOutput out;
  const auto& t = state.timesteps.values();
  const bool grad_t = track_grads && !config.ablation.freeze_timesteps;
  const bool grad_n = track_grads && !config.ablation.freeze_noise;
  out.t_vars.reserve(t.size());
  out.t_vars.push_back(Var::scalar(0.0));
  for (std::size_t k = 1; k < t.size(); ++k) out.t_vars.push_back(Var::scalar(t[k], grad_t));
  out.noise_var = grad_n ? Var::parameter(state.noise) : Var::constant(state.noise);

  const Schedule& schedule = b.denoiser->schedule();
  const Var original = Var::constant(prep.latent);
  Var start = forward_diffuse(original, out.noise_var, out.t_vars.back(), schedule);
  start = masked_blend(start, original, prep.latent_mask);
  auto traj = denoise_trajectory(start, out.t_vars, prep.condition, *b.denoiser, prep.latent_mask, original, schedule);
  out.final_latent = traj.final_latent;
  out.intermediates = std::move(traj.intermediates);
  out.intermediates.insert(out.intermediates.begin(), start);

  LossContext ctx{b.text.get(), b.visual.get(), b.autoencoder.get(), config.loss_domain};
  out.loss = loss_total(original, out.final_latent, request.source_prompt, request.target_prompt, prep.reference,
                        config.weights, config.sem_mode, ctx);
  return out;
}

}  // namespace detail

/// Full editing run. With W = 0 this is a single un-optimized forward + denoise pass.
inline EditResult run(const EditRequest& request, const Backends& backends, const RunConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  config.validate();
  const auto prep = detail::prepare(request, backends, config);
  const double scale = static_cast<double>(backends.denoiser->schedule().training_steps());

  EditResult result;
  result.pixel_mask = prep.pixel_mask;
  result.latent_mask = prep.latent_mask_full;
  result.warnings = prep.warnings;
  result.trajectory.config = config_to_json(config);
  result.trajectory.config["task"] = to_string(request.task);

  OptimizerState state = init_state(config, prep.latent.shape());
  Tensor output_latent;
  Tensor best_latent;
  double best_total = std::numeric_limits<double>::infinity();

  if (config.W == 0) {
    auto pass = detail::forward_pass(state, prep, request, backends, config, false);
    output_latent = pass.final_latent.tensor();
  }
  for (std::size_t w = 1; w <= config.W; ++w) {
    auto pass = detail::forward_pass(state, prep, request, backends, config, true);
    const double total = pass.loss.components.total;
    const Tensor latent0 = pass.final_latent.tensor();
    if (!std::isfinite(total) || !latent0.all_finite()) {
      result.status = RunStatus::diverged;
      result.warnings.push_back("non-finite loss at step " + std::to_string(w) + "; returning best iterate");
      output_latent = best_latent.empty() ? prep.latent : best_latent;
      break;
    }
    result.trajectory.steps.push_back(
        TrajectoryRecord{w, state.timesteps.values(), noise_stats(state.noise), pass.loss.components});
    if (total < best_total) {
      best_total = total;
      best_latent = latent0;
    }
    output_latent = latent0;

    pass.loss.total.backward();
    Gradients g;
    g.timesteps.assign(state.timesteps.K() + 1, 0.0);
    for (std::size_t k = 1; k < pass.t_vars.size(); ++k) {
      if (pass.t_vars[k].requires_grad()) g.timesteps[k] = pass.t_vars[k].grad_item();
    }
    g.noise = pass.noise_var.requires_grad() ? pass.noise_var.grad() : Tensor(state.noise.shape());
    try {
      state = apply_update(std::move(state), g, config, scale);
    } catch (const NumericError& e) {
      result.status = RunStatus::diverged;
      result.warnings.push_back(std::string(e.what()) + " at step " + std::to_string(w) + "; returning best iterate");
      output_latent = best_latent;
      break;
    }
  }
  result.trajectory.config["status"] = result.status == RunStatus::completed ? "completed" : "diverged";
  result.final_latent = output_latent;
  result.output = backends.autoencoder->decode(output_latent);
  result.final_state = std::move(state);
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

struct SweepCell {
  std::uint64_t seed = 0;
  double T = 0.0;
  bool ok = false;
  std::string error;
  double clip_i = 0.0;
  double clip_t = 0.0;
  PixelImage output;
};

/// rows = seeds, cols = T values.
struct SweepGrid {
  std::vector<std::uint64_t> seeds;
  std::vector<double> T_values;
  std::vector<std::vector<SweepCell>> cells;
};

/// Un-optimized (W = 0) pass for every (seed, T) pair with CLIP-I / CLIP-T per cell.
inline SweepGrid sweep(const EditRequest& request, const Backends& backends, const std::vector<double>& T_values,
                       const std::vector<std::uint64_t>& seeds, RunConfig base = {}) {
  if (T_values.empty() || seeds.empty()) throw ConfigError("sweep needs at least one T value and one seed");
  SweepGrid grid{seeds, T_values, {}};
  for (auto seed : seeds) {
    std::vector<SweepCell> row;
    for (double T : T_values) {
      SweepCell cell;
      cell.seed = seed;
      cell.T = T;
      try {
        RunConfig cfg = base;
        cfg.W = 0;
        cfg.T = T;
        cfg.seed = seed;
        auto r = run(request, backends, cfg);
        cell.output = std::move(r.output);
        cell.clip_i = metric_clip_i(cell.output, request.image, backends.visual.get());
        cell.clip_t = metric_clip_t(cell.output, request.target_prompt, backends.visual.get(), backends.text.get());
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      row.push_back(std::move(cell));
    }
    grid.cells.push_back(std::move(row));
  }
  return grid;
}

}  // namespace tino
