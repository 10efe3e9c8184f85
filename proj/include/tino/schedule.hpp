#pragma once

// Continuous noise schedule alpha(t) and the timestep vector optimized by the editor.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "tino/core/autodiff.hpp"
#include "tino/core/error.hpp"
#include "tino/core/tensor.hpp"

namespace tino {


inline constexpr double kAlphaMin = 1e-5;
inline constexpr double kAlphaMax = 1.0 - 1e-6;
inline constexpr double kTimestepMin = 1e-4;
inline constexpr double kTimestepMax = 0.999;

enum class ScheduleKind { cosine, interpolated_table };

/// Continuous noise-level function alpha(t) on [0, 1].
///
/// The cosine kind is cos^2(pi t / 2). The table kind interpolates S+1 knots
/// placed at t = k / S; at a knot the right-hand slope is used (the last knot
/// takes the left-hand slope). Results are clamped to [alpha_min, alpha_max].
class Schedule {
 public:
  static Schedule cosine(std::size_t training_steps = 1000) {
    Schedule s;
    s.kind_ = ScheduleKind::cosine;
    s.steps_ = training_steps;
    return s;
  }

  /// `table` holds alpha at t = k/S for k = 0..S; it must be non-increasing.
  static Schedule from_table(std::vector<double> table) {
    if (table.size() < 2) throw ConfigError("schedule table needs at least 2 entries");
    for (std::size_t i = 1; i < table.size(); ++i) {
      if (table[i] > table[i - 1]) throw ConfigError("schedule table must be non-increasing");
    }
    Schedule s;
    s.kind_ = ScheduleKind::interpolated_table;
    s.steps_ = table.size() - 1;
    s.table_ = std::move(table);
    return s;
  }

  /// Discrete cumulative-alpha table of a DDPM "scaled_linear" beta schedule.
  static Schedule scaled_linear(std::size_t training_steps = 1000, double beta_start = 0.00085,
                                double beta_end = 0.012) {
    std::vector<double> table(training_steps + 1);
    table[0] = 1.0;
    const double a = std::sqrt(beta_start);
    const double b = std::sqrt(beta_end);
    double prod = 1.0;
    for (std::size_t k = 0; k < training_steps; ++k) {
      const double f = training_steps == 1 ? 0.0 : static_cast<double>(k) / (training_steps - 1);
      const double beta = std::pow(a + f * (b - a), 2);
      prod *= 1.0 - beta;
      table[k + 1] = prod;
    }
    return from_table(std::move(table));
  }

  ScheduleKind kind() const noexcept { return kind_; }
  std::size_t training_steps() const noexcept { return steps_; }
  const std::vector<double>& table() const noexcept { return table_; }
  double alpha_min() const noexcept { return alpha_min_; }
  double alpha_max() const noexcept { return alpha_max_; }

  void set_clamp(double lo, double hi) {
    if (!(lo > 0.0 && lo < hi && hi <= 1.0)) throw ConfigError("invalid alpha clamp bounds");
    alpha_min_ = lo;
    alpha_max_ = hi;
  }

  /// Unclamped alpha and d alpha / dt.
  std::pair<double, double> raw(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("alpha: t=" + std::to_string(t) + " outside [0, 1]");
    if (kind_ == ScheduleKind::cosine) {
      const double a = 0.5 * std::numbers::pi * t;
      return {std::cos(a) * std::cos(a), -0.5 * std::numbers::pi * std::sin(2.0 * a)};
    }
    const double pos = t * static_cast<double>(steps_);
    auto k = static_cast<std::size_t>(std::floor(pos));
    if (k >= steps_) k = steps_ - 1;
    const double frac = pos - static_cast<double>(k);
    const double slope = (table_[k + 1] - table_[k]) * static_cast<double>(steps_);
    return {table_[k] + frac * (table_[k + 1] - table_[k]), slope};
  }

  /// Clamped alpha and its derivative (zero where the clamp is active).
  std::pair<double, double> eval(double t) const {
    auto [a, da] = raw(t);
    if (a <= alpha_min_) return {alpha_min_, 0.0};
    if (a >= alpha_max_) return {alpha_max_, 0.0};
    return {a, da};
  }

 private:
  ScheduleKind kind_ = ScheduleKind::cosine;
  std::size_t steps_ = 1000;
  std::vector<double> table_;
  double alpha_min_ = kAlphaMin;
  double alpha_max_ = kAlphaMax;
};

inline double alpha(const Schedule& schedule, double t) { return schedule.eval(t).first; }

/// alpha(t) as a graph node so gradients flow into t.
inline Var alpha(const Schedule& schedule, const Var& t) {
  auto [a, da] = schedule.eval(t.item());
  return ad::custom_scalar(t, a, da);
}

/// Timesteps t_0..t_K. t_0 is pinned to 0; t_1..t_K live in [t_min, t_max].
class TimestepVector {
 public:
  TimestepVector() = default;
  explicit TimestepVector(std::vector<double> t) : t_(std::move(t)) {
    if (t_.size() < 2) throw ConfigError("timestep vector needs K >= 1");
    t_[0] = 0.0;
    clamp();
  }

  /// t_k = k * T / K.
  static TimestepVector uniform(std::size_t K, double T) {
    if (K == 0) throw ConfigError("K must be >= 1");
    std::vector<double> t(K + 1);
    for (std::size_t k = 0; k <= K; ++k) t[k] = static_cast<double>(k) * T / static_cast<double>(K);
    return TimestepVector(std::move(t));
  }

  std::size_t K() const noexcept { return t_.size() - 1; }
  double operator[](std::size_t k) const { return t_[k]; }
  double& operator[](std::size_t k) { return t_[k]; }
  const std::vector<double>& values() const noexcept { return t_; }

  void clamp() {
    t_[0] = 0.0;
    for (std::size_t k = 1; k < t_.size(); ++k) t_[k] = std::clamp(t_[k], kTimestepMin, kTimestepMax);
  }
  void sort_ascending() { std::sort(t_.begin() + 1, t_.end()); }

 private:
  std::vector<double> t_;
};

/// Text conditioning handed to the denoiser.
struct ConditionEmbedding {
  std::vector<double> values;
};

}  // namespace tino
