#pragma once

// Latent-domain twins of pixel encoders.
//
// A student is a copy of the teacher FeatureNet whose stem is replaced so it reads
// autoencoder latents directly. Training matches the teacher on (latent, image)
// pairs: cosine distance of embeddings for the CLIP twin, L1 distance of feature
// stacks for the VGG twin. Teacher and autoencoder stay frozen; every student
// parameter is trained.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tino/backends/feature_net.hpp"
#include "tino/backends/interfaces.hpp"
#include "tino/backends/model_dir.hpp"
#include "tino/core/autodiff.hpp"
#include "tino/core/error.hpp"
#include "tino/optimizer.hpp"

namespace tino {

enum class DistillObjective { cosine, l1 };

inline std::string to_string(DistillObjective o) { return o == DistillObjective::cosine ? "cosine" : "l1"; }
inline DistillObjective parse_objective(const std::string& s) {
  if (s == "cosine") return DistillObjective::cosine;
  if (s == "l1") return DistillObjective::l1;
  throw ConfigError("unknown distillation objective '" + s + "' (cosine|l1)");
}

/// How the replaced stem starts out.
enum class StemInit {
  random,       // fresh filters
  fold_decode,  // teacher stem composed with the (linear, patch-local) decoder
};

struct DistillConfig {
  std::size_t iterations = 100000;
  std::size_t batch_size = 16;
  double learning_rate = 1e-5;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  DistillObjective objective = DistillObjective::cosine;
  StemInit stem_init = StemInit::random;
  std::uint64_t seed = 0;
  std::size_t log_every = 10;
  /// Checkpoints (held-out evaluations) per run; the best one is returned.
  std::size_t checkpoints = 10;
  /// Batches whose loss is at or below this floor skip the update. Near an exact
  /// optimum Adam rescales round-off gradients by lr / eps and walks away from it.
  double converged_loss = 1e-12;

  void validate() const {
    if (iterations == 0 || batch_size == 0) throw ConfigError("distillation needs iterations > 0 and batch_size > 0");
    if (!(learning_rate > 0)) throw ConfigError("distillation learning rate must be > 0");
  }
};

struct CurveRow {
  std::size_t iteration = 0;
  double loss = 0.0;
  std::optional<double> held_out;
};

struct DistilledEncoder {
  FeatureNet net;
  std::string teacher_id;
  DistillConfig config;
  double final_train_loss = 0.0;
  double best_held_out = 0.0;
  std::size_t best_iteration = 0;
  std::vector<CurveRow> curve;
};

struct DistillReport {
  double mean_cosine = 0.0;
  double mean_l1 = 0.0;
  std::vector<double> cosines;
  std::vector<double> l1s;
};

// ---------------------------------------------------------------------------
// Synthetic data

/// Procedural images: a colour gradient background, a few filled rectangles and
/// discs, and optionally a low-amplitude noise texture.
inline std::vector<PixelImage> synthetic_images(std::size_t count, Shape shape, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<PixelImage> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    PixelImage img(shape);
    std::vector<double> c0(shape.c), c1(shape.c);
    for (auto& v : c0) v = u(gen);
    for (auto& v : c1) v = u(gen);
    const double angle = u(gen) * 2.0 * std::numbers::pi;
    const double dx = std::cos(angle);
    const double dy = std::sin(angle);
    for (std::size_t y = 0; y < shape.h; ++y)
      for (std::size_t x = 0; x < shape.w; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) / shape.w - 0.5;
        const double fy = (static_cast<double>(y) + 0.5) / shape.h - 0.5;
        const double s = std::clamp(0.5 + dx * fx + dy * fy, 0.0, 1.0);
        for (std::size_t c = 0; c < shape.c; ++c) img.at(c, y, x) = c0[c] * (1 - s) + c1[c] * s;
      }
    const int shapes = 1 + static_cast<int>(u(gen) * 3);
    for (int k = 0; k < shapes; ++k) {
      std::vector<double> col(shape.c);
      for (auto& v : col) v = u(gen);
      const double cx = u(gen) * shape.w;
      const double cy = u(gen) * shape.h;
      const double r = (0.1 + 0.25 * u(gen)) * std::min(shape.h, shape.w);
      const bool disc = u(gen) < 0.5;
      for (std::size_t y = 0; y < shape.h; ++y)
        for (std::size_t x = 0; x < shape.w; ++x) {
          const double px = static_cast<double>(x) + 0.5 - cx;
          const double py = static_cast<double>(y) + 0.5 - cy;
          const bool inside = disc ? (px * px + py * py <= r * r) : (std::abs(px) <= r && std::abs(py) <= 0.6 * r);
          if (inside) {
            for (std::size_t c = 0; c < shape.c; ++c) img.at(c, y, x) = col[c];
          }
        }
    }
    if (u(gen) < 0.3) {
      const double amp = 0.05 * u(gen);
      for (auto& v : img.values()) v = std::clamp(v + amp * n01(gen), 0.0, 1.0);
    }
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Student construction

/// Latent patch size matching a teacher patch under the autoencoder's downsampling.
inline std::size_t student_patch(const FeatureNet& teacher, const AutoencoderBackend& ae) {
  const std::size_t f = ae.spatial_factor();
  if (teacher.config().patch % f) {
    throw ShapeError("teacher patch " + std::to_string(teacher.config().patch) + " is not a multiple of factor " +
                     std::to_string(f));
  }
  return teacher.config().patch / f;
}

/// Stem equal to teacher_stem(decode(.)) on one latent patch: column j is the teacher
/// stem applied to the decoded j-th latent basis patch. Exact for linear patch-local decoders.
inline Tensor fold_decode_stem(const FeatureNet& teacher, const AutoencoderBackend& ae) {
  const std::size_t q = student_patch(teacher, ae);
  const std::size_t cl = ae.latent_channels();
  const std::size_t fan_in = cl * q * q;
  const std::size_t hidden = teacher.config().hidden;
  const std::size_t tfan = teacher.config().fan_in();
  const Tensor& tw = teacher.params()[0];
  Tensor stem(Shape{hidden, fan_in, 1});
  for (std::size_t j = 0; j < fan_in; ++j) {
    Tensor basis(Shape{cl, q, q});
    basis[j] = 1.0;
    const Tensor pix = ae.decode(basis);
    if (pix.size() != tfan) throw ShapeError("decoded patch does not match teacher stem fan-in");
    for (std::size_t o = 0; o < hidden; ++o) {
      double acc = 0.0;
      for (std::size_t k = 0; k < tfan; ++k) acc += tw[o * tfan + k] * pix[k];
      stem[o * fan_in + j] = acc;
    }
  }
  return stem;
}

/// Copy of the teacher with a latent-reading stem. When the autoencoder leaves the
/// geometry unchanged (factor 1, same channels) the teacher stem is kept as is.
inline FeatureNet make_student(const FeatureNet& teacher, const AutoencoderBackend& ae, StemInit init,
                               std::uint64_t seed) {
  const std::size_t q = student_patch(teacher, ae);
  const std::size_t cl = ae.latent_channels();
  if (q == teacher.config().patch && cl == teacher.config().in_channels && init == StemInit::random) {
    return teacher;
  }
  if (init == StemInit::fold_decode) return teacher.with_stem(cl, q, fold_decode_stem(teacher, ae));
  std::mt19937_64 gen(seed);
  return teacher.with_stem(cl, q, FeatureNet::random_stem(teacher.config().hidden, cl, q, gen));
}

// ---------------------------------------------------------------------------
// Training and evaluation

namespace detail {

struct TeacherTargets {
  std::vector<Tensor> latents;
  std::vector<Tensor> embeddings;  // normalized
  std::vector<Tensor> features;    // concatenated h1, h2
};

inline TeacherTargets teacher_targets(const FeatureNet& teacher, const AutoencoderBackend& ae,
                                      const std::vector<PixelImage>& images) {
  TeacherTargets t;
  for (const auto& img : images) {
    const Var x = Var::constant(img);
    auto out = teacher.forward(x);
    t.latents.push_back(ae.encode(img));
    t.embeddings.push_back(ad::normalize(out.embedding).tensor());
    t.features.push_back(ad::concat({out.h1, out.h2}).tensor());
  }
  return t;
}

inline Var sample_loss(const FeatureNet& student, const std::array<Var, FeatureNet::kParamCount>& params,
                       const Tensor& latent, const Tensor& emb, const Tensor& feat, DistillObjective objective) {
  auto out = student.forward(Var::constant(latent), params);
  if (objective == DistillObjective::cosine) {
    return 1.0 - ad::cosine(out.embedding, Var::constant(emb));
  }
  const Var f = ad::concat({out.h1, out.h2});
  if (f.size() != feat.size()) throw ShapeError("student feature stack does not match teacher");
  return ad::mean(ad::abs(f - Var::constant(feat)));
}

}  // namespace detail

inline DistillReport evaluate_distillation(const FeatureNet& student, const FeatureNet& teacher,
                                           const AutoencoderBackend& ae, const std::vector<PixelImage>& images) {
  if (images.empty()) throw ConfigError("evaluation dataset is empty");
  if (student.config().in_channels != ae.latent_channels()) {
    throw ShapeError("student reads " + std::to_string(student.config().in_channels) +
                     " channels but the autoencoder produces " + std::to_string(ae.latent_channels()));
  }
  if (student.config().dim != teacher.config().dim) throw ShapeError("student and teacher embedding dims differ");
  DistillReport r;
  for (const auto& img : images) {
    const auto t = teacher.forward(Var::constant(img));
    const auto s = student.forward(Var::constant(ae.encode(img)));
    r.cosines.push_back(ad::cosine(s.embedding, t.embedding).item());
    const Var ft = ad::concat({t.h1, t.h2});
    const Var fs = ad::concat({s.h1, s.h2});
    if (ft.size() != fs.size()) throw ShapeError("student feature stack does not match teacher");
    r.l1s.push_back(ad::mean(ad::abs(fs - ft)).item());
  }
  const double n = static_cast<double>(images.size());
  r.mean_cosine = std::accumulate(r.cosines.begin(), r.cosines.end(), 0.0) / n;
  r.mean_l1 = std::accumulate(r.l1s.begin(), r.l1s.end(), 0.0) / n;
  return r;
}

/// Held-out score where larger is better for both objectives.
inline double held_out_score(const DistillReport& r, DistillObjective o) {
  return o == DistillObjective::cosine ? r.mean_cosine : -r.mean_l1;
}

inline DistilledEncoder distill(const FeatureNet& teacher, const AutoencoderBackend& ae,
                                const std::vector<PixelImage>& train, const std::vector<PixelImage>& held_out,
                                const DistillConfig& config, std::string teacher_id = "toy") {
  config.validate();
  if (train.empty()) throw ConfigError("distillation dataset is empty");
  const auto targets = detail::teacher_targets(teacher, ae, train);

  FeatureNet student = make_student(teacher, ae, config.stem_init, mix_seed(config.seed, 17));
  std::array<std::vector<double>, FeatureNet::kParamCount> m, v;
  AdamW opt{config.learning_rate, config.beta1, config.beta2, 1e-8, config.weight_decay};

  DistilledEncoder result;
  result.teacher_id = std::move(teacher_id);
  result.config = config;
  result.net = student;
  result.best_held_out = -std::numeric_limits<double>::infinity();

  const std::size_t every = std::max<std::size_t>(1, config.iterations / std::max<std::size_t>(1, config.checkpoints));
  std::mt19937_64 gen(config.seed);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  double last_finite = std::numeric_limits<double>::quiet_NaN();
  std::size_t updates = 0;

  for (std::size_t it = 1; it <= config.iterations; ++it) {
    std::array<Var, FeatureNet::kParamCount> params;
    for (std::size_t i = 0; i < FeatureNet::kParamCount; ++i) params[i] = Var::parameter(student.params()[i]);
    Var batch_loss = Var::scalar(0.0);
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const std::size_t idx = pick(gen);
      batch_loss = batch_loss + detail::sample_loss(student, params, targets.latents[idx], targets.embeddings[idx],
                                                    targets.features[idx], config.objective);
    }
    batch_loss = batch_loss / static_cast<double>(config.batch_size);
    const double loss = batch_loss.item();
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "distillation loss became non-finite at iteration " << it << " (last finite loss " << last_finite << ")";
      throw NumericError(msg.str());
    }
    last_finite = loss;
    if (loss > config.converged_loss) {
      batch_loss.backward();
      ++updates;
      for (std::size_t i = 0; i < FeatureNet::kParamCount; ++i) {
        const Tensor g = params[i].grad();
        opt.update(student.params()[i].values(), g.values(), m[i], v[i], updates);
      }
    }
    result.final_train_loss = loss;

    const bool checkpoint = !held_out.empty() && (it % every == 0 || it == config.iterations);
    if (it % config.log_every == 0 || checkpoint || it == 1) {
      CurveRow row{it, loss, std::nullopt};
      if (checkpoint) {
        const double score = held_out_score(evaluate_distillation(student, teacher, ae, held_out), config.objective);
        row.held_out = config.objective == DistillObjective::cosine ? score : -score;
        if (score > result.best_held_out) {
          result.best_held_out = score;
          result.best_iteration = it;
          result.net = student;
        }
      }
      result.curve.push_back(row);
    }
  }
  if (held_out.empty()) {
    result.net = student;
    result.best_iteration = config.iterations;
    result.best_held_out = std::numeric_limits<double>::quiet_NaN();
  } else if (config.objective == DistillObjective::l1) {
    result.best_held_out = -result.best_held_out;
  }
  return result;
}

inline std::string curve_to_csv(const std::vector<CurveRow>& curve) {
  std::ostringstream out;
  out.precision(10);
  out << "iteration,loss,held_out_metric\n";
  for (const auto& r : curve) {
    out << r.iteration << "," << r.loss << ",";
    if (r.held_out) out << *r.held_out;
    out << "\n";
  }
  return out.str();
}

inline void save_distilled_encoder(const fs::path& dir, const DistilledEncoder& enc) {
  Manifest m;
  m.set("kind", "distilled_encoder");
  m.set("teacher", enc.teacher_id);
  m.set("objective", to_string(enc.config.objective));
  save_feature_net(dir, enc.net, m);
  nlohmann::json prov{{"teacher", enc.teacher_id},
                      {"objective", to_string(enc.config.objective)},
                      {"iterations", enc.config.iterations},
                      {"batch_size", enc.config.batch_size},
                      {"learning_rate", enc.config.learning_rate},
                      {"final_train_loss", enc.final_train_loss},
                      {"best_held_out", enc.best_held_out},
                      {"best_iteration", enc.best_iteration}};
  std::ofstream(dir / "provenance.json") << prov.dump(2) << "\n";
  std::ofstream(dir / "curve.csv") << curve_to_csv(enc.curve);
}

}  // namespace tino
