#pragma once

// On-disk model directories.
//
// Every directory holds `manifest.txt` (key = value lines, '#' comments) plus tensor
// files. A tensor file is:
//
//   u64 little-endian header length | JSON header {"shape": [...], "dtype": "f64"|"f32"} | little-endian data
//
// Loaders always install the directory's own schedule table as the Schedule so the
// editor runs with the noise levels the backbone was trained with.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tino/backends/feature_net.hpp"
#include "tino/backends/interfaces.hpp"
#include "tino/backends/toy.hpp"
#include "tino/core/error.hpp"
#include "tino/core/tensor.hpp"
#include "tino/schedule.hpp"

namespace tino {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Tensor files

namespace detail {

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

inline Shape shape_from_dims(const std::vector<std::size_t>& dims) {
  switch (dims.size()) {
    case 1: return {dims[0], 1, 1};
    case 2: return {dims[0], dims[1], 1};
    case 3: return {dims[0], dims[1], dims[2]};
    default: throw ConfigError("tensor rank must be 1..3");
  }
}

}  // namespace detail

inline void save_tensor(const fs::path& path, const Tensor& t, const std::string& dtype = "f64") {
  if (dtype != "f64" && dtype != "f32") throw ConfigError("unsupported dtype " + dtype);
  nlohmann::json header{{"shape", {t.shape().c, t.shape().h, t.shape().w}}, {"dtype", dtype}};
  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write tensor file " + path.string());
  const std::uint64_t len = detail::byteswap_if_big<std::uint64_t>(hs.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (double v : t.values()) {
    if (dtype == "f64") {
      const double le = detail::byteswap_if_big(v);
      out.write(reinterpret_cast<const char*>(&le), sizeof(le));
    } else {
      const float le = detail::byteswap_if_big(static_cast<float>(v));
      out.write(reinterpret_cast<const char*>(&le), sizeof(le));
    }
  }
}

inline Tensor load_tensor(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open tensor file " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  len = detail::byteswap_if_big(len);
  if (!in || len > (1u << 20)) throw ConfigError("corrupt tensor header in " + path.string());
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad tensor header in " + path.string() + ": " + e.what());
  }
  if (!header.contains("shape") || !header.contains("dtype")) {
    throw ConfigError("tensor header in " + path.string() + " needs shape and dtype");
  }
  const Shape shape = detail::shape_from_dims(header["shape"].get<std::vector<std::size_t>>());
  const std::string dtype = header["dtype"].get<std::string>();
  Tensor t(shape);
  for (auto& v : t.values()) {
    if (dtype == "f64") {
      double d;
      in.read(reinterpret_cast<char*>(&d), sizeof(d));
      v = detail::byteswap_if_big(d);
    } else if (dtype == "f32") {
      float f;
      in.read(reinterpret_cast<char*>(&f), sizeof(f));
      v = detail::byteswap_if_big(f);
    } else {
      throw ConfigError("unsupported dtype " + dtype + " in " + path.string());
    }
  }
  if (!in) throw ConfigError("truncated tensor data in " + path.string());
  return t;
}

// ---------------------------------------------------------------------------
// Manifests

class Manifest {
 public:
  static Manifest load(const fs::path& dir) {
    const fs::path file = dir / "manifest.txt";
    if (!fs::is_directory(dir)) throw ConfigError("model directory " + dir.string() + " does not exist");
    std::ifstream in(file);
    if (!in) throw ConfigError("model directory " + dir.string() + " has no manifest.txt");
    Manifest m;
    m.dir_ = dir;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        if (line.find_first_not_of(" \t\r") != std::string::npos) {
          throw ConfigError(file.string() + ":" + std::to_string(lineno) + ": expected key = value");
        }
        continue;
      }
      m.values_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return m;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
      throw ConfigError("manifest " + (dir_ / "manifest.txt").string() + " is missing required field '" + key + "'");
    }
    return it->second;
  }
  std::string get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
  }
  double get_double(const std::string& key) const { return parse_number(key, get(key)); }
  std::size_t get_size(const std::string& key) const {
    const double v = get_double(key);
    if (v < 0 || v != std::floor(v)) throw ConfigError("manifest field '" + key + "' must be a non-negative integer");
    return static_cast<std::size_t>(v);
  }
  Shape get_shape(const std::string& key) const {
    std::vector<std::size_t> dims;
    std::stringstream ss(get(key));
    std::string part;
    while (std::getline(ss, part, ',')) dims.push_back(static_cast<std::size_t>(parse_number(key, trim(part))));
    if (dims.size() != 3) throw ConfigError("manifest field '" + key + "' must be C,H,W");
    return {dims[0], dims[1], dims[2]};
  }
  fs::path path(const std::string& key) const { return dir_ / get(key); }
  const fs::path& dir() const noexcept { return dir_; }

  void save(const fs::path& dir) const {
    fs::create_directories(dir);
    std::ofstream out(dir / "manifest.txt");
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
  }

  static std::string shape_str(const Shape& s) {
    return std::to_string(s.c) + "," + std::to_string(s.h) + "," + std::to_string(s.w);
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  double parse_number(const std::string& key, const std::string& text) const {
    try {
      std::size_t used = 0;
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("manifest field '" + key + "' is not a number: '" + text + "'");
    }
  }

  fs::path dir_;
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Continuous timestep conditioning

/// Sinusoidal embedding of the continuous timestep index t * steps:
/// [sin(u f_0), ..., sin(u f_{h-1}), cos(u f_0), ..., cos(u f_{h-1})], f_i = 10000^(-i/h).
/// Differentiable in t, so optimized timesteps reach the denoiser's conditioning.
inline Var sinusoidal_timestep_embedding(const Var& t, double steps, std::size_t dim) {
  if (dim < 2 || dim % 2) throw ConfigError("timestep embedding dim must be even and >= 2");
  const std::size_t half = dim / 2;
  const double u = t.item() * steps;
  std::vector<Var> parts;
  parts.reserve(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double f = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    parts.push_back(ad::custom_scalar(t, std::sin(u * f), std::cos(u * f) * f * steps));
  }
  for (std::size_t i = 0; i < half; ++i) {
    const double f = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    parts.push_back(ad::custom_scalar(t, std::cos(u * f), -std::sin(u * f) * f * steps));
  }
  return ad::concat(parts);
}

/// Minimal timestep-conditioned predictor:
///   eps = gain * x + reshape(W emb(t S) + b) + cond_scale * mean(cond)
/// Exists to exercise the continuous-timestep adapter path end to end.
class TimestepLinearDenoiser final : public DenoiserBackend {
 public:
  TimestepLinearDenoiser(Tensor gain, Tensor weight, Tensor bias, Schedule schedule, std::size_t condition_dim)
      : gain_(std::move(gain)), weight_(std::move(weight)), bias_(std::move(bias)), schedule_(std::move(schedule)),
        condition_dim_(condition_dim) {
    if (weight_.shape().c != gain_.size() || bias_.size() != gain_.size() || weight_.shape().h % 2) {
      throw ConfigError("timestep_linear denoiser: inconsistent tensor shapes");
    }
  }

  Var predict(const Var& latent, const Var& t, const ConditionEmbedding&) const override {
    require_same_shape(latent.shape(), gain_.shape(), "timestep_linear denoiser");
    const Var emb = sinusoidal_timestep_embedding(t, static_cast<double>(schedule_.training_steps()),
                                                  weight_.shape().h);
    const Var shift = ad::reshape(ad::linear(emb, Var::constant(weight_), Var::constant(bias_)), gain_.shape());
    return Var::constant(gain_) * latent + shift;
  }

  Shape latent_shape() const override { return gain_.shape(); }
  std::size_t condition_dim() const override { return condition_dim_; }
  const Schedule& schedule() const override { return schedule_; }

 private:
  Tensor gain_;
  Tensor weight_;
  Tensor bias_;
  Schedule schedule_;
  std::size_t condition_dim_;
};

// ---------------------------------------------------------------------------
// Loaders

inline Schedule load_schedule(const Manifest& m) {
  const Tensor table = load_tensor(m.path("schedule_table"));
  return Schedule::from_table(table.vec());
}

inline std::shared_ptr<DenoiserBackend> load_external_denoiser(const fs::path& dir) {
  const Manifest m = Manifest::load(dir);
  const std::string kind = m.get("kind");
  const Shape latent = m.get_shape("latent_shape");
  const std::size_t cond = m.get_size("condition_dim");
  (void)m.get_size("spatial_factor");
  Schedule schedule = load_schedule(m);
  if (kind == "gaussian_analytic") {
    Tensor mu = load_tensor(m.path("mu"));
    if (!(mu.shape() == latent)) {
      throw ConfigError("denoiser mu shape " + mu.shape().str() + " does not match latent_shape " + latent.str());
    }
    return std::make_shared<GaussianDenoiser>(std::move(mu), m.get_double("sigma"), std::move(schedule), cond);
  }
  if (kind == "timestep_linear") {
    Tensor gain = load_tensor(m.path("gain"));
    gain = Tensor(latent, gain.vec());
    return std::make_shared<TimestepLinearDenoiser>(std::move(gain), load_tensor(m.path("weight")),
                                                    load_tensor(m.path("bias")), std::move(schedule), cond);
  }
  throw ConfigError("denoiser kind '" + kind +
                    "' needs pretrained weights that are not bundled with this build; provide a runtime adapter");
}

inline std::shared_ptr<AutoencoderBackend> load_external_autoencoder(const fs::path& dir) {
  const Manifest m = Manifest::load(dir);
  const std::string kind = m.get("kind");
  if (kind != "toy_autoencoder") {
    throw ConfigError("autoencoder kind '" + kind + "' needs pretrained weights that are not bundled with this build");
  }
  return std::make_shared<ToyAutoencoder>(m.get_size("spatial_factor"), m.get_size("channels"));
}

inline FeatureNet load_feature_net(const fs::path& dir) {
  const Manifest m = Manifest::load(dir);
  FeatureNetConfig cfg{m.get_size("in_channels"), m.get_size("patch"), m.get_size("hidden"), m.get_size("hidden2"),
                       m.get_size("dim")};
  std::array<Tensor, FeatureNet::kParamCount> params;
  for (std::size_t i = 0; i < FeatureNet::kParamCount; ++i) params[i] = load_tensor(m.path(FeatureNet::kParamNames[i]));
  return FeatureNet(cfg, std::move(params));
}

inline void save_feature_net(const fs::path& dir, const FeatureNet& net, Manifest m = {}) {
  fs::create_directories(dir);
  const auto& c = net.config();
  if (!m.has("kind")) m.set("kind", "feature_net");
  m.set("in_channels", std::to_string(c.in_channels));
  m.set("patch", std::to_string(c.patch));
  m.set("hidden", std::to_string(c.hidden));
  m.set("hidden2", std::to_string(c.hidden2));
  m.set("dim", std::to_string(c.dim));
  for (std::size_t i = 0; i < FeatureNet::kParamCount; ++i) {
    const std::string file = std::string(FeatureNet::kParamNames[i]) + ".tensor";
    save_tensor(dir / file, net.params()[i]);
    m.set(FeatureNet::kParamNames[i], file);
  }
  m.save(dir);
}

inline ToyEmbedders load_external_embedders(const fs::path& dir,
                                            std::shared_ptr<const AutoencoderBackend> autoencoder) {
  const Manifest m = Manifest::load(dir);
  const std::string kind = m.get("kind");
  if (kind != "toy_embedders") {
    throw ConfigError("embedder kind '" + kind + "' needs pretrained weights that are not bundled with this build");
  }
  ToyEmbedderOptions opt{m.get_size("channels"), m.get_size("patch"), m.get_size("hidden"), m.get_size("hidden2")};
  ToyEmbedders e = make_toy_embedders(m.get_size("dim"), m.get_size("seed"), std::move(autoencoder), opt);
  std::optional<FeatureNet> clip;
  std::optional<FeatureNet> vgg;
  if (m.has("latent_clip")) clip = load_feature_net(m.path("latent_clip"));
  if (m.has("latent_vgg")) vgg = load_feature_net(m.path("latent_vgg"));
  if (clip || vgg) e.visual = e.visual->with_latent_encoders(std::move(clip), std::move(vgg));
  return e;
}

inline std::shared_ptr<SegmenterBackend> load_external_segmenter(const fs::path& dir) {
  const Manifest m = Manifest::load(dir);
  const std::string kind = m.get("kind");
  if (kind != "blob") {
    throw ConfigError("segmenter kind '" + kind + "' needs pretrained weights that are not bundled with this build");
  }
  return std::make_shared<BlobSegmenter>(m.get_size("seed"));
}

/// Loads a bundle directory: a top-level manifest naming component sub-directories.
/// Cross-checks latent geometry between the denoiser and the autoencoder.
inline Backends load_backend_bundle(const fs::path& dir) {
  const Manifest m = Manifest::load(dir);
  if (m.get("kind") != "bundle") throw ConfigError("expected kind = bundle in " + dir.string());
  const Shape latent = m.get_shape("latent_shape");
  const std::size_t factor = m.get_size("spatial_factor");
  const std::size_t cond = m.get_size("condition_dim");
  (void)m.get("schedule_table");

  Backends b;
  b.autoencoder = load_external_autoencoder(m.path("autoencoder"));
  b.denoiser = load_external_denoiser(m.path("denoiser"));
  if (!(b.denoiser->latent_shape() == latent)) {
    throw ConfigError("denoiser latent_shape " + b.denoiser->latent_shape().str() + " does not match bundle " +
                      latent.str());
  }
  if (b.autoencoder->spatial_factor() != factor || b.autoencoder->latent_channels() != latent.c) {
    throw ConfigError("autoencoder output (channels " + std::to_string(b.autoencoder->latent_channels()) +
                      ", factor " + std::to_string(b.autoencoder->spatial_factor()) +
                      ") does not match latent_shape " + latent.str() + " / spatial_factor " + std::to_string(factor));
  }
  auto emb = load_external_embedders(m.path("embedders"), b.autoencoder);
  if (cond != 0 && emb.text->dim() != cond) {
    throw ConfigError("text embedder dim " + std::to_string(emb.text->dim()) + " does not match condition_dim " +
                      std::to_string(cond));
  }
  b.text = emb.text;
  b.visual = emb.visual;
  if (m.has("segmenter")) b.segmenter = load_external_segmenter(m.path("segmenter"));
  if (m.has("dino")) b.dino = load_external_embedders(m.path("dino"), b.autoencoder).visual;
  return b;
}

// ---------------------------------------------------------------------------
// Writers

inline void write_schedule(const fs::path& dir, Manifest& m, const Schedule& schedule) {
  std::vector<double> table = schedule.table();
  if (schedule.kind() == ScheduleKind::cosine) {
    // Discretize the analytic schedule onto its training grid.
    const std::size_t S = schedule.training_steps();
    table.resize(S + 1);
    for (std::size_t k = 0; k <= S; ++k) table[k] = schedule.raw(static_cast<double>(k) / S).first;
  }
  save_tensor(dir / "schedule.tensor", Tensor(Shape{table.size(), 1, 1}, table));
  m.set("schedule_table", "schedule.tensor");
}

inline void export_gaussian_denoiser(const fs::path& dir, const GaussianDenoiser& d, std::size_t spatial_factor = 1) {
  fs::create_directories(dir);
  Manifest m;
  m.set("kind", "gaussian_analytic");
  m.set("latent_shape", Manifest::shape_str(d.latent_shape()));
  m.set("condition_dim", std::to_string(d.condition_dim()));
  m.set("spatial_factor", std::to_string(spatial_factor));
  std::ostringstream sig;
  sig.precision(17);
  sig << d.sigma();
  m.set("sigma", sig.str());
  save_tensor(dir / "mu.tensor", d.mu());
  m.set("mu", "mu.tensor");
  write_schedule(dir, m, d.schedule());
  m.save(dir);
}

struct ToyBundleSpec {
  Shape image_shape{3, 64, 64};
  std::size_t factor = 8;
  std::size_t dim = 64;
  std::uint64_t seed = 0;
  double prior_sigma = 0.5;
  std::size_t patch = 8;
  std::size_t schedule_steps = 1000;
};

/// Writes a complete toy bundle: gaussian denoiser, toy autoencoder, toy embedders
/// (pixel teacher only), blob segmenter, and a second embedder set used for DINO-I.
inline void export_toy_bundle(const fs::path& dir, const ToyBundleSpec& spec) {
  fs::create_directories(dir);
  auto ae = std::make_shared<ToyAutoencoder>(spec.factor, spec.image_shape.c);
  const Shape latent = ae->latent_shape_for(spec.image_shape);
  // Prior mean: the latent of a flat mid-grey image.
  const Tensor mu = ae->encode(Tensor(spec.image_shape, 0.5));
  GaussianDenoiser den(mu, spec.prior_sigma, Schedule::cosine(spec.schedule_steps), spec.dim);
  export_gaussian_denoiser(dir / "denoiser", den, spec.factor);

  Manifest ae_m;
  ae_m.set("kind", "toy_autoencoder");
  ae_m.set("spatial_factor", std::to_string(spec.factor));
  ae_m.set("channels", std::to_string(spec.image_shape.c));
  ae_m.save(dir / "autoencoder");

  auto write_emb = [&](const std::string& sub, std::uint64_t seed) {
    Manifest e;
    e.set("kind", "toy_embedders");
    e.set("dim", std::to_string(spec.dim));
    e.set("seed", std::to_string(seed));
    e.set("channels", std::to_string(spec.image_shape.c));
    e.set("patch", std::to_string(spec.patch));
    e.set("hidden", "32");
    e.set("hidden2", "32");
    e.save(dir / sub);
  };
  write_emb("embedders", spec.seed);
  write_emb("dino", spec.seed + 1000);

  Manifest seg;
  seg.set("kind", "blob");
  seg.set("seed", std::to_string(spec.seed));
  seg.save(dir / "segmenter");

  Manifest top;
  top.set("kind", "bundle");
  top.set("latent_shape", Manifest::shape_str(latent));
  top.set("condition_dim", std::to_string(spec.dim));
  top.set("spatial_factor", std::to_string(spec.factor));
  top.set("denoiser", "denoiser");
  top.set("autoencoder", "autoencoder");
  top.set("embedders", "embedders");
  top.set("segmenter", "segmenter");
  top.set("dino", "dino");
  write_schedule(dir, top, den.schedule());
  top.save(dir);
}

}  // namespace tino
