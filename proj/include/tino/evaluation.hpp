#pragma once

// Test-set evaluation, latent-vs-pixel benchmark and sweep-grid output.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tino/backends/toy.hpp"
#include "tino/image_io.hpp"
#include "tino/masking.hpp"
#include "tino/metrics.hpp"
#include "tino/optimizer.hpp"
#include "tino/perception.hpp"

namespace tino {

namespace fs = std::filesystem;

/// One line of a JSONL test manifest. Paths are stored resolved against the manifest directory.
struct TestSample {
  std::string id;
  EditTaskKind task = EditTaskKind::replace_object;
  fs::path image;
  std::string source_prompt;
  std::string prompt;
  std::optional<fs::path> reference;
  std::optional<fs::path> stroke_image;
  std::optional<fs::path> composed_image;
  std::optional<fs::path> mask;
  std::optional<std::string> edit_object;
  std::uint64_t seed = 0;
};

inline std::vector<TestSample> parse_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest '" + path.string() + "'");
  const fs::path base = path.parent_path();
  std::vector<TestSample> out;
  std::string line;
  std::size_t lineno = 0;
  auto resolve = [&](const nlohmann::json& j, const char* key) -> std::optional<fs::path> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    fs::path p = j.at(key).get<std::string>();
    if (p.is_relative()) p = base / p;
    if (!fs::exists(p)) {
      throw ConfigError("manifest line " + std::to_string(lineno) + ": file '" + p.string() + "' does not exist");
    }
    return p;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    TestSample s;
    s.id = j.value("id", "sample" + std::to_string(out.size()));
    s.task = parse_task_kind(j.value("task", std::string("replace_object")));
    auto img = resolve(j, "image");
    if (!img) throw ConfigError("manifest line " + std::to_string(lineno) + ": missing 'image'");
    s.image = *img;
    s.source_prompt = j.value("source_prompt", "");
    s.prompt = j.value("prompt", "");
    s.reference = resolve(j, "reference");
    s.stroke_image = resolve(j, "stroke_image");
    s.composed_image = resolve(j, "composed_image");
    s.mask = resolve(j, "mask");
    if (j.contains("edit_object")) s.edit_object = j.at("edit_object").get<std::string>();
    s.seed = j.value("seed", std::uint64_t{0});
    out.push_back(std::move(s));
  }
  return out;
}

inline EditRequest load_request(const TestSample& s) {
  EditRequest r;
  r.image = read_png(s.image);
  r.source_prompt = s.source_prompt;
  r.target_prompt = s.prompt;
  r.task = s.task;
  r.seed = s.seed;
  r.edit_object = s.edit_object;
  if (s.reference) r.aux.reference = read_png(*s.reference);
  if (s.stroke_image) r.aux.stroke_image = read_png(*s.stroke_image);
  if (s.composed_image) r.aux.composed_image = read_png(*s.composed_image);
  if (s.mask) r.aux.region_mask = read_mask_png(*s.mask);
  r.validate();
  return r;
}

/// Writes result.png, mask.png, trajectory.json and the two plot CSVs into `dir`.
inline void write_edit_outputs(const fs::path& dir, const EditResult& r) {
  fs::create_directories(dir);
  write_png(dir / "result.png", r.output);
  write_mask_png(dir / "mask.png", r.pixel_mask);
  std::ofstream(dir / "trajectory.json") << trajectory_to_json(r.trajectory).dump(2) << "\n";
  const auto plot = export_plot_data(r.trajectory);
  std::ofstream(dir / "plot_timesteps.csv") << plot.timesteps_csv;
  std::ofstream(dir / "plot_noise.csv") << plot.noise_csv;
}

struct SampleMetrics {
  std::string id;
  EditTaskKind task = EditTaskKind::replace_object;
  bool ok = false;
  std::string error;
  double clip_t = 0.0;
  double clip_i = 0.0;
  std::optional<double> clip_i_star;
  std::optional<double> dino_i;
};

struct MetricReport {
  std::vector<SampleMetrics> samples;
  std::size_t count = 0;  // successful samples
  std::size_t failures = 0;
  double mean_clip_t = 0.0;
  double mean_clip_i = 0.0;
  std::optional<double> mean_clip_i_star;
  std::optional<double> mean_dino_i;
  bool dino_available = false;
  std::string embedder_provenance;
};

/// The auxiliary image CLIP-I_* compares against for a task, if any.
inline const PixelImage* star_image(const EditRequest& r) {
  if (r.aux.reference) return &*r.aux.reference;
  switch (r.task) {
    case EditTaskKind::stroke: return r.aux.stroke_image ? &*r.aux.stroke_image : nullptr;
    case EditTaskKind::compose: return r.aux.composed_image ? &*r.aux.composed_image : nullptr;
    default: return nullptr;
  }
}

inline SampleMetrics score_sample(const std::string& id, const EditRequest& req, const PixelImage& output,
                                  const Backends& b) {
  SampleMetrics m;
  m.id = id;
  m.task = req.task;
  m.clip_t = metric_clip_t(output, req.target_prompt, b.visual.get(), b.text.get());
  m.clip_i = metric_clip_i(output, req.image, b.visual.get());
  if (const PixelImage* star = star_image(req)) m.clip_i_star = metric_clip_i_star(output, *star, b.visual.get());
  if (b.dino) m.dino_i = metric_dino_i(output, req.image, b.dino.get());
  m.ok = true;
  return m;
}

inline void aggregate(MetricReport& r) {
  r.count = 0;
  r.failures = 0;
  double st = 0, si = 0, ss = 0, sd = 0;
  std::size_t ns = 0, nd = 0;
  for (const auto& s : r.samples) {
    if (!s.ok) {
      ++r.failures;
      continue;
    }
    ++r.count;
    st += s.clip_t;
    si += s.clip_i;
    if (s.clip_i_star) ss += *s.clip_i_star, ++ns;
    if (s.dino_i) sd += *s.dino_i, ++nd;
  }
  if (r.count) {
    r.mean_clip_t = st / static_cast<double>(r.count);
    r.mean_clip_i = si / static_cast<double>(r.count);
  }
  r.mean_clip_i_star = ns ? std::optional<double>(ss / static_cast<double>(ns)) : std::nullopt;
  r.mean_dino_i = nd ? std::optional<double>(sd / static_cast<double>(nd)) : std::nullopt;
}

inline std::string report_csv(const MetricReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "id,task,ok,clip_t,clip_i,clip_i_star,dino_i,error\n";
  auto opt = [](const std::optional<double>& v) {
    std::ostringstream s;
    s.precision(17);
    if (v) s << *v;
    else s << "NA";
    return s.str();
  };
  for (const auto& s : r.samples) {
    std::string err = s.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << s.id << "," << to_string(s.task) << "," << (s.ok ? 1 : 0) << ",";
    if (s.ok) out << s.clip_t << "," << s.clip_i;
    else out << "NA,NA";
    out << "," << opt(s.clip_i_star) << "," << (s.ok ? opt(s.dino_i) : "NA") << "," << err << "\n";
  }
  return out.str();
}

inline nlohmann::json report_json(const MetricReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json("unavailable"); };
  return {{"count", r.count},
          {"failures", r.failures},
          {"clip_t", r.mean_clip_t},
          {"clip_i", r.mean_clip_i},
          {"clip_i_star", r.mean_clip_i_star ? nlohmann::json(*r.mean_clip_i_star) : nlohmann::json(nullptr)},
          {"dino_i", r.dino_available ? opt(r.mean_dino_i) : nlohmann::json("unavailable")},
          {"dino_available", r.dino_available},
          {"embedders", r.embedder_provenance}};
}

/// Runs the editor on every manifest sample and scores the outputs with the pixel encoders.
/// Failed samples are kept in the per-sample table and excluded from the means.
inline MetricReport evaluate_testset(const fs::path& manifest, const Backends& backends, const RunConfig& config,
                                     const std::optional<fs::path>& out_dir = std::nullopt,
                                     std::string embedder_provenance = "toy") {
  const auto samples = parse_manifest(manifest);
  if (samples.empty()) throw ConfigError("no samples in manifest '" + manifest.string() + "'");
  MetricReport report;
  report.dino_available = static_cast<bool>(backends.dino);
  report.embedder_provenance = std::move(embedder_provenance);
  for (const auto& s : samples) {
    try {
      const EditRequest req = load_request(s);
      RunConfig cfg = config;
      cfg.seed = s.seed;
      const EditResult res = run(req, backends, cfg);
      if (out_dir) write_edit_outputs(*out_dir / s.id, res);
      report.samples.push_back(score_sample(s.id, req, res.output, backends));
    } catch (const std::exception& e) {
      SampleMetrics m;
      m.id = s.id;
      m.task = s.task;
      m.error = e.what();
      report.samples.push_back(std::move(m));
    }
  }
  aggregate(report);
  if (out_dir) {
    fs::create_directories(*out_dir);
    std::ofstream(*out_dir / "per_sample.csv") << report_csv(report);
    std::ofstream(*out_dir / "aggregate.json") << report_json(report).dump(2) << "\n";
  }
  return report;
}

/// Writes a small synthetic test set (one sample per task kind, cycling) with a manifest.jsonl.
inline fs::path write_synthetic_testset(const fs::path& dir, std::size_t count, Shape shape = {3, 64, 64},
                                        std::uint64_t seed = 0) {
  fs::create_directories(dir);
  const auto images = synthetic_images(count * 2, shape, seed);
  std::ofstream manifest(dir / "manifest.jsonl");
  const EditTaskKind kinds[] = {EditTaskKind::replace_object, EditTaskKind::style_transfer, EditTaskKind::add_object,
                                EditTaskKind::stroke, EditTaskKind::compose};
  for (std::size_t i = 0; i < count; ++i) {
    const std::string id = "s" + std::to_string(i);
    const EditTaskKind kind = kinds[i % 5];
    const PixelImage& img = images[2 * i];
    const PixelImage& other = images[2 * i + 1];
    write_png(dir / (id + ".png"), img);
    nlohmann::json j{{"id", id}, {"task", to_string(kind)}, {"image", id + ".png"}, {"seed", i}};
    j["source_prompt"] = "a photo of a cat";
    j["prompt"] = "a photo of a dog";
    // A square patch of `other` pasted into the centre quarter.
    PixelImage pasted = img;
    Mask region = Mask::filled(shape.h, shape.w, 0.0);
    for (std::size_t y = shape.h / 4; y < 3 * shape.h / 4; ++y)
      for (std::size_t x = shape.w / 4; x < 3 * shape.w / 4; ++x) {
        region.data.at(0, y, x) = 1.0;
        for (std::size_t c = 0; c < shape.c; ++c) pasted.at(c, y, x) = other.at(c, y, x);
      }
    switch (kind) {
      case EditTaskKind::style_transfer:
        j["prompt"] = "a watercolor painting of a cat";
        j["reference"] = id + "_ref.png";
        write_png(dir / (id + "_ref.png"), other);
        break;
      case EditTaskKind::add_object:
        j["prompt"] = "a photo of a cat with a hat";
        j["mask"] = id + "_mask.png";
        write_mask_png(dir / (id + "_mask.png"), region);
        break;
      case EditTaskKind::stroke:
        j["stroke_image"] = id + "_stroke.png";
        write_png(dir / (id + "_stroke.png"), pasted);
        break;
      case EditTaskKind::compose:
        j["composed_image"] = id + "_composed.png";
        write_png(dir / (id + "_composed.png"), pasted);
        break;
      default: break;
    }
    manifest << j.dump() << "\n";
  }
  return dir / "manifest.jsonl";
}

// ---------------------------------------------------------------------------
// Latent vs pixel loss cost

struct BenchmarkOptions {
  std::vector<std::size_t> sizes{128};
  std::size_t repetitions = 5;
  std::size_t factor = 8;
  std::uint64_t seed = 0;
};

struct BenchmarkRow {
  std::size_t size = 0;
  double latent_seconds = 0.0;  // median over repetitions
  double pixel_seconds = 0.0;
  std::size_t latent_bytes = 0;  // autodiff graph footprint
  std::size_t pixel_bytes = 0;
  double time_ratio = 0.0;  // latent / pixel
  double memory_ratio = 0.0;
};

struct BenchmarkReport {
  std::size_t factor = 0;
  std::size_t repetitions = 0;
  std::vector<BenchmarkRow> rows;
};

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Times loss_total + backward in both domains on the same (original, edited) latents.
/// The latent domain uses latent twins of the embedder (untrained; cost is what matters).
inline BenchmarkReport benchmark_latent_vs_pixel(const BenchmarkOptions& o) {
  if (o.repetitions < 1) throw ConfigError("need >= 1 repetition");
  if (o.sizes.empty()) throw ConfigError("benchmark needs at least one image size");
  BenchmarkReport report{o.factor, o.repetitions, {}};
  for (std::size_t size : o.sizes) {
    const Shape shape{3, size, size};
    ToyBackendOptions bo;
    bo.factor = o.factor;
    bo.seed = o.seed;
    bo.with_dino = false;
    Backends b = make_toy_backends(shape, bo);
    auto toy_visual = std::dynamic_pointer_cast<const ToyVisualEmbedder>(b.visual);
    const FeatureNet& teacher = toy_visual->teacher();
    auto student = make_student(teacher, *b.autoencoder, StemInit::random, mix_seed(o.seed, 3));
    auto visual = toy_visual->with_latent_encoders(student, student);

    const auto images = synthetic_images(2, shape, o.seed);
    const Tensor original = b.autoencoder->encode(images[0]);
    const Tensor edited = b.autoencoder->encode(images[1]);

    auto measure = [&](LossDomain domain, std::size_t& bytes) {
      LossContext ctx{b.text.get(), visual.get(), b.autoencoder.get(), domain};
      std::vector<double> times;
      for (std::size_t r = 0; r < o.repetitions; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const Var e = Var::parameter(edited);
        auto loss = loss_total(Var::constant(original), e, "a photo of a cat", "a photo of a dog", Var{},
                               LossWeights{}, SemLossMode::absolute_difference, ctx);
        loss.total.backward();
        times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        bytes = graph_bytes(loss.total);
      }
      return median(times);
    };
    BenchmarkRow row;
    row.size = size;
    row.latent_seconds = measure(LossDomain::latent, row.latent_bytes);
    row.pixel_seconds = measure(LossDomain::pixel, row.pixel_bytes);
    row.time_ratio = row.latent_seconds / row.pixel_seconds;
    row.memory_ratio = static_cast<double>(row.latent_bytes) / static_cast<double>(row.pixel_bytes);
    report.rows.push_back(row);
  }
  return report;
}

inline nlohmann::json benchmark_json(const BenchmarkReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& x : r.rows) {
    rows.push_back({{"size", x.size},
                    {"latent_seconds", x.latent_seconds},
                    {"pixel_seconds", x.pixel_seconds},
                    {"latent_graph_bytes", x.latent_bytes},
                    {"pixel_graph_bytes", x.pixel_bytes},
                    {"time_ratio", x.time_ratio},
                    {"memory_ratio", x.memory_ratio}});
  }
  return {{"factor", r.factor}, {"repetitions", r.repetitions}, {"rows", rows}};
}

// ---------------------------------------------------------------------------
// Sweep grid on disk

inline std::string sweep_index_csv(const SweepGrid& g) {
  std::ostringstream out;
  out.precision(17);
  out << "row,col,seed,T,ok,clip_i,clip_t,file\n";
  for (std::size_t r = 0; r < g.cells.size(); ++r)
    for (std::size_t c = 0; c < g.cells[r].size(); ++c) {
      const auto& cell = g.cells[r][c];
      out << r << "," << c << "," << cell.seed << "," << cell.T << "," << (cell.ok ? 1 : 0) << ",";
      if (cell.ok) out << cell.clip_i << "," << cell.clip_t << ",cell_" << r << "_" << c << ".png";
      else out << "NA,NA,";
      out << "\n";
    }
  return out.str();
}

inline void write_sweep(const fs::path& dir, const SweepGrid& g) {
  fs::create_directories(dir);
  for (std::size_t r = 0; r < g.cells.size(); ++r)
    for (std::size_t c = 0; c < g.cells[r].size(); ++c) {
      if (g.cells[r][c].ok) {
        write_png(dir / ("cell_" + std::to_string(r) + "_" + std::to_string(c) + ".png"), g.cells[r][c].output);
      }
    }
  std::ofstream(dir / "index.csv") << sweep_index_csv(g);
}

}  // namespace tino
