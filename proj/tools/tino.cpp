// Command-line front end for the editing engine.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tino/backends/model_dir.hpp"
#include "tino/backends/toy.hpp"
#include "tino/evaluation.hpp"
#include "tino/image_io.hpp"
#include "tino/optimizer.hpp"
#include "tino/perception.hpp"

namespace fs = std::filesystem;
using namespace tino;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EditFlags {
  std::string image;
  std::string source_prompt;
  std::string prompt;
  std::string mask;
  std::string reference;
  std::string stroke_image;
  std::string composed_image;
  std::string edit_object;
  std::string task;
  std::size_t K = 10;
  double T = 0.75;
  std::size_t W = 50;
  std::uint64_t seed = 0;
  double lambda_sem = 1.0;
  double lambda_perc = 0.5;
  double lambda_ref = 1.0;
  double lr_t = 1.0;
  double lr_noise = 0.005;
  std::string sem_mode = "abs";
  std::string loss_domain = "latent";
  std::string backend_dir;
  std::size_t toy_factor = 8;
  std::string out = "tino_out";
};

void add_edit_flags(CLI::App* cmd, EditFlags& f, bool prompt_required = true) {
  cmd->add_option("--image", f.image, "Input image (PNG)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--source-prompt", f.source_prompt, "Prompt describing the input image");
  auto* p = cmd->add_option("--prompt", f.prompt, "Target prompt");
  if (prompt_required) p->required();
  cmd->add_option("--mask", f.mask, "Region mask PNG (white = editable)")->check(CLI::ExistingFile);
  cmd->add_option("--reference", f.reference, "Reference image PNG")->check(CLI::ExistingFile);
  cmd->add_option("--stroke-image", f.stroke_image, "Stroke-painted image PNG")->check(CLI::ExistingFile);
  cmd->add_option("--composed-image", f.composed_image, "Composed image PNG")->check(CLI::ExistingFile);
  cmd->add_option("--edit-object", f.edit_object, "Word naming the object to replace");
  cmd->add_option("--task", f.task, "Override the task kind")
      ->check(CLI::IsMember({"replace_object", "style_transfer", "add_object", "stroke", "compose"}));
  cmd->add_option("--K", f.K, "Number of denoising steps")->capture_default_str();
  cmd->add_option("--T", f.T, "Starting timestep in (0, 1]")->capture_default_str();
  cmd->add_option("--W", f.W, "Optimization iterations")->capture_default_str();
  cmd->add_option("--seed", f.seed, "Noise seed")->capture_default_str();
  cmd->add_option("--lambda-sem", f.lambda_sem)->capture_default_str();
  cmd->add_option("--lambda-perc", f.lambda_perc)->capture_default_str();
  cmd->add_option("--lambda-ref", f.lambda_ref)->capture_default_str();
  cmd->add_option("--lr-t", f.lr_t, "Timestep learning rate (training-step units)")->capture_default_str();
  cmd->add_option("--lr-noise", f.lr_noise)->capture_default_str();
  cmd->add_option("--sem-mode", f.sem_mode)->check(CLI::IsMember({"raw", "abs", "squared"}))->capture_default_str();
  cmd->add_option("--loss-domain", f.loss_domain)->check(CLI::IsMember({"latent", "pixel"}))->capture_default_str();
  cmd->add_option("--backend-dir", f.backend_dir, "Model bundle directory")->envname("TINO_BACKEND_DIR");
  cmd->add_option("--toy-factor", f.toy_factor, "Autoencoder factor for built-in toy backends")->capture_default_str();
  cmd->add_option("--out", f.out, "Output directory")->capture_default_str();
}

RunConfig run_config(const EditFlags& f) {
  RunConfig c;
  c.K = f.K;
  c.T = f.T;
  c.W = f.W;
  c.seed = f.seed;
  c.weights = LossWeights{f.lambda_sem, f.lambda_perc, f.lambda_ref};
  c.lr_t = f.lr_t;
  c.lr_noise = f.lr_noise;
  c.sem_mode = parse_sem_mode(f.sem_mode);
  c.loss_domain = f.loss_domain == "pixel" ? LossDomain::pixel : LossDomain::latent;
  return c;
}

EditRequest build_request(const EditFlags& f, std::optional<EditTaskKind> default_task) {
  EditRequest r;
  r.image = read_png(f.image);
  r.source_prompt = f.source_prompt;
  r.target_prompt = f.prompt;
  r.seed = f.seed;
  if (!f.edit_object.empty()) r.edit_object = f.edit_object;
  if (!f.mask.empty()) r.aux.region_mask = read_mask_png(f.mask);
  if (!f.reference.empty()) r.aux.reference = read_png(f.reference);
  if (!f.stroke_image.empty()) r.aux.stroke_image = read_png(f.stroke_image);
  if (!f.composed_image.empty()) r.aux.composed_image = read_png(f.composed_image);
  if (!f.task.empty()) {
    r.task = parse_task_kind(f.task);
  } else if (default_task) {
    r.task = *default_task;
  } else if (r.aux.composed_image) {
    r.task = EditTaskKind::compose;
  } else if (r.aux.stroke_image) {
    r.task = EditTaskKind::stroke;
  } else if (r.aux.region_mask) {
    r.task = EditTaskKind::add_object;
  } else if (r.aux.reference) {
    r.task = EditTaskKind::style_transfer;
  } else {
    r.task = EditTaskKind::replace_object;
  }
  try {
    r.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  return r;
}

Backends make_backends(const std::string& backend_dir, const Shape& image_shape, std::size_t toy_factor) {
  if (!backend_dir.empty()) return load_backend_bundle(backend_dir);
  ToyBackendOptions o;
  o.factor = toy_factor;
  return make_toy_backends(image_shape, o);
}

int do_edit(const EditFlags& f, std::optional<EditTaskKind> task, const AblationFlags& ablation = {}) {
  const EditRequest req = build_request(f, task);
  const Backends b = make_backends(f.backend_dir, req.image.shape(), f.toy_factor);
  RunConfig cfg = run_config(f);
  cfg.ablation = ablation;
  const EditResult res = run(req, b, cfg);
  write_edit_outputs(f.out, res);
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "wrote " << (fs::path(f.out) / "result.png").string() << " (task " << to_string(req.task) << ", "
            << (res.status == RunStatus::completed ? "completed" : "diverged") << ", "
            << res.trajectory.steps.size() << " steps)\n";
  return res.status == RunStatus::completed ? 0 : 2;
}

std::vector<PixelImage> load_image_dir(const fs::path& dir, std::size_t channels) {
  if (!fs::is_directory(dir)) throw ConfigError("dataset directory '" + dir.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<PixelImage> out;
  for (const auto& p : files) out.push_back(read_png(p, channels));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-based image editing by optimizing the noise and timesteps of a DDIM chain"};
  app.require_subcommand(1);

  EditFlags text_f, ref_f, stroke_f, compose_f, sweep_f, ablate_f;
  auto* edit_text = app.add_subcommand("edit-text", "Text-guided edit (replace, add or restyle)");
  add_edit_flags(edit_text, text_f);
  auto* edit_ref = app.add_subcommand("edit-ref", "Reference-image-guided edit");
  add_edit_flags(edit_ref, ref_f);
  edit_ref->get_option("--reference")->required();
  auto* edit_stroke = app.add_subcommand("edit-stroke", "Stroke-guided edit");
  add_edit_flags(edit_stroke, stroke_f);
  edit_stroke->get_option("--stroke-image")->required();
  auto* edit_compose = app.add_subcommand("edit-compose", "Image-composition edit");
  add_edit_flags(edit_compose, compose_f);
  edit_compose->get_option("--composed-image")->required();

  auto* sweep_cmd = app.add_subcommand("sweep", "Un-optimized outputs over a seeds x T grid");
  add_edit_flags(sweep_cmd, sweep_f);
  std::vector<double> T_values{0.25, 0.5, 0.75};
  std::vector<std::uint64_t> seeds{0, 1};
  sweep_cmd->add_option("--T-values", T_values, "T values (columns)")->capture_default_str();
  sweep_cmd->add_option("--seeds", seeds, "Seeds (rows)")->capture_default_str();

  auto* ablate_cmd = app.add_subcommand("ablate", "Edit with parts of the optimization switched off");
  add_edit_flags(ablate_cmd, ablate_f);
  std::string ablate_mode;
  ablate_cmd->add_option("--mode", ablate_mode, "Ablation")
      ->required()
      ->check(CLI::IsMember({"const-t", "const-noise", "full-mask", "full"}));

  auto* distill_cmd = app.add_subcommand("distill", "Train a latent-domain twin of the toy visual encoder");
  std::string dataset_dir, distill_out = "latent_encoder", objective = "cosine";
  std::size_t iterations = 2000, batch = 16, count = 500, factor = 2, image_size = 32;
  double lr = 1e-2;
  std::uint64_t distill_seed = 0;
  distill_cmd->add_option("--dataset", dataset_dir, "Directory of PNG images (default: synthetic set)");
  distill_cmd->add_option("--count", count, "Synthetic image count")->capture_default_str();
  distill_cmd->add_option("--image-size", image_size, "Synthetic image side")->capture_default_str();
  distill_cmd->add_option("--factor", factor, "Toy autoencoder factor")->capture_default_str();
  distill_cmd->add_option("--objective", objective)->check(CLI::IsMember({"cosine", "l1"}))->capture_default_str();
  distill_cmd->add_option("--iterations", iterations)->capture_default_str();
  distill_cmd->add_option("--batch-size", batch)->capture_default_str();
  distill_cmd->add_option("--lr", lr)->capture_default_str();
  distill_cmd->add_option("--seed", distill_seed)->capture_default_str();
  distill_cmd->add_option("--out", distill_out)->capture_default_str();

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate the editor on a JSONL test manifest");
  std::string manifest, eval_out = "tino_eval", eval_backend;
  std::size_t synthetic = 0, eval_W = 50, eval_K = 10, eval_factor = 8;
  double eval_T = 0.75;
  eval_cmd->add_option("--manifest", manifest, "JSONL manifest");
  eval_cmd->add_option("--synthetic", synthetic, "Generate a synthetic test set of N samples instead");
  eval_cmd->add_option("--K", eval_K)->capture_default_str();
  eval_cmd->add_option("--T", eval_T)->capture_default_str();
  eval_cmd->add_option("--W", eval_W)->capture_default_str();
  eval_cmd->add_option("--backend-dir", eval_backend)->envname("TINO_BACKEND_DIR");
  eval_cmd->add_option("--toy-factor", eval_factor)->capture_default_str();
  eval_cmd->add_option("--out", eval_out)->capture_default_str();

  auto* bench_cmd = app.add_subcommand("bench", "Latent vs pixel loss+gradient cost");
  BenchmarkOptions bench_opts;
  std::string bench_out;
  bench_cmd->add_option("--sizes", bench_opts.sizes)->capture_default_str();
  bench_cmd->add_option("--repetitions", bench_opts.repetitions)->capture_default_str();
  bench_cmd->add_option("--factor", bench_opts.factor)->capture_default_str();
  bench_cmd->add_option("--out", bench_out, "Write the report as JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (edit_text->parsed()) return do_edit(text_f, std::nullopt);
    if (edit_ref->parsed()) return do_edit(ref_f, std::nullopt);
    if (edit_stroke->parsed()) return do_edit(stroke_f, EditTaskKind::stroke);
    if (edit_compose->parsed()) return do_edit(compose_f, EditTaskKind::compose);
    if (ablate_cmd->parsed()) {
      AblationFlags a;
      a.freeze_timesteps = ablate_mode == "const-t";
      a.freeze_noise = ablate_mode == "const-noise";
      a.full_mask = ablate_mode == "full-mask";
      return do_edit(ablate_f, std::nullopt, a);
    }
    if (sweep_cmd->parsed()) {
      const EditRequest req = build_request(sweep_f, std::nullopt);
      const Backends b = make_backends(sweep_f.backend_dir, req.image.shape(), sweep_f.toy_factor);
      const SweepGrid g = sweep(req, b, T_values, seeds, run_config(sweep_f));
      write_sweep(sweep_f.out, g);
      std::cout << sweep_index_csv(g);
      return 0;
    }
    if (distill_cmd->parsed()) {
      std::vector<PixelImage> images = dataset_dir.empty()
                                           ? synthetic_images(count, Shape{3, image_size, image_size}, distill_seed)
                                           : load_image_dir(dataset_dir, 3);
      if (images.empty()) throw ConfigError("distillation dataset is empty");
      const std::size_t n_held = std::max<std::size_t>(1, images.size() / 5);
      std::vector<PixelImage> held(images.end() - static_cast<std::ptrdiff_t>(n_held), images.end());
      images.resize(images.size() - n_held);
      auto ae = make_toy_autoencoder(factor, 3);
      auto emb = make_toy_embedders(64, distill_seed, ae);
      DistillConfig cfg;
      cfg.iterations = iterations;
      cfg.batch_size = batch;
      cfg.learning_rate = lr;
      cfg.objective = parse_objective(objective);
      cfg.seed = distill_seed;
      const auto enc = distill(emb.visual->teacher(), *ae, images, held, cfg);
      save_distilled_encoder(distill_out, enc);
      const auto report = evaluate_distillation(enc.net, emb.visual->teacher(), *ae, held);
      std::cout << "held-out mean cosine " << report.mean_cosine << ", mean L1 " << report.mean_l1
                << " (best iteration " << enc.best_iteration << ")\n";
      return 0;
    }
    if (eval_cmd->parsed()) {
      if (manifest.empty() && synthetic == 0) throw UsageError("eval needs --manifest or --synthetic N");
      fs::path mpath = manifest.empty() ? write_synthetic_testset(fs::path(eval_out) / "testset", synthetic)
                                        : fs::path(manifest);
      const auto samples = parse_manifest(mpath);
      if (samples.empty()) throw ConfigError("no samples in manifest '" + mpath.string() + "'");
      const PixelImage first = read_png(samples.front().image);
      const Backends b = make_backends(eval_backend, first.shape(), eval_factor);
      RunConfig cfg;
      cfg.K = eval_K;
      cfg.T = eval_T;
      cfg.W = eval_W;
      const auto report = evaluate_testset(mpath, b, cfg, fs::path(eval_out));
      std::cout << report_json(report).dump(2) << "\n";
      if (report.failures) std::cerr << "warning: " << report.failures << " sample(s) failed\n";
      return 0;
    }
    if (bench_cmd->parsed()) {
      const auto report = benchmark_latent_vs_pixel(bench_opts);
      const auto j = benchmark_json(report);
      if (!bench_out.empty()) std::ofstream(bench_out) << j.dump(2) << "\n";
      std::cout << j.dump(2) << "\n";
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << app.help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
