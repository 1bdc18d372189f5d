#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "hnet/gradsuite.hpp"
#include "hnet/io.hpp"
#include "hnet/train.hpp"

using namespace hnet;

namespace {

// Exit codes: 0 success, 1 validation or usage failure, 2 numerical failure.
constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;

std::string g_command;  // the invocation, recorded in every sidecar

KvDoc read_config(const std::string& path) { return KvDoc::parse(detail::read_file(path)); }

void write_text(const fs::path& p, const std::string& text) { detail::write_file(p, text); }

/// A generated scene directory: images, ground truth and the scene config.
struct SceneDir {
  SceneConfig config;
  Tensor left, right, gt_depth, gt_disparity, occlusion;
};

/// Raw f32 images are preferred over the 8-bit PPMs so a scene reloads
/// without quantisation.
Tensor load_image(const fs::path& dir, const std::string& stem) {
  if (fs::exists(dir / (stem + ".f32"))) return read_raw_f32(dir / (stem + ".f32"));
  return read_ppm(dir / (stem + ".ppm"));
}

SceneDir load_scene_dir(const fs::path& dir) {
  SceneDir s;
  KvDoc doc = read_config((dir / "scene.cfg").string());
  doc.reject_unknown(SceneConfig::is_key);
  s.config = SceneConfig::read(doc, SceneConfig{});
  s.left = load_image(dir, "left");
  s.right = load_image(dir, "right");
  const Shape want{3, s.config.height, s.config.width};
  if (s.left.shape() != want || s.right.shape() != want) {
    throw ValidationError("scene '" + dir.string() + "': images are not " + shape_str(want));
  }
  if (fs::exists(dir / "depth.f32")) s.gt_depth = read_raw_f32(dir / "depth.f32");
  if (fs::exists(dir / "disparity.f32")) s.gt_disparity = read_raw_f32(dir / "disparity.f32");
  if (fs::exists(dir / "occlusion.f32")) s.occlusion = read_raw_f32(dir / "occlusion.f32");
  return s;
}

void require_matching_size(const ModelConfig& mc, const SceneConfig& sc) {
  if (mc.height != sc.height || mc.width != sc.width) {
    throw ValidationError("checkpoint expects " + std::to_string(mc.height) + "x" + std::to_string(mc.width) +
                          " inputs, scene is " + std::to_string(sc.height) + "x" + std::to_string(sc.width));
  }
}

double min_of(const Tensor& t) { return *std::min_element(t.data().begin(), t.data().end()); }
double max_of(const Tensor& t) { return *std::max_element(t.data().begin(), t.data().end()); }

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

struct GenOptions {
  std::string preset = "two-plane";
  std::string config;
  std::uint64_t seed = 1;
  std::optional<double> noise;
  std::string out;
};

int run_gen(const GenOptions& o) {
  SceneConfig cfg = scene_preset(o.preset);
  if (!o.config.empty()) {
    KvDoc doc = read_config(o.config);
    doc.reject_unknown(SceneConfig::is_key);
    cfg = SceneConfig::read(doc, cfg);
  }
  if (o.noise) cfg.noise = *o.noise;
  cfg.validate();
  const StereoSample s = generate_scene(cfg, o.seed);
  const fs::path dir(o.out);
  write_text(dir / "scene.cfg", cfg.to_text());
  write_ppm(dir / "left.ppm", s.left);
  write_ppm(dir / "right.ppm", s.right);
  write_raw_f32(dir / "left.f32", s.left, "intensity in [0,1], channel-major", g_command);
  write_raw_f32(dir / "right.f32", s.right, "intensity in [0,1], channel-major", g_command);
  write_raw_f32(dir / "disparity.f32", s.gt_disparity, "pixels, left-image frame", g_command);
  write_raw_f32(dir / "depth.f32", s.gt_depth, "depth units", g_command);
  write_raw_f32(dir / "occlusion.f32", s.occlusion_mask, "1 = not visible in both views", g_command);
  write_pgm16(dir / "disparity.pgm", s.gt_disparity, min_of(s.gt_disparity), max_of(s.gt_disparity), "pixels",
              g_command);
  std::cout << "wrote " << cfg.height << "x" << cfg.width << " scene '" << o.preset << "' seed " << o.seed << " to "
            << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string config;
  std::optional<std::size_t> steps, scene_count, log_every;
  std::optional<std::uint64_t> seed, scene_seed;
  std::optional<double> lr;
  std::optional<std::string> mode, preset;
  std::string out;
};

TrainConfig resolve_train_config(const TrainOptions& o) {
  KvDoc doc = o.config.empty() ? KvDoc{} : read_config(o.config);
  if (o.steps) doc.set("train.steps", *o.steps);
  if (o.seed) doc.set("train.seed", static_cast<std::size_t>(*o.seed));
  if (o.lr) doc.set("train.lr", *o.lr);
  if (o.scene_seed) doc.set("train.scene_seed", static_cast<std::size_t>(*o.scene_seed));
  if (o.scene_count) doc.set("train.scene_count", *o.scene_count);
  if (o.mode) doc.set("model.attention", *o.mode);
  if (o.preset) doc.set("train.scene_preset", *o.preset);
  return TrainConfig::read(doc);
}

void write_loss_csv(const fs::path& p, const std::vector<StepLog>& log) {
  std::string text = StepLog::csv_header() + "\n";
  for (const auto& row : log) text += row.csv_row() + "\n";
  write_text(p, text);
}

int run_train(const TrainOptions& o) {
  const TrainConfig cfg = resolve_train_config(o);
  const fs::path dir(o.out);
  write_text(dir / "train.cfg", cfg.to_text());
  std::vector<StepLog> log;
  const std::size_t every = o.log_every.value_or(50);
  auto on_step = [&](const StepLog& row) {
    log.push_back(row);
    if (every > 0 && (row.step % every == 0 || row.step + 1 == cfg.steps)) {
      std::cerr << "step " << row.step << " total " << KvDoc::format_double(row.total) << "\n";
    }
  };
  try {
    const TrainResult r = train(cfg, on_step);
    save_checkpoint((dir / "checkpoint.bin").string(), cfg.model, r.params);
    write_loss_csv(dir / "loss.csv", log);
    std::cout << "trained " << cfg.steps << " steps: total " << KvDoc::format_double(log.front().total) << " -> "
              << KvDoc::format_double(log.back().total) << "\n";
    return 0;
  } catch (const TrainingDiverged& e) {
    save_checkpoint((dir / "checkpoint.bin").string(), cfg.model, e.last_finite());
    write_loss_csv(dir / "loss.csv", log);
    std::cerr << "error: " << e.what() << "; last finite parameters saved to " << (dir / "checkpoint.bin").string()
              << "\n";
    return kExitNumerical;
  }
}

// ---------------------------------------------------------------------------
// infer / eval
// ---------------------------------------------------------------------------

struct InferOptions {
  std::string checkpoint, scene, out;
};

int run_infer(const InferOptions& o) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const SceneDir s = load_scene_dir(o.scene);
  require_matching_size(ck.config, s.config);
  const Prediction pred = infer(ck.params, ck.config, s.config.camera, s.left, s.right);
  const fs::path dir(o.out);
  const char* side[2] = {"left", "right"};
  for (int b = 0; b < 2; ++b) {
    const std::string stem = std::string("depth_") + side[b];
    write_raw_f32(dir / (stem + ".f32"), pred.depth[b], "depth units", g_command);
    write_raw_f32(dir / ("disparity_" + std::string(side[b]) + ".f32"), pred.disparity[b], "pixels", g_command);
    write_pgm16(dir / (stem + ".pgm"), pred.depth[b], min_of(pred.depth[b]), max_of(pred.depth[b]), "depth units",
                g_command);
    std::cout << stem << " min " << KvDoc::format_double(min_of(pred.depth[b])) << " max "
              << KvDoc::format_double(max_of(pred.depth[b])) << "\n";
  }
  return 0;
}

struct EvalOptions {
  std::string checkpoint, scene;
  double cap = 80.0;
  bool exclude_occluded = false;
};

int run_eval(const EvalOptions& o) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const SceneDir s = load_scene_dir(o.scene);
  require_matching_size(ck.config, s.config);
  if (s.gt_depth.size() == 0) throw ValidationError("scene '" + o.scene + "' has no depth.f32 ground truth");
  const Prediction pred = infer(ck.params, ck.config, s.config.camera, s.left, s.right);
  Tensor gt = s.gt_depth;
  if (o.exclude_occluded) {
    if (s.occlusion.size() == 0) throw ValidationError("scene '" + o.scene + "' has no occlusion.f32 mask");
    require_same_shape(gt, s.occlusion, "eval");
    for (std::size_t q = 0; q < gt.size(); ++q)
      if (s.occlusion[q] != 0.0) gt[q] = 0.0;  // zero ground truth is invalid
  }
  const MetricsReport m = compute_metrics(pred.depth[0], gt, o.cap);
  std::cout << MetricsReport::csv_header() << "\n" << m.csv_row() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck / params
// ---------------------------------------------------------------------------

int run_gradcheck(std::uint64_t seed) {
  double worst = 0.0;
  std::string worst_name;
  run_gradient_suite(seed, [&](const GradCaseResult& r) {
    const double e = r.check.max_rel_error_refined;
    std::cout << r.name << " max_rel_error " << KvDoc::format_double(e) << " entries " << r.check.entries_checked
              << " refined " << r.check.refined_entries << "\n";
    if (!(e <= worst)) {
      worst = e;
      worst_name = r.name;
    }
  });
  const bool ok = worst < kGradTolerance;
  std::cout << "worst " << worst_name << " " << KvDoc::format_double(worst) << (ok ? " PASS" : " FAIL") << "\n";
  return ok ? 0 : kExitNumerical;
}

struct ParamsOptions {
  std::string config;
  std::optional<std::string> mode;
  std::optional<std::vector<std::size_t>> widths;
  std::optional<std::size_t> scales;
};

int run_params(const ParamsOptions& o) {
  KvDoc doc = o.config.empty() ? KvDoc{} : read_config(o.config);
  if (o.mode) doc.set("model.attention", *o.mode);
  if (o.widths) doc.set("model.widths", KvDoc::join(*o.widths));
  if (o.scales) doc.set("model.scales", *o.scales);
  const ModelConfig mc = ModelConfig::read(doc);
  Rng rng(0);
  const ParamBreakdown b = param_count(build(mc, rng));
  std::cout << "attention " << attention_name(mc.attention) << "\n"
            << "encoder " << b.encoder << "\n"
            << "fusion " << b.fusion << "\n"
            << "decoder " << b.decoder << "\n"
            << "heads " << b.heads << "\n"
            << "backbone " << b.backbone() << "\n"
            << "encoder_attention " << b.enc_attention << "\n"
            << "decoder_attention " << b.dec_attention << "\n"
            << "attention_total " << b.attention() << "\n"
            << "total " << b.total() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 0; i < argc; ++i) g_command += (i ? " " : "") + std::string(i ? argv[i] : "hnet");

  CLI::App app{"hnet: mutual epipolar attention stereo depth on synthetic scenes"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  GenOptions gen;
  auto* g = app.add_subcommand("gen", "render a synthetic stereo scene with ground truth");
  g->add_option("--preset", gen.preset, "scene layout: two-plane, slanted, single-plane")->capture_default_str();
  g->add_option("--config", gen.config, "scene config file overriding the preset");
  g->add_option("--seed", gen.seed, "texture and noise seed")->capture_default_str();
  g->add_option("--noise", gen.noise, "additive noise standard deviation");
  g->add_option("--out", gen.out, "output directory")->required();

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "train on generated scenes; writes checkpoint.bin and loss.csv");
  t->add_option("--config", tr.config, "training config file");
  t->add_option("--steps", tr.steps, "optimisation steps");
  t->add_option("--seed", tr.seed, "initialisation seed");
  t->add_option("--lr", tr.lr, "initial learning rate");
  t->add_option("--mode", tr.mode, "attention: off, eg-mea, ot-mea, eg-mnl, ot-mnl");
  t->add_option("--preset", tr.preset, "scene layout");
  t->add_option("--scene-seed", tr.scene_seed, "seed of the first training scene");
  t->add_option("--scene-count", tr.scene_count, "number of training scenes");
  t->add_option("--log-every", tr.log_every, "progress interval on stderr (0 = silent)");
  t->add_option("--out", tr.out, "output directory")->required();

  InferOptions inf;
  auto* i = app.add_subcommand("infer", "predict depth for a scene directory");
  i->add_option("--checkpoint", inf.checkpoint, "checkpoint file")->required();
  i->add_option("--scene", inf.scene, "scene directory written by gen")->required();
  i->add_option("--out", inf.out, "output directory")->required();

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "predict depth and print the metrics CSV");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  e->add_option("--scene", ev.scene, "scene directory written by gen")->required();
  e->add_option("--cap", ev.cap, "maximum ground-truth depth evaluated")->capture_default_str();
  e->add_flag("--exclude-occluded", ev.exclude_occluded, "skip pixels marked in occlusion.f32");

  std::uint64_t gc_seed = 0;
  auto* c = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  c->add_option("--seed", gc_seed, "seed of the check points")->capture_default_str();

  ParamsOptions pa;
  auto* p = app.add_subcommand("params", "parameter breakdown of a model config");
  p->add_option("--config", pa.config, "config file with model keys");
  p->add_option("--mode", pa.mode, "attention: off, eg-mea, ot-mea, eg-mnl, ot-mnl");
  p->add_option("--widths", pa.widths, "encoder widths")->delimiter(',');
  p->add_option("--scales", pa.scales, "number of output scales");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : kExitValidation;
  }

  try {
    if (*g) return run_gen(gen);
    if (*t) return run_train(tr);
    if (*i) return run_infer(inf);
    if (*e) return run_eval(ev);
    if (*c) return run_gradcheck(gc_seed);
    if (*p) return run_params(pa);
  } catch (const NumericalError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitNumerical;
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitValidation;
  } catch (const IoError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitValidation;
  }
  return kExitValidation;
}
