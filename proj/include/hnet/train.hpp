#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hnet/losses.hpp"
#include "hnet/metrics.hpp"
#include "hnet/model.hpp"
#include "hnet/scene.hpp"

namespace hnet {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t steps = 500;
  double lr = 1e-4;
  double lr_drop_at = 0.75;  // fraction of steps after which lr is multiplied by lr_drop
  double lr_drop = 0.1;
  AdamConfig adam{};
  std::uint64_t seed = 0;  // model initialisation
  SceneConfig scene = two_plane_scene();
  std::uint64_t scene_seed = 1;
  std::size_t scene_count = 1;  // samples use scene_seed, scene_seed + 1, ...; step t uses sample t mod count
  LossConfig loss{};
  ModelConfig model{};

  void validate() const {
    if (steps < 1) throw ValidationError("train: steps must be >= 1");
    if (!(lr > 0.0)) throw ValidationError("train: learning rate must be > 0");
    if (!(lr_drop_at >= 0.0 && lr_drop_at <= 1.0)) throw ValidationError("train: lr drop point must lie in [0, 1]");
    if (!(lr_drop > 0.0)) throw ValidationError("train: lr drop factor must be > 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
      throw ValidationError("train: Adam needs beta in [0, 1) and eps > 0");
    }
    if (scene_count < 1) throw ValidationError("train: scene count must be >= 1");
    loss.validate();
    model.validate();
    scene.validate();
    if (scene.height != model.height || scene.width != model.width) {
      throw ValidationError("train: scene size " + std::to_string(scene.height) + "x" + std::to_string(scene.width) +
                            " differs from model input " + std::to_string(model.height) + "x" +
                            std::to_string(model.width));
    }
  }

  double lr_at(std::size_t step) const {
    const auto drop = static_cast<std::size_t>(std::floor(lr_drop_at * static_cast<double>(steps)));
    return step < drop ? lr : lr * lr_drop;
  }

  void write(KvDoc& doc) const {
    doc.set("train.steps", steps);
    doc.set("train.lr", lr);
    doc.set("train.lr_drop_at", lr_drop_at);
    doc.set("train.lr_drop", lr_drop);
    doc.set("train.beta1", adam.beta1);
    doc.set("train.beta2", adam.beta2);
    doc.set("train.adam_eps", adam.eps);
    doc.set("train.seed", static_cast<std::size_t>(seed));
    doc.set("train.scene_seed", static_cast<std::size_t>(scene_seed));
    doc.set("train.scene_count", scene_count);
    doc.set("loss.gamma", loss.gamma);
    doc.set("loss.lambda", loss.lambda);
    doc.set("loss.c1", loss.c1);
    doc.set("loss.c2", loss.c2);
    model.write(doc);
    scene.write(doc);
  }

  std::string to_text() const {
    KvDoc d;
    write(d);
    return d.to_text();
  }

  static bool is_key(const std::string& k) {
    static const char* const keys[] = {"train.steps", "train.lr", "train.lr_drop_at", "train.lr_drop",
                                       "train.beta1", "train.beta2", "train.adam_eps", "train.seed",
                                       "train.scene_seed", "train.scene_count", "train.scene_preset",
                                       "loss.gamma", "loss.lambda", "loss.c1", "loss.c2"};
    for (const char* key : keys)
      if (k == key) return true;
    return ModelConfig::is_key(k) || SceneConfig::is_key(k);
  }

  /// Parses a config document; unknown keys are rejected. A `train.scene_preset`
  /// key selects the base layout that explicit scene keys then override.
  static TrainConfig read(const KvDoc& doc) {
    doc.reject_unknown(is_key);
    TrainConfig c;
    c.steps = doc.get_size("train.steps", c.steps);
    c.lr = doc.get_double("train.lr", c.lr);
    c.lr_drop_at = doc.get_double("train.lr_drop_at", c.lr_drop_at);
    c.lr_drop = doc.get_double("train.lr_drop", c.lr_drop);
    c.adam.beta1 = doc.get_double("train.beta1", c.adam.beta1);
    c.adam.beta2 = doc.get_double("train.beta2", c.adam.beta2);
    c.adam.eps = doc.get_double("train.adam_eps", c.adam.eps);
    c.seed = doc.get_size("train.seed", c.seed);
    c.scene_seed = doc.get_size("train.scene_seed", c.scene_seed);
    c.scene_count = doc.get_size("train.scene_count", c.scene_count);
    c.loss.gamma = doc.get_double("loss.gamma", c.loss.gamma);
    c.loss.lambda = doc.get_double("loss.lambda", c.loss.lambda);
    c.loss.c1 = doc.get_double("loss.c1", c.loss.c1);
    c.loss.c2 = doc.get_double("loss.c2", c.loss.c2);
    c.model = ModelConfig::read(doc, c.model);
    c.scene = SceneConfig::read(doc, scene_preset(doc.get_string("train.scene_preset", "two-plane")));
    c.validate();
    return c;
  }
};

/// Adam moments for every parameter tensor, in named_params order.
class Adam {
 public:
  Adam(const ModelParams& p, AdamConfig cfg) : cfg_(cfg), m_(zeros_like(p)), v_(zeros_like(p)) {}

  void step(ModelParams& p, const ModelParams& g, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto pp = named_params(p);
    const auto gg = named_params(g);
    auto mm = named_params(m_), vv = named_params(v_);
    for (std::size_t k = 0; k < pp.size(); ++k) {
      Tensor& x = *pp[k].second;
      const Tensor& gr = *gg[k].second;
      Tensor& m = *mm[k].second;
      Tensor& v = *vv[k].second;
      for (std::size_t i = 0; i < x.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gr[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gr[i] * gr[i];
        x[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  ModelParams m_, v_;
  std::size_t t_ = 0;
};

struct StepLog {
  std::size_t step = 0;
  double photometric = 0.0, smoothness = 0.0, total = 0.0, lr = 0.0;

  static std::string csv_header() { return "step,photometric,smoothness,total,lr"; }
  std::string csv_row() const {
    return std::to_string(step) + "," + KvDoc::format_double(photometric) + "," +
           KvDoc::format_double(smoothness) + "," + KvDoc::format_double(total) + "," + KvDoc::format_double(lr);
  }
};

struct LossAndGrad {
  LossReport report;
  ModelParams grads;
};

/// Total loss of one stereo pair and its gradient with respect to the parameters.
inline LossAndGrad loss_and_grad(const ModelParams& p, const ModelConfig& mc, const LossConfig& lc,
                                 const Camera& cam, const Tensor& left, const Tensor& right) {
  const ForwardResult fr = forward(left, right, p, mc);
  const LossEvaluation ev = total_loss(fr.output, left, right, cam, lc);
  const auto domega = total_loss_vjp(fr.output, ev, left, right, cam, lc);
  return {ev.report, backward(fr, p, mc, domega).grads};
}

inline double evaluate_loss(const ModelParams& p, const ModelConfig& mc, const LossConfig& lc, const Camera& cam,
                            const Tensor& left, const Tensor& right) {
  return total_loss(forward(left, right, p, mc).output, left, right, cam, lc).report.total;
}

/// Raised when a step meets non-finite parameters, a numerical failure or a
/// non-finite loss; carries the last parameters whose loss was finite.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(std::size_t step, ModelParams last_finite)
      : NumericalError("train: non-finite loss at step " + std::to_string(step)),
        step_(step),
        last_finite_(std::move(last_finite)) {}
  std::size_t step() const { return step_; }
  const ModelParams& last_finite() const { return last_finite_; }

 private:
  std::size_t step_;
  ModelParams last_finite_;
};

struct TrainResult {
  ModelParams params;
  std::vector<StepLog> log;
};

inline std::vector<StereoSample> training_scenes(const TrainConfig& cfg) {
  std::vector<StereoSample> v;
  for (std::size_t k = 0; k < cfg.scene_count; ++k) v.push_back(generate_scene(cfg.scene, cfg.scene_seed + k));
  return v;
}

/// Row t of the log is the loss of the parameters before update t. `params`
/// overrides the seeded initialisation; `on_step` sees every row as it is made.
inline TrainResult train(const TrainConfig& cfg, const std::function<void(const StepLog&)>& on_step = {},
                         std::optional<ModelParams> params = std::nullopt) {
  cfg.validate();
  const auto scenes = training_scenes(cfg);
  Rng rng(cfg.seed);
  TrainResult res;
  res.params = params ? std::move(*params) : build(cfg.model, rng);
  Adam opt(res.params, cfg.adam);
  ModelParams last_finite = res.params;
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const auto& s = scenes[t % scenes.size()];
    for (const auto& [name, x] : named_params(res.params))
      if (!x->all_finite()) throw TrainingDiverged(t, std::move(last_finite));
    LossAndGrad lg;
    try {
      lg = loss_and_grad(res.params, cfg.model, cfg.loss, cfg.scene.camera, s.left, s.right);
    } catch (const NumericalError&) {
      throw TrainingDiverged(t, std::move(last_finite));
    }
    if (!std::isfinite(lg.report.total)) throw TrainingDiverged(t, std::move(last_finite));
    const StepLog row{t, lg.report.photometric, lg.report.smoothness, lg.report.total, cfg.lr_at(t)};
    res.log.push_back(row);
    if (on_step) on_step(row);
    last_finite = res.params;
    opt.step(res.params, lg.grads, row.lr);
  }
  return res;
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

struct Prediction {
  std::array<Tensor, 2> depth;      // finest scale, both branches, [1, h, w]
  std::array<Tensor, 2> disparity;  // f·B / depth
};

inline Prediction infer(const ModelParams& p, const ModelConfig& mc, const Camera& cam, const Tensor& left,
                        const Tensor& right) {
  const ForwardResult fr = forward(left, right, p, mc);
  Prediction out;
  for (int b = 0; b < 2; ++b) {
    out.depth[b] = sigmoid_to_depth(fr.output.omega[b][0]);
    out.disparity[b] = depth_to_disparity(out.depth[b], cam.focal, cam.baseline);
  }
  return out;
}

/// Mean |pred - gt| over pixels where the mask is zero.
inline double mean_disparity_error(const Tensor& pred, const Tensor& gt, const Tensor& exclude) {
  require_same_shape(pred, gt, "mean_disparity_error");
  require_same_shape(pred, exclude, "mean_disparity_error");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t q = 0; q < pred.size(); ++q) {
    if (exclude[q] != 0.0) continue;
    s += std::abs(pred[q] - gt[q]);
    ++n;
  }
  if (n == 0) throw ValidationError("mean_disparity_error: every pixel is excluded");
  return s / static_cast<double>(n);
}

}  // namespace hnet
