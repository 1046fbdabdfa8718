#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "spiga/autodiff.hpp"
#include "spiga/backbone.hpp"
#include "spiga/error.hpp"
#include "spiga/features.hpp"
#include "spiga/geometry.hpp"
#include "spiga/metrics.hpp"
#include "spiga/regressor.hpp"
#include "spiga/rng.hpp"
#include "spiga/synthdata.hpp"
#include "spiga/tensor.hpp"

namespace spiga {

// --- learning-rate schedule ----------------------------------------------------

// Shape augmentation ranges. The scale jitter is multiplicative around 1; the
// published face-size range (60% +/- 15% of the crop) converts to a relative
// jitter of 15/60 = 0.25.
struct AugmentConfig {
  bool enabled = true;
  double rotation = kPi / 4.0;    // radians, drawn uniform in [-rotation, rotation]
  double scale_jitter = 0.25;     // scale factor uniform in [1 - j, 1 + j]
  double translate_frac = 0.05;   // shift uniform in +/- frac * image side, per axis
  double flip_prob = 0.5;

  void validate() const {
    if (!(rotation >= 0.0) || !(rotation < kPi))
      throw ConfigError("augment rotation must be in [0, pi)");
    if (!(scale_jitter >= 0.0) || !(scale_jitter < 1.0))
      throw ConfigError("augment scale_jitter must be in [0, 1)");
    if (!(translate_frac >= 0.0) || !(translate_frac < 1.0))
      throw ConfigError("augment translate_frac must be in [0, 1)");
    if (!(flip_prob >= 0.0) || !(flip_prob <= 1.0))
      throw ConfigError("augment flip_prob must be in [0, 1]");
  }
};

struct TrainConfig {
  double lr = 1e-4;
  double lr_decay = 0.1;
  std::vector<std::size_t> milestones{100};  // epochs at which lr multiplies by lr_decay
  std::size_t batch = 16;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  double smooth_l1_beta = 1.0;  // in normalized (coordinate / feature side) units
  double grad_clip = 10.0;      // global-norm clip; <= 0 disables
  double lambda_coord = 4.0;    // backbone coordinate-loss weight (joint mode)
  double lambda_pose = 1.0;     // backbone pose-loss weight (joint mode)
  bool freeze_backbone = true;  // joint mode only: keep backbone parameters fixed
  AugmentConfig augment;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(lr_decay > 0.0) || !(lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0, 1]");
    if (batch == 0) throw ConfigError("batch size must be positive");
    if (!(lambda_coord >= 0.0) || !(lambda_pose >= 0.0))
      throw ConfigError("loss weights must be non-negative");
    if (!(smooth_l1_beta > 0.0)) throw ConfigError("smooth_l1_beta must be positive");
    for (std::size_t i = 1; i < milestones.size(); ++i)
      if (milestones[i] <= milestones[i - 1]) throw ConfigError("milestones must be increasing");
    augment.validate();
  }
};

// Learning rate for a zero-based epoch index: the base rate decays by lr_decay
// at each milestone, so epoch >= milestone counts as one decay step.
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  double rate = cfg.lr;
  for (std::size_t m : cfg.milestones)
    if (epoch >= m) rate *= cfg.lr_decay;
  return rate;
}

// --- optimizer -------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. State is kept per parameter tensor, aligned by
// position with the tensor list handed to the constructor.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    if (params_.empty()) throw EmptyInputError("Adam needs at least one parameter");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Tensor* p : params_) {
      if (p == nullptr) throw ContractError("Adam received a null parameter");
      m_.push_back(Tensor::zeros(p->shape));
      v_.push_back(Tensor::zeros(p->shape));
    }
  }

  std::size_t step_count() const { return t_; }

  // grads[i] pairs with params[i]; a null entry means zero gradient for that
  // tensor (its parameters stay unchanged because m and v stay zero only if
  // they were zero; we still decay existing moments, matching an explicit
  // zero gradient).
  void step(const std::vector<const Tensor*>& grads, double lr) {
    if (grads.size() != params_.size())
      throw DimensionError("Adam step with " + std::to_string(grads.size()) + " gradients for " +
                           std::to_string(params_.size()) + " parameters");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = *params_[i];
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      if (grads[i] != nullptr && !grads[i]->same_shape(p))
        throw DimensionError("Adam gradient shape " + grads[i]->shape_string() +
                             " does not match parameter " + p.shape_string());
      for (std::size_t k = 0; k < p.v.size(); ++k) {
        const double g = grads[i] ? grads[i]->v[k] : 0.0;
        m.v[k] = cfg_.beta1 * m.v[k] + (1.0 - cfg_.beta1) * g;
        v.v[k] = cfg_.beta2 * v.v[k] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m.v[k] / bc1;
        const double vhat = v.v[k] / bc2;
        p.v[k] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  std::vector<Tensor*> params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

// Scales gradients in place so their global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double x : g.v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads)
      for (double& x : g.v) x *= s;
  }
  return norm;
}

// --- cascade loss ------------------------------------------------------------------

// Sum over cascade steps of the smooth-L1 distance between the step output and
// the truth, both divided by the feature side so the loss lives in normalized
// coordinates. The initial shape x_0 is not penalized.
inline Ref cascade_loss(Tape& tape, const CascadeTrace& trace, Ref truth, double norm_side,
                        double beta) {
  if (trace.shapes.size() < 2)
    throw ConfigError("cascade_loss needs at least one cascade step (K >= 1)");
  if (!(norm_side > 0.0)) throw ContractError("cascade_loss norm_side must be positive");
  const double inv = 1.0 / norm_side;
  const Ref truth_n = tape.scale(truth, inv);
  Ref total{};
  for (std::size_t t = 1; t < trace.shapes.size(); ++t) {
    const Ref term = tape.smooth_l1(tape.scale(trace.shapes[t], inv), truth_n, beta);
    total = (t == 1) ? term : tape.add(total, term);
  }
  return total;
}

// --- shape augmentation ------------------------------------------------------------

namespace detail {

// In-plane rotation of camera-frame quantities that matches rotating the
// projected image points by theta about the principal point (x right, y down).
inline void rotate_pose_in_plane(HeadPose& p, double theta) {
  p.roll = wrap_angle(p.roll + theta);
  const double c = std::cos(theta), s = std::sin(theta);
  const double tx = p.tx, ty = p.ty;
  p.tx = c * tx - s * ty;
  p.ty = s * tx + c * ty;
}

// Image-plane scaling about the principal point: to first order in the model
// extent over tz, dividing the depth by s scales all projected offsets by s.
inline void scale_pose_in_plane(HeadPose& p, double s) { p.tz /= s; }

// Image-plane translation by (dx, dy) pixels: shifting the camera-frame
// translation by z/f * d moves the projection by d, exactly for points at
// depth tz and to first order elsewhere.
inline void translate_pose_in_plane(HeadPose& p, double dx, double dy, double focal) {
  p.tx += dx * p.tz / focal;
  p.ty += dy * p.tz / focal;
}

// Horizontal mirror about the vertical line through the principal point:
// yaw, roll and tx flip sign, the rest is unchanged.
inline void flip_pose(HeadPose& p) {
  p.yaw = -p.yaw;
  p.roll = -p.roll;
  p.tx = -p.tx;
}

}  // namespace detail

// Applies a random similarity transform (optional horizontal flip, then
// rotation, scale and translation about the image center) to the sample's
// landmarks, and updates both poses consistently: the flip and rotation are
// exact pose equivalents, scale and translation are first-order (the residual
// acts as extra initialization noise). Stored rasters are dropped because the
// transform invalidates them; callers regenerate feature maps from the
// transformed landmarks. With all ranges zero the sample passes through
// unchanged (up to the dropped rasters).
inline SynthSample augment_shape(const SynthSample& sample, Rng& rng, const AugmentConfig& cfg,
                                 const std::vector<std::size_t>& mirror_map, double image_side,
                                 double focal) {
  cfg.validate();
  if (!(image_side > 0.0) || !(focal > 0.0))
    throw ContractError("augment_shape needs positive image side and focal length");
  const std::size_t n = sample.landmarks.rows();

  // Fixed draw order keeps the stream layout independent of the outcome.
  const bool flip = rng.bernoulli(cfg.flip_prob);
  const double theta = rng.uniform(-cfg.rotation, cfg.rotation);
  const double scale = rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter);
  const double dx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * image_side;
  const double dy = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * image_side;

  SynthSample out;
  out.id = sample.id;
  out.pose = sample.pose;
  out.init_pose = sample.init_pose;
  out.landmarks = sample.landmarks;

  const double c = image_side / 2.0;
  if (flip) {
    if (mirror_map.size() != n)
      throw ConfigError("horizontal flip requested but the mirror index map has " +
                        std::to_string(mirror_map.size()) + " entries for " + std::to_string(n) +
                        " landmarks");
    Tensor flipped = Tensor::zeros({n, 2});
    for (std::size_t l = 0; l < n; ++l) {
      flipped(l, 0) = 2.0 * c - out.landmarks(mirror_map[l], 0);
      flipped(l, 1) = out.landmarks(mirror_map[l], 1);
    }
    out.landmarks = std::move(flipped);
    detail::flip_pose(out.pose);
    detail::flip_pose(out.init_pose);
  }

  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  for (std::size_t l = 0; l < n; ++l) {
    const double x = out.landmarks(l, 0) - c;
    const double y = out.landmarks(l, 1) - c;
    out.landmarks(l, 0) = c + scale * (cos_t * x - sin_t * y) + dx;
    out.landmarks(l, 1) = c + scale * (sin_t * x + cos_t * y) + dy;
  }
  for (HeadPose* p : {&out.pose, &out.init_pose}) {
    detail::rotate_pose_in_plane(*p, theta);
    detail::scale_pose_in_plane(*p, scale);
    detail::translate_pose_in_plane(*p, dx, dy, focal);
  }
  return out;
}

// --- training loop -----------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;                 // mean training loss over the epoch
  std::vector<double> nme_per_step;  // mean NME (percent) of x_1..x_K at feature scale
  double grad_norm = 0.0;            // mean pre-clip gradient norm
};

struct TrainResult {
  std::vector<EpochLog> epochs;
};

using EpochCallback = std::function<void(const EpochLog&)>;

namespace detail {

inline void collect_gradients(const GradientStore& store,
                              const std::vector<ParamBinding>& bindings,
                              const std::vector<Tensor*>& params, std::vector<Tensor>& grads) {
  if (bindings.size() != params.size())
    throw ContractError("parameter binding count " + std::to_string(bindings.size()) +
                        " does not match optimizer parameter count " +
                        std::to_string(params.size()));
  for (std::size_t i = 0; i < bindings.size(); ++i) {
    if (bindings[i].tensor != params[i])
      throw ContractError("parameter binding order diverged from optimizer order at index " +
                          std::to_string(i));
    if (store.has(bindings[i].ref)) {
      const Tensor& g = store.at(bindings[i].ref);
      for (std::size_t k = 0; k < g.v.size(); ++k) grads[i].v[k] += g.v[k];
    }
  }
}

}  // namespace detail

// Trains the cascade on synthetic samples. Without a backbone, feature maps
// come from the dataset (or are regenerated after augmentation) and x_0 is
// projected from the stored initialization pose. With a backbone, images are
// pushed through it to produce the feature map, x_0 comes from the predicted
// pose via the differentiable projection, and the multitask objective adds the
// per-stage coordinate and pose losses; cfg.freeze_backbone keeps the backbone
// parameters out of the optimizer entirely. Deterministic for a fixed config:
// sample order, augmentation draws and raster regeneration all derive from
// cfg.seed. Returns per-epoch logs; on_epoch (if set) fires after each.
inline TrainResult train_cascade(CascadeModel& model, const RigidFaceModel& face,
                                 const SynthDataset& data, const TrainConfig& cfg,
                                 const std::vector<std::size_t>& mirror_map,
                                 const EpochCallback& on_epoch = {},
                                 BackboneModel* backbone = nullptr) {
  cfg.validate();
  model.config.validate();
  if (data.samples.empty()) throw EmptyInputError("train_cascade with an empty dataset");
  const SynthConfig& dcfg = data.config;
  if (model.config.landmarks != dcfg.landmarks)
    throw ConfigError("model expects " + std::to_string(model.config.landmarks) +
                      " landmarks but the dataset has " + std::to_string(dcfg.landmarks));
  if (model.config.channels != dcfg.channels)
    throw ConfigError("model expects " + std::to_string(model.config.channels) +
                      " feature channels but the dataset has " + std::to_string(dcfg.channels));
  if (backbone != nullptr) {
    backbone->config.validate();
    if (backbone->config.input_side != dcfg.image_side ||
        backbone->config.feature_side != dcfg.feature_side ||
        backbone->config.channels != model.config.channels ||
        backbone->config.landmarks != dcfg.landmarks)
      throw ConfigError("backbone configuration does not match the dataset/cascade geometry");
  }

  const double img_to_feat =
      static_cast<double>(dcfg.feature_side) / static_cast<double>(dcfg.image_side);
  const CameraIntrinsics cam_feat =
      CameraIntrinsics::standard(static_cast<double>(dcfg.feature_side));
  const CameraIntrinsics cam_img =
      CameraIntrinsics::standard(static_cast<double>(dcfg.image_side));
  const NormalizationSpec norm = NormalizationSpec::for_model(face, NormKind::kInterOcular);

  const bool train_backbone = backbone != nullptr && !cfg.freeze_backbone;
  std::vector<NamedParam> named;
  model.visit_params(named);
  if (train_backbone) backbone->visit_params(named);
  std::vector<Tensor*> params;
  params.reserve(named.size());
  for (const NamedParam& p : named) params.push_back(p.tensor);
  Adam adam(params);

  const std::size_t n = data.samples.size();
  const std::size_t k_steps = model.config.schedule.steps();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double rate = lr_at(epoch, cfg);
    Rng order_rng(derive_seed(cfg.seed, epoch, 0x06DE));
    order_rng.shuffle(order);

    double loss_sum = 0.0;
    double norm_sum = 0.0;
    std::size_t batches = 0;
    std::vector<double> nme_sum(k_steps, 0.0);

    for (std::size_t start = 0; start < n; start += cfg.batch) {
      const std::size_t stop = std::min(n, start + cfg.batch);
      const double inv_b = 1.0 / static_cast<double>(stop - start);

      Tape tape;
      std::vector<ParamBinding> bindings;
      TapedCascade taped = put_cascade(tape, model, /*trainable=*/true, &bindings);
      TapedBackbone taped_backbone;
      Ref face_points;
      if (backbone != nullptr) {
        taped_backbone = put_backbone(tape, *backbone, train_backbone, &bindings);
        face_points = tape.leaf(face.points);
      }

      Ref batch_loss{};
      std::vector<std::vector<Ref>> batch_attention;
      for (std::size_t bi = start; bi < stop; ++bi) {
        const std::size_t idx = order[bi];
        Rng visit_rng(derive_seed(cfg.seed, epoch * n + idx, 0x7141));
        SynthSample s = data.samples[idx];
        bool augmented = false;
        if (cfg.augment.enabled) {
          s = augment_shape(s, visit_rng, cfg.augment, mirror_map,
                            static_cast<double>(dcfg.image_side), cam_img.focal);
          augmented = true;
        }
        Tensor truth = s.landmarks;
        for (double& v : truth.v) v *= img_to_feat;
        const Ref truth_ref = tape.leaf(truth);

        Ref fmap_ref, x0_ref, stage_loss;
        if (backbone != nullptr) {
          const Tensor image = (!augmented && s.image) ? std::move(*s.image)
                                                       : gen_image(s.landmarks, dcfg, visit_rng);
          BackboneTrace btr = backbone_forward(tape, tape.leaf(image), taped_backbone,
                                               backbone->config);
          fmap_ref = btr.features.back();
          x0_ref = tape.project_pose(face_points, tape.reshape(btr.poses.back(), {6}), cam_feat);
          // Per-stage supervision: smooth-L1 on normalized coordinates and a
          // squared error on the 6-DoF pose vector.
          const double inv = 1.0 / cam_feat.image_side;
          const std::array<double, 6> pa = s.pose.to_array();
          const Ref pose_truth = tape.leaf(Tensor{{1, 6}, {pa[0], pa[1], pa[2], pa[3], pa[4], pa[5]}});
          std::vector<Ref> coord_losses, pose_losses;
          for (std::size_t h = 0; h < btr.coords.size(); ++h) {
            coord_losses.push_back(tape.smooth_l1(tape.scale(btr.coords[h], inv),
                                                  tape.scale(truth_ref, inv), cfg.smooth_l1_beta));
            Ref diff = tape.sub(btr.poses[h], pose_truth);
            pose_losses.push_back(tape.mean(tape.mul(diff, diff)));
          }
          stage_loss = multitask_loss(tape, coord_losses, pose_losses, cfg.lambda_coord,
                                      cfg.lambda_pose);
        } else {
          const bool regen = augmented || !s.feature_map.has_value();
          Tensor fmap = regen ? gen_feature_map(s.landmarks, dcfg, visit_rng)
                              : std::move(*s.feature_map);
          fmap_ref = tape.leaf(fmap);
          x0_ref = tape.leaf(init_shape(face, s.init_pose, cam_feat));
        }

        CascadeTrace trace = cascade_forward(tape, fmap_ref, x0_ref, taped, model.config);
        Ref sample_loss = cascade_loss(tape, trace, truth_ref, cam_feat.image_side,
                                       cfg.smooth_l1_beta);
        if (stage_loss.valid()) sample_loss = tape.add(sample_loss, stage_loss);
        batch_loss = (bi == start) ? sample_loss : tape.add(batch_loss, sample_loss);

        for (std::size_t t = 0; t < k_steps; ++t)
          nme_sum[t] += per_image_nme(tape.value(trace.shapes[t + 1]), truth, norm);
        for (const auto& step_att : trace.attentions)
          batch_attention.push_back(step_att);
      }
      batch_loss = tape.scale(batch_loss, inv_b);

      const double loss_value = tape.value(batch_loss).v[0];
      if (!std::isfinite(loss_value))
        throw NumericError("non-finite training loss " + std::to_string(loss_value) +
                           " at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches));

#ifndef NDEBUG
      const bool check_attention = true;
#else
      const bool check_attention = (batches % 16 == 0);
#endif
      if (check_attention) {
        for (const auto& step_att : batch_attention)
          for (Ref a : step_att) validate_attention(tape.value(a));
      }

      GradientStore store = tape.backward(batch_loss);
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (Tensor* p : params) grads.push_back(Tensor::zeros(p->shape));
      detail::collect_gradients(store, bindings, params, grads);
      norm_sum += clip_global_norm(grads, cfg.grad_clip);

      std::vector<const Tensor*> grad_ptrs;
      grad_ptrs.reserve(grads.size());
      for (const Tensor& g : grads) grad_ptrs.push_back(&g);
      adam.step(grad_ptrs, rate);

      loss_sum += loss_value;
      ++batches;
    }

    EpochLog log;
    log.epoch = epoch;
    log.lr = rate;
    log.loss = loss_sum / static_cast<double>(batches);
    log.grad_norm = norm_sum / static_cast<double>(batches);
    log.nme_per_step.resize(k_steps);
    for (std::size_t t = 0; t < k_steps; ++t)
      log.nme_per_step[t] = nme_sum[t] / static_cast<double>(n);
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

// Runs the trained cascade over a dataset and returns prediction records at
// image scale, alongside the matching truth records.
struct EvalOutput {
  std::vector<LandmarkRecord> predictions;
  std::vector<LandmarkRecord> truths;
  std::vector<double> step_nme;  // mean NME of x_0..x_K (includes the initialization)
  std::vector<std::vector<double>> per_image_step_nme;  // [step][image], unsorted
};

inline EvalOutput evaluate_cascade(const CascadeModel& model, const RigidFaceModel& face,
                                   const SynthDataset& data,
                                   const BackboneModel* backbone = nullptr) {
  model.config.validate();
  if (data.samples.empty()) throw EmptyInputError("evaluate_cascade with an empty dataset");
  const SynthConfig& dcfg = data.config;
  if (backbone != nullptr) {
    backbone->config.validate();
    if (backbone->config.input_side != dcfg.image_side ||
        backbone->config.feature_side != dcfg.feature_side ||
        backbone->config.channels != model.config.channels ||
        backbone->config.landmarks != dcfg.landmarks)
      throw ConfigError("backbone configuration does not match the dataset/cascade geometry");
  }
  const double feat_to_img =
      static_cast<double>(dcfg.image_side) / static_cast<double>(dcfg.feature_side);
  const CameraIntrinsics cam_feat =
      CameraIntrinsics::standard(static_cast<double>(dcfg.feature_side));
  const NormalizationSpec norm = NormalizationSpec::for_model(face, NormKind::kInterOcular);

  EvalOutput out;
  const std::size_t k_steps = model.config.schedule.steps();
  out.per_image_step_nme.resize(k_steps + 1);
  std::vector<double> nme_sum(k_steps + 1, 0.0);
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const SynthSample& s = data.samples[i];
    Rng visit_rng(derive_seed(dcfg.seed, i, 0xE7A1));
    Tensor fmap, x0;
    if (backbone != nullptr) {
      // Mirror joint training: the feature map and the initialization both
      // come out of the backbone rather than the dataset.
      const Tensor image = s.image ? *s.image : gen_image(s.landmarks, dcfg, visit_rng);
      BackboneResult br = run_backbone(*backbone, image);
      fmap = std::move(br.features);
      x0 = init_shape(face, br.pose, cam_feat);
    } else {
      fmap = s.feature_map ? *s.feature_map : gen_feature_map(s.landmarks, dcfg, visit_rng);
      x0 = init_shape(face, s.init_pose, cam_feat);
    }
    CascadeResult res = run_cascade(model, fmap, x0);

    for (std::size_t t = 0; t <= k_steps; ++t) {
      Tensor shape_img = res.shapes[t];
      for (double& v : shape_img.v) v *= feat_to_img;
      Tensor truth = s.landmarks;
      const double image_nme = per_image_nme(shape_img, truth, norm);
      nme_sum[t] += image_nme;
      out.per_image_step_nme[t].push_back(image_nme);
      if (t == k_steps) {
        LandmarkRecord pred;
        pred.id = s.id;
        pred.landmarks = std::move(shape_img);
        out.predictions.push_back(std::move(pred));
        LandmarkRecord tr;
        tr.id = s.id;
        tr.landmarks = std::move(truth);
        tr.pose = s.pose;
        out.truths.push_back(std::move(tr));
      }
    }
  }
  out.step_nme.resize(k_steps + 1);
  for (std::size_t t = 0; t <= k_steps; ++t)
    out.step_nme[t] = nme_sum[t] / static_cast<double>(data.samples.size());
  return out;
}

}  // namespace spiga
