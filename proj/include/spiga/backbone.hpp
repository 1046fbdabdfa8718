#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "spiga/autodiff.hpp"
#include "spiga/error.hpp"
#include "spiga/features.hpp"
#include "spiga/geometry.hpp"
#include "spiga/tensor.hpp"

namespace spiga {

// Toy multi-stage convolutional encoder standing in for the heavy multitask
// backbone: each stage refines the feature map and emits a pose estimate and a
// coarse coordinate estimate; the last stage's F feeds the cascade.
struct BackboneConfig {
  std::size_t stages = 2;
  std::size_t channels = 256;
  std::size_t input_side = 256;
  std::size_t feature_side = 64;
  std::size_t landmarks = 68;

  void validate() const {
    if (stages < 1) throw ConfigError("backbone needs at least one stage");
    if (channels < 1 || landmarks < 1) throw ConfigError("backbone dims must be positive");
    if (feature_side == 0 || input_side % feature_side != 0)
      throw ConfigError("feature side must divide input side (got " + std::to_string(feature_side) +
                        " vs " + std::to_string(input_side) + ")");
  }

  std::size_t downscale() const { return input_side / feature_side; }
};

struct ConvParams {
  Tensor w;  // out x in x k x k
  Tensor b;  // out

  static ConvParams init(Rng& rng, std::size_t out, std::size_t in, std::size_t k) {
    ConvParams p;
    p.w = Tensor::zeros({out, in, k, k});
    const double bound = std::sqrt(6.0 / static_cast<double>((in + out) * k * k));
    for (double& v : p.w.v) v = rng.uniform(-bound, bound);
    p.b = Tensor::zeros({out});
    return p;
  }
  void visit(const std::string& name, std::vector<NamedParam>& out) {
    out.push_back({name + ".w", &w});
    out.push_back({name + ".b", &b});
  }
};

struct BackboneStage {
  ConvParams conv1, conv2;
  DenseParams pose_head;   // C -> 6
  DenseParams coord_head;  // C -> 2L
};

struct BackboneModel {
  BackboneConfig config;
  std::vector<BackboneStage> stages;

  static BackboneModel init(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    BackboneModel m;
    m.config = cfg;
    Rng rng(derive_seed(seed, 0, 0xB0E));
    for (std::size_t h = 0; h < cfg.stages; ++h) {
      BackboneStage s;
      if (h == 0) {
        // Strided entry conv maps input_side to feature_side in one hop.
        s.conv1 = ConvParams::init(rng, cfg.channels, 3, cfg.downscale() + 2);
      } else {
        s.conv1 = ConvParams::init(rng, cfg.channels, cfg.channels, 3);
      }
      s.conv2 = ConvParams::init(rng, cfg.channels, cfg.channels, 3);
      s.pose_head = DenseParams::init(rng, cfg.channels, 6);
      // A frontal pose prior in the bias keeps the projected initial shape in
      // front of the camera from the first iteration.
      s.pose_head.b[5] = 4.0;
      s.coord_head = DenseParams::init(rng, cfg.channels, 2 * cfg.landmarks);
      m.stages.push_back(std::move(s));
    }
    return m;
  }

  void visit_params(std::vector<NamedParam>& out) {
    for (std::size_t h = 0; h < stages.size(); ++h) {
      const std::string base = "backbone.stage" + std::to_string(h);
      stages[h].conv1.visit(base + ".conv1", out);
      stages[h].conv2.visit(base + ".conv2", out);
      visit_dense(base + ".pose_head", stages[h].pose_head, out);
      visit_dense(base + ".coord_head", stages[h].coord_head, out);
    }
  }
};

struct TapedConv {
  Ref w, b;
};

struct TapedBackboneStage {
  TapedConv conv1, conv2;
  TapedDense pose_head, coord_head;
};

struct TapedBackbone {
  std::vector<TapedBackboneStage> stages;
};

inline TapedConv put_conv(Tape& tape, ConvParams& p, bool trainable,
                          std::vector<ParamBinding>* bindings) {
  TapedConv tc{tape.leaf(p.w, trainable), tape.leaf(p.b, trainable)};
  if (bindings && trainable) {
    bindings->push_back({tc.w, &p.w});
    bindings->push_back({tc.b, &p.b});
  }
  return tc;
}

inline TapedBackbone put_backbone(Tape& tape, BackboneModel& model, bool trainable,
                                  std::vector<ParamBinding>* bindings) {
  TapedBackbone tb;
  for (BackboneStage& s : model.stages)
    tb.stages.push_back(TapedBackboneStage{put_conv(tape, s.conv1, trainable, bindings),
                                           put_conv(tape, s.conv2, trainable, bindings),
                                           put_dense(tape, s.pose_head, trainable, bindings),
                                           put_dense(tape, s.coord_head, trainable, bindings)});
  return tb;
}

struct BackboneTrace {
  std::vector<Ref> features;  // per stage, C x feature_side x feature_side
  std::vector<Ref> poses;     // per stage, 1 x 6
  std::vector<Ref> coords;    // per stage, L x 2
};

inline BackboneTrace backbone_forward(Tape& tape, Ref image, const TapedBackbone& backbone,
                                      const BackboneConfig& cfg) {
  const Tensor& img = tape.value(image);
  if (img.rank() != 3 || img.shape[0] != 3 || img.shape[1] != cfg.input_side ||
      img.shape[2] != cfg.input_side)
    throw DimensionError("backbone expects a 3x" + std::to_string(cfg.input_side) + "x" +
                         std::to_string(cfg.input_side) + " image, got " + img.shape_string());

  BackboneTrace trace;
  Ref x = image;
  for (std::size_t h = 0; h < backbone.stages.size(); ++h) {
    const TapedBackboneStage& s = backbone.stages[h];
    const int stride = h == 0 ? static_cast<int>(cfg.downscale()) : 1;
    Ref f = tape.relu(tape.add_channel_bias(tape.conv2d(x, s.conv1.w, stride, 1), s.conv1.b));
    f = tape.relu(tape.add_channel_bias(tape.conv2d(f, s.conv2.w, 1, 1), s.conv2.b));
    Ref pooled = tape.global_avg_pool(f);  // 1 x C
    trace.features.push_back(f);
    trace.poses.push_back(apply_dense(tape, pooled, s.pose_head, Activation::kNone));
    Ref coords = apply_dense(tape, pooled, s.coord_head, Activation::kNone);
    trace.coords.push_back(tape.reshape(coords, {cfg.landmarks, 2}));
    x = f;
  }
  return trace;
}

// Per-stage loss aggregation: later stages count double the previous one.
inline double aggregate_stage_losses(const std::vector<double>& losses) {
  if (losses.empty()) throw EmptyInputError("aggregate_stage_losses on empty list");
  double total = 0.0;
  double weight = 1.0;
  for (double l : losses) {
    total += weight * l;
    weight *= 2.0;
  }
  return total;
}

inline Ref aggregate_stage_losses(Tape& tape, const std::vector<Ref>& losses) {
  if (losses.empty()) throw EmptyInputError("aggregate_stage_losses on empty list");
  Ref total = tape.scale(losses[0], 1.0);
  double weight = 2.0;
  for (std::size_t h = 1; h < losses.size(); ++h) {
    total = tape.add(total, tape.scale(losses[h], weight));
    weight *= 2.0;
  }
  return total;
}

// Weighted multitask objective over per-stage coordinate and pose losses.
inline double multitask_loss(const std::vector<double>& coord_losses,
                             const std::vector<double>& pose_losses, double lambda_c = 4.0,
                             double lambda_p = 1.0) {
  if (coord_losses.size() != pose_losses.size())
    throw DimensionError("multitask_loss stage counts differ: " +
                         std::to_string(coord_losses.size()) + " vs " +
                         std::to_string(pose_losses.size()));
  std::vector<double> c = coord_losses, p = pose_losses;
  for (double& v : c) v *= lambda_c;
  for (double& v : p) v *= lambda_p;
  return aggregate_stage_losses(c) + aggregate_stage_losses(p);
}

inline Ref multitask_loss(Tape& tape, const std::vector<Ref>& coord_losses,
                          const std::vector<Ref>& pose_losses, double lambda_c = 4.0,
                          double lambda_p = 1.0) {
  if (coord_losses.size() != pose_losses.size())
    throw DimensionError("multitask_loss stage counts differ: " +
                         std::to_string(coord_losses.size()) + " vs " +
                         std::to_string(pose_losses.size()));
  std::vector<Ref> c, p;
  for (Ref r : coord_losses) c.push_back(tape.scale(r, lambda_c));
  for (Ref r : pose_losses) p.push_back(tape.scale(r, lambda_p));
  return tape.add(aggregate_stage_losses(tape, c), aggregate_stage_losses(tape, p));
}

// Forward-only convenience wrapper: runs the backbone on its own tape and
// copies the final stage's outputs.
struct BackboneResult {
  Tensor features;  // C x feature_side x feature_side
  HeadPose pose;
  Tensor coords;  // L x 2
};

inline BackboneResult run_backbone(const BackboneModel& model, const Tensor& image) {
  BackboneModel scratch = model;  // leaves copy parameter tensors anyway
  Tape tape;
  TapedBackbone tb = put_backbone(tape, scratch, false, nullptr);
  BackboneTrace trace = backbone_forward(tape, tape.leaf(image), tb, scratch.config);
  BackboneResult result;
  result.features = tape.value(trace.features.back());
  const Tensor& p = tape.value(trace.poses.back());
  result.pose = HeadPose::from_array({p.v[0], p.v[1], p.v[2], p.v[3], p.v[4], p.v[5]});
  result.coords = tape.value(trace.coords.back());
  return result;
}

}  // namespace spiga
