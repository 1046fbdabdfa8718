#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "spiga/autodiff.hpp"
#include "spiga/error.hpp"
#include "spiga/features.hpp"
#include "spiga/tensor.hpp"

namespace spiga {

// Checks the AttentionMatrix type invariants: square, zero diagonal, entries
// in [0,1], rows summing to 1.
inline void validate_attention(const Tensor& a, double tol = 1e-9) {
  if (a.rank() != 2 || a.rows() != a.cols())
    throw ContractError("attention matrix must be square, got " + a.shape_string());
  const std::size_t n = a.rows();
  for (std::size_t i = 0; i < n; ++i) {
    if (a(i, i) != 0.0) throw ContractError("attention diagonal must be exactly zero");
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = a(i, j);
      if (!(v >= 0.0 && v <= 1.0))
        throw ContractError("attention entry outside [0,1]: " + std::to_string(v));
      row += v;
    }
    if (std::abs(row - 1.0) > tol)
      throw ContractError("attention row " + std::to_string(i) + " sums to " + std::to_string(row));
  }
}

enum class AttentionMode { kGat, kGcn };

inline std::string to_string(AttentionMode m) {
  return m == AttentionMode::kGat ? "gat" : "gcn";
}

inline AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "gat") return AttentionMode::kGat;
  if (s == "gcn") return AttentionMode::kGcn;
  throw ConfigError("unknown attention mode '" + s + "' (expected gat|gcn)");
}

struct GatLayerParams {
  DenseParams query, key, value;  // D -> D each
  DenseParams up_hidden;          // 2D -> D
  DenseParams up_out;             // D -> D

  static GatLayerParams init(Rng& rng, std::size_t dim) {
    GatLayerParams p;
    p.query = DenseParams::init(rng, dim, dim);
    p.key = DenseParams::init(rng, dim, dim);
    p.value = DenseParams::init(rng, dim, dim);
    p.up_hidden = DenseParams::init(rng, 2 * dim, dim);
    p.up_out = DenseParams::init(rng, dim, dim);
    return p;
  }
  void visit(const std::string& name, std::vector<NamedParam>& out) {
    visit_dense(name + ".query", query, out);
    visit_dense(name + ".key", key, out);
    visit_dense(name + ".value", value, out);
    visit_dense(name + ".up_hidden", up_hidden, out);
    visit_dense(name + ".up_out", up_out, out);
  }
};

struct StepParams {
  VisualHeadParams visual;
  PosEncParams pos;
  CombineParams comb;
  std::vector<GatLayerParams> layers;
  DenseParams dec_hidden;  // D -> D
  DenseParams dec_out;     // D -> 2
};

struct CascadeConfig {
  std::size_t landmarks = 68;
  std::size_t channels = 256;     // feature-map channels C
  std::size_t dim = 512;          // embedding dimension D
  std::size_t visual_hidden = 256;
  std::size_t gat_layers = 4;     // S
  int crop_side = 7;
  WindowSchedule schedule{{16.0, 8.0, 4.0}};
  CombineMode combine = CombineMode::kAdd;
  AttentionMode attention = AttentionMode::kGat;
  // Attention logits are divided by sqrt(D); a deliberate deviation from the
  // plain dot product, which saturates the softmax at large D.
  bool scaled_logits = true;
  double q_norm = 64.0;  // feature-map side normalizing relative displacements

  std::size_t steps() const { return schedule.steps(); }

  void validate() const {
    if (landmarks < 2) throw ConfigError("cascade needs at least 2 landmarks");
    if (dim < 1 || channels < 1 || visual_hidden < 1) throw ConfigError("cascade dims must be positive");
    if (gat_layers < 1) throw ConfigError("cascade needs at least 1 GAT layer per step");
    if (crop_side < 1) throw ConfigError("crop side must be >= 1");
    if (!(q_norm > 0.0)) throw ConfigError("q_norm must be positive");
    schedule.validate();
  }
};

struct CascadeModel {
  CascadeConfig config;
  std::vector<StepParams> steps;

  static CascadeModel init(const CascadeConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    CascadeModel m;
    m.config = cfg;
    Rng rng(derive_seed(seed, 0, 0x5149));
    const std::size_t window_dim =
        static_cast<std::size_t>(cfg.crop_side) * static_cast<std::size_t>(cfg.crop_side) *
        cfg.channels;
    for (std::size_t t = 0; t < cfg.steps(); ++t) {
      StepParams s;
      s.visual = VisualHeadParams::init(rng, window_dim, cfg.visual_hidden, cfg.dim);
      s.pos = PosEncParams::init(rng, cfg.landmarks, cfg.dim);
      s.comb = CombineParams::init(rng, cfg.dim);
      for (std::size_t l = 0; l < cfg.gat_layers; ++l)
        s.layers.push_back(GatLayerParams::init(rng, cfg.dim));
      s.dec_hidden = DenseParams::init(rng, cfg.dim, cfg.dim);
      s.dec_out = DenseParams::init(rng, cfg.dim, 2);
      m.steps.push_back(std::move(s));
    }
    return m;
  }

  // Declared parameter order; checkpoints serialize blocks in exactly this order.
  void visit_params(std::vector<NamedParam>& out) {
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const std::string base = "cascade.step" + std::to_string(t);
      steps[t].visual.visit(base + ".visual", out);
      steps[t].pos.visit(base + ".pos", out);
      steps[t].comb.visit(base + ".comb", out);
      for (std::size_t l = 0; l < steps[t].layers.size(); ++l)
        steps[t].layers[l].visit(base + ".gat" + std::to_string(l), out);
      visit_dense(base + ".dec_hidden", steps[t].dec_hidden, out);
      visit_dense(base + ".dec_out", steps[t].dec_out, out);
    }
  }
};

// --- taped graph construction ----------------------------------------------

struct TapedGatLayer {
  TapedDense query, key, value, up_hidden, up_out;
};

struct TapedStep {
  TapedVisualHead visual;
  TapedPosEnc pos;
  TapedCombine comb;
  std::vector<TapedGatLayer> layers;
  TapedDense dec_hidden, dec_out;
};

struct TapedCascade {
  std::vector<TapedStep> steps;
};

inline TapedCascade put_cascade(Tape& tape, CascadeModel& model, bool trainable,
                                std::vector<ParamBinding>* bindings) {
  TapedCascade tc;
  for (StepParams& s : model.steps) {
    TapedStep ts;
    ts.visual = put_visual_head(tape, s.visual, trainable, bindings);
    ts.pos = put_pos_enc(tape, s.pos, trainable, bindings);
    ts.comb = TapedCombine{put_dense(tape, s.comb.proj, trainable, bindings)};
    for (GatLayerParams& g : s.layers)
      ts.layers.push_back(TapedGatLayer{put_dense(tape, g.query, trainable, bindings),
                                        put_dense(tape, g.key, trainable, bindings),
                                        put_dense(tape, g.value, trainable, bindings),
                                        put_dense(tape, g.up_hidden, trainable, bindings),
                                        put_dense(tape, g.up_out, trainable, bindings)});
    ts.dec_hidden = put_dense(tape, s.dec_hidden, trainable, bindings);
    ts.dec_out = put_dense(tape, s.dec_out, trainable, bindings);
    tc.steps.push_back(std::move(ts));
  }
  return tc;
}

// One graph-attention pass: dynamic adjacency from query/key similarity, a
// message as the attention-weighted average of value vectors, and a residual
// MLP update on [f || m]. Pass a valid `reuse_attention` to skip the
// query/key path (GCN mode reuses the first layer's adjacency).
inline std::pair<Ref, Ref> gat_layer(Tape& tape, Ref f_in, const TapedGatLayer& params,
                                     const CascadeConfig& cfg, Ref reuse_attention = Ref{}) {
  Ref attention = reuse_attention;
  if (!attention.valid()) {
    Ref hq = apply_dense(tape, f_in, params.query, Activation::kNone);
    Ref hk = apply_dense(tape, f_in, params.key, Activation::kNone);
    Ref logits = tape.matmul_nt(hq, hk);
    if (cfg.scaled_logits) logits = tape.scale(logits, 1.0 / std::sqrt(static_cast<double>(cfg.dim)));
    attention = tape.softmax_excl_self(logits);
  }
  Ref hv = apply_dense(tape, f_in, params.value, Activation::kNone);
  Ref message = tape.matmul(attention, hv);  // zero diagonal excludes self
  Ref u = apply_dense(tape, tape.concat_cols(f_in, message), params.up_hidden, Activation::kRelu);
  u = apply_dense(tape, u, params.up_out, Activation::kNone);
  return {tape.add(f_in, u), attention};
}

struct StepTrace {
  Ref dx;
  std::vector<Ref> attentions;
};

// One cascade step: crop/encode features at the current shape estimate, run S
// GAT layers, decode a bounded update. The arctan scaling keeps every
// component of dx strictly inside (-w/2, w/2).
inline StepTrace step_forward(Tape& tape, Ref feature_map, Ref x_prev, const TapedStep& params,
                              const CascadeConfig& cfg, double window) {
  Ref windows = crop_window(tape, feature_map, x_prev, window, cfg.crop_side);
  Ref v = visual_head(tape, windows, params.visual);
  Ref f = v;
  if (cfg.combine != CombineMode::kNone) {
    Ref q = tape.rel_disp(x_prev, cfg.q_norm);
    Ref r = positional_encoding(tape, q, params.pos);
    f = combine(tape, v, r, cfg.combine, &params.comb);
  }

  StepTrace trace;
  for (std::size_t s = 0; s < params.layers.size(); ++s) {
    Ref reuse;
    if (cfg.attention == AttentionMode::kGcn && s > 0) reuse = trace.attentions[0];
    auto [f_next, attention] = gat_layer(tape, f, params.layers[s], cfg, reuse);
    f = f_next;
    trace.attentions.push_back(attention);
  }

  Ref raw = apply_dense(tape, f, params.dec_hidden, Activation::kRelu);
  raw = apply_dense(tape, raw, params.dec_out, Activation::kNone);
  trace.dx = tape.scale(tape.arctan(raw), window / kPi);
  return trace;
}

struct CascadeTrace {
  std::vector<Ref> shapes;                    // x_0 .. x_K
  std::vector<std::vector<Ref>> attentions;   // [step][layer]
};

// x_t = x_{t-1} + dx_t starting from the provided x_0 (typically the rigid
// projection, either a plain leaf or a project_pose node).
inline CascadeTrace cascade_forward(Tape& tape, Ref feature_map, Ref x0,
                                    const TapedCascade& cascade, const CascadeConfig& cfg) {
  const Tensor& x0v = tape.value(x0);
  if (x0v.rows() != cfg.landmarks || x0v.cols() != 2)
    throw DimensionError("cascade x0 must be Lx2 with L=" + std::to_string(cfg.landmarks) +
                         ", got " + x0v.shape_string());
  const Tensor& fm = tape.value(feature_map);
  if (fm.rank() != 3 || fm.shape[0] != cfg.channels)
    throw DimensionError("cascade feature map must be CxHxW with C=" +
                         std::to_string(cfg.channels) + ", got " + fm.shape_string());

  CascadeTrace trace;
  trace.shapes.push_back(x0);
  Ref x = x0;
  for (std::size_t t = 0; t < cascade.steps.size(); ++t) {
    StepTrace st = step_forward(tape, feature_map, x, cascade.steps[t], cfg,
                                cfg.schedule.widths[t]);
    x = tape.add(x, st.dx);
    trace.shapes.push_back(x);
    trace.attentions.push_back(std::move(st.attentions));
  }
  return trace;
}

// Forward-only convenience wrapper: runs the cascade on its own tape and
// copies the results out.
struct CascadeResult {
  std::vector<Tensor> shapes;
  std::vector<std::vector<Tensor>> attentions;
};

inline CascadeResult run_cascade(const CascadeModel& model, const Tensor& feature_map,
                                 const Tensor& x0) {
  CascadeModel scratch = model;  // leaves copy parameter tensors anyway
  Tape tape;
  TapedCascade tc = put_cascade(tape, scratch, false, nullptr);
  CascadeTrace trace =
      cascade_forward(tape, tape.leaf(feature_map), tape.leaf(x0), tc, scratch.config);
  CascadeResult result;
  for (Ref r : trace.shapes) result.shapes.push_back(tape.value(r));
  for (const auto& step : trace.attentions) {
    result.attentions.emplace_back();
    for (Ref r : step) result.attentions.back().push_back(tape.value(r));
  }
  return result;
}

}  // namespace spiga
