#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "spiga/autodiff.hpp"
#include "spiga/error.hpp"
#include "spiga/rng.hpp"
#include "spiga/tensor.hpp"

namespace spiga {

// Crop window sides per cascade step, in feature-map pixels.
struct WindowSchedule {
  std::vector<double> widths;

  std::size_t steps() const { return widths.size(); }

  void validate() const {
    if (widths.empty()) throw ConfigError("window schedule must not be empty");
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (widths[i] < 1.0)
        throw ConfigError("window side " + std::to_string(widths[i]) + " must be >= 1");
      if (i && widths[i] > widths[i - 1])
        throw ConfigError("window schedule must be non-increasing (coarse to fine)");
    }
  }
};

// Plain parameter storage for one affine layer. Graph construction lifts these
// onto a tape; optimizers and checkpoints address them through visit_params.
struct DenseParams {
  Tensor w;
  Tensor b;

  static DenseParams init(Rng& rng, std::size_t in, std::size_t out) {
    DenseParams p;
    p.w = Tensor::zeros({in, out});
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& v : p.w.v) v = rng.uniform(-bound, bound);
    p.b = Tensor::zeros({out});
    return p;
  }

  static DenseParams zeros(std::size_t in, std::size_t out) {
    DenseParams p;
    p.w = Tensor::zeros({in, out});
    p.b = Tensor::zeros({out});
    return p;
  }
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

inline void visit_dense(const std::string& name, DenseParams& p, std::vector<NamedParam>& out) {
  out.push_back({name + ".w", &p.w});
  out.push_back({name + ".b", &p.b});
}

// Tape-resident handles of one dense layer plus the binding back to storage.
struct TapedDense {
  Ref w;
  Ref b;
};

struct ParamBinding {
  Ref ref;
  Tensor* tensor;
};

inline TapedDense put_dense(Tape& tape, DenseParams& p, bool trainable,
                            std::vector<ParamBinding>* bindings) {
  TapedDense td{tape.leaf(p.w, trainable), tape.leaf(p.b, trainable)};
  if (bindings && trainable) {
    bindings->push_back({td.w, &p.w});
    bindings->push_back({td.b, &p.b});
  }
  return td;
}

inline Ref apply_dense(Tape& tape, Ref x, const TapedDense& d, Activation act) {
  return dense(tape, x, d.w, d.b, act);
}

// ---------------------------------------------------------------------------
// Per-landmark window crop: an axis-aligned w x w window around each center,
// resampled to out_side^2 via bilinear interpolation. Output row l is the
// flattened (out_side, out_side, C) window of landmark l; gradients flow to
// both the feature map and the centers.
inline Ref crop_window(Tape& tape, Ref feature_map, Ref centers, double w, int out_side) {
  const Tensor& fm = tape.value(feature_map);
  const Tensor& c = tape.value(centers);
  const std::size_t channels = fm.shape[0];
  const std::size_t landmarks = c.rows();
  Ref grid = tape.window_grid(centers, w, out_side);
  Ref sampled = tape.bilinear(feature_map, grid);  // (L*side^2) x C
  const std::size_t cells = static_cast<std::size_t>(out_side) * static_cast<std::size_t>(out_side);
  return tape.reshape(sampled, {landmarks, cells * channels});
}

// Visual feature head: the fixed-size window is mapped by a dense layer over
// the whole flattened window (equivalent to a full-window convolution for a
// single spatial output), then lifted to the embedding dimension.
struct VisualHeadParams {
  DenseParams reduce;  // (side^2 * C) -> hidden
  DenseParams embed;   // hidden -> D

  static VisualHeadParams init(Rng& rng, std::size_t window_dim, std::size_t hidden,
                               std::size_t dim) {
    return VisualHeadParams{DenseParams::init(rng, window_dim, hidden),
                            DenseParams::init(rng, hidden, dim)};
  }
  void visit(const std::string& name, std::vector<NamedParam>& out) {
    visit_dense(name + ".reduce", reduce, out);
    visit_dense(name + ".embed", embed, out);
  }
};

struct TapedVisualHead {
  TapedDense reduce, embed;
};

inline TapedVisualHead put_visual_head(Tape& tape, VisualHeadParams& p, bool trainable,
                                       std::vector<ParamBinding>* bindings) {
  return TapedVisualHead{put_dense(tape, p.reduce, trainable, bindings),
                         put_dense(tape, p.embed, trainable, bindings)};
}

inline Ref visual_head(Tape& tape, Ref windows, const TapedVisualHead& params) {
  Ref h = apply_dense(tape, windows, params.reduce, Activation::kRelu);
  return apply_dense(tape, h, params.embed, Activation::kNone);
}

// Positional encoding Phi: relative displacements q -> D, one two-layer MLP
// per cascade step, shared across landmarks.
struct PosEncParams {
  DenseParams hidden;  // 2(L-1) -> D
  DenseParams output;  // D -> D

  static PosEncParams init(Rng& rng, std::size_t landmarks, std::size_t dim) {
    return PosEncParams{DenseParams::init(rng, 2 * (landmarks - 1), dim),
                        DenseParams::init(rng, dim, dim)};
  }
  void visit(const std::string& name, std::vector<NamedParam>& out) {
    visit_dense(name + ".hidden", hidden, out);
    visit_dense(name + ".output", output, out);
  }
};

struct TapedPosEnc {
  TapedDense hidden, out;
};

inline TapedPosEnc put_pos_enc(Tape& tape, PosEncParams& p, bool trainable,
                               std::vector<ParamBinding>* bindings) {
  return TapedPosEnc{put_dense(tape, p.hidden, trainable, bindings),
                     put_dense(tape, p.output, trainable, bindings)};
}

inline Ref positional_encoding(Tape& tape, Ref q, const TapedPosEnc& params) {
  Ref h = apply_dense(tape, q, params.hidden, Activation::kRelu);
  return apply_dense(tape, h, params.out, Activation::kNone);
}

enum class CombineMode { kAdd, kStack, kNone };

inline std::string to_string(CombineMode m) {
  switch (m) {
    case CombineMode::kAdd:
      return "add";
    case CombineMode::kStack:
      return "stack";
    case CombineMode::kNone:
      return "none";
  }
  throw ContractError("unknown combine mode");
}

inline CombineMode combine_mode_from_string(const std::string& s) {
  if (s == "add") return CombineMode::kAdd;
  if (s == "stack") return CombineMode::kStack;
  if (s == "none") return CombineMode::kNone;
  throw ConfigError("unknown combine mode '" + s + "' (expected add|stack|none)");
}

// Projection used only in stack mode: [v || r] -> D.
struct CombineParams {
  DenseParams proj;

  static CombineParams init(Rng& rng, std::size_t dim) {
    return CombineParams{DenseParams::init(rng, 2 * dim, dim)};
  }
  void visit(const std::string& name, std::vector<NamedParam>& out) {
    visit_dense(name + ".proj", proj, out);
  }
};

struct TapedCombine {
  TapedDense proj;
};

inline Ref combine(Tape& tape, Ref v, Ref r, CombineMode mode, const TapedCombine* params) {
  switch (mode) {
    case CombineMode::kAdd:
      return tape.add(v, r);
    case CombineMode::kStack: {
      if (!params) throw ContractError("stack combine mode needs projection parameters");
      return apply_dense(tape, tape.concat_cols(v, r), params->proj, Activation::kNone);
    }
    case CombineMode::kNone:
      return v;
  }
  throw ContractError("unknown combine mode");
}

}  // namespace spiga
