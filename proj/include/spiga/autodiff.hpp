#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "spiga/error.hpp"
#include "spiga/geometry.hpp"
#include "spiga/tensor.hpp"

namespace spiga {
namespace detail {

// c[m x n] += a[m x k] * b[k x n]; caller zeroes c when not accumulating.
inline void matmul_nn_acc(const double* a, const double* b, double* c, std::size_t m,
                          std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T (rows of b are dotted with rows of a).
inline void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                          std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n].
inline void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                          std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < m; ++p) {
    const double* ap = a + p * k;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace detail

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatmul,
  kMatmulNT,
  kAddBias,
  kRelu,
  kArctan,
  kSoftmaxExclSelf,
  kBilinear,
  kWindowGrid,
  kRelDisp,
  kConcatCols,
  kReshape,
  kSum,
  kMean,
  kSmoothL1,
  kConv2d,
  kAddChannelBias,
  kGlobalAvgPool,
  kProjectPose,
};

struct NodeAttrs {
  double scale = 1.0;   // kScale factor
  double beta = 1.0;    // kSmoothL1 transition
  double window = 0.0;  // kWindowGrid side in feature-map pixels
  int out_side = 0;     // kWindowGrid resample resolution
  double norm = 1.0;    // kRelDisp displacement divisor
  int stride = 1;       // kConv2d
  int pad = 0;          // kConv2d
  double focal = 0.0;   // kProjectPose camera
  double cx = 0.0;
  double cy = 0.0;
};

// One recorded operation. Parents precede the node on the tape, so a forward
// sweep in index order is a valid evaluation schedule.
struct Node {
  Op op = Op::kLeaf;
  int a = -1;
  int b = -1;
  Tensor out;
  NodeAttrs attrs;
  bool requires_grad = false;
};

struct Ref {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Gradients keyed by tape node id; an absent entry means zero.
class GradientStore {
 public:
  explicit GradientStore(std::size_t n) : grads_(n) {}

  bool has(Ref r) const {
    return r.id >= 0 && static_cast<std::size_t>(r.id) < grads_.size() && !grads_[r.id].empty();
  }
  const Tensor& at(Ref r) const {
    if (!has(r)) throw ContractError("no gradient recorded for node " + std::to_string(r.id));
    return grads_[r.id];
  }
  Tensor& ensure(int id, const Tensor& like) {
    Tensor& g = grads_[id];
    if (g.empty()) g = Tensor::zeros(like.shape);
    return g;
  }
  Tensor& raw(int id) { return grads_[id]; }

 private:
  std::vector<Tensor> grads_;
};

// Reverse-mode tape. Recording an op evaluates it immediately; replay() re-runs
// the identical evaluation code over the stored graph, so replayed outputs are
// bit-identical to recorded ones given the same leaf values.
class Tape {
 public:
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(Ref r) const { return node(r.id).out; }
  bool requires_grad(Ref r) const { return node(r.id).requires_grad; }

  Ref leaf(Tensor v, bool requires_grad = false) {
    Node nd;
    nd.op = Op::kLeaf;
    nd.out = std::move(v);
    nd.requires_grad = requires_grad;
    nodes_.push_back(std::move(nd));
    return Ref{static_cast<int>(nodes_.size()) - 1};
  }

  void set_leaf(Ref r, const Tensor& v) {
    Node& nd = node_mut(r.id);
    if (nd.op != Op::kLeaf) throw ContractError("set_leaf on a non-leaf node");
    if (!nd.out.same_shape(v))
      throw DimensionError("set_leaf shape " + v.shape_string() + " does not match " +
                           nd.out.shape_string());
    nd.out = v;
  }

  // Re-evaluates every non-leaf node in topological (recording) order.
  void replay() {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op != Op::kLeaf) eval_node(nodes_[i]);
  }

  // --- op builders -------------------------------------------------------

  Ref add(Ref a, Ref b) {
    require_same_shape("add", a, b);
    return record(Op::kAdd, a, b);
  }
  Ref sub(Ref a, Ref b) {
    require_same_shape("sub", a, b);
    return record(Op::kSub, a, b);
  }
  Ref mul(Ref a, Ref b) {
    require_same_shape("mul", a, b);
    return record(Op::kMul, a, b);
  }
  Ref scale(Ref a, double factor) {
    NodeAttrs at;
    at.scale = factor;
    return record(Op::kScale, a, Ref{}, at);
  }

  Ref matmul(Ref a, Ref b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.cols() != tb.rows())
      throw DimensionError("matmul inner dimensions disagree: " + ta.shape_string() + " vs " +
                           tb.shape_string());
    return record(Op::kMatmul, a, b);
  }

  // a[m x k] * b[n x k]^T -> [m x n]
  Ref matmul_nt(Ref a, Ref b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.cols() != tb.cols())
      throw DimensionError("matmul_nt shared dimension disagrees: " + ta.shape_string() + " vs " +
                           tb.shape_string());
    return record(Op::kMatmulNT, a, b);
  }

  Ref add_bias(Ref x, Ref bias) {
    const Tensor& tx = value(x);
    const Tensor& tb = value(bias);
    if (tb.size() != tx.cols())
      throw DimensionError("bias length " + tb.shape_string() + " does not match columns of " +
                           tx.shape_string());
    return record(Op::kAddBias, x, bias);
  }

  Ref relu(Ref x) { return record(Op::kRelu, x); }
  Ref arctan(Ref x) { return record(Op::kArctan, x); }

  Ref softmax_excl_self(Ref logits) {
    const Tensor& t = value(logits);
    if (t.rank() != 2 || t.rows() != t.cols())
      throw DimensionError("softmax_excl_self needs a square matrix, got " + t.shape_string());
    if (t.rows() < 2)
      throw InvalidGraphError("softmax_excl_self needs at least 2 nodes; a single node has no neighbors");
    return record(Op::kSoftmaxExclSelf, logits);
  }

  Ref bilinear(Ref map, Ref coords) {
    const Tensor& tm = value(map);
    const Tensor& tc = value(coords);
    if (tm.rank() != 3) throw DimensionError("bilinear map must be CxHxW, got " + tm.shape_string());
    if (tc.rank() != 2 || tc.cols() != 2)
      throw DimensionError("bilinear coords must be Px2, got " + tc.shape_string());
    return record(Op::kBilinear, map, coords);
  }

  Ref window_grid(Ref centers, double window, int out_side) {
    const Tensor& tc = value(centers);
    if (tc.rank() != 2 || tc.cols() != 2)
      throw DimensionError("window_grid centers must be Lx2, got " + tc.shape_string());
    if (!(window >= 1.0)) throw ContractError("window side must be >= 1, got " + std::to_string(window));
    if (out_side < 1) throw ContractError("window out_side must be >= 1");
    NodeAttrs at;
    at.window = window;
    at.out_side = out_side;
    return record(Op::kWindowGrid, centers, Ref{}, at);
  }

  Ref rel_disp(Ref shape, double norm) {
    const Tensor& t = value(shape);
    if (t.rank() != 2 || t.cols() != 2)
      throw DimensionError("rel_disp shape must be Lx2, got " + t.shape_string());
    if (t.rows() < 2) throw InvalidGraphError("rel_disp needs at least 2 landmarks");
    if (!(norm > 0.0)) throw ContractError("rel_disp norm must be positive");
    NodeAttrs at;
    at.norm = norm;
    return record(Op::kRelDisp, shape, Ref{}, at);
  }

  Ref concat_cols(Ref a, Ref b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rows() != tb.rows())
      throw DimensionError("concat_cols row counts disagree: " + ta.shape_string() + " vs " +
                           tb.shape_string());
    return record(Op::kConcatCols, a, b);
  }

  Ref reshape(Ref x, std::vector<std::size_t> shape) {
    const Tensor& t = value(x);
    if (Tensor::numel(shape) != t.size())
      throw DimensionError("reshape changes element count of " + t.shape_string());
    Node nd;
    nd.op = Op::kReshape;
    nd.a = x.id;
    nd.out.shape = std::move(shape);
    return finish(std::move(nd));
  }

  Ref sum(Ref x) { return record(Op::kSum, x); }
  Ref mean(Ref x) {
    if (value(x).empty()) throw EmptyInputError("mean of an empty tensor");
    return record(Op::kMean, x);
  }

  Ref smooth_l1(Ref pred, Ref target, double beta) {
    require_same_shape("smooth_l1", pred, target);
    if (!(beta > 0.0)) throw ContractError("smooth_l1 beta must be positive");
    NodeAttrs at;
    at.beta = beta;
    return record(Op::kSmoothL1, pred, target, at);
  }

  Ref conv2d(Ref input, Ref weight, int stride, int pad) {
    const Tensor& ti = value(input);
    const Tensor& tw = value(weight);
    if (ti.rank() != 3) throw DimensionError("conv2d input must be CxHxW, got " + ti.shape_string());
    if (tw.rank() != 4) throw DimensionError("conv2d weight must be OxCxKhxKw, got " + tw.shape_string());
    if (tw.shape[1] != ti.shape[0])
      throw DimensionError("conv2d channel mismatch: input " + ti.shape_string() + ", weight " +
                           tw.shape_string());
    if (stride < 1 || pad < 0) throw ContractError("conv2d stride must be >=1 and pad >=0");
    if (ti.shape[1] + 2 * static_cast<std::size_t>(pad) < tw.shape[2] ||
        ti.shape[2] + 2 * static_cast<std::size_t>(pad) < tw.shape[3])
      throw DimensionError("conv2d kernel larger than padded input");
    NodeAttrs at;
    at.stride = stride;
    at.pad = pad;
    return record(Op::kConv2d, input, weight, at);
  }

  Ref add_channel_bias(Ref x, Ref bias) {
    const Tensor& tx = value(x);
    const Tensor& tb = value(bias);
    if (tx.rank() != 3) throw DimensionError("add_channel_bias input must be CxHxW");
    if (tb.size() != tx.shape[0])
      throw DimensionError("channel bias length " + tb.shape_string() + " does not match " +
                           tx.shape_string());
    return record(Op::kAddChannelBias, x, bias);
  }

  Ref global_avg_pool(Ref x) {
    if (value(x).rank() != 3) throw DimensionError("global_avg_pool input must be CxHxW");
    return record(Op::kGlobalAvgPool, x);
  }

  // Pinhole projection of fixed 3D points under a 6-vector pose
  // (yaw, pitch, roll, tx, ty, tz). Gradient flows to the pose only.
  Ref project_pose(Ref points, Ref pose, const CameraIntrinsics& cam) {
    const Tensor& tp = value(points);
    const Tensor& tq = value(pose);
    if (tp.rank() != 2 || tp.cols() != 3)
      throw DimensionError("project_pose points must be Lx3, got " + tp.shape_string());
    if (tq.size() != 6)
      throw DimensionError("project_pose pose must have 6 entries, got " + tq.shape_string());
    if (requires_grad(points))
      throw InvalidGraphError("project_pose does not differentiate w.r.t. the 3D points");
    NodeAttrs at;
    at.focal = cam.focal;
    at.cx = cam.cx;
    at.cy = cam.cy;
    return record(Op::kProjectPose, points, pose, at);
  }

  // --- reverse sweep ------------------------------------------------------

  GradientStore backward(Ref loss) {
    const Tensor& lv = value(loss);
    if (lv.size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + lv.shape_string());
    GradientStore grads(nodes_.size());
    grads.ensure(loss.id, lv)[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      const Node& nd = nodes_[i];
      if (nd.op == Op::kLeaf || !nd.requires_grad) continue;
      Tensor& go = grads.raw(i);
      if (go.empty()) continue;
      backward_node(nd, go, grads);
    }
    return grads;
  }

 private:
  std::vector<Node> nodes_;

  const Node& node(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw ContractError("tape node id " + std::to_string(id) + " out of range");
    return nodes_[id];
  }
  Node& node_mut(int id) { return const_cast<Node&>(node(id)); }

  void require_same_shape(const char* what, Ref a, Ref b) const {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb))
      throw DimensionError(std::string(what) + " shape mismatch: " + ta.shape_string() + " vs " +
                           tb.shape_string());
  }

  Ref record(Op op, Ref a, Ref b = Ref{}, NodeAttrs attrs = NodeAttrs{}) {
    Node nd;
    nd.op = op;
    nd.a = a.id;
    nd.b = b.id;
    nd.attrs = attrs;
    return finish(std::move(nd));
  }

  Ref finish(Node&& nd) {
    nd.requires_grad = (nd.a >= 0 && nodes_[nd.a].requires_grad) ||
                       (nd.b >= 0 && nodes_[nd.b].requires_grad);
    nodes_.push_back(std::move(nd));
    Node& stored = nodes_.back();
    eval_node(stored);
#ifndef NDEBUG
    if (!stored.out.all_finite())
      throw NumericError("non-finite values after op " + std::to_string(static_cast<int>(stored.op)) +
                         " at node " + std::to_string(nodes_.size() - 1));
#endif
    return Ref{static_cast<int>(nodes_.size()) - 1};
  }

  // Single evaluation routine shared by recording and replay.
  void eval_node(Node& nd) {
    const Tensor* A = nd.a >= 0 ? &nodes_[nd.a].out : nullptr;
    const Tensor* B = nd.b >= 0 ? &nodes_[nd.b].out : nullptr;
    switch (nd.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd: {
        nd.out = *A;
        for (std::size_t i = 0; i < nd.out.size(); ++i) nd.out[i] += (*B)[i];
        break;
      }
      case Op::kSub: {
        nd.out = *A;
        for (std::size_t i = 0; i < nd.out.size(); ++i) nd.out[i] -= (*B)[i];
        break;
      }
      case Op::kMul: {
        nd.out = *A;
        for (std::size_t i = 0; i < nd.out.size(); ++i) nd.out[i] *= (*B)[i];
        break;
      }
      case Op::kScale: {
        nd.out = *A;
        for (double& v : nd.out.v) v *= nd.attrs.scale;
        break;
      }
      case Op::kMatmul: {
        const std::size_t m = A->rows(), k = A->cols(), n = B->cols();
        nd.out = Tensor::zeros({m, n});
        detail::matmul_nn_acc(A->v.data(), B->v.data(), nd.out.v.data(), m, k, n);
        break;
      }
      case Op::kMatmulNT: {
        const std::size_t m = A->rows(), k = A->cols(), n = B->rows();
        nd.out = Tensor::zeros({m, n});
        detail::matmul_nt_acc(A->v.data(), B->v.data(), nd.out.v.data(), m, k, n);
        break;
      }
      case Op::kAddBias: {
        nd.out = *A;
        const std::size_t r = A->rows(), c = A->cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) nd.out.v[i * c + j] += (*B)[j];
        break;
      }
      case Op::kRelu: {
        nd.out = *A;
        for (double& v : nd.out.v) v = v > 0.0 ? v : 0.0;
        break;
      }
      case Op::kArctan: {
        nd.out = *A;
        for (double& v : nd.out.v) v = std::atan(v);
        break;
      }
      case Op::kSoftmaxExclSelf: {
        const std::size_t n = A->rows();
        nd.out = Tensor::zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) {
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < n; ++j)
            if (j != i) mx = std::max(mx, (*A)(i, j));
          double z = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double e = std::exp((*A)(i, j) - mx);
            nd.out(i, j) = e;
            z += e;
          }
          for (std::size_t j = 0; j < n; ++j)
            if (j != i) nd.out(i, j) /= z;
        }
        break;
      }
      case Op::kBilinear: {
        const std::size_t c = A->shape[0], h = A->shape[1], w = A->shape[2];
        const std::size_t p = B->rows();
        nd.out = Tensor::zeros({p, c});
        for (std::size_t s = 0; s < p; ++s) {
          const double x = (*B)(s, 0), y = (*B)(s, 1);
          const double fx0 = std::floor(x), fy0 = std::floor(y);
          const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
          const double ax = x - fx0, ay = y - fy0;
          const double wgt[4] = {(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax};
          const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
          const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
          for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (int q = 0; q < 4; ++q) {
              if (xs[q] < 0 || ys[q] < 0 || xs[q] >= static_cast<long>(w) ||
                  ys[q] >= static_cast<long>(h))
                continue;  // zero padding
              acc += wgt[q] * A->v[(ch * h + static_cast<std::size_t>(ys[q])) * w +
                                   static_cast<std::size_t>(xs[q])];
            }
            nd.out(s, ch) = acc;
          }
        }
        break;
      }
      case Op::kWindowGrid: {
        const std::size_t l = A->rows();
        const int side = nd.attrs.out_side;
        const double w = nd.attrs.window;
        nd.out = Tensor::zeros({l * static_cast<std::size_t>(side) * static_cast<std::size_t>(side), 2});
        std::size_t row = 0;
        for (std::size_t i = 0; i < l; ++i) {
          const double cx = (*A)(i, 0), cy = (*A)(i, 1);
          for (int ky = 0; ky < side; ++ky) {
            const double oy = ((ky + 0.5) / side - 0.5) * w;
            for (int kx = 0; kx < side; ++kx, ++row) {
              nd.out(row, 0) = cx + ((kx + 0.5) / side - 0.5) * w;
              nd.out(row, 1) = cy + oy;
            }
          }
        }
        break;
      }
      case Op::kRelDisp: {
        const std::size_t l = A->rows();
        const double inv = 1.0 / nd.attrs.norm;
        nd.out = Tensor::zeros({l, 2 * (l - 1)});
        for (std::size_t i = 0; i < l; ++i) {
          std::size_t col = 0;
          for (std::size_t j = 0; j < l; ++j) {
            if (j == i) continue;
            nd.out(i, col++) = ((*A)(i, 0) - (*A)(j, 0)) * inv;
            nd.out(i, col++) = ((*A)(i, 1) - (*A)(j, 1)) * inv;
          }
        }
        break;
      }
      case Op::kConcatCols: {
        const std::size_t r = A->rows(), ca = A->cols(), cb = B->cols();
        nd.out = Tensor::zeros({r, ca + cb});
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < ca; ++j) nd.out(i, j) = A->v[i * ca + j];
          for (std::size_t j = 0; j < cb; ++j) nd.out(i, ca + j) = B->v[i * cb + j];
        }
        break;
      }
      case Op::kReshape: {
        std::vector<std::size_t> shape = nd.out.shape;  // target fixed at record time
        nd.out = Tensor(std::move(shape), A->v);
        break;
      }
      case Op::kSum: {
        double s = 0.0;
        for (double v : A->v) s += v;
        nd.out = Tensor::scalar(s);
        break;
      }
      case Op::kMean: {
        double s = 0.0;
        for (double v : A->v) s += v;
        nd.out = Tensor::scalar(s / static_cast<double>(A->size()));
        break;
      }
      case Op::kSmoothL1: {
        const double beta = nd.attrs.beta;
        double s = 0.0;
        for (std::size_t i = 0; i < A->size(); ++i) {
          const double d = A->v[i] - B->v[i];
          const double ad = std::abs(d);
          s += ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
        }
        nd.out = Tensor::scalar(s / static_cast<double>(A->size()));
        break;
      }
      case Op::kConv2d: {
        const std::size_t ci = A->shape[0], h = A->shape[1], w = A->shape[2];
        const std::size_t co = B->shape[0], kh = B->shape[2], kw = B->shape[3];
        const int st = nd.attrs.stride, pd = nd.attrs.pad;
        const std::size_t oh = (h + 2 * pd - kh) / st + 1;
        const std::size_t ow = (w + 2 * pd - kw) / st + 1;
        nd.out = Tensor::zeros({co, oh, ow});
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              double acc = 0.0;
              for (std::size_t c = 0; c < ci; ++c)
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const long iy = static_cast<long>(oy) * st + static_cast<long>(ky) - pd;
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const long ix = static_cast<long>(ox) * st + static_cast<long>(kx) - pd;
                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                    acc += A->v[(c * h + static_cast<std::size_t>(iy)) * w +
                                static_cast<std::size_t>(ix)] *
                           B->v[((o * ci + c) * kh + ky) * kw + kx];
                  }
                }
              nd.out.v[(o * oh + oy) * ow + ox] = acc;
            }
        break;
      }
      case Op::kAddChannelBias: {
        nd.out = *A;
        const std::size_t c = A->shape[0], hw = A->shape[1] * A->shape[2];
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < hw; ++i) nd.out.v[ch * hw + i] += (*B)[ch];
        break;
      }
      case Op::kGlobalAvgPool: {
        const std::size_t c = A->shape[0], hw = A->shape[1] * A->shape[2];
        nd.out = Tensor::zeros({1, c});
        for (std::size_t ch = 0; ch < c; ++ch) {
          double s = 0.0;
          for (std::size_t i = 0; i < hw; ++i) s += A->v[ch * hw + i];
          nd.out[ch] = s / static_cast<double>(hw);
        }
        break;
      }
      case Op::kProjectPose: {
        RigidFaceModel m;
        m.points = *A;
        const HeadPose pose = HeadPose::from_array(
            {(*B)[0], (*B)[1], (*B)[2], (*B)[3], (*B)[4], (*B)[5]});
        CameraIntrinsics cam;
        cam.focal = nd.attrs.focal;
        cam.cx = nd.attrs.cx;
        cam.cy = nd.attrs.cy;
        cam.image_side = 2.0 * std::max(nd.attrs.cx, nd.attrs.cy);
        nd.out = project(m, pose, cam);
        break;
      }
    }
  }

  void backward_node(const Node& nd, const Tensor& go, GradientStore& grads) {
    const Tensor* A = nd.a >= 0 ? &nodes_[nd.a].out : nullptr;
    const Tensor* B = nd.b >= 0 ? &nodes_[nd.b].out : nullptr;
    const bool need_a = nd.a >= 0 && nodes_[nd.a].requires_grad;
    const bool need_b = nd.b >= 0 && nodes_[nd.b].requires_grad;
    switch (nd.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd: {
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (need_b) {
          Tensor& gb = grads.ensure(nd.b, *B);
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
        }
        break;
      }
      case Op::kSub: {
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (need_b) {
          Tensor& gb = grads.ensure(nd.b, *B);
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
        }
        break;
      }
      case Op::kMul: {
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (*B)[i];
        }
        if (need_b) {
          Tensor& gb = grads.ensure(nd.b, *B);
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * (*A)[i];
        }
        break;
      }
      case Op::kScale: {
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * nd.attrs.scale;
        }
        break;
      }
      case Op::kMatmul: {
        const std::size_t m = A->rows(), k = A->cols(), n = B->cols();
        if (need_a)
          detail::matmul_nt_acc(go.v.data(), B->v.data(), grads.ensure(nd.a, *A).v.data(), m, n, k);
        if (need_b)
          detail::matmul_tn_acc(A->v.data(), go.v.data(), grads.ensure(nd.b, *B).v.data(), m, k, n);
        break;
      }
      case Op::kMatmulNT: {
        // out = A * B^T, A: m x k, B: n x k, out/go: m x n.
        const std::size_t m = A->rows(), k = A->cols(), n = B->rows();
        if (need_a)
          detail::matmul_nn_acc(go.v.data(), B->v.data(), grads.ensure(nd.a, *A).v.data(), m, n, k);
        if (need_b)
          detail::matmul_tn_acc(go.v.data(), A->v.data(), grads.ensure(nd.b, *B).v.data(), m, n, k);
        break;
      }
      case Op::kAddBias: {
        const std::size_t r = A->rows(), c = A->cols();
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (need_b) {
          Tensor& gb = grads.ensure(nd.b, *B);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += go.v[i * c + j];
        }
        break;
      }
      case Op::kRelu: {
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          for (std::size_t i = 0; i < go.size(); ++i)
            if ((*A)[i] > 0.0) ga[i] += go[i];
        }
        break;
      }
      case Op::kArctan: {
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / (1.0 + (*A)[i] * (*A)[i]);
        }
        break;
      }
      case Op::kSoftmaxExclSelf: {
        if (!need_a) break;
        Tensor& ga = grads.ensure(nd.a, *A);
        const std::size_t n = nd.out.rows();
        for (std::size_t i = 0; i < n; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += nd.out(i, j) * go(i, j);
          for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            ga(i, j) += nd.out(i, j) * (go(i, j) - dot);
          }
        }
        break;
      }
      case Op::kBilinear: {
        const std::size_t c = A->shape[0], h = A->shape[1], w = A->shape[2];
        const std::size_t p = B->rows();
        Tensor* gm = need_a ? &grads.ensure(nd.a, *A) : nullptr;
        Tensor* gc = need_b ? &grads.ensure(nd.b, *B) : nullptr;
        for (std::size_t s = 0; s < p; ++s) {
          const double x = (*B)(s, 0), y = (*B)(s, 1);
          const double fx0 = std::floor(x), fy0 = std::floor(y);
          const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
          const double ax = x - fx0, ay = y - fy0;
          // neighbor order: (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1)
          const double wgt[4] = {(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax};
          const double dwdx[4] = {-(1 - ay), (1 - ay), -ay, ay};
          const double dwdy[4] = {-(1 - ax), -ax, (1 - ax), ax};
          const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
          const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double g = go(s, ch);
            if (g == 0.0) continue;
            for (int q = 0; q < 4; ++q) {
              if (xs[q] < 0 || ys[q] < 0 || xs[q] >= static_cast<long>(w) ||
                  ys[q] >= static_cast<long>(h))
                continue;
              const std::size_t idx = (ch * h + static_cast<std::size_t>(ys[q])) * w +
                                      static_cast<std::size_t>(xs[q]);
              if (gm) gm->v[idx] += wgt[q] * g;
              if (gc) {
                (*gc)(s, 0) += dwdx[q] * A->v[idx] * g;
                (*gc)(s, 1) += dwdy[q] * A->v[idx] * g;
              }
            }
          }
        }
        break;
      }
      case Op::kWindowGrid: {
        if (!need_a) break;
        Tensor& ga = grads.ensure(nd.a, *A);
        const std::size_t l = A->rows();
        const std::size_t cells =
            static_cast<std::size_t>(nd.attrs.out_side) * static_cast<std::size_t>(nd.attrs.out_side);
        for (std::size_t i = 0; i < l; ++i)
          for (std::size_t q = 0; q < cells; ++q) {
            ga(i, 0) += go(i * cells + q, 0);
            ga(i, 1) += go(i * cells + q, 1);
          }
        break;
      }
      case Op::kRelDisp: {
        if (!need_a) break;
        Tensor& ga = grads.ensure(nd.a, *A);
        const std::size_t l = A->rows();
        const double inv = 1.0 / nd.attrs.norm;
        for (std::size_t i = 0; i < l; ++i) {
          std::size_t col = 0;
          for (std::size_t j = 0; j < l; ++j) {
            if (j == i) continue;
            const double gx = go(i, col++) * inv;
            const double gy = go(i, col++) * inv;
            ga(i, 0) += gx;
            ga(j, 0) -= gx;
            ga(i, 1) += gy;
            ga(j, 1) -= gy;
          }
        }
        break;
      }
      case Op::kConcatCols: {
        const std::size_t r = A->rows(), ca = A->cols(), cb = B->cols();
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < ca; ++j) ga.v[i * ca + j] += go.v[i * (ca + cb) + j];
        }
        if (need_b) {
          Tensor& gb = grads.ensure(nd.b, *B);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < cb; ++j) gb.v[i * cb + j] += go.v[i * (ca + cb) + ca + j];
        }
        break;
      }
      case Op::kReshape: {
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          for (std::size_t i = 0; i < go.size(); ++i) ga.v[i] += go.v[i];
        }
        break;
      }
      case Op::kSum: {
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          for (double& v : ga.v) v += go[0];
        }
        break;
      }
      case Op::kMean: {
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          const double g = go[0] / static_cast<double>(A->size());
          for (double& v : ga.v) v += g;
        }
        break;
      }
      case Op::kSmoothL1: {
        const double beta = nd.attrs.beta;
        const double g = go[0] / static_cast<double>(A->size());
        Tensor* ga = need_a ? &grads.ensure(nd.a, *A) : nullptr;
        Tensor* gb = need_b ? &grads.ensure(nd.b, *B) : nullptr;
        for (std::size_t i = 0; i < A->size(); ++i) {
          const double d = (*A)[i] - (*B)[i];
          const double dd = std::abs(d) < beta ? d / beta : (d > 0.0 ? 1.0 : -1.0);
          if (ga) ga->v[i] += g * dd;
          if (gb) gb->v[i] -= g * dd;
        }
        break;
      }
      case Op::kConv2d: {
        const std::size_t ci = A->shape[0], h = A->shape[1], w = A->shape[2];
        const std::size_t co = B->shape[0], kh = B->shape[2], kw = B->shape[3];
        const int st = nd.attrs.stride, pd = nd.attrs.pad;
        const std::size_t oh = nd.out.shape[1], ow = nd.out.shape[2];
        Tensor* gi = need_a ? &grads.ensure(nd.a, *A) : nullptr;
        Tensor* gw = need_b ? &grads.ensure(nd.b, *B) : nullptr;
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const double g = go.v[(o * oh + oy) * ow + ox];
              if (g == 0.0) continue;
              for (std::size_t c = 0; c < ci; ++c)
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const long iy = static_cast<long>(oy) * st + static_cast<long>(ky) - pd;
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const long ix = static_cast<long>(ox) * st + static_cast<long>(kx) - pd;
                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                    const std::size_t ii =
                        (c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix);
                    const std::size_t wi = ((o * ci + c) * kh + ky) * kw + kx;
                    if (gi) gi->v[ii] += B->v[wi] * g;
                    if (gw) gw->v[wi] += A->v[ii] * g;
                  }
                }
            }
        break;
      }
      case Op::kAddChannelBias: {
        const std::size_t c = A->shape[0], hw = A->shape[1] * A->shape[2];
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (need_b) {
          Tensor& gb = grads.ensure(nd.b, *B);
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i) gb[ch] += go.v[ch * hw + i];
        }
        break;
      }
      case Op::kGlobalAvgPool: {
        if (need_a) {
          Tensor& ga = grads.ensure(nd.a, *A);
          const std::size_t c = A->shape[0], hw = A->shape[1] * A->shape[2];
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double g = go[ch] / static_cast<double>(hw);
            for (std::size_t i = 0; i < hw; ++i) ga.v[ch * hw + i] += g;
          }
        }
        break;
      }
      case Op::kProjectPose: {
        if (!need_b) break;
        RigidFaceModel m;
        m.points = *A;
        const HeadPose pose = HeadPose::from_array(
            {(*B)[0], (*B)[1], (*B)[2], (*B)[3], (*B)[4], (*B)[5]});
        CameraIntrinsics cam;
        cam.focal = nd.attrs.focal;
        cam.cx = nd.attrs.cx;
        cam.cy = nd.attrs.cy;
        cam.image_side = 2.0 * std::max(nd.attrs.cx, nd.attrs.cy);
        Tensor jac;
        project(m, pose, cam, &jac);
        Tensor& gb = grads.ensure(nd.b, *B);
        const std::size_t l = A->rows();
        for (std::size_t i = 0; i < l; ++i)
          for (std::size_t d = 0; d < 2; ++d) {
            const double g = go(i, d);
            if (g == 0.0) continue;
            for (std::size_t k = 0; k < 6; ++k) gb[k] += g * jac(2 * i + d, k);
          }
        break;
      }
    }
  }
};

// Affine layer (x * W + b) with optional elementwise activation: the building
// block used for every MLP in the pipeline.
enum class Activation { kNone, kRelu, kArctan };

inline Ref dense(Tape& tape, Ref x, Ref w, Ref b, Activation act = Activation::kNone) {
  Ref y = tape.add_bias(tape.matmul(x, w), b);
  switch (act) {
    case Activation::kNone:
      return y;
    case Activation::kRelu:
      return tape.relu(y);
    case Activation::kArctan:
      return tape.arctan(y);
  }
  throw ContractError("unknown activation");
}

}  // namespace spiga
