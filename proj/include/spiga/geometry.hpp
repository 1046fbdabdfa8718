#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spiga/error.hpp"
#include "spiga/tensor.hpp"

namespace spiga {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

inline double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

inline double deg_to_rad(double d) { return d * kPi / 180.0; }
inline double rad_to_deg(double r) { return r * 180.0 / kPi; }

// 6-DoF rigid head pose. Angles in radians, translation in model units.
// Convention: camera frame is x-right, y-down, z-forward; the rotation applied
// to model points is R = Rz(roll) * Ry(yaw) * Rx(pitch).
struct HeadPose {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
  double tx = 0.0;
  double ty = 0.0;
  double tz = 1.0;

  std::array<double, 6> to_array() const { return {yaw, pitch, roll, tx, ty, tz}; }
  static HeadPose from_array(const std::array<double, 6>& p) {
    return HeadPose{p[0], p[1], p[2], p[3], p[4], p[5]};
  }

  HeadPose wrapped() const {
    return HeadPose{wrap_angle(yaw), wrap_angle(pitch), wrap_angle(roll), tx, ty, tz};
  }

  void validate() const {
    if (!(tz > 0.0)) throw ContractError("head pose requires tz > 0, got " + std::to_string(tz));
  }
};

// Pinhole camera. The fixed virtual camera used throughout is focal = 1.5x the
// image side with the principal point at the center.
struct CameraIntrinsics {
  double focal = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  double image_side = 0.0;

  static CameraIntrinsics standard(double side) {
    return CameraIntrinsics{1.5 * side, side / 2.0, side / 2.0, side};
  }

  void validate() const {
    if (!(focal > 0.0)) throw ContractError("camera focal must be positive");
    if (cx < 0.0 || cx > image_side || cy < 0.0 || cy > image_side)
      throw ContractError("principal point must lie inside the image");
  }
};

struct RigidFaceModel {
  Tensor points;  // L x 3, model units
  std::array<std::size_t, 2> outer_eyes{0, 0};
  std::array<std::size_t, 2> pupils{0, 0};

  std::size_t landmark_count() const { return points.rows(); }

  void validate() const {
    const std::size_t n = landmark_count();
    if (points.rank() != 2 || points.cols() != 3)
      throw DimensionError("face model points must be Lx3, got " + points.shape_string());
    if (n < 4) throw ContractError("face model needs at least 4 points");
    for (std::size_t i : {outer_eyes[0], outer_eyes[1], pupils[0], pupils[1]})
      if (i >= n) throw ContractError("semantic landmark index out of range");
    if (outer_eyes[0] == outer_eyes[1] || pupils[0] == pupils[1])
      throw ContractError("semantic landmark pairs must be distinct");
    // Non-coplanarity: best-fit plane through the centroid must not explain
    // all points, otherwise pose is unobservable.
    double c[3] = {0, 0, 0};
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k) c[k] += points(i, k) / static_cast<double>(n);
    double cov[3][3] = {};
    for (std::size_t i = 0; i < n; ++i)
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) cov[a][b] += (points(i, a) - c[a]) * (points(i, b) - c[b]);
    double det = cov[0][0] * (cov[1][1] * cov[2][2] - cov[1][2] * cov[2][1]) -
                 cov[0][1] * (cov[1][0] * cov[2][2] - cov[1][2] * cov[2][0]) +
                 cov[0][2] * (cov[1][0] * cov[2][1] - cov[1][1] * cov[2][0]);
    double trace = cov[0][0] + cov[1][1] + cov[2][2];
    if (std::abs(det) < 1e-12 * trace * trace * trace)
      throw DegenerateInputError("face model points are (near) coplanar");
  }
};

namespace detail {

struct Mat3 {
  std::array<double, 9> m{};
  double operator()(int r, int c) const { return m[r * 3 + c]; }
  double& operator()(int r, int c) { return m[r * 3 + c]; }

  Mat3 operator*(const Mat3& o) const {
    Mat3 out;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(r, k) * o(k, c);
        out(r, c) = s;
      }
    return out;
  }

  std::array<double, 3> apply(double x, double y, double z) const {
    return {m[0] * x + m[1] * y + m[2] * z, m[3] * x + m[4] * y + m[5] * z,
            m[6] * x + m[7] * y + m[8] * z};
  }
};

inline Mat3 rot_x(double a) {
  double c = std::cos(a), s = std::sin(a);
  return Mat3{{1, 0, 0, 0, c, -s, 0, s, c}};
}
inline Mat3 rot_y(double a) {
  double c = std::cos(a), s = std::sin(a);
  return Mat3{{c, 0, s, 0, 1, 0, -s, 0, c}};
}
inline Mat3 rot_z(double a) {
  double c = std::cos(a), s = std::sin(a);
  return Mat3{{c, -s, 0, s, c, 0, 0, 0, 1}};
}
inline Mat3 drot_x(double a) {
  double c = std::cos(a), s = std::sin(a);
  return Mat3{{0, 0, 0, 0, -s, -c, 0, c, -s}};
}
inline Mat3 drot_y(double a) {
  double c = std::cos(a), s = std::sin(a);
  return Mat3{{-s, 0, c, 0, 0, 0, -c, 0, -s}};
}
inline Mat3 drot_z(double a) {
  double c = std::cos(a), s = std::sin(a);
  return Mat3{{-s, -c, 0, c, -s, 0, 0, 0, 0}};
}

inline Mat3 rotation(const HeadPose& p) {
  return rot_z(p.roll) * rot_y(p.yaw) * rot_x(p.pitch);
}

}  // namespace detail

inline constexpr double kMinCameraDepth = 1e-6;

// Pinhole projection of the posed model: u = f*x/z + cx, v = f*y/z + cy.
// Optionally fills the 2L x 6 Jacobian d(u,v)/d(yaw,pitch,roll,tx,ty,tz).
inline Tensor project(const RigidFaceModel& model, const HeadPose& pose,
                      const CameraIntrinsics& cam, Tensor* jacobian = nullptr) {
  pose.validate();
  const std::size_t n = model.landmark_count();
  const detail::Mat3 rz = detail::rot_z(pose.roll);
  const detail::Mat3 ry = detail::rot_y(pose.yaw);
  const detail::Mat3 rx = detail::rot_x(pose.pitch);
  const detail::Mat3 r = rz * ry * rx;
  const detail::Mat3 d_yaw = rz * detail::drot_y(pose.yaw) * rx;
  const detail::Mat3 d_pitch = rz * ry * detail::drot_x(pose.pitch);
  const detail::Mat3 d_roll = detail::drot_z(pose.roll) * ry * rx;

  Tensor out = Tensor::zeros({n, 2});
  if (jacobian) *jacobian = Tensor::zeros({2 * n, 6});
  for (std::size_t i = 0; i < n; ++i) {
    const double mx = model.points(i, 0), my = model.points(i, 1), mz = model.points(i, 2);
    auto pc = r.apply(mx, my, mz);
    const double x = pc[0] + pose.tx, y = pc[1] + pose.ty, z = pc[2] + pose.tz;
    if (z <= kMinCameraDepth)
      throw BehindCameraError("projected point " + std::to_string(i) +
                              " is behind the camera (z=" + std::to_string(z) + ")");
    out(i, 0) = cam.focal * x / z + cam.cx;
    out(i, 1) = cam.focal * y / z + cam.cy;
    if (!jacobian) continue;

    // d(cam point)/d(param) for the six parameters.
    std::array<std::array<double, 3>, 6> dp;
    dp[0] = d_yaw.apply(mx, my, mz);
    dp[1] = d_pitch.apply(mx, my, mz);
    dp[2] = d_roll.apply(mx, my, mz);
    dp[3] = {1, 0, 0};
    dp[4] = {0, 1, 0};
    dp[5] = {0, 0, 1};
    const double inv_z = 1.0 / z;
    for (int k = 0; k < 6; ++k) {
      (*jacobian)(2 * i + 0, k) = cam.focal * (dp[k][0] * inv_z - x * dp[k][2] * inv_z * inv_z);
      (*jacobian)(2 * i + 1, k) = cam.focal * (dp[k][1] * inv_z - y * dp[k][2] * inv_z * inv_z);
    }
  }
  return out;
}

// x_0 of the cascade: the projection of the rigid model under the given pose.
inline Tensor init_shape(const RigidFaceModel& model, const HeadPose& pose,
                         const CameraIntrinsics& cam) {
  return project(model, pose, cam);
}

struct FitOptions {
  int max_iterations = 100;
  double step_tolerance = 1e-10;
  double lambda_init = 1e-3;
};

struct FitResult {
  HeadPose pose;
  bool converged = false;
  int iterations = 0;
  double rmse = 0.0;  // reprojection RMSE in pixels
};

namespace detail {

inline bool solve6(const double a_in[6][6], const double b_in[6], double x[6]) {
  double a[6][7];
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) a[i][j] = a_in[i][j];
    a[i][6] = b_in[i];
  }
  for (int col = 0; col < 6; ++col) {
    int piv = col;
    for (int r = col + 1; r < 6; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (std::abs(a[piv][col]) < 1e-300) return false;
    if (piv != col)
      for (int j = col; j < 7; ++j) std::swap(a[piv][j], a[col][j]);
    for (int r = col + 1; r < 6; ++r) {
      double f = a[r][col] / a[col][col];
      for (int j = col; j < 7; ++j) a[r][j] -= f * a[col][j];
    }
  }
  for (int i = 5; i >= 0; --i) {
    double s = a[i][6];
    for (int j = i + 1; j < 6; ++j) s -= a[i][j] * x[j];
    x[i] = s / a[i][i];
  }
  return true;
}

inline double reprojection_cost(const RigidFaceModel& model, const HeadPose& pose,
                                const CameraIntrinsics& cam, const Tensor& observed,
                                Tensor* residual, Tensor* jacobian) {
  Tensor proj = project(model, pose, cam, jacobian);
  const std::size_t n = model.landmark_count();
  double cost = 0.0;
  if (residual) *residual = Tensor::zeros({2 * n});
  for (std::size_t i = 0; i < n; ++i) {
    double rx = proj(i, 0) - observed(i, 0);
    double ry = proj(i, 1) - observed(i, 1);
    if (residual) {
      (*residual)[2 * i + 0] = rx;
      (*residual)[2 * i + 1] = ry;
    }
    cost += rx * rx + ry * ry;
  }
  return cost / static_cast<double>(2 * n);
}

inline void check_not_collinear(const Tensor& observed) {
  const std::size_t n = observed.rows();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += observed(i, 0) / static_cast<double>(n);
    my += observed(i, 1) / static_cast<double>(n);
  }
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double dx = observed(i, 0) - mx, dy = observed(i, 1) - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  // Smallest eigenvalue of the 2x2 scatter matrix.
  double tr = sxx + syy;
  double det = sxx * syy - sxy * sxy;
  double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
  double lmin = tr / 2.0 - disc;
  if (lmin <= 1e-9 * std::max(tr, 1e-30))
    throw DegenerateInputError("observed landmarks are (near) collinear; pose is unobservable");
}

}  // namespace detail

// Initial pose guess: zero angles, tz from the model/observation size ratio
// and (tx, ty) from back-projecting the observed centroid.
inline HeadPose initial_pose_guess(const RigidFaceModel& model, const Tensor& observed,
                                   const CameraIntrinsics& cam) {
  const std::size_t n = model.landmark_count();
  double mcx = 0, mcy = 0, ocx = 0, ocy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mcx += model.points(i, 0) / static_cast<double>(n);
    mcy += model.points(i, 1) / static_cast<double>(n);
    ocx += observed(i, 0) / static_cast<double>(n);
    ocy += observed(i, 1) / static_cast<double>(n);
  }
  double msz = 0, osz = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double dmx = model.points(i, 0) - mcx, dmy = model.points(i, 1) - mcy;
    double dox = observed(i, 0) - ocx, doy = observed(i, 1) - ocy;
    msz += dmx * dmx + dmy * dmy;
    osz += dox * dox + doy * doy;
  }
  msz = std::sqrt(msz / static_cast<double>(n));
  osz = std::sqrt(osz / static_cast<double>(n));
  if (osz <= 1e-12) osz = 1e-12;
  HeadPose guess;
  guess.tz = cam.focal * msz / osz;
  guess.tx = (ocx - cam.cx) * guess.tz / cam.focal - mcx;
  guess.ty = (ocy - cam.cy) * guess.tz / cam.focal - mcy;
  return guess;
}

// Gauss-Newton with Levenberg damping on the mean squared reprojection error.
// Damping grows x10 on a rejected step and shrinks /10 on an accepted one, so
// the accepted-cost sequence is monotonically non-increasing.
inline FitResult fit_pose(const RigidFaceModel& model, const Tensor& observed,
                          const CameraIntrinsics& cam, const FitOptions& opts = {}) {
  if (observed.rows() != model.landmark_count() || observed.cols() != 2)
    throw DimensionError("observed shape " + observed.shape_string() + " does not match model with L=" +
                         std::to_string(model.landmark_count()));
  detail::check_not_collinear(observed);

  HeadPose pose = initial_pose_guess(model, observed, cam);
  Tensor residual, jac;
  double cost = detail::reprojection_cost(model, pose, cam, observed, &residual, &jac);
  double lambda = opts.lambda_init;
  const std::size_t m = residual.size();

  FitResult result;
  bool converged = false;
  int iter = 0;
  for (; iter < opts.max_iterations && !converged; ++iter) {
    double jtj[6][6] = {};
    double jtr[6] = {};
    for (std::size_t r = 0; r < m; ++r) {
      for (int a = 0; a < 6; ++a) {
        jtr[a] += jac(r, a) * residual[r];
        for (int b = a; b < 6; ++b) jtj[a][b] += jac(r, a) * jac(r, b);
      }
    }
    for (int a = 0; a < 6; ++a)
      for (int b = 0; b < a; ++b) jtj[a][b] = jtj[b][a];

    bool accepted = false;
    for (int attempt = 0; attempt < 25 && !accepted; ++attempt) {
      double damped[6][6];
      for (int a = 0; a < 6; ++a)
        for (int b = 0; b < 6; ++b) damped[a][b] = jtj[a][b] + (a == b ? lambda : 0.0);
      double step[6];
      if (!detail::solve6(damped, jtr, step)) {
        lambda *= 10.0;
        continue;
      }
      HeadPose trial = pose;
      trial.yaw -= step[0];
      trial.pitch -= step[1];
      trial.roll -= step[2];
      trial.tx -= step[3];
      trial.ty -= step[4];
      trial.tz -= step[5];
      double trial_cost;
      try {
        trial_cost = detail::reprojection_cost(model, trial, cam, observed, nullptr, nullptr);
      } catch (const Error&) {
        trial_cost = std::numeric_limits<double>::infinity();
      }
      if (trial_cost <= cost) {
        pose = trial;
        cost = trial_cost;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        double step_norm = 0;
        for (double s : step) step_norm += s * s;
        if (std::sqrt(step_norm) < opts.step_tolerance) converged = true;
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) break;  // damping exhausted; treat as stalled
    if (!converged) cost = detail::reprojection_cost(model, pose, cam, observed, &residual, &jac);
  }

  result.pose = pose.wrapped();
  result.converged = converged;
  result.iterations = iter;
  result.rmse = std::sqrt(2.0 * cost);  // cost averages over 2L residual entries
  return result;
}

// Per-parameter mean absolute pose error. Angles are wrapped to (-180, 180]
// degrees before taking magnitudes; translations stay in model units.
struct PoseMae {
  double yaw_deg = 0.0;
  double pitch_deg = 0.0;
  double roll_deg = 0.0;
  double mean_deg = 0.0;
  double tx = 0.0;
  double ty = 0.0;
  double tz = 0.0;
};

inline PoseMae pose_mae(const std::vector<HeadPose>& predicted, const std::vector<HeadPose>& truth) {
  if (predicted.empty() || truth.empty()) throw EmptyInputError("pose_mae on empty list");
  if (predicted.size() != truth.size())
    throw DimensionError("pose_mae list sizes differ: " + std::to_string(predicted.size()) + " vs " +
                         std::to_string(truth.size()));
  PoseMae out;
  const double n = static_cast<double>(predicted.size());
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    out.yaw_deg += std::abs(rad_to_deg(wrap_angle(predicted[i].yaw - truth[i].yaw))) / n;
    out.pitch_deg += std::abs(rad_to_deg(wrap_angle(predicted[i].pitch - truth[i].pitch))) / n;
    out.roll_deg += std::abs(rad_to_deg(wrap_angle(predicted[i].roll - truth[i].roll))) / n;
    out.tx += std::abs(predicted[i].tx - truth[i].tx) / n;
    out.ty += std::abs(predicted[i].ty - truth[i].ty) / n;
    out.tz += std::abs(predicted[i].tz - truth[i].tz) / n;
  }
  out.mean_deg = (out.yaw_deg + out.pitch_deg + out.roll_deg) / 3.0;
  return out;
}

// ---------------------------------------------------------------------------
// Canonical 68-point rigid face model. Model units: the distance between the
// outer eye corners is exactly 1. x right, y down, z away from the camera
// (the nose tip has the most negative z). The layout is exactly mirror
// symmetric in x so that horizontal flips map landmarks onto landmarks.

namespace detail {

inline void set_point(Tensor& pts, std::size_t i, double x, double y, double z) {
  pts(i, 0) = x;
  pts(i, 1) = y;
  pts(i, 2) = z;
}

}  // namespace detail

inline RigidFaceModel canonical_face_model() {
  Tensor pts = Tensor::zeros({68, 3});
  using detail::set_point;
  // Jaw contour, 0..16, left to right; the chin (8) is the lowest point.
  for (int i = 0; i <= 16; ++i) {
    double t = (i - 8) / 8.0;  // -1..1
    double x = 0.72 * std::sin(t * kPi / 2.0);
    double y = -0.02 + 0.68 * std::cos(t * kPi / 2.0);
    double z = 0.10 + 0.14 * std::abs(std::sin(t * kPi / 2.0));
    set_point(pts, static_cast<std::size_t>(i), x, y, z);
  }
  // Eyebrows, 17..21 (left) and 22..26 (right), slight arch.
  for (int i = 0; i < 5; ++i) {
    double t = i / 4.0;
    double x = -0.58 + 0.36 * t;
    double y = -0.30 - 0.05 * std::sin(t * kPi);
    double z = -0.02 - 0.03 * std::sin(t * kPi);
    set_point(pts, static_cast<std::size_t>(17 + i), x, y, z);
    set_point(pts, static_cast<std::size_t>(26 - i), -x, y, z);
  }
  // Nose bridge 27..30, top to tip.
  for (int i = 0; i < 4; ++i) {
    double t = i / 3.0;
    set_point(pts, static_cast<std::size_t>(27 + i), 0.0, -0.20 + 0.32 * t, -0.04 - 0.24 * t);
  }
  // Nose base 31..35.
  set_point(pts, 31, -0.12, 0.19, -0.12);
  set_point(pts, 32, -0.06, 0.21, -0.16);
  set_point(pts, 33, 0.00, 0.22, -0.19);
  set_point(pts, 34, 0.06, 0.21, -0.16);
  set_point(pts, 35, 0.12, 0.19, -0.12);
  // Eyes: 36..41 left, 42..47 right. Outer corners 36/45 are at x = -/+0.5,
  // giving inter-outer-eye distance exactly 1.
  set_point(pts, 36, -0.50, -0.18, -0.02);
  set_point(pts, 37, -0.43, -0.215, -0.045);
  set_point(pts, 38, -0.33, -0.215, -0.055);
  set_point(pts, 39, -0.26, -0.18, -0.05);
  set_point(pts, 40, -0.33, -0.145, -0.055);
  set_point(pts, 41, -0.43, -0.145, -0.045);
  set_point(pts, 42, 0.26, -0.18, -0.05);
  set_point(pts, 43, 0.33, -0.215, -0.055);
  set_point(pts, 44, 0.43, -0.215, -0.045);
  set_point(pts, 45, 0.50, -0.18, -0.02);
  set_point(pts, 46, 0.43, -0.145, -0.045);
  set_point(pts, 47, 0.33, -0.145, -0.055);
  // Outer lips 48..59, starting at the left corner, going over the top.
  for (int i = 0; i < 12; ++i) {
    double a = kPi - 2.0 * kPi * i / 12.0;  // left corner, counter-clockwise in (x, -y)
    double x = 0.26 * std::cos(a);
    double y = 0.40 - 0.105 * std::sin(a);
    set_point(pts, static_cast<std::size_t>(48 + i), x, y, -0.10 - 0.03 * std::cos(2 * a));
  }
  // Inner lips 60..67.
  for (int i = 0; i < 8; ++i) {
    double a = kPi - 2.0 * kPi * i / 8.0;
    double x = 0.15 * std::cos(a);
    double y = 0.40 - 0.05 * std::sin(a);
    set_point(pts, static_cast<std::size_t>(60 + i), x, y, -0.095);
  }
  RigidFaceModel model;
  model.points = std::move(pts);
  model.outer_eyes = {36, 45};
  model.pupils = {37, 44};  // upper-lid points nearest the eye centers
  model.validate();
  return model;
}

// Left/right landmark correspondence under a horizontal mirror. Requires the
// model to be exactly x-symmetric; used by flip augmentation.
inline std::vector<std::size_t> mirror_index_map(const RigidFaceModel& model, double tol = 1e-9) {
  const std::size_t n = model.landmark_count();
  std::vector<std::size_t> map(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = n;
    for (std::size_t j = 0; j < n; ++j) {
      double dx = -model.points(i, 0) - model.points(j, 0);
      double dy = model.points(i, 1) - model.points(j, 1);
      double dz = model.points(i, 2) - model.points(j, 2);
      double d = dx * dx + dy * dy + dz * dz;
      if (d < best) {
        best = d;
        best_j = j;
      }
    }
    if (best > tol) throw ConfigError("face model is not mirror symmetric; flip map unavailable");
    map[i] = best_j;
  }
  for (std::size_t i = 0; i < n; ++i)
    if (map[map[i]] != i) throw ConfigError("mirror index map is not an involution");
  return map;
}

// ---------------------------------------------------------------------------
// JSON model file: {"points": [[x,y,z] x L], "outer_eyes": [i,j], "pupils": [i,j]}

inline nlohmann::json face_model_to_json(const RigidFaceModel& model) {
  nlohmann::json j;
  j["points"] = nlohmann::json::array();
  for (std::size_t i = 0; i < model.landmark_count(); ++i)
    j["points"].push_back({model.points(i, 0), model.points(i, 1), model.points(i, 2)});
  j["outer_eyes"] = {model.outer_eyes[0], model.outer_eyes[1]};
  j["pupils"] = {model.pupils[0], model.pupils[1]};
  return j;
}

inline RigidFaceModel face_model_from_json(const nlohmann::json& j) {
  if (!j.contains("points") || !j.contains("outer_eyes") || !j.contains("pupils"))
    throw ParseError("face model JSON needs 'points', 'outer_eyes' and 'pupils'");
  const auto& pj = j.at("points");
  RigidFaceModel model;
  model.points = Tensor::zeros({pj.size(), 3});
  for (std::size_t i = 0; i < pj.size(); ++i) {
    if (pj[i].size() != 3) throw ParseError("face model point " + std::to_string(i) + " is not [x,y,z]");
    for (int k = 0; k < 3; ++k) model.points(i, k) = pj[i][k].get<double>();
  }
  model.outer_eyes = {j.at("outer_eyes").at(0).get<std::size_t>(), j.at("outer_eyes").at(1).get<std::size_t>()};
  model.pupils = {j.at("pupils").at(0).get<std::size_t>(), j.at("pupils").at(1).get<std::size_t>()};
  model.validate();
  return model;
}

inline RigidFaceModel load_face_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open face model file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ParseError("face model JSON parse failure in " + path + ": " + e.what());
  }
  return face_model_from_json(j);
}

}  // namespace spiga
