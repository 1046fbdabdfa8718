#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "spiga/finite_diff.hpp"
#include "spiga/geometry.hpp"
#include "spiga/rng.hpp"

using namespace spiga;

namespace {

RigidFaceModel tetra_model() {
  RigidFaceModel m;
  m.points = Tensor::matrix({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {-1, -1, -0.5}});
  m.outer_eyes = {0, 1};
  m.pupils = {2, 3};
  return m;
}

HeadPose random_pose(Rng& rng) {
  HeadPose p;
  p.yaw = rng.uniform(-0.5, 0.5);
  p.pitch = rng.uniform(-0.5, 0.5);
  p.roll = rng.uniform(-0.5, 0.5);
  p.tx = rng.uniform(-0.3, 0.3);
  p.ty = rng.uniform(-0.3, 0.3);
  p.tz = rng.uniform(3.0, 6.0);
  return p;
}

double max_param_err(const HeadPose& a, const HeadPose& b) {
  double e = 0.0;
  e = std::max(e, std::abs(wrap_angle(a.yaw - b.yaw)));
  e = std::max(e, std::abs(wrap_angle(a.pitch - b.pitch)));
  e = std::max(e, std::abs(wrap_angle(a.roll - b.roll)));
  e = std::max(e, std::abs(a.tx - b.tx));
  e = std::max(e, std::abs(a.ty - b.ty));
  e = std::max(e, std::abs(a.tz - b.tz));
  return e;
}

}  // namespace

TEST_CASE("projection frozen examples") {
  RigidFaceModel m;
  m.points = Tensor::matrix({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0.3, -0.2, 0.5}});
  m.outer_eyes = {0, 1};
  m.pupils = {2, 3};
  CameraIntrinsics cam{100.0, 128.0, 128.0, 256.0};
  HeadPose pose;
  pose.tz = 5.0;
  Tensor p = project(m, pose, cam);
  CHECK(p(0, 0) == 128.0);
  CHECK(p(0, 1) == 128.0);
  CHECK_THAT(p(1, 0), Catch::Matchers::WithinAbs(148.0, 1e-12));
  CHECK_THAT(p(1, 1), Catch::Matchers::WithinAbs(128.0, 1e-12));

  HeadPose rolled = pose;
  rolled.roll = kPi;
  Tensor pr = project(m, rolled, cam);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK_THAT(pr(i, 0) - cam.cx, Catch::Matchers::WithinAbs(-(p(i, 0) - cam.cx), 1e-9));
    CHECK_THAT(pr(i, 1) - cam.cy, Catch::Matchers::WithinAbs(-(p(i, 1) - cam.cy), 1e-9));
  }
}

TEST_CASE("points behind the camera are rejected") {
  RigidFaceModel m = tetra_model();
  HeadPose pose;
  pose.tz = 0.2;  // puts the z=1 vertex at depth -0.8 after translation: still in front?
  pose.tz = 0.5;
  CameraIntrinsics cam = CameraIntrinsics::standard(256.0);
  // vertex (0,0,1) sits at z = 1.5 > 0; vertex (-1,-1,-0.5) at z = 0 -> behind.
  CHECK_THROWS_AS(project(m, pose, cam), BehindCameraError);
  HeadPose bad;
  bad.tz = -1.0;
  CHECK_THROWS_AS(project(m, bad, cam), ContractError);
}

TEST_CASE("analytic projection jacobian matches finite differences") {
  Rng rng(101);
  RigidFaceModel m = tetra_model();
  CameraIntrinsics cam = CameraIntrinsics::standard(256.0);
  for (int trial = 0; trial < 25; ++trial) {
    HeadPose pose = random_pose(rng);
    Tensor jac;
    project(m, pose, cam, &jac);
    const std::size_t n = m.landmark_count();

    std::array<double, 6> arr = pose.to_array();
    for (int k = 0; k < 6; ++k) {
      const double eps = 1e-6;
      std::array<double, 6> ap = arr, am = arr;
      ap[k] += eps;
      am[k] -= eps;
      Tensor pp = project(m, HeadPose::from_array(ap), cam);
      Tensor pm = project(m, HeadPose::from_array(am), cam);
      for (std::size_t i = 0; i < n; ++i)
        for (int d = 0; d < 2; ++d) {
          double numeric = (pp(i, d) - pm(i, d)) / (2 * eps);
          double analytic = jac(2 * i + d, k);
          CHECK_THAT(numeric, Catch::Matchers::WithinAbs(analytic,
                                                         1e-5 * std::max(1.0, std::abs(analytic))));
        }
    }
  }
}

TEST_CASE("fit_pose round trip recovers exact poses") {
  Rng rng(211);
  RigidFaceModel model = canonical_face_model();
  CameraIntrinsics cam = CameraIntrinsics::standard(256.0);
  for (int trial = 0; trial < 50; ++trial) {
    HeadPose truth = random_pose(rng);
    Tensor observed = project(model, truth, cam);
    FitResult fit = fit_pose(model, observed, cam);
    CHECK(fit.converged);
    CHECK(max_param_err(fit.pose, truth) < 1e-6);
    CHECK(fit.rmse < 1e-8);
  }
}

TEST_CASE("fit_pose on noisy observations stays near the noise level") {
  Rng rng(223);
  RigidFaceModel model = canonical_face_model();
  CameraIntrinsics cam = CameraIntrinsics::standard(256.0);
  const double noise = 0.5;
  for (int trial = 0; trial < 20; ++trial) {
    HeadPose truth = random_pose(rng);
    Tensor observed = project(model, truth, cam);
    for (double& v : observed.v) v += rng.normal(0.0, noise);
    FitResult fit = fit_pose(model, observed, cam);
    CHECK(fit.rmse <= noise * 2.0);
  }
}

TEST_CASE("frontal identity pose recovers zero angles") {
  RigidFaceModel model = canonical_face_model();
  CameraIntrinsics cam = CameraIntrinsics::standard(256.0);
  HeadPose frontal;
  frontal.tz = 4.0;
  Tensor observed = project(model, frontal, cam);
  FitResult fit = fit_pose(model, observed, cam);
  CHECK(std::abs(fit.pose.yaw) < 1e-6);
  CHECK(std::abs(fit.pose.pitch) < 1e-6);
  CHECK(std::abs(fit.pose.roll) < 1e-6);
}

TEST_CASE("collinear observations are rejected as degenerate") {
  RigidFaceModel model = tetra_model();
  CameraIntrinsics cam = CameraIntrinsics::standard(256.0);
  Tensor observed = Tensor::zeros({5, 2});
  for (std::size_t i = 0; i < 5; ++i) {
    observed(i, 0) = 10.0 + 3.0 * static_cast<double>(i);
    observed(i, 1) = 20.0 + 6.0 * static_cast<double>(i);
  }
  CHECK_THROWS_AS(fit_pose(model, observed, cam), DegenerateInputError);
}

TEST_CASE("pose_mae frozen values and wrap-around") {
  HeadPose zero;
  HeadPose two;
  two.yaw = deg_to_rad(2.0);
  PoseMae mae = pose_mae({two}, {zero});
  CHECK_THAT(mae.yaw_deg, Catch::Matchers::WithinAbs(2.0, 1e-12));
  CHECK_THAT(mae.mean_deg, Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));

  HeadPose a, b;
  a.roll = deg_to_rad(179.0);
  b.roll = deg_to_rad(-179.0);
  CHECK_THAT(pose_mae({a}, {b}).roll_deg, Catch::Matchers::WithinAbs(2.0, 1e-9));

  CHECK(pose_mae({a}, {a}).mean_deg == 0.0);
  CHECK_THROWS_AS(pose_mae({}, {}), EmptyInputError);
  CHECK_THROWS_AS(pose_mae({a}, {a, b}), DimensionError);
}

TEST_CASE("pose_mae is symmetric in its arguments") {
  Rng rng(307);
  std::vector<HeadPose> pred, truth;
  for (int i = 0; i < 10; ++i) {
    pred.push_back(random_pose(rng));
    truth.push_back(random_pose(rng));
  }
  PoseMae ab = pose_mae(pred, truth);
  PoseMae ba = pose_mae(truth, pred);
  CHECK_THAT(ab.yaw_deg, Catch::Matchers::WithinAbs(ba.yaw_deg, 1e-12));
  CHECK_THAT(ab.pitch_deg, Catch::Matchers::WithinAbs(ba.pitch_deg, 1e-12));
  CHECK_THAT(ab.mean_deg, Catch::Matchers::WithinAbs(ba.mean_deg, 1e-12));
  CHECK_THAT(ab.tz, Catch::Matchers::WithinAbs(ba.tz, 1e-12));
}

TEST_CASE("wrap_angle maps into (-pi, pi]") {
  CHECK_THAT(wrap_angle(3 * kPi), Catch::Matchers::WithinAbs(kPi, 1e-12));
  CHECK_THAT(wrap_angle(-kPi), Catch::Matchers::WithinAbs(kPi, 1e-12));
  CHECK_THAT(wrap_angle(0.5), Catch::Matchers::WithinAbs(0.5, 1e-12));
  CHECK_THAT(wrap_angle(2 * kPi + 0.25), Catch::Matchers::WithinAbs(0.25, 1e-12));
}

TEST_CASE("canonical model is valid, unit inter-ocular, and mirror symmetric") {
  RigidFaceModel model = canonical_face_model();
  CHECK(model.landmark_count() == 68);
  model.validate();
  double dx = model.points(36, 0) - model.points(45, 0);
  double dy = model.points(36, 1) - model.points(45, 1);
  double dz = model.points(36, 2) - model.points(45, 2);
  CHECK_THAT(std::sqrt(dx * dx + dy * dy + dz * dz), Catch::Matchers::WithinAbs(1.0, 1e-12));

  std::vector<std::size_t> mirror = mirror_index_map(model);
  CHECK(mirror[36] == 45);
  CHECK(mirror[45] == 36);
  CHECK(mirror[0] == 16);
  CHECK(mirror[8] == 8);    // chin is on the symmetry plane
  CHECK(mirror[33] == 33);  // nose base center too
  CHECK(mirror[48] == 54);  // mouth corners swap
  for (std::size_t i = 0; i < 68; ++i) CHECK(mirror[mirror[i]] == i);
}

TEST_CASE("mirror_index_map rejects asymmetric models") {
  RigidFaceModel m = tetra_model();
  CHECK_THROWS_AS(mirror_index_map(m), ConfigError);
}

TEST_CASE("model validation catches bad inputs") {
  RigidFaceModel coplanar;
  coplanar.points = Tensor::matrix({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}});
  coplanar.outer_eyes = {0, 1};
  coplanar.pupils = {2, 3};
  CHECK_THROWS_AS(coplanar.validate(), DegenerateInputError);

  RigidFaceModel bad_idx = tetra_model();
  bad_idx.pupils = {2, 99};
  CHECK_THROWS_AS(bad_idx.validate(), ContractError);
}

TEST_CASE("face model JSON round trip") {
  RigidFaceModel model = canonical_face_model();
  nlohmann::json j = face_model_to_json(model);
  RigidFaceModel back = face_model_from_json(j);
  CHECK(max_abs_diff(model.points, back.points) == 0.0);
  CHECK(back.outer_eyes == model.outer_eyes);
  CHECK(back.pupils == model.pupils);

  nlohmann::json missing;
  missing["points"] = {{0, 0, 0}};
  CHECK_THROWS_AS(face_model_from_json(missing), ParseError);
  CHECK_THROWS_AS(load_face_model("/nonexistent/path.json"), IoError);
}

TEST_CASE("init_shape is the projection of the posed model") {
  Rng rng(401);
  RigidFaceModel model = canonical_face_model();
  CameraIntrinsics cam = CameraIntrinsics::standard(64.0);
  HeadPose pose = random_pose(rng);
  CHECK(max_abs_diff(init_shape(model, pose, cam), project(model, pose, cam)) == 0.0);
}
