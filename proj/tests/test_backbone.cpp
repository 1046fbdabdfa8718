#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "spiga/backbone.hpp"
#include "spiga/finite_diff.hpp"

using namespace spiga;

namespace {

BackboneConfig tiny_backbone() {
  BackboneConfig cfg;
  cfg.stages = 2;
  cfg.channels = 3;
  cfg.input_side = 8;
  cfg.feature_side = 4;
  cfg.landmarks = 4;
  return cfg;
}

Tensor random_image(Rng& rng, const BackboneConfig& cfg) {
  Tensor img = Tensor::zeros({3, cfg.input_side, cfg.input_side});
  for (double& v : img.v) v = rng.uniform(-1.0, 1.0);
  return img;
}

void zero_convs(BackboneModel& model) {
  for (BackboneStage& s : model.stages) {
    for (double& v : s.conv1.w.v) v = 0.0;
    for (double& v : s.conv1.b.v) v = 0.0;
    for (double& v : s.conv2.w.v) v = 0.0;
    for (double& v : s.conv2.b.v) v = 0.0;
  }
}

}  // namespace

TEST_CASE("backbone config validation") {
  BackboneConfig cfg = tiny_backbone();
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.downscale() == 2);

  BackboneConfig bad = cfg;
  bad.stages = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.channels = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.landmarks = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.feature_side = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.feature_side = 3;  // does not divide 8
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("conv stride and padding arithmetic is pinned") {
  // 4x4 ramp, 2x2 all-ones kernel, stride 2, pad 1: each output cell sums the
  // padded window it covers. Worked out by hand once and frozen here.
  Tensor img = Tensor::zeros({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) img.v[i] = static_cast<double>(i + 1);
  Tensor w = Tensor::zeros({1, 1, 2, 2});
  for (double& v : w.v) v = 1.0;

  Tape tape;
  Ref out = tape.conv2d(tape.leaf(img), tape.leaf(w), 2, 1);
  const Tensor& o = tape.value(out);
  REQUIRE(o.shape == std::vector<std::size_t>{1, 3, 3});
  const std::vector<double> expected{1, 5, 4, 14, 34, 20, 13, 29, 16};
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(o.v[i] == expected[i]);
}

TEST_CASE("zeroed convolutions expose the head biases") {
  BackboneConfig cfg = tiny_backbone();
  BackboneModel model = BackboneModel::init(cfg, 7);
  zero_convs(model);

  Tensor img = Tensor::zeros({3, cfg.input_side, cfg.input_side});
  Tape tape;
  TapedBackbone tb = put_backbone(tape, model, false, nullptr);
  BackboneTrace trace = backbone_forward(tape, tape.leaf(img), tb, cfg);
  REQUIRE(trace.features.size() == cfg.stages);

  for (std::size_t h = 0; h < cfg.stages; ++h) {
    // ReLU(0 * w + 0) stays zero through every stage, so the pooled vector is
    // zero and each head reduces to its bias.
    for (double v : tape.value(trace.features[h]).v) CHECK(v == 0.0);
    const Tensor& pose = tape.value(trace.poses[h]);
    for (std::size_t j = 0; j < 6; ++j) CHECK(pose.v[j] == model.stages[h].pose_head.b[j]);
    const Tensor& coords = tape.value(trace.coords[h]);
    REQUIRE(coords.size() == 2 * cfg.landmarks);
    for (std::size_t j = 0; j < coords.size(); ++j)
      CHECK(coords.v[j] == model.stages[h].coord_head.b[j]);
  }
}

TEST_CASE("freshly initialized heads carry the frontal depth prior") {
  BackboneModel model = BackboneModel::init(tiny_backbone(), 21);
  for (const BackboneStage& s : model.stages) {
    for (std::size_t j = 0; j < 6; ++j)
      CHECK(s.pose_head.b[j] == (j == 5 ? 4.0 : 0.0));
    for (double v : s.coord_head.b.v) CHECK(v == 0.0);
  }
}

TEST_CASE("stage outputs have the contracted shapes") {
  BackboneConfig cfg = tiny_backbone();
  BackboneModel model = BackboneModel::init(cfg, 3);
  Rng rng(5);

  Tape tape;
  TapedBackbone tb = put_backbone(tape, model, false, nullptr);
  BackboneTrace trace = backbone_forward(tape, tape.leaf(random_image(rng, cfg)), tb, cfg);

  REQUIRE(trace.features.size() == cfg.stages);
  REQUIRE(trace.poses.size() == cfg.stages);
  REQUIRE(trace.coords.size() == cfg.stages);
  for (std::size_t h = 0; h < cfg.stages; ++h) {
    CHECK(tape.value(trace.features[h]).shape ==
          std::vector<std::size_t>{cfg.channels, cfg.feature_side, cfg.feature_side});
    CHECK(tape.value(trace.poses[h]).shape == std::vector<std::size_t>{1, 6});
    CHECK(tape.value(trace.coords[h]).shape == std::vector<std::size_t>{cfg.landmarks, 2});
  }

  Tape bad;
  TapedBackbone tb2 = put_backbone(bad, model, false, nullptr);
  CHECK_THROWS_AS(
      backbone_forward(bad, bad.leaf(Tensor::zeros({3, 7, 7})), tb2, cfg), DimensionError);
  CHECK_THROWS_AS(
      backbone_forward(bad, bad.leaf(Tensor::zeros({1, 8, 8})), tb2, cfg), DimensionError);
}

TEST_CASE("taped parameters bind in visit order") {
  BackboneModel model = BackboneModel::init(tiny_backbone(), 9);
  std::vector<NamedParam> named;
  model.visit_params(named);

  Tape tape;
  std::vector<ParamBinding> bindings;
  put_backbone(tape, model, true, &bindings);
  REQUIRE(bindings.size() == named.size());
  for (std::size_t i = 0; i < named.size(); ++i) CHECK(bindings[i].tensor == named[i].tensor);

  Tape frozen;
  std::vector<ParamBinding> none;
  put_backbone(frozen, model, false, &none);
  CHECK(none.empty());
}

TEST_CASE("stage losses double their weight per stage") {
  CHECK(aggregate_stage_losses({1.0, 1.0, 1.0, 1.0}) == 15.0);
  CHECK(aggregate_stage_losses({2.5}) == 2.5);
  CHECK(aggregate_stage_losses({0.5, 0.25}) == 1.0);
  CHECK_THROWS_AS(aggregate_stage_losses(std::vector<double>{}), EmptyInputError);

  // The taped overload matches the scalar one and feeds 2^h back to stage h.
  Tape tape;
  std::vector<Ref> refs;
  std::vector<double> plain{0.7, -0.3, 1.9};
  for (double v : plain) refs.push_back(tape.leaf(Tensor{{1}, {v}}, true));
  Ref total = aggregate_stage_losses(tape, refs);
  CHECK(tape.value(total).v[0] == Catch::Approx(aggregate_stage_losses(plain)).margin(1e-12));
  GradientStore grads = tape.backward(total);
  for (std::size_t h = 0; h < refs.size(); ++h)
    CHECK(grads.at(refs[h]).v[0] == Catch::Approx(std::pow(2.0, double(h))).margin(1e-12));
  CHECK_THROWS_AS(aggregate_stage_losses(tape, std::vector<Ref>{}), EmptyInputError);
}

TEST_CASE("multitask loss combines coordinate and pose terms") {
  CHECK(multitask_loss({0.0}, {0.0}) == 0.0);
  // Defaults weight coordinates four times the pose term.
  CHECK(multitask_loss({1.0}, {1.0}) == 5.0);
  CHECK(multitask_loss({1.0}, {7.0}, 4.0, 0.0) == 4.0);  // pose-free pretraining mode
  CHECK(multitask_loss({1.0, 1.0}, {0.0, 0.0}) == 12.0);
  CHECK_THROWS_AS(multitask_loss({1.0, 2.0}, {1.0}), DimensionError);

  Rng rng(31);
  std::vector<double> c, p;
  for (int i = 0; i < 3; ++i) {
    c.push_back(rng.uniform(0.0, 2.0));
    p.push_back(rng.uniform(0.0, 2.0));
  }
  Tape tape;
  std::vector<Ref> cr, pr;
  for (double v : c) cr.push_back(tape.leaf(Tensor{{1}, {v}}));
  for (double v : p) pr.push_back(tape.leaf(Tensor{{1}, {v}}));
  CHECK(tape.value(multitask_loss(tape, cr, pr)).v[0] ==
        Catch::Approx(multitask_loss(c, p)).margin(1e-12));
  CHECK_THROWS_AS(multitask_loss(tape, cr, std::vector<Ref>{}), DimensionError);
}

TEST_CASE("full backbone multitask gradient passes a finite-difference check") {
  BackboneConfig cfg = tiny_backbone();
  const double inv = 1.0 / static_cast<double>(cfg.feature_side);

  for (std::uint64_t seed : {11, 23}) {
    Rng rng(seed);
    BackboneModel model = BackboneModel::init(cfg, seed);
    std::vector<NamedParam> named;
    model.visit_params(named);

    Tensor img = random_image(rng, cfg);
    Tensor truth = Tensor::zeros({cfg.landmarks, 2});
    for (double& v : truth.v) v = rng.uniform(0.5, 3.5);
    Tensor pose_truth{{1, 6}, {rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                               rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2),
                               rng.uniform(-0.2, 0.2), rng.uniform(3.5, 4.5)}};

    std::vector<Tensor> inputs{img};
    for (const NamedParam& p : named) inputs.push_back(*p.tensor);

    auto build_loss = [&](Tape& t, Ref image, const TapedBackbone& tb) -> Ref {
      BackboneTrace tr = backbone_forward(t, image, tb, cfg);
      Ref tru = t.leaf(truth);
      Ref ptru = t.leaf(pose_truth);
      std::vector<Ref> coord_losses, pose_losses;
      for (std::size_t h = 0; h < tr.coords.size(); ++h) {
        coord_losses.push_back(
            t.smooth_l1(t.scale(tr.coords[h], inv), t.scale(tru, inv), 1.0));
        Ref d = t.sub(tr.poses[h], ptru);
        pose_losses.push_back(t.mean(t.mul(d, d)));
      }
      return multitask_loss(t, coord_losses, pose_losses);
    };

    Tape tape;
    std::vector<ParamBinding> bindings;
    Ref image_ref = tape.leaf(img, true);
    TapedBackbone tb = put_backbone(tape, model, true, &bindings);
    GradientStore store = tape.backward(build_loss(tape, image_ref, tb));

    std::vector<Tensor> analytic;
    analytic.push_back(store.has(image_ref) ? store.at(image_ref) : Tensor::zeros(img.shape));
    for (const ParamBinding& b : bindings)
      analytic.push_back(store.has(b.ref) ? store.at(b.ref) : Tensor::zeros(b.tensor->shape));

    ScalarFn eval = [&](const std::vector<Tensor>& in) -> double {
      BackboneModel scratch = model;
      std::vector<NamedParam> np;
      scratch.visit_params(np);
      for (std::size_t i = 0; i < np.size(); ++i) *np[i].tensor = in[1 + i];
      Tape t;
      TapedBackbone stb = put_backbone(t, scratch, false, nullptr);
      return t.value(build_loss(t, t.leaf(in[0]), stb)).v[0];
    };

    GradCheck gc = finite_diff_check(eval, inputs, analytic, 1e-5);
    INFO("seed " << seed << " worst tensor " << gc.worst_tensor << " elem " << gc.worst_element
                 << " analytic " << gc.worst_analytic << " numeric " << gc.worst_numeric);
    CHECK(gc.max_rel_error < 1e-4);
  }
}
