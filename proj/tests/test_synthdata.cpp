#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "spiga/metrics.hpp"
#include "spiga/synthdata.hpp"

using namespace spiga;

namespace {

SynthConfig base_config(std::size_t count, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.landmarks = 68;
  cfg.image_side = 128;
  cfg.feature_side = 32;
  cfg.channels = 4;
  cfg.count = count;
  cfg.seed = seed;
  return cfg;
}

bool same_pose(const HeadPose& a, const HeadPose& b) { return a.to_array() == b.to_array(); }

std::string fresh_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("spiga_ds_" + tag);
  std::filesystem::remove_all(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(out.good());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("generation is deterministic and order independent") {
  RigidFaceModel face = canonical_face_model();
  const CameraIntrinsics cam = CameraIntrinsics::standard(128.0);
  SynthConfig cfg = base_config(5, 42);

  SynthDataset a = gen_dataset(face, cam, cfg);
  SynthDataset b = gen_dataset(face, cam, cfg);
  REQUIRE(a.samples.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(a.samples[i].id == b.samples[i].id);
    CHECK(max_abs_diff(a.samples[i].landmarks, b.samples[i].landmarks) == 0.0);
    CHECK(same_pose(a.samples[i].pose, b.samples[i].pose));
    CHECK(same_pose(a.samples[i].init_pose, b.samples[i].init_pose));
  }

  // Each sample has its own derived stream: a shorter run reproduces a prefix.
  cfg.count = 3;
  SynthDataset prefix = gen_dataset(face, cam, cfg);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(max_abs_diff(prefix.samples[i].landmarks, a.samples[i].landmarks) == 0.0);
    CHECK(same_pose(prefix.samples[i].pose, a.samples[i].pose));
  }

  // Different seeds give different data.
  cfg.count = 5;
  cfg.seed = 43;
  SynthDataset other = gen_dataset(face, cam, cfg);
  CHECK(max_abs_diff(other.samples[0].landmarks, a.samples[0].landmarks) > 0.0);
}

TEST_CASE("without deformation or pose noise the initialization is exact") {
  RigidFaceModel face = canonical_face_model();
  const CameraIntrinsics cam = CameraIntrinsics::standard(128.0);
  SynthConfig cfg = base_config(6, 7);
  cfg.sigma_deform = 0.0;
  cfg.pose_noise = PoseNoise{0.0, 0.0, 0.0};

  SynthDataset data = gen_dataset(face, cam, cfg);
  const NormalizationSpec norm = NormalizationSpec::for_model(face, NormKind::kInterOcular);
  for (const SynthSample& s : data.samples) {
    CHECK(same_pose(s.pose, s.init_pose));
    Tensor reproj = init_shape(face, s.init_pose, cam);
    CHECK(max_abs_diff(reproj, s.landmarks) == 0.0);
    CHECK(per_image_nme(reproj, s.landmarks, norm) == 0.0);
  }
}

TEST_CASE("pose noise separates the initialization from the truth") {
  RigidFaceModel face = canonical_face_model();
  const CameraIntrinsics cam = CameraIntrinsics::standard(128.0);
  SynthConfig cfg = base_config(6, 8);
  cfg.sigma_deform = 0.0;

  SynthDataset data = gen_dataset(face, cam, cfg);
  const NormalizationSpec norm = NormalizationSpec::for_model(face, NormKind::kInterOcular);
  for (const SynthSample& s : data.samples) {
    CHECK_FALSE(same_pose(s.pose, s.init_pose));
    CHECK(per_image_nme(init_shape(face, s.init_pose, cam), s.landmarks, norm) > 0.0);
    CHECK(s.init_pose.tz > 0.0);
  }
}

TEST_CASE("deformation statistics match the configured sigma") {
  RigidFaceModel face = canonical_face_model();
  const CameraIntrinsics cam = CameraIntrinsics::standard(128.0);
  SynthConfig cfg = base_config(300, 99);
  cfg.sigma_deform = 4.0;

  SynthDataset data = gen_dataset(face, cam, cfg);
  // The deformation is the residual against the rigid projection. Interior
  // landmark indices see the full smoothing kernel, so their marginal variance
  // is exactly sigma^2; the smoothing only correlates neighbors.
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  for (const SynthSample& s : data.samples) {
    Tensor rigid = project(face, s.pose, cam);
    for (std::size_t l = 3; l + 3 < cfg.landmarks; ++l) {
      for (int axis = 0; axis < 2; ++axis) {
        const double d = s.landmarks(l, axis) - rigid(l, axis);
        sum += d;
        sum_sq += d * d;
        ++n;
      }
    }
  }
  const double mean = sum / static_cast<double>(n);
  const double stddev = std::sqrt(sum_sq / static_cast<double>(n) - mean * mean);
  INFO("n " << n << " mean " << mean << " std " << stddev);
  CHECK(std::abs(mean) < 0.2);               // 0.05 sigma
  CHECK(stddev > 0.9 * cfg.sigma_deform);
  CHECK(stddev < 1.1 * cfg.sigma_deform);
}

TEST_CASE("feature bumps peak at the rescaled truth with unit amplitude") {
  SynthConfig cfg;
  cfg.landmarks = 2;
  cfg.image_side = 64;
  cfg.feature_side = 16;
  cfg.channels = 2;
  cfg.sigma_bump = 1.5;
  cfg.feature_noise = 0.0;  // isolate the signal

  // Integer feature-lattice positions: image coords are multiples of 4.
  Tensor lms = Tensor::matrix({{16.0, 24.0}, {48.0, 40.0}});
  Rng rng(1);
  Tensor map = gen_feature_map(lms, cfg, rng);
  REQUIRE(map.shape == std::vector<std::size_t>{2, 16, 16});

  // Landmark 0 lives in channel 0 at feature (4, 6); landmark 1 in channel 1
  // at (12, 10). Exactly one bump per channel here, so the peak is exactly 1.
  auto at = [&](std::size_t c, std::size_t y, std::size_t x) {
    return map.v[(c * 16 + y) * 16 + x];
  };
  CHECK(at(0, 6, 4) == 1.0);
  CHECK(at(1, 10, 12) == 1.0);

  // The falloff is exactly Gaussian in the lattice distance.
  const double inv = 1.0 / (2.0 * cfg.sigma_bump * cfg.sigma_bump);
  CHECK(at(0, 6, 5) == Catch::Approx(std::exp(-1.0 * inv)).margin(1e-15));
  CHECK(at(0, 7, 5) == Catch::Approx(std::exp(-2.0 * inv)).margin(1e-15));
  CHECK(at(1, 10, 11) == Catch::Approx(std::exp(-1.0 * inv)).margin(1e-15));

  // Every value is non-negative and no pixel beats the peaks.
  for (double v : map.v) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("noise-only mode carries no shape information") {
  SynthConfig cfg;
  cfg.landmarks = 2;
  cfg.image_side = 64;
  cfg.feature_side = 16;
  cfg.channels = 2;
  cfg.noise_only = true;

  Tensor a_lms = Tensor::matrix({{16.0, 24.0}, {48.0, 40.0}});
  Tensor b_lms = Tensor::matrix({{40.0, 8.0}, {8.0, 56.0}});
  Rng ra(5), rb(5);
  Tensor ma = gen_feature_map(a_lms, cfg, ra);
  Tensor mb = gen_feature_map(b_lms, cfg, rb);
  // Identical streams, different shapes: the maps coincide bit for bit.
  CHECK(max_abs_diff(ma, mb) == 0.0);

  cfg.feature_noise = 0.0;
  Rng rc(5);
  Tensor mc = gen_feature_map(a_lms, cfg, rc);
  for (double v : mc.v) CHECK(v == 0.0);
}

TEST_CASE("generated images put identity-coded blobs at the landmarks") {
  SynthConfig cfg;
  cfg.landmarks = 2;
  cfg.image_side = 32;
  cfg.feature_side = 16;
  cfg.channels = 2;
  cfg.sigma_bump = 1.0;  // image-scale sigma is scaled by image/feature = 2
  cfg.feature_noise = 0.0;

  Tensor lms = Tensor::matrix({{8.0, 8.0}, {24.0, 20.0}});
  Rng rng(1);
  Tensor img = gen_image(lms, cfg, rng);
  REQUIRE(img.shape == std::vector<std::size_t>{3, 32, 32});

  auto at = [&](std::size_t c, std::size_t y, std::size_t x) {
    return img.v[(c * 32 + y) * 32 + x];
  };
  // Landmark l paints channel l % 3 with amplitude 0.5 + 0.5 * (l % 3 + 1) / 3.
  CHECK(at(0, 8, 8) == Catch::Approx(0.5 + 0.5 / 3.0).margin(1e-15));
  CHECK(at(1, 20, 24) == Catch::Approx(0.5 + 1.0 / 3.0).margin(1e-15));
  // The unused channel stays empty.
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) CHECK(at(2, y, x) == 0.0);
}

TEST_CASE("impossible bounds exhaust the retry budget") {
  RigidFaceModel face = canonical_face_model();
  SynthConfig cfg = base_config(1, 3);
  cfg.image_side = 8;
  cfg.feature_side = 8;
  cfg.sigma_deform = 2.0;  // margin 4 leaves an empty in-bounds window
  const CameraIntrinsics cam = CameraIntrinsics::standard(8.0);
  CHECK_THROWS_AS(gen_dataset(face, cam, cfg), DegenerateInputError);
}

TEST_CASE("config landmark count must match the face model") {
  RigidFaceModel face = canonical_face_model();
  SynthConfig cfg = base_config(1, 3);
  cfg.landmarks = 5;
  Rng rng(1);
  CHECK_THROWS_AS(gen_sample(face, CameraIntrinsics::standard(128.0), cfg, rng, "x"),
                  DimensionError);
}

TEST_CASE("dataset round trip is bit identical including rasters") {
  RigidFaceModel face = canonical_face_model();
  const CameraIntrinsics cam = CameraIntrinsics::standard(128.0);
  SynthConfig cfg = base_config(4, 21);
  cfg.store_images = true;
  cfg.store_feature_maps = true;

  SynthDataset ds = gen_dataset(face, cam, cfg);
  const std::string dir = fresh_dir("roundtrip");
  write_dataset(dir, ds);
  SynthDataset back = read_dataset(dir);

  CHECK(synth_config_to_json(back.config) == synth_config_to_json(ds.config));
  REQUIRE(back.samples.size() == ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].id == ds.samples[i].id);
    CHECK(max_abs_diff(back.samples[i].landmarks, ds.samples[i].landmarks) == 0.0);
    CHECK(same_pose(back.samples[i].pose, ds.samples[i].pose));
    CHECK(same_pose(back.samples[i].init_pose, ds.samples[i].init_pose));
    REQUIRE(back.samples[i].image.has_value());
    REQUIRE(back.samples[i].feature_map.has_value());
    CHECK(max_abs_diff(*back.samples[i].image, *ds.samples[i].image) == 0.0);
    CHECK(max_abs_diff(*back.samples[i].feature_map, *ds.samples[i].feature_map) == 0.0);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("datasets without rasters read back with empty optionals") {
  RigidFaceModel face = canonical_face_model();
  const CameraIntrinsics cam = CameraIntrinsics::standard(128.0);
  SynthDataset ds = gen_dataset(face, cam, base_config(2, 22));
  const std::string dir = fresh_dir("bare");
  write_dataset(dir, ds);
  SynthDataset back = read_dataset(dir);
  REQUIRE(back.samples.size() == 2);
  for (const SynthSample& s : back.samples) {
    CHECK_FALSE(s.image.has_value());
    CHECK_FALSE(s.feature_map.has_value());
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("an empty dataset survives the round trip") {
  SynthDataset ds;
  ds.config = base_config(0, 1);
  const std::string dir = fresh_dir("empty");
  write_dataset(dir, ds);
  SynthDataset back = read_dataset(dir);
  CHECK(back.samples.empty());
  std::filesystem::remove_all(dir);
}

TEST_CASE("corrupted dataset files are rejected") {
  RigidFaceModel face = canonical_face_model();
  const CameraIntrinsics cam = CameraIntrinsics::standard(128.0);
  SynthConfig cfg = base_config(2, 23);
  cfg.store_feature_maps = true;
  SynthDataset ds = gen_dataset(face, cam, cfg);
  const std::string dir = fresh_dir("corrupt");
  write_dataset(dir, ds);
  const std::string blob_path = dir + "/samples.spds";
  const std::string blob = slurp(blob_path);

  SECTION("bad magic") {
    std::string bad = blob;
    bad[0] = 'X';
    spit(blob_path, bad);
    CHECK_THROWS_WITH(read_dataset(dir), Catch::Matchers::ContainsSubstring("magic"));
  }
  SECTION("version mismatch") {
    std::string bad = blob;
    bad[4] = static_cast<char>(9);
    spit(blob_path, bad);
    CHECK_THROWS_WITH(read_dataset(dir), Catch::Matchers::ContainsSubstring("version"));
  }
  SECTION("count mismatch") {
    std::string bad = blob;
    bad[8] = static_cast<char>(7);
    spit(blob_path, bad);
    CHECK_THROWS_AS(read_dataset(dir), ParseError);
  }
  SECTION("truncated file") {
    spit(blob_path, blob.substr(0, blob.size() / 2));
    CHECK_THROWS_AS(read_dataset(dir), ParseError);
  }
  SECTION("offset pointing outside the file") {
    std::string bad = blob;
    // First sample's feature offset lives at table base + 16.
    bad[16 + 16] = static_cast<char>(0xFF);
    bad[16 + 17] = static_cast<char>(0xFF);
    bad[16 + 18] = static_cast<char>(0xFF);
    spit(blob_path, bad);
    CHECK_THROWS_WITH(read_dataset(dir), Catch::Matchers::ContainsSubstring("offset table"));
  }
  SECTION("manifest count disagrees with annotations") {
    nlohmann::json manifest = load_json(dir + "/dataset.json");
    manifest["count"] = 5;
    std::ofstream out(dir + "/dataset.json");
    out << manifest.dump(2);
    out.close();
    CHECK_THROWS_AS(read_dataset(dir), ParseError);
  }
  SECTION("manifest version unsupported") {
    nlohmann::json manifest = load_json(dir + "/dataset.json");
    manifest["version"] = 99;
    std::ofstream out(dir + "/dataset.json");
    out << manifest.dump(2);
    out.close();
    CHECK_THROWS_WITH(read_dataset(dir), Catch::Matchers::ContainsSubstring("version"));
  }
  SECTION("broken annotation line is reported with its number") {
    std::string ann = slurp(dir + "/annotations.jsonl");
    const std::size_t first_newline = ann.find('\n');
    std::string bad = ann.substr(0, first_newline + 1) + "{broken\n";
    spit(dir + "/annotations.jsonl", bad);
    CHECK_THROWS_WITH(read_dataset(dir), Catch::Matchers::ContainsSubstring("line 2"));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("synth config round trips through JSON and rejects unknown keys") {
  SynthConfig cfg = base_config(7, 19);
  cfg.pose_ranges.yaw = 0.5;
  cfg.pose_noise.tz = 0.3;
  cfg.sigma_deform = 2.5;
  cfg.noise_only = true;
  cfg.store_images = true;

  SynthConfig back = synth_config_from_json(synth_config_to_json(cfg), "test");
  CHECK(synth_config_to_json(back) == synth_config_to_json(cfg));

  nlohmann::json bad = synth_config_to_json(cfg);
  bad["sigma"] = 1.0;
  CHECK_THROWS_AS(synth_config_from_json(bad, "test"), ConfigError);

  nlohmann::json bad_nested = synth_config_to_json(cfg);
  bad_nested["pose_ranges"]["spin"] = 1.0;
  CHECK_THROWS_AS(synth_config_from_json(bad_nested, "test"), ConfigError);

  // Omitted keys fall back to defaults.
  SynthConfig partial = synth_config_from_json(nlohmann::json{{"landmarks", 12}}, "test");
  CHECK(partial.landmarks == 12);
  CHECK(partial.image_side == SynthConfig{}.image_side);

  nlohmann::json invalid = synth_config_to_json(cfg);
  invalid["sigma_bump"] = 0.0;
  CHECK_THROWS_AS(synth_config_from_json(invalid, "test"), ConfigError);
}
