#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spiga/error.hpp"
#include "spiga/geometry.hpp"
#include "spiga/jsonio.hpp"
#include "spiga/rng.hpp"
#include "spiga/tensor.hpp"

namespace spiga {

struct PoseRanges {
  double yaw = 0.35;    // radians, drawn uniform in +/- range
  double pitch = 0.25;
  double roll = 0.25;
  double txy = 0.2;     // model units, +/- range for tx and ty
  double tz_min = 3.5;
  double tz_max = 5.0;

  void validate() const {
    if (yaw < 0 || pitch < 0 || roll < 0 || txy < 0) throw ConfigError("pose ranges must be >= 0");
    if (!(tz_min > 0) || !(tz_max >= tz_min)) throw ConfigError("need 0 < tz_min <= tz_max");
  }
};

// Uniform +/- perturbation applied to the true pose to produce the pose the
// cascade is initialized from (the annotation-fit pose is never exact).
struct PoseNoise {
  double angle = 0.08;  // radians, per angle
  double txy = 0.05;    // model units
  double tz = 0.2;

  void validate() const {
    if (angle < 0 || txy < 0 || tz < 0) throw ConfigError("pose noise must be >= 0");
  }
};

struct SynthConfig {
  std::size_t landmarks = 68;
  std::size_t image_side = 256;
  std::size_t feature_side = 64;
  std::size_t channels = 6;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  PoseRanges pose_ranges;
  PoseNoise pose_noise;
  double sigma_deform = 4.0;   // per-landmark deformation, image pixels
  double sigma_bump = 2.0;     // feature bump width, feature-map pixels
  double feature_noise = 0.05;
  bool noise_only = false;     // negative control: no appearance signal
  bool store_images = false;
  bool store_feature_maps = false;

  void validate() const {
    if (landmarks < 2) throw ConfigError("synth data needs at least 2 landmarks");
    if (image_side < 8 || feature_side < 8) throw ConfigError("sides must be >= 8");
    if (channels < 1) throw ConfigError("need at least one feature channel");
    if (sigma_deform < 0) throw ConfigError("sigma_deform must be >= 0");
    if (!(sigma_bump > 0)) throw ConfigError("sigma_bump must be > 0");
    if (feature_noise < 0) throw ConfigError("feature_noise must be >= 0");
    pose_ranges.validate();
    pose_noise.validate();
  }
};

struct SynthSample {
  std::string id;
  Tensor landmarks;   // L x 2, image-pixel coordinates
  HeadPose pose;      // true pose
  HeadPose init_pose; // perturbed pose the cascade starts from
  std::optional<Tensor> image;        // 3 x S x S
  std::optional<Tensor> feature_map;  // C x F x F
};

struct SynthDataset {
  SynthConfig config;
  std::vector<SynthSample> samples;
};

// --- JSON (de)serialization of the generator config -------------------------

inline nlohmann::json synth_config_to_json(const SynthConfig& c) {
  return nlohmann::json{
      {"landmarks", c.landmarks},
      {"image_side", c.image_side},
      {"feature_side", c.feature_side},
      {"channels", c.channels},
      {"count", c.count},
      {"seed", c.seed},
      {"pose_ranges",
       {{"yaw", c.pose_ranges.yaw},
        {"pitch", c.pose_ranges.pitch},
        {"roll", c.pose_ranges.roll},
        {"txy", c.pose_ranges.txy},
        {"tz_min", c.pose_ranges.tz_min},
        {"tz_max", c.pose_ranges.tz_max}}},
      {"pose_noise",
       {{"angle", c.pose_noise.angle}, {"txy", c.pose_noise.txy}, {"tz", c.pose_noise.tz}}},
      {"sigma_deform", c.sigma_deform},
      {"sigma_bump", c.sigma_bump},
      {"feature_noise", c.feature_noise},
      {"noise_only", c.noise_only},
      {"store_images", c.store_images},
      {"store_feature_maps", c.store_feature_maps}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j, const std::string& context) {
  reject_unknown_keys(j,
                      {"landmarks", "image_side", "feature_side", "channels", "count", "seed",
                       "pose_ranges", "pose_noise", "sigma_deform", "sigma_bump", "feature_noise",
                       "noise_only", "store_images", "store_feature_maps"},
                      context);
  SynthConfig c;
  c.landmarks = json_get_or<std::size_t>(j, "landmarks", context, c.landmarks);
  c.image_side = json_get_or<std::size_t>(j, "image_side", context, c.image_side);
  c.feature_side = json_get_or<std::size_t>(j, "feature_side", context, c.feature_side);
  c.channels = json_get_or<std::size_t>(j, "channels", context, c.channels);
  c.count = json_get_or<std::size_t>(j, "count", context, c.count);
  c.seed = json_get_or<std::uint64_t>(j, "seed", context, c.seed);
  if (j.contains("pose_ranges")) {
    const auto& p = j.at("pose_ranges");
    reject_unknown_keys(p, {"yaw", "pitch", "roll", "txy", "tz_min", "tz_max"},
                        context + ".pose_ranges");
    c.pose_ranges.yaw = json_get_or<double>(p, "yaw", context, c.pose_ranges.yaw);
    c.pose_ranges.pitch = json_get_or<double>(p, "pitch", context, c.pose_ranges.pitch);
    c.pose_ranges.roll = json_get_or<double>(p, "roll", context, c.pose_ranges.roll);
    c.pose_ranges.txy = json_get_or<double>(p, "txy", context, c.pose_ranges.txy);
    c.pose_ranges.tz_min = json_get_or<double>(p, "tz_min", context, c.pose_ranges.tz_min);
    c.pose_ranges.tz_max = json_get_or<double>(p, "tz_max", context, c.pose_ranges.tz_max);
  }
  if (j.contains("pose_noise")) {
    const auto& p = j.at("pose_noise");
    reject_unknown_keys(p, {"angle", "txy", "tz"}, context + ".pose_noise");
    c.pose_noise.angle = json_get_or<double>(p, "angle", context, c.pose_noise.angle);
    c.pose_noise.txy = json_get_or<double>(p, "txy", context, c.pose_noise.txy);
    c.pose_noise.tz = json_get_or<double>(p, "tz", context, c.pose_noise.tz);
  }
  c.sigma_deform = json_get_or<double>(j, "sigma_deform", context, c.sigma_deform);
  c.sigma_bump = json_get_or<double>(j, "sigma_bump", context, c.sigma_bump);
  c.feature_noise = json_get_or<double>(j, "feature_noise", context, c.feature_noise);
  c.noise_only = json_get_or<bool>(j, "noise_only", context, c.noise_only);
  c.store_images = json_get_or<bool>(j, "store_images", context, c.store_images);
  c.store_feature_maps = json_get_or<bool>(j, "store_feature_maps", context, c.store_feature_maps);
  c.validate();
  return c;
}

// --- generation --------------------------------------------------------------

namespace detail {

// Deformation correlated along the landmark index: white noise smoothed with a
// small Gaussian kernel normalized to preserve variance, so nearby landmarks
// shift coherently (expression-like) while the marginal stays N(0, sigma^2).
inline std::vector<double> correlated_noise(Rng& rng, std::size_t n, double sigma) {
  std::vector<double> white(n);
  for (double& v : white) v = rng.normal();
  static const int radius = 3;
  double kernel[2 * radius + 1];
  double sum_sq = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[k + radius] = std::exp(-0.5 * (k * k) / (1.5 * 1.5));
    sum_sq += kernel[k + radius] * kernel[k + radius];
  }
  const double norm = 1.0 / std::sqrt(sum_sq);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int k = -radius; k <= radius; ++k) {
      long j = static_cast<long>(i) + k;
      if (j < 0 || j >= static_cast<long>(n)) continue;
      acc += kernel[k + radius] * white[static_cast<std::size_t>(j)];
    }
    out[i] = acc * norm * sigma;
  }
  return out;
}

inline HeadPose draw_pose(Rng& rng, const PoseRanges& r) {
  HeadPose p;
  p.yaw = rng.uniform(-r.yaw, r.yaw);
  p.pitch = rng.uniform(-r.pitch, r.pitch);
  p.roll = rng.uniform(-r.roll, r.roll);
  p.tx = rng.uniform(-r.txy, r.txy);
  p.ty = rng.uniform(-r.txy, r.txy);
  p.tz = rng.uniform(r.tz_min, r.tz_max);
  return p;
}

inline HeadPose perturb_pose(Rng& rng, const HeadPose& p, const PoseNoise& n) {
  HeadPose q = p;
  q.yaw += rng.uniform(-n.angle, n.angle);
  q.pitch += rng.uniform(-n.angle, n.angle);
  q.roll += rng.uniform(-n.angle, n.angle);
  q.tx += rng.uniform(-n.txy, n.txy);
  q.ty += rng.uniform(-n.txy, n.txy);
  q.tz += rng.uniform(-n.tz, n.tz);
  return q;
}

inline void splat_gaussian(Tensor& map, std::size_t channel, double cx, double cy, double sigma,
                           double amplitude) {
  const std::size_t h = map.shape[1], w = map.shape[2];
  const long radius = static_cast<long>(std::ceil(4.0 * sigma));
  const long x0 = std::max<long>(0, static_cast<long>(std::floor(cx)) - radius);
  const long x1 = std::min<long>(static_cast<long>(w) - 1, static_cast<long>(std::ceil(cx)) + radius);
  const long y0 = std::max<long>(0, static_cast<long>(std::floor(cy)) - radius);
  const long y1 = std::min<long>(static_cast<long>(h) - 1, static_cast<long>(std::ceil(cy)) + radius);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (long y = y0; y <= y1; ++y)
    for (long x = x0; x <= x1; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      map.v[(channel * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)] +=
          amplitude * std::exp(-(dx * dx + dy * dy) * inv);
    }
}

}  // namespace detail

// Feature map the cascade reads: per-landmark Gaussian bumps at the (rescaled)
// true positions, identity-coded by channel (landmark l lives in channel
// l mod C), plus i.i.d. noise. In noise_only mode the bumps are skipped, so
// the map carries no information about the shape.
inline Tensor gen_feature_map(const Tensor& truth_landmarks, const SynthConfig& cfg, Rng& rng) {
  Tensor map = Tensor::zeros({cfg.channels, cfg.feature_side, cfg.feature_side});
  if (cfg.feature_noise > 0.0)
    for (double& v : map.v) v = rng.normal(0.0, cfg.feature_noise);
  if (!cfg.noise_only) {
    const double scale = static_cast<double>(cfg.feature_side) / static_cast<double>(cfg.image_side);
    for (std::size_t l = 0; l < truth_landmarks.rows(); ++l)
      detail::splat_gaussian(map, l % cfg.channels, truth_landmarks(l, 0) * scale,
                             truth_landmarks(l, 1) * scale, cfg.sigma_bump, 1.0);
  }
  return map;
}

// Input image for the backbone path: blobs at the true landmarks on all three
// channels (identity-coded by intensity) plus background noise.
inline Tensor gen_image(const Tensor& truth_landmarks, const SynthConfig& cfg, Rng& rng) {
  Tensor img = Tensor::zeros({3, cfg.image_side, cfg.image_side});
  if (cfg.feature_noise > 0.0)
    for (double& v : img.v) v = rng.normal(0.0, cfg.feature_noise);
  if (!cfg.noise_only) {
    const double sigma = cfg.sigma_bump * static_cast<double>(cfg.image_side) /
                         static_cast<double>(cfg.feature_side);
    for (std::size_t l = 0; l < truth_landmarks.rows(); ++l) {
      const double amp = 0.5 + 0.5 * static_cast<double>(l % 3 + 1) / 3.0;
      detail::splat_gaussian(img, l % 3, truth_landmarks(l, 0), truth_landmarks(l, 1), sigma, amp);
    }
  }
  return img;
}

// One sample: a posed rigid shape plus correlated non-rigid deformation. The
// pose is redrawn (bounded retries) until every deformed landmark lies inside
// the image with a small margin.
inline SynthSample gen_sample(const RigidFaceModel& model, const CameraIntrinsics& cam,
                              const SynthConfig& cfg, Rng& rng, const std::string& id) {
  if (model.landmark_count() != cfg.landmarks)
    throw DimensionError("synth config landmarks " + std::to_string(cfg.landmarks) +
                         " do not match model L=" + std::to_string(model.landmark_count()));
  const double margin = cfg.sigma_deform + 2.0;
  const int max_retries = 200;
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    HeadPose pose = detail::draw_pose(rng, cfg.pose_ranges);
    Tensor truth;
    try {
      truth = project(model, pose, cam);
    } catch (const BehindCameraError&) {
      continue;
    }
    std::vector<double> dx = detail::correlated_noise(rng, cfg.landmarks, cfg.sigma_deform);
    std::vector<double> dy = detail::correlated_noise(rng, cfg.landmarks, cfg.sigma_deform);
    bool inside = true;
    for (std::size_t l = 0; l < cfg.landmarks && inside; ++l) {
      truth(l, 0) += dx[l];
      truth(l, 1) += dy[l];
      inside = truth(l, 0) >= margin && truth(l, 0) <= cfg.image_side - margin &&
               truth(l, 1) >= margin && truth(l, 1) <= cfg.image_side - margin;
    }
    if (!inside) continue;
    SynthSample s;
    s.id = id;
    s.landmarks = std::move(truth);
    s.pose = pose;
    s.init_pose = detail::perturb_pose(rng, pose, cfg.pose_noise);
    if (s.init_pose.tz <= 0.5) s.init_pose.tz = 0.5;  // keep the init in front of the camera
    if (cfg.store_images) s.image = gen_image(s.landmarks, cfg, rng);
    if (cfg.store_feature_maps) s.feature_map = gen_feature_map(s.landmarks, cfg, rng);
    return s;
  }
  throw DegenerateInputError("could not draw an in-bounds sample after " +
                             std::to_string(max_retries) + " retries; ranges too wide?");
}

// Generation is a pure function of (config, seed): each sample consumes its own
// derived RNG stream, so the dataset is independent of iteration order.
inline SynthDataset gen_dataset(const RigidFaceModel& model, const CameraIntrinsics& cam,
                                const SynthConfig& cfg) {
  cfg.validate();
  SynthDataset ds;
  ds.config = cfg;
  ds.samples.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    Rng rng(derive_seed(cfg.seed, i, 0xDA7A));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%06zu", i);
    ds.samples.push_back(gen_sample(model, cam, cfg, rng, buf));
  }
  return ds;
}

// --- persistence --------------------------------------------------------------
//
// A dataset directory holds:
//   dataset.json       manifest: format version + generator config + count
//   annotations.jsonl  one JSON object per sample: id, landmarks, poses
//   samples.spds       binary blob with optional per-sample image/feature data
//
// Blob layout (all integers little-endian): magic "SPDS", u32 version, u64
// count, then a table of count x 4 u64 (image offset, image doubles, feature
// offset, feature doubles), then raw f64 payloads at the recorded offsets.

inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint32_t get_u32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(const std::string& s, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}
inline void put_doubles(std::string& out, const std::vector<double>& v) {
  const std::size_t bytes = v.size() * sizeof(double);
  const std::size_t at = out.size();
  out.resize(at + bytes);
  std::memcpy(out.data() + at, v.data(), bytes);
}

}  // namespace detail

inline nlohmann::json sample_annotation_to_json(const SynthSample& s) {
  nlohmann::json lms = nlohmann::json::array();
  for (std::size_t l = 0; l < s.landmarks.rows(); ++l)
    lms.push_back({s.landmarks(l, 0), s.landmarks(l, 1)});
  auto pose_arr = [](const HeadPose& p) {
    auto a = p.to_array();
    return nlohmann::json(std::vector<double>(a.begin(), a.end()));
  };
  return nlohmann::json{
      {"id", s.id}, {"landmarks", lms}, {"pose", pose_arr(s.pose)}, {"init_pose", pose_arr(s.init_pose)}};
}

inline void write_dataset(const std::string& dir, const SynthDataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json manifest{{"version", kDatasetVersion},
                          {"config", synth_config_to_json(ds.config)},
                          {"count", ds.samples.size()},
                          {"files", {{"annotations", "annotations.jsonl"}, {"blob", "samples.spds"}}}};
  write_file_atomic(dir + "/dataset.json", manifest.dump(2) + "\n");

  std::string ann;
  for (const SynthSample& s : ds.samples) ann += sample_annotation_to_json(s).dump() + "\n";
  write_file_atomic(dir + "/annotations.jsonl", ann);

  std::string blob = "SPDS";
  detail::put_u32(blob, kDatasetVersion);
  detail::put_u64(blob, ds.samples.size());
  const std::size_t table_at = blob.size();
  for (std::size_t i = 0; i < ds.samples.size() * 4; ++i) detail::put_u64(blob, 0);
  std::vector<std::uint64_t> table;
  table.reserve(ds.samples.size() * 4);
  for (const SynthSample& s : ds.samples) {
    if (s.image) {
      table.push_back(blob.size());
      table.push_back(s.image->size());
      detail::put_doubles(blob, s.image->v);
    } else {
      table.push_back(0);
      table.push_back(0);
    }
    if (s.feature_map) {
      table.push_back(blob.size());
      table.push_back(s.feature_map->size());
      detail::put_doubles(blob, s.feature_map->v);
    } else {
      table.push_back(0);
      table.push_back(0);
    }
  }
  for (std::size_t i = 0; i < table.size(); ++i) {
    std::string enc;
    detail::put_u64(enc, table[i]);
    blob.replace(table_at + 8 * i, 8, enc);
  }
  write_file_atomic(dir + "/samples.spds", blob);
}

inline SynthDataset read_dataset(const std::string& dir) {
  nlohmann::json manifest = load_json(dir + "/dataset.json");
  reject_unknown_keys(manifest, {"version", "config", "count", "files"}, "dataset manifest");
  const auto version = json_get<std::uint32_t>(manifest, "version", "dataset manifest");
  if (version != kDatasetVersion)
    throw ParseError("dataset version " + std::to_string(version) + " unsupported (expected " +
                     std::to_string(kDatasetVersion) + ")");
  SynthDataset ds;
  ds.config = synth_config_from_json(manifest.at("config"), "dataset config");
  const auto count = json_get<std::size_t>(manifest, "count", "dataset manifest");

  std::ifstream ann(dir + "/annotations.jsonl");
  if (!ann) throw IoError("cannot open " + dir + "/annotations.jsonl");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw ParseError("annotations.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    SynthSample s;
    s.id = json_get<std::string>(j, "id", "annotation");
    const auto& lms = j.at("landmarks");
    s.landmarks = Tensor::zeros({lms.size(), 2});
    for (std::size_t l = 0; l < lms.size(); ++l) {
      s.landmarks(l, 0) = lms[l][0].get<double>();
      s.landmarks(l, 1) = lms[l][1].get<double>();
    }
    auto pose_from = [&](const char* key) {
      const auto& a = j.at(key);
      if (a.size() != 6) throw ParseError(std::string(key) + " must have 6 entries");
      return HeadPose::from_array({a[0].get<double>(), a[1].get<double>(), a[2].get<double>(),
                                   a[3].get<double>(), a[4].get<double>(), a[5].get<double>()});
    };
    s.pose = pose_from("pose");
    s.init_pose = pose_from("init_pose");
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.size() != count)
    throw ParseError("dataset manifest promises " + std::to_string(count) + " samples, found " +
                     std::to_string(ds.samples.size()));

  std::ifstream blob_in(dir + "/samples.spds", std::ios::binary);
  if (!blob_in) throw IoError("cannot open " + dir + "/samples.spds");
  std::stringstream ss;
  ss << blob_in.rdbuf();
  const std::string blob = ss.str();
  if (blob.size() < 16 || blob.compare(0, 4, "SPDS") != 0)
    throw ParseError("samples.spds: bad magic (expected SPDS)");
  if (detail::get_u32(blob, 4) != kDatasetVersion)
    throw ParseError("samples.spds: version mismatch");
  if (detail::get_u64(blob, 8) != count) throw ParseError("samples.spds: sample count mismatch");
  const std::size_t table_at = 16;
  if (blob.size() < table_at + count * 32) throw ParseError("samples.spds: truncated offset table");

  auto read_block = [&](std::uint64_t offset, std::uint64_t doubles,
                        std::vector<std::size_t> shape) -> std::optional<Tensor> {
    if (doubles == 0) return std::nullopt;
    if (Tensor::numel(shape) != doubles)
      throw ParseError("samples.spds: block size " + std::to_string(doubles) +
                       " does not match expected shape");
    if (offset < table_at + count * 32 || offset + doubles * sizeof(double) > blob.size())
      throw ParseError("samples.spds: corrupted offset table (block outside file)");
    std::vector<double> data(doubles);
    std::memcpy(data.data(), blob.data() + offset, doubles * sizeof(double));
    return Tensor(std::move(shape), std::move(data));
  };
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t row = table_at + i * 32;
    ds.samples[i].image =
        read_block(detail::get_u64(blob, row), detail::get_u64(blob, row + 8),
                   {3, ds.config.image_side, ds.config.image_side});
    ds.samples[i].feature_map =
        read_block(detail::get_u64(blob, row + 16), detail::get_u64(blob, row + 24),
                   {ds.config.channels, ds.config.feature_side, ds.config.feature_side});
  }
  return ds;
}

}  // namespace spiga
