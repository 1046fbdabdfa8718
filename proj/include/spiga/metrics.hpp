#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spiga/error.hpp"
#include "spiga/geometry.hpp"
#include "spiga/jsonio.hpp"
#include "spiga/tensor.hpp"

namespace spiga {

enum class NormKind { kInterOcular, kInterPupil, kBox };

inline std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::kInterOcular:
      return "inter_ocular";
    case NormKind::kInterPupil:
      return "inter_pupil";
    case NormKind::kBox:
      return "box";
  }
  throw ContractError("unknown normalization kind");
}

inline NormKind norm_kind_from_string(const std::string& s) {
  if (s == "inter_ocular") return NormKind::kInterOcular;
  if (s == "inter_pupil") return NormKind::kInterPupil;
  if (s == "box") return NormKind::kBox;
  throw ConfigError("unknown normalization '" + s + "' (expected inter_ocular|inter_pupil|box)");
}

// Which face-scale distance divides the raw pixel error. The index pair names
// the two landmarks whose distance defines the scale (unused for box).
struct NormalizationSpec {
  NormKind kind = NormKind::kInterOcular;
  std::array<std::size_t, 2> indices{36, 45};

  static NormalizationSpec inter_ocular(std::size_t a, std::size_t b) {
    return NormalizationSpec{NormKind::kInterOcular, {a, b}};
  }
  static NormalizationSpec inter_pupil(std::size_t a, std::size_t b) {
    return NormalizationSpec{NormKind::kInterPupil, {a, b}};
  }
  static NormalizationSpec box() { return NormalizationSpec{NormKind::kBox, {0, 0}}; }

  static NormalizationSpec for_model(const RigidFaceModel& m, NormKind kind) {
    switch (kind) {
      case NormKind::kInterOcular:
        return inter_ocular(m.outer_eyes[0], m.outer_eyes[1]);
      case NormKind::kInterPupil:
        return inter_pupil(m.pupils[0], m.pupils[1]);
      case NormKind::kBox:
        return box();
    }
    throw ContractError("unknown normalization kind");
  }
};

// Face-scale normalizer d computed from the ground truth shape.
inline double nme_normalizer(const Tensor& truth, const NormalizationSpec& spec) {
  const std::size_t n = truth.rows();
  double d = 0.0;
  if (spec.kind == NormKind::kBox) {
    double min_x = truth(0, 0), max_x = truth(0, 0), min_y = truth(0, 1), max_y = truth(0, 1);
    for (std::size_t l = 1; l < n; ++l) {
      min_x = std::min(min_x, truth(l, 0));
      max_x = std::max(max_x, truth(l, 0));
      min_y = std::min(min_y, truth(l, 1));
      max_y = std::max(max_y, truth(l, 1));
    }
    d = std::sqrt((max_x - min_x) * (max_y - min_y));
  } else {
    const std::size_t a = spec.indices[0], b = spec.indices[1];
    if (a >= n || b >= n)
      throw ContractError("normalization landmark index out of range for L=" + std::to_string(n));
    const double dx = truth(a, 0) - truth(b, 0);
    const double dy = truth(a, 1) - truth(b, 1);
    d = std::sqrt(dx * dx + dy * dy);
  }
  if (!(d > 0.0)) throw DegenerateInputError("degenerate truth shape: normalizer is not positive");
  return d;
}

// Mean per-landmark Euclidean error over the face-scale normalizer, percent.
// The per-landmark mean (division by L) follows the universal convention.
inline double per_image_nme(const Tensor& pred, const Tensor& truth,
                            const NormalizationSpec& spec) {
  if (!pred.same_shape(truth) || pred.cols() != 2)
    throw DimensionError("per_image_nme shapes must be equal Lx2, got " + pred.shape_string() +
                         " vs " + truth.shape_string());
  const double d = nme_normalizer(truth, spec);
  const std::size_t n = pred.rows();
  double sum = 0.0;
  for (std::size_t l = 0; l < n; ++l)
    sum += std::hypot(pred(l, 0) - truth(l, 0), pred(l, 1) - truth(l, 1));
  return 100.0 * sum / (static_cast<double>(n) * d);
}

// Empirical CED: the sorted per-image NMEs.
struct CEDCurve {
  std::vector<double> sorted_nmes;

  static CEDCurve from_errors(std::vector<double> nmes) {
    std::sort(nmes.begin(), nmes.end());
    return CEDCurve{std::move(nmes)};
  }
  std::size_t count() const { return sorted_nmes.size(); }
};

// Failure rate: percentage of images with NME strictly above the threshold.
inline double fr(const CEDCurve& ced, double threshold) {
  if (ced.count() == 0) throw EmptyInputError("fr on an empty CED curve");
  if (!(threshold > 0.0)) throw ContractError("fr threshold must be positive");
  std::size_t failures = 0;
  for (double v : ced.sorted_nmes)
    if (v > threshold) ++failures;
  return 100.0 * static_cast<double>(failures) / static_cast<double>(ced.count());
}

// Area under the empirical CED step function on [0, threshold], as a
// percentage of the full rectangle. Exact step integration, no trapezoids.
inline double auc(const CEDCurve& ced, double threshold) {
  const std::size_t n = ced.count();
  if (n == 0) throw EmptyInputError("auc on an empty CED curve");
  if (!(threshold > 0.0)) throw ContractError("auc threshold must be positive");
  // CED(e) = k/n on [v_k, v_{k+1}); integrate segment by segment.
  double area = 0.0;
  double prev = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double v = std::min(ced.sorted_nmes[k], threshold);
    if (v > prev) area += (v - prev) * (static_cast<double>(k) / static_cast<double>(n));
    prev = std::max(prev, v);
    if (ced.sorted_nmes[k] >= threshold) break;
  }
  if (prev < threshold) {
    // fraction of samples at or below the threshold
    std::size_t k = 0;
    while (k < n && ced.sorted_nmes[k] <= threshold) ++k;
    area += (threshold - prev) * (static_cast<double>(k) / static_cast<double>(n));
  }
  return 100.0 * area / threshold;
}

// Nearest-rank 90th percentile of the per-image NMEs.
inline double npe90(const CEDCurve& ced) {
  const std::size_t n = ced.count();
  if (n == 0) throw EmptyInputError("npe90 on an empty CED curve");
  const std::size_t rank = static_cast<std::size_t>(
      std::ceil(0.9 * static_cast<double>(n)));
  return ced.sorted_nmes[rank - 1];
}

// --- file-level evaluation ----------------------------------------------------

struct LandmarkRecord {
  std::string id;
  Tensor landmarks;  // L x 2
  std::optional<std::string> subset;
  std::optional<HeadPose> pose;
};

inline LandmarkRecord landmark_record_from_json(const nlohmann::json& j, const std::string& where) {
  // Structural problems in a data file are parse errors, not config errors.
  try {
    reject_unknown_keys(j, {"id", "landmarks", "subset", "pose"}, where);
  } catch (const ConfigError& e) {
    throw ParseError(e.what());
  }
  LandmarkRecord r;
  if (!j.contains("id") || !j.at("id").is_string())
    throw ParseError(where + ": missing or non-string 'id'");
  r.id = j.at("id").get<std::string>();
  if (!j.contains("landmarks")) throw ParseError(where + ": missing 'landmarks'");
  const auto& lms = j.at("landmarks");
  if (!lms.is_array() || lms.empty()) throw ParseError(where + ": 'landmarks' must be a non-empty array");
  r.landmarks = Tensor::zeros({lms.size(), 2});
  for (std::size_t l = 0; l < lms.size(); ++l) {
    if (!lms[l].is_array() || lms[l].size() != 2)
      throw ParseError(where + ": landmark " + std::to_string(l) + " is not [x,y]");
    r.landmarks(l, 0) = lms[l][0].get<double>();
    r.landmarks(l, 1) = lms[l][1].get<double>();
  }
  if (j.contains("subset")) r.subset = j.at("subset").get<std::string>();
  if (j.contains("pose")) {
    const auto& p = j.at("pose");
    if (!p.is_array() || p.size() != 6) throw ParseError(where + ": 'pose' must have 6 entries");
    r.pose = HeadPose::from_array({p[0].get<double>(), p[1].get<double>(), p[2].get<double>(),
                                   p[3].get<double>(), p[4].get<double>(), p[5].get<double>()});
  }
  return r;
}

inline nlohmann::json landmark_record_to_json(const LandmarkRecord& r) {
  nlohmann::json lms = nlohmann::json::array();
  for (std::size_t l = 0; l < r.landmarks.rows(); ++l)
    lms.push_back({r.landmarks(l, 0), r.landmarks(l, 1)});
  nlohmann::json j{{"id", r.id}, {"landmarks", lms}};
  if (r.subset) j["subset"] = *r.subset;
  if (r.pose) {
    auto a = r.pose->to_array();
    j["pose"] = std::vector<double>(a.begin(), a.end());
  }
  return j;
}

inline std::vector<LandmarkRecord> read_landmark_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<LandmarkRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw ParseError(path + " line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(landmark_record_from_json(j, path + " line " + std::to_string(line_no)));
  }
  return out;
}

struct SubsetReport {
  std::size_t count = 0;
  double nme = 0.0;
  double auc = 0.0;
  double fr = 0.0;
  double npe90 = 0.0;
};

struct MetricsReport {
  std::size_t count = 0;
  double nme = 0.0;   // mean per-image NME, percent
  double auc = 0.0;
  double fr = 0.0;
  double npe90 = 0.0;
  double threshold = 10.0;
  std::string normalization;
  std::optional<PoseMae> pose;
  std::map<std::string, SubsetReport> subsets;
  std::vector<double> sorted_nmes;  // the CED support, for export
};

inline MetricsReport evaluate_records(const std::vector<LandmarkRecord>& preds,
                                      const std::vector<LandmarkRecord>& truths,
                                      const NormalizationSpec& spec, double threshold) {
  if (truths.empty()) throw EmptyInputError("evaluate_records with empty truth set");
  std::map<std::string, const LandmarkRecord*> pred_by_id;
  for (const auto& p : preds) {
    if (!pred_by_id.emplace(p.id, &p).second)
      throw ParseError("duplicate prediction id '" + p.id + "'");
  }
  std::vector<std::string> missing, extra;
  std::map<std::string, const LandmarkRecord*> truth_by_id;
  for (const auto& t : truths) {
    if (!truth_by_id.emplace(t.id, &t).second)
      throw ParseError("duplicate truth id '" + t.id + "'");
    if (!pred_by_id.count(t.id)) missing.push_back(t.id);
  }
  for (const auto& p : preds)
    if (!truth_by_id.count(p.id)) extra.push_back(p.id);
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "prediction/truth id mismatch;";
    if (!missing.empty()) {
      msg += " missing predictions for:";
      for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 5); ++i) msg += " " + missing[i];
      if (missing.size() > 5) msg += " (+" + std::to_string(missing.size() - 5) + " more)";
    }
    if (!extra.empty()) {
      msg += " extra predictions:";
      for (std::size_t i = 0; i < std::min<std::size_t>(extra.size(), 5); ++i) msg += " " + extra[i];
      if (extra.size() > 5) msg += " (+" + std::to_string(extra.size() - 5) + " more)";
    }
    throw ParseError(msg);
  }

  MetricsReport report;
  report.threshold = threshold;
  report.normalization = to_string(spec.kind);
  std::map<std::string, std::vector<double>> subset_errors;
  std::vector<double> errors;
  std::vector<HeadPose> pred_poses, truth_poses;
  for (const auto& t : truths) {
    const LandmarkRecord& p = *pred_by_id.at(t.id);
    const double e = per_image_nme(p.landmarks, t.landmarks, spec);
    errors.push_back(e);
    if (t.subset) subset_errors[*t.subset].push_back(e);
    if (t.pose && p.pose) {
      pred_poses.push_back(*p.pose);
      truth_poses.push_back(*t.pose);
    }
  }
  CEDCurve ced = CEDCurve::from_errors(errors);
  report.count = ced.count();
  double mean = 0.0;
  for (double e : ced.sorted_nmes) mean += e;
  report.nme = mean / static_cast<double>(ced.count());
  report.auc = auc(ced, threshold);
  report.fr = fr(ced, threshold);
  report.npe90 = npe90(ced);
  report.sorted_nmes = ced.sorted_nmes;
  if (!truth_poses.empty()) report.pose = pose_mae(pred_poses, truth_poses);
  for (auto& [name, errs] : subset_errors) {
    CEDCurve sub = CEDCurve::from_errors(errs);
    SubsetReport sr;
    sr.count = sub.count();
    double m = 0.0;
    for (double e : sub.sorted_nmes) m += e;
    sr.nme = m / static_cast<double>(sub.count());
    sr.auc = auc(sub, threshold);
    sr.fr = fr(sub, threshold);
    sr.npe90 = npe90(sub);
    report.subsets[name] = sr;
  }
  return report;
}

inline MetricsReport evaluate_files(const std::string& pred_path, const std::string& truth_path,
                                    const NormalizationSpec& spec, double threshold) {
  return evaluate_records(read_landmark_file(pred_path), read_landmark_file(truth_path), spec,
                          threshold);
}

inline nlohmann::json metrics_report_to_json(const MetricsReport& r) {
  nlohmann::json j{{"count", r.count},   {"nme", r.nme},
                   {"auc", r.auc},       {"fr", r.fr},
                   {"npe90", r.npe90},   {"threshold", r.threshold},
                   {"normalization", r.normalization}};
  if (r.pose) {
    j["pose_mae"] = {{"yaw_deg", r.pose->yaw_deg}, {"pitch_deg", r.pose->pitch_deg},
                     {"roll_deg", r.pose->roll_deg}, {"mean_deg", r.pose->mean_deg},
                     {"tx", r.pose->tx},             {"ty", r.pose->ty},
                     {"tz", r.pose->tz}};
  }
  for (const auto& [name, s] : r.subsets)
    j["subsets"][name] = {{"count", s.count}, {"nme", s.nme}, {"auc", s.auc},
                          {"fr", s.fr},       {"npe90", s.npe90}};
  return j;
}

// CED CSV export: one "error,fraction" row per sorted NME.
inline std::string ced_to_csv(const std::vector<double>& sorted_nmes) {
  std::string out = "error,fraction\n";
  const std::size_t n = sorted_nmes.size();
  char buf[64];
  for (std::size_t k = 0; k < n; ++k) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", sorted_nmes[k],
                  static_cast<double>(k + 1) / static_cast<double>(n));
    out += buf;
  }
  return out;
}

}  // namespace spiga
