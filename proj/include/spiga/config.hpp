#pragma once

#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spiga/backbone.hpp"
#include "spiga/error.hpp"
#include "spiga/jsonio.hpp"
#include "spiga/metrics.hpp"
#include "spiga/regressor.hpp"
#include "spiga/synthdata.hpp"
#include "spiga/training.hpp"

namespace spiga {

inline constexpr std::uint32_t kConfigVersion = 1;

// --- per-module JSON (closed schemas: unknown keys are configuration errors) ---

inline nlohmann::json cascade_config_to_json(const CascadeConfig& c) {
  return {{"landmarks", c.landmarks},
          {"channels", c.channels},
          {"dim", c.dim},
          {"visual_hidden", c.visual_hidden},
          {"gat_layers", c.gat_layers},
          {"crop_side", c.crop_side},
          {"windows", c.schedule.widths},
          {"combine", to_string(c.combine)},
          {"attention", to_string(c.attention)},
          {"scaled_logits", c.scaled_logits},
          {"q_norm", c.q_norm}};
}

inline CascadeConfig cascade_config_from_json(const nlohmann::json& j, const std::string& where) {
  reject_unknown_keys(j,
                      {"landmarks", "channels", "dim", "visual_hidden", "gat_layers", "crop_side",
                       "windows", "combine", "attention", "scaled_logits", "q_norm"},
                      where);
  CascadeConfig c;
  c.landmarks = json_get_or<std::size_t>(j, "landmarks", where, c.landmarks);
  c.channels = json_get_or<std::size_t>(j, "channels", where, c.channels);
  c.dim = json_get_or<std::size_t>(j, "dim", where, c.dim);
  c.visual_hidden = json_get_or<std::size_t>(j, "visual_hidden", where, c.visual_hidden);
  c.gat_layers = json_get_or<std::size_t>(j, "gat_layers", where, c.gat_layers);
  c.crop_side = json_get_or<int>(j, "crop_side", where, c.crop_side);
  if (j.contains("windows")) c.schedule.widths = j.at("windows").get<std::vector<double>>();
  if (j.contains("combine"))
    c.combine = combine_mode_from_string(j.at("combine").get<std::string>());
  if (j.contains("attention"))
    c.attention = attention_mode_from_string(j.at("attention").get<std::string>());
  c.scaled_logits = json_get_or<bool>(j, "scaled_logits", where, c.scaled_logits);
  c.q_norm = json_get_or<double>(j, "q_norm", where, c.q_norm);
  c.validate();
  return c;
}

inline nlohmann::json backbone_config_to_json(const BackboneConfig& c) {
  return {{"stages", c.stages},
          {"channels", c.channels},
          {"input_side", c.input_side},
          {"feature_side", c.feature_side},
          {"landmarks", c.landmarks}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j, const std::string& where) {
  reject_unknown_keys(j, {"stages", "channels", "input_side", "feature_side", "landmarks"}, where);
  BackboneConfig c;
  c.stages = json_get_or<std::size_t>(j, "stages", where, c.stages);
  c.channels = json_get_or<std::size_t>(j, "channels", where, c.channels);
  c.input_side = json_get_or<std::size_t>(j, "input_side", where, c.input_side);
  c.feature_side = json_get_or<std::size_t>(j, "feature_side", where, c.feature_side);
  c.landmarks = json_get_or<std::size_t>(j, "landmarks", where, c.landmarks);
  c.validate();
  return c;
}

inline nlohmann::json augment_config_to_json(const AugmentConfig& c) {
  return {{"enabled", c.enabled},
          {"rotation_deg", rad_to_deg(c.rotation)},
          {"scale_jitter", c.scale_jitter},
          {"translate_frac", c.translate_frac},
          {"flip_prob", c.flip_prob}};
}

inline AugmentConfig augment_config_from_json(const nlohmann::json& j, const std::string& where) {
  reject_unknown_keys(j, {"enabled", "rotation_deg", "scale_jitter", "translate_frac", "flip_prob"},
                      where);
  AugmentConfig c;
  c.enabled = json_get_or<bool>(j, "enabled", where, c.enabled);
  if (j.contains("rotation_deg")) c.rotation = deg_to_rad(j.at("rotation_deg").get<double>());
  c.scale_jitter = json_get_or<double>(j, "scale_jitter", where, c.scale_jitter);
  c.translate_frac = json_get_or<double>(j, "translate_frac", where, c.translate_frac);
  c.flip_prob = json_get_or<double>(j, "flip_prob", where, c.flip_prob);
  c.validate();
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"lr_decay", c.lr_decay},
          {"milestones", c.milestones},
          {"batch", c.batch},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"smooth_l1_beta", c.smooth_l1_beta},
          {"grad_clip", c.grad_clip},
          {"lambda_coord", c.lambda_coord},
          {"lambda_pose", c.lambda_pose},
          {"freeze_backbone", c.freeze_backbone},
          {"augment", augment_config_to_json(c.augment)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& where) {
  reject_unknown_keys(j,
                      {"lr", "lr_decay", "milestones", "batch", "epochs", "seed", "smooth_l1_beta",
                       "grad_clip", "lambda_coord", "lambda_pose", "freeze_backbone", "augment"},
                      where);
  TrainConfig c;
  c.lr = json_get_or<double>(j, "lr", where, c.lr);
  c.lr_decay = json_get_or<double>(j, "lr_decay", where, c.lr_decay);
  if (j.contains("milestones")) c.milestones = j.at("milestones").get<std::vector<std::size_t>>();
  c.batch = json_get_or<std::size_t>(j, "batch", where, c.batch);
  c.epochs = json_get_or<std::size_t>(j, "epochs", where, c.epochs);
  c.seed = json_get_or<std::uint64_t>(j, "seed", where, c.seed);
  c.smooth_l1_beta = json_get_or<double>(j, "smooth_l1_beta", where, c.smooth_l1_beta);
  c.grad_clip = json_get_or<double>(j, "grad_clip", where, c.grad_clip);
  c.lambda_coord = json_get_or<double>(j, "lambda_coord", where, c.lambda_coord);
  c.lambda_pose = json_get_or<double>(j, "lambda_pose", where, c.lambda_pose);
  c.freeze_backbone = json_get_or<bool>(j, "freeze_backbone", where, c.freeze_backbone);
  if (j.contains("augment")) c.augment = augment_config_from_json(j.at("augment"), where + ".augment");
  c.validate();
  return c;
}

struct EvalConfig {
  double threshold = 10.0;  // NME percent for AUC / FR
  NormKind normalization = NormKind::kInterOcular;

  void validate() const {
    if (!(threshold > 0.0)) throw ConfigError("eval threshold must be positive");
  }
};

inline nlohmann::json eval_config_to_json(const EvalConfig& c) {
  return {{"threshold", c.threshold}, {"normalization", to_string(c.normalization)}};
}

inline EvalConfig eval_config_from_json(const nlohmann::json& j, const std::string& where) {
  reject_unknown_keys(j, {"threshold", "normalization"}, where);
  EvalConfig c;
  c.threshold = json_get_or<double>(j, "threshold", where, c.threshold);
  if (j.contains("normalization"))
    c.normalization = norm_kind_from_string(j.at("normalization").get<std::string>());
  c.validate();
  return c;
}

// --- top-level run configuration -----------------------------------------------

struct RunConfig {
  SynthConfig data;
  CascadeConfig model;
  TrainConfig train;
  EvalConfig eval;
  std::optional<BackboneConfig> backbone;

  void validate() const {
    data.validate();
    model.validate();
    train.validate();
    eval.validate();
    if (backbone) backbone->validate();
    if (model.landmarks != data.landmarks)
      throw ConfigError("model landmarks (" + std::to_string(model.landmarks) +
                        ") differ from data landmarks (" + std::to_string(data.landmarks) + ")");
    if (model.channels != data.channels)
      throw ConfigError("model channels (" + std::to_string(model.channels) +
                        ") differ from data channels (" + std::to_string(data.channels) + ")");
    if (backbone) {
      if (backbone->landmarks != model.landmarks)
        throw ConfigError("backbone landmarks (" + std::to_string(backbone->landmarks) +
                          ") differ from model landmarks (" + std::to_string(model.landmarks) + ")");
      if (backbone->channels != model.channels)
        throw ConfigError("backbone channels (" + std::to_string(backbone->channels) +
                          ") differ from model channels (" + std::to_string(model.channels) + ")");
      if (backbone->input_side != data.image_side)
        throw ConfigError("backbone input side (" + std::to_string(backbone->input_side) +
                          ") differs from data image side (" + std::to_string(data.image_side) + ")");
      if (backbone->feature_side != data.feature_side)
        throw ConfigError("backbone feature side (" + std::to_string(backbone->feature_side) +
                          ") differs from data feature side (" + std::to_string(data.feature_side) +
                          ")");
    }
  }
};

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j{{"version", kConfigVersion},
                   {"data", synth_config_to_json(c.data)},
                   {"model", cascade_config_to_json(c.model)},
                   {"train", train_config_to_json(c.train)},
                   {"eval", eval_config_to_json(c.eval)}};
  if (c.backbone) j["backbone"] = backbone_config_to_json(*c.backbone);
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j, const std::string& where) {
  reject_unknown_keys(j, {"version", "data", "model", "train", "eval", "backbone"}, where);
  const auto version = json_get<std::uint32_t>(j, "version", where);
  if (version != kConfigVersion)
    throw ConfigError(where + ": unsupported config version " + std::to_string(version) +
                      " (expected " + std::to_string(kConfigVersion) + ")");
  RunConfig c;
  if (j.contains("data")) c.data = synth_config_from_json(j.at("data"), where + ".data");
  if (j.contains("model")) c.model = cascade_config_from_json(j.at("model"), where + ".model");
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"), where + ".train");
  if (j.contains("eval")) c.eval = eval_config_from_json(j.at("eval"), where + ".eval");
  if (j.contains("backbone"))
    c.backbone = backbone_config_from_json(j.at("backbone"), where + ".backbone");
  c.validate();
  return c;
}

// Loads a run configuration from a JSON file. The SPIGA_SEED environment
// variable, when set, overrides both the data and training seeds so whole
// runs can be re-seeded without editing the file.
inline RunConfig load_run_config(const std::string& path) {
  RunConfig c = run_config_from_json(load_json(path), path);
  if (const char* env = std::getenv("SPIGA_SEED")) {
    char* end = nullptr;
    const unsigned long long parsed = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0')
      throw ConfigError("SPIGA_SEED must be an unsigned integer, got '" + std::string(env) + "'");
    c.data.seed = static_cast<std::uint64_t>(parsed);
    c.train.seed = static_cast<std::uint64_t>(parsed);
  }
  return c;
}

}  // namespace spiga
