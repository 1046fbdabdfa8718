// Command-line front end for the face-alignment pipeline: synthetic dataset
// generation, cascade training, evaluation, rigid pose fitting, metric reports
// on external prediction files, and attention-matrix export. Logs go to
// stderr; machine-readable results go to stdout or to files written
// atomically, so interrupted runs never leave partial outputs behind.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spiga/checkpoint.hpp"
#include "spiga/training.hpp"

using namespace spiga;

namespace {

void log_line(const std::string& msg) { std::cerr << msg << std::endl; }

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_row(const double* row, std::size_t n) {
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += ',';
    out += format_double(row[i]);
  }
  out += '\n';
  return out;
}

RigidFaceModel face_for(const std::string& model3d_path) {
  return model3d_path.empty() ? canonical_face_model() : load_face_model(model3d_path);
}

// --- gen-data -------------------------------------------------------------------

void cmd_gen_data(const std::string& config_path, const std::string& out_dir,
                  const std::string& model3d_path) {
  const RunConfig cfg = load_run_config(config_path);
  const RigidFaceModel face = face_for(model3d_path);
  const CameraIntrinsics cam =
      CameraIntrinsics::standard(static_cast<double>(cfg.data.image_side));
  log_line("generating " + std::to_string(cfg.data.count) + " samples (seed " +
           std::to_string(cfg.data.seed) + ") into " + out_dir);
  const SynthDataset ds = gen_dataset(face, cam, cfg.data);
  std::filesystem::create_directories(out_dir);
  write_dataset(out_dir, ds);
  std::cout << nlohmann::json{{"samples", ds.samples.size()}, {"seed", cfg.data.seed}}.dump()
            << std::endl;
}

// --- train ----------------------------------------------------------------------

void cmd_train(const std::string& config_path, const std::string& data_dir,
               const std::string& out_path, const std::string& log_path,
               const std::string& model3d_path) {
  const RunConfig cfg = load_run_config(config_path);
  const RigidFaceModel face = face_for(model3d_path);
  const SynthDataset ds = read_dataset(data_dir);
  log_line("training on " + std::to_string(ds.samples.size()) + " samples for " +
           std::to_string(cfg.train.epochs) + " epochs (seed " +
           std::to_string(cfg.train.seed) + ")");

  Checkpoint ckpt;
  ckpt.cascade = CascadeModel::init(cfg.model, cfg.train.seed);
  if (cfg.backbone) ckpt.backbone = BackboneModel::init(*cfg.backbone, cfg.train.seed);

  // Mirror augmentation needs the landmark symmetry map; skip deriving it when
  // flips are disabled so asymmetric face models stay usable.
  std::vector<std::size_t> mirror_map;
  if (cfg.train.augment.enabled && cfg.train.augment.flip_prob > 0.0)
    mirror_map = mirror_index_map(face);

  std::string epoch_log;
  const EpochCallback on_epoch = [&](const EpochLog& log) {
    nlohmann::json j{{"epoch", log.epoch},
                     {"lr", log.lr},
                     {"loss", log.loss},
                     {"nme_per_step", log.nme_per_step},
                     {"grad_norm", log.grad_norm}};
    epoch_log += j.dump() + "\n";
    std::string nme;
    for (double v : log.nme_per_step) nme += (nme.empty() ? "" : " ") + format_double(v);
    log_line("epoch " + std::to_string(log.epoch + 1) + "/" + std::to_string(cfg.train.epochs) +
             "  lr " + format_double(log.lr) + "  loss " + format_double(log.loss) + "  nme [" +
             nme + "]");
  };

  const TrainResult result =
      train_cascade(ckpt.cascade, face, ds, cfg.train, mirror_map, on_epoch,
                    ckpt.backbone ? &*ckpt.backbone : nullptr);

  const double final_loss = result.epochs.back().loss;
  if (!std::isfinite(final_loss))
    throw NumericError("training diverged: final loss is not finite (" +
                       format_double(final_loss) + ")");

  save_checkpoint(out_path, ckpt);
  write_file_atomic(log_path.empty() ? out_path + ".train.jsonl" : log_path, epoch_log);
  std::cout << nlohmann::json{{"epochs", result.epochs.size()},
                              {"final_loss", final_loss},
                              {"checkpoint", out_path}}
                   .dump()
            << std::endl;
}

// --- eval -----------------------------------------------------------------------

std::string records_to_jsonl(const std::vector<LandmarkRecord>& records) {
  std::string lines;
  for (const LandmarkRecord& r : records) lines += landmark_record_to_json(r).dump() + "\n";
  return lines;
}

void cmd_eval(const std::string& ckpt_path, const std::string& data_dir, bool steps_table,
              const std::string& norm_name, double threshold, bool fit_poses,
              const std::string& report_path, const std::string& pred_path,
              const std::string& truth_path, const std::string& model3d_path) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const RigidFaceModel face = face_for(model3d_path);
  const SynthDataset ds = read_dataset(data_dir);
  log_line("evaluating " + std::to_string(ds.samples.size()) + " samples with " +
           std::to_string(ckpt.cascade.config.steps()) + " cascade steps" +
           (ckpt.backbone ? " (backbone features)" : ""));
  EvalOutput ev =
      evaluate_cascade(ckpt.cascade, face, ds, ckpt.backbone ? &*ckpt.backbone : nullptr);

  if (fit_poses) {
    const CameraIntrinsics cam =
        CameraIntrinsics::standard(static_cast<double>(ds.config.image_side));
    std::size_t stray = 0;
    for (LandmarkRecord& pred : ev.predictions) {
      const FitResult fit = fit_pose(face, pred.landmarks, cam);
      if (!fit.converged) ++stray;
      pred.pose = fit.pose;
    }
    if (stray > 0)
      log_line("warning: pose fit did not converge on " + std::to_string(stray) + " samples");
  }

  const NormalizationSpec spec =
      NormalizationSpec::for_model(face, norm_kind_from_string(norm_name));
  const MetricsReport report = evaluate_records(ev.predictions, ev.truths, spec, threshold);
  const std::string report_text = metrics_report_to_json(report).dump(2) + "\n";

  if (steps_table) {
    // One row per cascade length, step 0 being the rigid initialization.
    std::printf("step  %10s  %10s  %10s\n", "nme", ("auc@" + format_double(threshold)).c_str(),
                ("fr@" + format_double(threshold)).c_str());
    for (std::size_t t = 0; t < ev.per_image_step_nme.size(); ++t) {
      const CEDCurve ced = CEDCurve::from_errors(ev.per_image_step_nme[t]);
      std::printf("%4zu  %10.4f  %10.4f  %10.4f\n", t, ev.step_nme[t], auc(ced, threshold),
                  fr(ced, threshold));
    }
  } else {
    std::cout << report_text;
  }
  if (!report_path.empty()) write_file_atomic(report_path, report_text);
  if (!pred_path.empty()) write_file_atomic(pred_path, records_to_jsonl(ev.predictions));
  if (!truth_path.empty()) write_file_atomic(truth_path, records_to_jsonl(ev.truths));
}

// --- fit-pose -------------------------------------------------------------------

void cmd_fit_pose(const std::string& model3d_path, const std::string& landmarks_path,
                  const std::string& out_path, double image_side) {
  const RigidFaceModel face = load_face_model(model3d_path);
  const CameraIntrinsics cam = CameraIntrinsics::standard(image_side);
  const std::vector<LandmarkRecord> records = read_landmark_file(landmarks_path);
  if (records.empty()) throw EmptyInputError("no landmark records in " + landmarks_path);

  std::string lines;
  double rmse_sum = 0.0, rmse_max = 0.0;
  std::size_t converged = 0;
  for (LandmarkRecord rec : records) {
    const FitResult fit = fit_pose(face, rec.landmarks, cam);
    rec.pose = fit.pose;
    rmse_sum += fit.rmse;
    rmse_max = std::max(rmse_max, fit.rmse);
    converged += fit.converged ? 1 : 0;
    lines += landmark_record_to_json(rec).dump() + "\n";
  }
  write_file_atomic(out_path, lines);
  log_line("fitted " + std::to_string(records.size()) + " poses into " + out_path);
  std::cout << nlohmann::json{{"count", records.size()},
                              {"converged", converged},
                              {"mean_rmse", rmse_sum / static_cast<double>(records.size())},
                              {"max_rmse", rmse_max}}
                   .dump()
            << std::endl;
}

// --- metrics --------------------------------------------------------------------

void cmd_metrics(const std::string& pred_path, const std::string& truth_path,
                 const std::string& norm_name, std::size_t norm_a, std::size_t norm_b,
                 double threshold, const std::string& ced_path) {
  NormalizationSpec spec;
  spec.kind = norm_kind_from_string(norm_name);
  spec.indices = {norm_a, norm_b};
  const MetricsReport report = evaluate_files(pred_path, truth_path, spec, threshold);
  std::cout << metrics_report_to_json(report).dump(2) << std::endl;
  if (!ced_path.empty()) write_file_atomic(ced_path, ced_to_csv(report.sorted_nmes));
}

// --- dump-attention -------------------------------------------------------------

void cmd_dump_attention(const std::string& ckpt_path, const std::string& data_dir,
                        const std::string& id, const std::string& out_dir,
                        const std::string& model3d_path) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const RigidFaceModel face = face_for(model3d_path);
  const SynthDataset ds = read_dataset(data_dir);

  std::size_t index = ds.samples.size();
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    if (ds.samples[i].id == id) index = i;
  if (index == ds.samples.size())
    throw ConfigError("sample id '" + id + "' not found among " +
                      std::to_string(ds.samples.size()) + " samples in " + data_dir);
  const SynthSample& s = ds.samples[index];

  // Regenerate the inputs exactly as evaluation would.
  const SynthConfig& dcfg = ds.config;
  Rng visit_rng(derive_seed(dcfg.seed, index, 0xE7A1));
  const CameraIntrinsics cam_feat =
      CameraIntrinsics::standard(static_cast<double>(dcfg.feature_side));
  Tensor fmap, x0;
  if (ckpt.backbone) {
    const Tensor image = s.image ? *s.image : gen_image(s.landmarks, dcfg, visit_rng);
    BackboneResult br = run_backbone(*ckpt.backbone, image);
    fmap = std::move(br.features);
    x0 = init_shape(face, br.pose, cam_feat);
  } else {
    fmap = s.feature_map ? *s.feature_map : gen_feature_map(s.landmarks, dcfg, visit_rng);
    x0 = init_shape(face, s.init_pose, cam_feat);
  }
  const CascadeResult res = run_cascade(ckpt.cascade, fmap, x0);

  std::filesystem::create_directories(out_dir);
  std::size_t files = 0;
  for (std::size_t t = 0; t < res.attentions.size(); ++t) {
    for (std::size_t l = 0; l < res.attentions[t].size(); ++l) {
      const Tensor& a = res.attentions[t][l];
      validate_attention(a);
      std::string csv;
      for (std::size_t r = 0; r < a.rows(); ++r) csv += csv_row(&a.v[r * a.cols()], a.cols());
      write_file_atomic(out_dir + "/attention_step" + std::to_string(t + 1) + "_layer" +
                            std::to_string(l + 1) + ".csv",
                        csv);
      ++files;
    }
  }

  // Landmark trajectory across the cascade, at image scale.
  const double feat_to_img =
      static_cast<double>(dcfg.image_side) / static_cast<double>(dcfg.feature_side);
  std::string traj = "step,landmark,x,y\n";
  for (std::size_t t = 0; t < res.shapes.size(); ++t)
    for (std::size_t l = 0; l < res.shapes[t].rows(); ++l)
      traj += std::to_string(t) + "," + std::to_string(l) + "," +
              format_double(res.shapes[t](l, 0) * feat_to_img) + "," +
              format_double(res.shapes[t](l, 1) * feat_to_img) + "\n";
  write_file_atomic(out_dir + "/trajectory.csv", traj);

  log_line("wrote " + std::to_string(files) + " attention matrices and the trajectory to " +
           out_dir);
  std::cout << nlohmann::json{{"id", id},
                              {"steps", res.attentions.size()},
                              {"layers", res.attentions.empty() ? 0 : res.attentions[0].size()},
                              {"files", files + 1}}
                   .dump()
            << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"face alignment via cascaded graph-attention regression"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_path, ckpt_path, model3d_path, log_path;
  std::string pred_path, truth_path, ced_path, sample_id, report_path;
  std::string norm_name = "inter_ocular";
  double threshold = 10.0;
  double image_side = 256.0;
  std::size_t norm_a = 36, norm_b = 45;
  bool steps_table = false, fit_poses = false;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "run configuration JSON")->required();
  gen->add_option("--out", out_path, "output dataset directory")->required();
  gen->add_option("--model3d", model3d_path, "rigid 3D face model JSON (default: built-in)");

  CLI::App* train = app.add_subcommand("train", "train the cascade on a dataset");
  train->add_option("--config", config_path, "run configuration JSON")->required();
  train->add_option("--data", data_dir, "dataset directory from gen-data")->required();
  train->add_option("--out", out_path, "checkpoint output path")->required();
  train->add_option("--log", log_path, "epoch log JSONL path (default: <out>.train.jsonl)");
  train->add_option("--model3d", model3d_path, "rigid 3D face model JSON (default: built-in)");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_flag("--steps-table", steps_table, "print per-cascade-step NME/AUC/FR rows");
  eval->add_option("--norm", norm_name, "normalization: inter_ocular|inter_pupil|box");
  eval->add_option("--threshold", threshold, "NME threshold (percent) for AUC and FR");
  eval->add_flag("--fit-pose", fit_poses, "fit rigid poses to predictions for pose MAE");
  eval->add_option("--report", report_path, "also write the JSON report to this file");
  eval->add_option("--pred-out", pred_path, "write prediction records as JSON Lines");
  eval->add_option("--truth-out", truth_path, "write ground-truth records as JSON Lines");
  eval->add_option("--model3d", model3d_path, "rigid 3D face model JSON (default: built-in)");

  CLI::App* fitp = app.add_subcommand("fit-pose", "fit rigid 6-DoF poses to landmark files");
  fitp->add_option("--model3d", model3d_path, "rigid 3D face model JSON")->required();
  fitp->add_option("--landmarks", pred_path, "landmark records (JSON Lines)")->required();
  fitp->add_option("--out", out_path, "output records with fitted poses (JSON Lines)")
      ->required();
  fitp->add_option("--image-side", image_side, "image side in pixels for the camera model");

  CLI::App* met = app.add_subcommand("metrics", "metric report for prediction/truth files");
  met->add_option("--pred", pred_path, "prediction records (JSON Lines)")->required();
  met->add_option("--truth", truth_path, "ground-truth records (JSON Lines)")->required();
  met->add_option("--norm", norm_name, "normalization: inter_ocular|inter_pupil|box");
  met->add_option("--norm-a", norm_a, "first landmark index for inter_* normalizers");
  met->add_option("--norm-b", norm_b, "second landmark index for inter_* normalizers");
  met->add_option("--threshold", threshold, "NME threshold (percent) for AUC and FR");
  met->add_option("--ced-out", ced_path, "write the CED curve as CSV to this path");

  CLI::App* dump = app.add_subcommand("dump-attention", "export attention matrices as CSV");
  dump->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  dump->add_option("--data", data_dir, "dataset directory")->required();
  dump->add_option("--id", sample_id, "sample id to run")->required();
  dump->add_option("--out", out_path, "output directory for CSV files")->required();
  dump->add_option("--model3d", model3d_path, "rigid 3D face model JSON (default: built-in)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) cmd_gen_data(config_path, out_path, model3d_path);
    if (*train) cmd_train(config_path, data_dir, out_path, log_path, model3d_path);
    if (*eval)
      cmd_eval(ckpt_path, data_dir, steps_table, norm_name, threshold, fit_poses, report_path,
               pred_path, truth_path, model3d_path);
    if (*fitp) cmd_fit_pose(model3d_path, pred_path, out_path, image_side);
    if (*met) cmd_metrics(pred_path, truth_path, norm_name, norm_a, norm_b, threshold, ced_path);
    if (*dump) cmd_dump_attention(ckpt_path, data_dir, sample_id, out_path, model3d_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
