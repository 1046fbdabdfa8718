// End-to-end checks for the command-line tool: every subcommand is spawned as
// a real child process against the tiny bundled configuration, and outputs are
// compared byte for byte where determinism is promised.
//
// Usage: test_cli <path-to-spiga_cli> <source-dir>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace {

int g_failures = 0;

void check(bool ok, const std::string& what) {
  std::printf("  %s [%s]\n", what.c_str(), ok ? "PASS" : "FAIL");
  if (!ok) ++g_failures;
}

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunResult run(const std::string& cmd, const std::string& scratch) {
  const std::string out_path = scratch + "/cmd.out";
  const std::string err_path = scratch + "/cmd.err";
  const int status = std::system((cmd + " >" + out_path + " 2>" + err_path).c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_path);
  r.err = slurp(err_path);
  return r;
}

bool same_bytes(const std::string& a, const std::string& b) { return slurp(a) == slurp(b); }

std::size_t count_lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::cerr << "usage: test_cli <path-to-spiga_cli> <source-dir>\n";
    return 2;
  }
  const std::string cli = argv[1];
  const std::string src = argv[2];
  const std::string tiny = src + "/configs/tiny.json";
  const std::string face3d = src + "/data/face3d_68.json";
  const std::string tmp =
      (std::filesystem::temp_directory_path() / "spiga_cli_test").string();
  std::filesystem::remove_all(tmp);
  std::filesystem::create_directories(tmp);
  unsetenv("SPIGA_SEED");

  std::printf("gen-data\n");
  RunResult gen = run(cli + " gen-data --config " + tiny + " --out " + tmp + "/data", tmp);
  check(gen.exit_code == 0, "exits 0");
  {
    const nlohmann::json j = nlohmann::json::parse(gen.out);
    check(j.at("samples") == 12, "reports the sample count");
    check(j.at("seed") == 9, "reports the seed");
  }
  check(std::filesystem::exists(tmp + "/data/dataset.json"), "writes the manifest");
  check(std::filesystem::exists(tmp + "/data/samples.spds"), "writes the samples");

  std::printf("gen-data determinism\n");
  run(cli + " gen-data --config " + tiny + " --out " + tmp + "/data_b", tmp);
  for (const char* f : {"annotations.jsonl", "samples.spds", "dataset.json"})
    check(same_bytes(tmp + "/data/" + f, tmp + "/data_b/" + f),
          std::string(f) + " is byte-identical across reruns");

  std::printf("gen-data with SPIGA_SEED\n");
  setenv("SPIGA_SEED", "4242", 1);
  RunResult gen_env = run(cli + " gen-data --config " + tiny + " --out " + tmp + "/data_env", tmp);
  unsetenv("SPIGA_SEED");
  check(gen_env.exit_code == 0, "exits 0");
  check(nlohmann::json::parse(gen_env.out).at("seed") == 4242, "env seed wins");
  check(!same_bytes(tmp + "/data/annotations.jsonl", tmp + "/data_env/annotations.jsonl"),
        "different seed changes the annotations");

  std::printf("train\n");
  RunResult train =
      run(cli + " train --config " + tiny + " --data " + tmp + "/data --out " + tmp + "/m.ckpt",
          tmp);
  check(train.exit_code == 0, "exits 0");
  {
    const nlohmann::json j = nlohmann::json::parse(train.out);
    check(j.at("epochs") == 1, "reports epoch count");
    check(std::isfinite(j.at("final_loss").get<double>()), "final loss is finite");
  }
  check(std::filesystem::exists(tmp + "/m.ckpt"), "writes the checkpoint");
  check(std::filesystem::exists(tmp + "/m.ckpt.json"), "writes the checkpoint manifest");
  check(std::filesystem::exists(tmp + "/m.ckpt.train.jsonl"), "writes the epoch log");
  check(train.err.find("epoch 1/1") != std::string::npos, "logs progress to stderr");

  std::printf("train determinism\n");
  run(cli + " train --config " + tiny + " --data " + tmp + "/data --out " + tmp + "/m2.ckpt",
      tmp);
  check(same_bytes(tmp + "/m.ckpt", tmp + "/m2.ckpt"),
        "checkpoints are byte-identical across reruns");
  check(same_bytes(tmp + "/m.ckpt.train.jsonl", tmp + "/m2.ckpt.train.jsonl"),
        "epoch logs are byte-identical across reruns");

  std::printf("eval\n");
  RunResult eval = run(cli + " eval --ckpt " + tmp + "/m.ckpt --data " + tmp +
                           "/data --report " + tmp + "/report.json --pred-out " + tmp +
                           "/pred.jsonl --truth-out " + tmp + "/truth.jsonl",
                       tmp);
  check(eval.exit_code == 0, "exits 0");
  {
    const nlohmann::json j = nlohmann::json::parse(eval.out);
    check(j.at("count") == 12, "report covers every sample");
    check(j.at("normalization") == "inter_ocular", "report names the normalization");
    check(nlohmann::json::parse(slurp(tmp + "/report.json")) == j, "file report matches stdout");
  }
  check(count_lines(slurp(tmp + "/pred.jsonl")) == 12, "prediction records written");
  check(count_lines(slurp(tmp + "/truth.jsonl")) == 12, "truth records written");

  std::printf("eval --steps-table\n");
  RunResult table =
      run(cli + " eval --ckpt " + tmp + "/m.ckpt --data " + tmp + "/data --steps-table", tmp);
  check(table.exit_code == 0, "exits 0");
  // Header plus one row per cascade length 0..K; tiny.json has K = 2 windows.
  check(count_lines(table.out) == 4, "one row per cascade step plus header");
  check(table.out.find("nme") != std::string::npos &&
            table.out.find("auc@") != std::string::npos &&
            table.out.find("fr@") != std::string::npos,
        "table names the NME/AUC/FR columns");

  std::printf("metrics\n");
  RunResult perfect = run(cli + " metrics --pred " + tmp + "/truth.jsonl --truth " + tmp +
                              "/truth.jsonl --norm inter_ocular --ced-out " + tmp + "/ced.csv",
                          tmp);
  check(perfect.exit_code == 0, "exits 0");
  {
    const nlohmann::json j = nlohmann::json::parse(perfect.out);
    check(j.at("nme") == 0.0, "pred == truth gives NME 0");
    check(j.at("fr") == 0.0, "pred == truth gives FR 0");
    check(j.at("auc") == 100.0, "pred == truth gives AUC 100");
  }
  check(slurp(tmp + "/ced.csv").rfind("error,fraction", 0) == 0, "CED CSV has a header");
  check(count_lines(slurp(tmp + "/ced.csv")) == 13, "CED CSV has one row per image");

  std::printf("fit-pose\n");
  RunResult fit = run(cli + " fit-pose --model3d " + face3d + " --landmarks " + tmp +
                          "/truth.jsonl --out " + tmp + "/fitted.jsonl --image-side 64",
                      tmp);
  check(fit.exit_code == 0, "exits 0");
  {
    const nlohmann::json j = nlohmann::json::parse(fit.out);
    check(j.at("count") == 12, "fits every record");
    check(j.at("converged") == 12, "all fits converge");
    check(j.at("mean_rmse").get<double>() < 5.0, "reprojection RMSE is sane");
  }
  {
    const std::string first_line = slurp(tmp + "/fitted.jsonl").substr(0, 4096);
    const nlohmann::json rec = nlohmann::json::parse(first_line.substr(0, first_line.find('\n')));
    check(rec.contains("pose") && rec.at("pose").size() == 6, "records carry 6-DoF poses");
  }

  std::printf("metrics with fitted poses\n");
  RunResult posed = run(cli + " metrics --pred " + tmp + "/fitted.jsonl --truth " + tmp +
                            "/truth.jsonl --norm inter_ocular",
                        tmp);
  check(posed.exit_code == 0, "exits 0");
  check(nlohmann::json::parse(posed.out).contains("pose_mae"),
        "pose MAE appears when both sides carry poses");

  std::printf("dump-attention\n");
  RunResult dump = run(cli + " dump-attention --ckpt " + tmp + "/m.ckpt --data " + tmp +
                           "/data --id s000001 --out " + tmp + "/att",
                       tmp);
  check(dump.exit_code == 0, "exits 0");
  check(nlohmann::json::parse(dump.out).at("files") == 5, "2 steps x 2 layers + trajectory");
  check(std::filesystem::exists(tmp + "/att/attention_step2_layer2.csv"), "matrix files exist");
  {
    // Every attention row is a probability distribution over the other nodes.
    std::ifstream in(tmp + "/att/attention_step1_layer1.csv");
    std::string line;
    bool sums_ok = true;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      double sum = 0.0;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) sum += std::stod(cell);
      sums_ok = sums_ok && std::abs(sum - 1.0) < 1e-9;
      ++rows;
    }
    check(rows == 68 && sums_ok, "68 rows, each summing to 1");
  }
  check(std::filesystem::exists(tmp + "/att/trajectory.csv"), "trajectory written");
  check(count_lines(slurp(tmp + "/att/trajectory.csv")) == 1 + 3 * 68,
        "trajectory has one row per step and landmark");

  std::printf("failure modes\n");
  RunResult bad_cfg = run(cli + " gen-data --config " + tmp + "/nope.json --out " + tmp + "/x",
                          tmp);
  check(bad_cfg.exit_code != 0, "missing config exits nonzero");
  check(bad_cfg.err.find("error:") != std::string::npos, "missing config reports to stderr");

  {
    std::ofstream junk(tmp + "/junk.ckpt", std::ios::binary);
    junk << "not a checkpoint";
  }
  RunResult bad_ckpt =
      run(cli + " eval --ckpt " + tmp + "/junk.ckpt --data " + tmp + "/data", tmp);
  check(bad_ckpt.exit_code != 0, "corrupt checkpoint exits nonzero");
  check(bad_ckpt.err.find("magic") != std::string::npos, "corrupt checkpoint names the problem");

  RunResult bad_id = run(cli + " dump-attention --ckpt " + tmp + "/m.ckpt --data " + tmp +
                             "/data --id nope --out " + tmp + "/att2",
                         tmp);
  check(bad_id.exit_code != 0, "unknown sample id exits nonzero");
  check(bad_id.err.find("nope") != std::string::npos, "unknown id is echoed in the error");

  setenv("SPIGA_SEED", "12x", 1);
  RunResult bad_seed = run(cli + " gen-data --config " + tiny + " --out " + tmp + "/x2", tmp);
  unsetenv("SPIGA_SEED");
  check(bad_seed.exit_code != 0, "garbled SPIGA_SEED exits nonzero");
  check(bad_seed.err.find("SPIGA_SEED") != std::string::npos, "garbled SPIGA_SEED is named");

  std::printf("help\n");
  RunResult help = run(cli + " --help", tmp);
  check(help.exit_code == 0, "--help exits 0");
  for (const char* sub :
       {"gen-data", "train", "eval", "fit-pose", "metrics", "dump-attention"})
    check(help.out.find(sub) != std::string::npos, std::string("lists ") + sub);
  RunResult help_eval = run(cli + " eval --help", tmp);
  for (const char* flag : {"--ckpt", "--data", "--steps-table", "--norm", "--threshold"})
    check(help_eval.out.find(flag) != std::string::npos, std::string("eval documents ") + flag);

  if (g_failures != 0) {
    std::printf("\n%d failing check(s)\n", g_failures);
    return 1;
  }
  std::printf("\nall checks passed\n");
  return 0;
}
