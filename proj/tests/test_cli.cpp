#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "imtsp/cli.hpp"

using namespace imtsp;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "imtsp");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("imtsp_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

constexpr const char* kTinyConfig =
    "[problem]\n"
    "n_cities = 6\n"
    "m_agents = 2\n"
    "[train]\n"
    "iterations = 2\n"
    "batch_size = 4\n"
    "minibatch_size = 2\n"
    "train_instances = 20\n"
    "seed = 5\n"
    "[policy]\n"
    "embed_dim = 8\n"
    "key_dim = 4\n"
    "value_dim = 4\n"
    "alloc_key_dim = 4\n"
    "[surrogate]\n"
    "hidden_dim = 8\n";

fs::path tiny_config(const fs::path& dir) {
  const fs::path p = dir / "tiny.ini";
  write_file(p, kTinyConfig);
  return p;
}

std::vector<std::string> column(const fs::path& csv, const std::string& name) {
  const auto lines = lines_of(csv);
  const auto header = cli::detail::split_csv_line(lines.at(0));
  const auto c = static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  std::vector<std::string> out;
  for (std::size_t i = 1; i < lines.size(); ++i) out.push_back(cli::detail::split_csv_line(lines[i]).at(c));
  return out;
}

}  // namespace

TEST(CliGen, WritesValidInstances) {
  const fs::path dir = fresh_dir("gen");
  const CliRun r = run_cli({"gen", "--n", "20", "--m", "3", "--count", "10", "--seed", "7", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    const Instance inst = load_instance(e.path().string());
    EXPECT_EQ(inst.num_cities(), 20u);
    EXPECT_EQ(inst.num_agents, 3u);
    ++files;
  }
  EXPECT_EQ(files, 10u);
  EXPECT_EQ(load_instance((dir / "instance_0003.json").string()), generate_instance(20, 3, 10));
}

TEST(CliGen, RerunIsByteIdentical) {
  const fs::path a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  ASSERT_EQ(run_cli({"gen", "--n", "9", "--m", "2", "--count", "3", "--out", a.string()}).code, 0);
  ASSERT_EQ(run_cli({"gen", "--n", "9", "--m", "2", "--count", "3", "--out", b.string()}).code, 0);
  for (const char* f : {"instance_0000.json", "instance_0001.json", "instance_0002.json"})
    EXPECT_EQ(slurp(a / f), slurp(b / f));
}

TEST(CliGen, RejectsSingleCity) {
  const CliRun r = run_cli({"gen", "--n", "1", "--m", "3", "--out", fresh_dir("gen_bad").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--n"), std::string::npos);
}

TEST(CliGen, UnwritablePathIsIoError) {
  const fs::path dir = fresh_dir("gen_io");
  write_file(dir / "blocker", "x");
  EXPECT_EQ(run_cli({"gen", "--n", "5", "--m", "2", "--out", (dir / "blocker" / "sub").string()}).code, 2);
}

TEST(CliUsage, UnknownSubcommandAndHelp) {
  EXPECT_EQ(run_cli({"frobnicate"}).code, 1);
  EXPECT_EQ(run_cli({}).code, 1);
  const CliRun help = run_cli({"--help"});
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("train"), std::string::npos);
}

TEST(CliTrain, MinimalConfigWritesOutputs) {
  const fs::path dir = fresh_dir("train");
  const CliRun r = run_cli({"train", "--config", tiny_config(dir).string(), "--out", (dir / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"checkpoint.json", "metrics.csv", "manifest.json"}) EXPECT_TRUE(fs::exists(dir / "run" / f));
  EXPECT_EQ(lines_of(dir / "run" / "metrics.csv").size(), 3u);
  const Checkpoint ck = load_checkpoint((dir / "run" / "checkpoint.json").string());
  EXPECT_EQ(ck.state.iteration, 2u);
  EXPECT_EQ(ck.config.n_cities, 6u);
  EXPECT_EQ(ck.config.model.policy.embed_dim, 8u);

  const json m = json::parse(slurp(dir / "run" / "manifest.json"));
  EXPECT_EQ(m["command"], "train");
  EXPECT_EQ(m["status"], "done");
  EXPECT_EQ(m["seed"], 5);
  EXPECT_EQ(m["config"]["n_cities"], 6);
  for (const char* key : {"argv", "version", "git", "outputs", "started_at", "wall_ms"}) EXPECT_TRUE(m.contains(key)) << key;
  EXPECT_TRUE(m["wall_ms"].is_number());
}

TEST(CliTrain, FlagsOverrideConfigFile) {
  const fs::path dir = fresh_dir("train_override");
  const CliRun r = run_cli({"train", "--config", tiny_config(dir).string(), "--iterations", "1", "--optimizer", "sgd",
                         "--out", (dir / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const Checkpoint ck = load_checkpoint((dir / "run" / "checkpoint.json").string());
  EXPECT_EQ(ck.state.iteration, 1u);
  EXPECT_EQ(ck.config.optimizer, Optimizer::sgd);
  EXPECT_EQ(ck.config.batch_size, 4u);
}

TEST(CliTrain, BadConfigIsUsageError) {
  const fs::path dir = fresh_dir("train_bad");
  write_file(dir / "unknown.ini", std::string(kTinyConfig) + "[train]\nlearning_speed = 3\n");
  EXPECT_EQ(run_cli({"train", "--config", (dir / "unknown.ini").string(), "--out", dir.string()}).code, 1);
  write_file(dir / "badvalue.ini", std::string(kTinyConfig) + "[train]\nbatch_size = many\n");
  EXPECT_EQ(run_cli({"train", "--config", (dir / "badvalue.ini").string(), "--out", dir.string()}).code, 1);
  EXPECT_EQ(run_cli({"train", "--config", tiny_config(dir).string(), "--batch-size", "0", "--out", dir.string()}).code,
            1);
  EXPECT_EQ(run_cli({"train", "--config", tiny_config(dir).string(), "--estimator", "magic"}).code, 1);
  EXPECT_EQ(run_cli({"train", "--config", (dir / "missing.ini").string()}).code, 2);
}

TEST(CliTrain, EstimatorChoiceChangesVarianceColumns) {
  const fs::path dir = fresh_dir("train_ablation");
  const std::string cfg = tiny_config(dir).string();
  ASSERT_EQ(run_cli({"train", "--config", cfg, "--estimator", "cv", "--out", (dir / "cv").string()}).code, 0);
  ASSERT_EQ(run_cli({"train", "--config", cfg, "--estimator", "reinforce", "--out", (dir / "re").string()}).code, 0);
  for (const auto& v : column(dir / "cv" / "metrics.csv", "var_metric_cv")) EXPECT_FALSE(v.empty());
  for (const auto& v : column(dir / "re" / "metrics.csv", "var_metric_cv")) EXPECT_TRUE(v.empty());
  for (const auto& v : column(dir / "re" / "metrics.csv", "var_metric_reinforce")) EXPECT_FALSE(v.empty());
  EXPECT_NE(column(dir / "cv" / "metrics.csv", "mean_L_prime").at(0), "");
  EXPECT_EQ(column(dir / "re" / "metrics.csv", "mean_L_prime").at(0), "");
}

TEST(CliTrain, ResumeContinuesNumbering) {
  const fs::path dir = fresh_dir("train_resume");
  const std::string run = (dir / "run").string();
  ASSERT_EQ(run_cli({"train", "--config", tiny_config(dir).string(), "--out", run}).code, 0);
  const CliRun r = run_cli(
      {"train", "--resume", (dir / "run" / "checkpoint.json").string(), "--iterations", "4", "--out", run});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(column(dir / "run" / "metrics.csv", "iteration"), (std::vector<std::string>{"1", "2", "3", "4"}));
  EXPECT_EQ(load_checkpoint(run + "/checkpoint.json").state.iteration, 4u);
}

TEST(CliTrain, IdenticalFlagsGiveIdenticalCheckpoints) {
  const fs::path dir = fresh_dir("train_idem");
  const std::string cfg = tiny_config(dir).string();
  ASSERT_EQ(run_cli({"train", "--config", cfg, "--threads", "1", "--out", (dir / "a").string()}).code, 0);
  ASSERT_EQ(run_cli({"train", "--config", cfg, "--threads", "1", "--out", (dir / "b").string()}).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "checkpoint.json"), slurp(dir / "b" / "checkpoint.json"));
  EXPECT_EQ(column(dir / "a" / "metrics.csv", "mean_L"), column(dir / "b" / "metrics.csv", "mean_L"));
}

TEST(CliEval, ResultsCsvSchema) {
  const fs::path dir = fresh_dir("eval");
  ASSERT_EQ(run_cli({"train", "--config", tiny_config(dir).string(), "--out", (dir / "run").string()}).code, 0);
  ASSERT_EQ(run_cli({"gen", "--n", "6", "--m", "2", "--count", "3", "--out", (dir / "inst").string()}).code, 0);
  const fs::path csv = dir / "eval.csv";
  const CliRun r = run_cli({"eval", "--checkpoint", (dir / "run" / "checkpoint.json").string(), "--instances",
                         (dir / "inst").string(), "--baseline", "random", "--out", csv.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = lines_of(csv);
  ASSERT_EQ(lines.at(0), "instance,method,L,runtime_ms");
  std::size_t per_instance = 0, policy_rows = 0;
  double policy_sum = 0.0, policy_mean = -1.0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = cli::detail::split_csv_line(lines[i]);
    ASSERT_EQ(cells.size(), 4u) << lines[i];
    if (cells[0].rfind("instance_", 0) == 0) {
      ++per_instance;
      EXPECT_GT(std::stod(cells[2]), 0.0);
      if (cells[1] == "policy") {
        ++policy_rows;
        policy_sum += std::stod(cells[2]);
      }
    } else if (cells[0] == "mean" && cells[1] == "policy") {
      policy_mean = std::stod(cells[2]);
    }
  }
  EXPECT_EQ(per_instance, 6u);
  EXPECT_NEAR(policy_mean, policy_sum / static_cast<double>(policy_rows), 1e-12);
  EXPECT_TRUE(fs::exists(csv.string() + ".manifest.json"));
}

TEST(CliEval, ClassicBaselineRows) {
  const fs::path dir = fresh_dir("eval_classic");
  ASSERT_EQ(run_cli({"train", "--config", tiny_config(dir).string(), "--out", (dir / "run").string()}).code, 0);
  ASSERT_EQ(run_cli({"gen", "--n", "6", "--m", "2", "--count", "2", "--out", (dir / "inst").string()}).code, 0);
  const fs::path csv = dir / "eval.csv";
  ASSERT_EQ(run_cli({"eval", "--checkpoint", (dir / "run" / "checkpoint.json").string(), "--instances",
                     (dir / "inst" / "instance_0000.json").string(), (dir / "inst" / "instance_0001.json").string(),
                     "--baseline", "classic", "--classic-budget-ms", "200", "--out", csv.string()})
                .code,
            0);
  const auto names = column(csv, "instance"), methods = column(csv, "method");
  std::size_t classic_rows = 0;
  for (std::size_t i = 0; i < names.size(); ++i)
    if (methods[i] == "classic" && names[i].rfind("instance_", 0) == 0) ++classic_rows;
  EXPECT_EQ(classic_rows, 2u);
  EXPECT_EQ(std::count(names.begin(), names.end(), "mean"), 2);
}

TEST(CliEval, Errors) {
  const fs::path dir = fresh_dir("eval_err");
  ASSERT_EQ(run_cli({"train", "--config", tiny_config(dir).string(), "--out", (dir / "run").string()}).code, 0);
  const std::string ck = (dir / "run" / "checkpoint.json").string();
  ASSERT_EQ(run_cli({"gen", "--n", "6", "--m", "3", "--out", (dir / "m3").string()}).code, 0);
  fs::create_directories(dir / "empty");
  EXPECT_EQ(run_cli({"eval", "--checkpoint", ck, "--instances", (dir / "m3").string()}).code, 1);
  EXPECT_FALSE(fs::exists("eval.csv.manifest.json"));
  EXPECT_EQ(run_cli({"eval", "--checkpoint", ck, "--instances", (dir / "empty").string()}).code, 1);
  EXPECT_EQ(run_cli({"eval", "--checkpoint", ck, "--instances", (dir / "nowhere").string()}).code, 2);
  EXPECT_EQ(run_cli({"eval", "--checkpoint", (dir / "no.json").string(), "--instances", (dir / "m3").string()}).code,
            2);
  EXPECT_EQ(
      run_cli({"eval", "--checkpoint", ck, "--instances", (dir / "m3").string(), "--baseline", "oracle"}).code, 1);
}

TEST(CliGradcheck, DefaultSeedPasses) {
  const fs::path dir = fresh_dir("gradcheck");
  const CliRun r = run_cli({"gradcheck", "--out", (dir / "report.json").string()});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  for (const char* name : {"policy_forward", "surrogate_forward_gamma", "surrogate_forward_probs", "log_prob",
                           "estimator_score", "baseline_unbiased", "pathwise_offset", "surrogate_gamma_grad"})
    EXPECT_NE(r.out.find(name), std::string::npos) << name;
  EXPECT_NE(r.out.find("max error"), std::string::npos);
  const json report = json::parse(slurp(dir / "report.json"));
  EXPECT_TRUE(report["passed"].get<bool>());
  for (const auto& c : report["checks"]) EXPECT_TRUE(c.contains("max_error"));
}

TEST(CliGradcheck, InjectedSignFlipFailsNamedCheck) {
  const CliRun r = run_cli({"gradcheck", "--inject-fault", "score-sign"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("estimator_score"), std::string::npos) << r.err;
}

TEST(CliPlotdata, SeriesAndSmoothing) {
  const fs::path dir = fresh_dir("plot");
  write_file(dir / "m.csv", std::string(kMetricsHeader) + "\n1,3,2.5,-10,-5,1.0,\n2,2,2.25,-12,-6,1.0,2.5\n");
  const CliRun r = run_cli({"plotdata", "--metrics", (dir / "m.csv").string(), "--out", (dir / "p.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json p = json::parse(slurp(dir / "p.json"));
  EXPECT_EQ(p["smoothing"]["window"], 1);
  EXPECT_EQ(p["series"]["mean_L"]["y"], json({3.0, 2.0}));
  EXPECT_EQ(p["series"]["mean_L"]["x"], json({1.0, 2.0}));
  EXPECT_TRUE(p["series"].contains("var_metric_cv"));
  EXPECT_TRUE(p["series"].contains("var_metric_reinforce"));
  EXPECT_EQ(p["series"]["val_L"]["y"].size(), 1u);

  ASSERT_EQ(run_cli({"plotdata", "--metrics", (dir / "m.csv").string(), "--window", "2", "--out",
                     (dir / "p2.json").string()})
                .code,
            0);
  const json p2 = json::parse(slurp(dir / "p2.json"));
  EXPECT_EQ(p2["series"]["mean_L"]["y"], json({3.0, 2.5}));
}

TEST(CliPlotdata, Errors) {
  const fs::path dir = fresh_dir("plot_err");
  write_file(dir / "ragged.csv", std::string(kMetricsHeader) + "\n1,3\n");
  write_file(dir / "text.csv", std::string(kMetricsHeader) + "\n1,abc,,,,,\n");
  write_file(dir / "nohead.csv", "a,b\n1,2\n");
  for (const char* f : {"ragged.csv", "text.csv", "nohead.csv"})
    EXPECT_EQ(run_cli({"plotdata", "--metrics", (dir / f).string(), "--out", (dir / "o.json").string()}).code, 1)
        << f;
  EXPECT_EQ(run_cli({"plotdata", "--metrics", (dir / "none.csv").string()}).code, 2);
}

TEST(CliOutputDir, EnvironmentDefault) {
  const fs::path dir = fresh_dir("env");
  ::setenv("IMTSP_OUTPUT_DIR", dir.string().c_str(), 1);
  const CliRun r = run_cli({"gen", "--n", "5", "--m", "2"});
  ::unsetenv("IMTSP_OUTPUT_DIR");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "instances" / "instance_0000.json"));
}

TEST(CliBinary, ExitCodesFromProcess) {
  const fs::path dir = fresh_dir("binary");
  const std::string bin = IMTSP_CLI_PATH;
  auto status = [](const std::string& cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status(bin + " --version"), 0);
  EXPECT_EQ(status(bin + " gen --n 5 --m 2 --out " + (dir / "i").string()), 0);
  EXPECT_EQ(status(bin + " gen --n 1 --m 2 --out " + (dir / "i").string()), 1);
  EXPECT_EQ(status(bin + " gradcheck --inject-fault score-sign"), 3);
  EXPECT_TRUE(fs::exists(dir / "i" / "instance_0000.json"));
}
