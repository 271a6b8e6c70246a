#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "imtsp/baseline_mtsp.hpp"
#include "imtsp/checks.hpp"
#include "imtsp/trainer.hpp"

#ifndef IMTSP_VERSION
#define IMTSP_VERSION "0.0.0"
#endif
#ifndef IMTSP_GIT_REV
#define IMTSP_GIT_REV "unknown"
#endif

namespace imtsp::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kIo = 2, kCheckFailed = 3 };

/// File-system failures (exit code 2).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Directory used when an output path is not given: $IMTSP_OUTPUT_DIR, or
/// the working directory.
inline std::filesystem::path default_output_dir() {
  const char* env = std::getenv("IMTSP_OUTPUT_DIR");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path(".");
}

namespace detail {

namespace fs = std::filesystem;
using nlohmann::json;

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

inline void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) ensure_dir(file.parent_path());
}

inline void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

// ------------------------------------------------------------- parsing ----

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw ArgumentError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  if (pos != v.size()) throw ArgumentError(key + ": expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ArgumentError(key + ": expected a number, got '" + v + "'");
  }
  if (pos != v.size() || !std::isfinite(x)) throw ArgumentError(key + ": expected a number, got '" + v + "'");
  return x;
}

inline bool parse_switch(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ArgumentError(key + ": expected on|off, got '" + v + "'");
}

template <class Enum>
Enum parse_choice(const std::string& key, const std::string& v, const std::map<std::string, Enum>& choices) {
  const auto it = choices.find(v);
  if (it != choices.end()) return it->second;
  std::string allowed;
  for (const auto& [name, _] : choices) allowed += (allowed.empty() ? "" : "|") + name;
  throw ArgumentError(key + ": expected " + allowed + ", got '" + v + "'");
}

// ------------------------------------------------------ train settings ----

/// One training setting: its key in the config file ("section.name"), its
/// command-line flag, and how it is applied.
struct Setting {
  std::string key;
  std::string flag;
  std::string help;
  std::function<void(TrainConfig&, const std::string&)> apply;
};

inline std::vector<Setting> train_settings() {
  auto count = [](std::size_t TrainConfig::*field) {
    return [field](TrainConfig& c, const std::string& v) { c.*field = parse_count("value", v); };
  };
  std::vector<Setting> s{
      {"problem.n_cities", "--n", "cities per instance, depot included", count(&TrainConfig::n_cities)},
      {"problem.m_agents", "--m", "agents", count(&TrainConfig::m_agents)},
      {"train.iterations", "--iterations", "total training iterations", count(&TrainConfig::iterations)},
      {"train.batch_size", "--batch-size", "instances per iteration", count(&TrainConfig::batch_size)},
      {"train.minibatch_size", "--minibatch-size", "samples per variance-metric group",
       count(&TrainConfig::minibatch_size)},
      {"train.lr_theta", "--lr-theta", "policy learning rate",
       [](TrainConfig& c, const std::string& v) { c.lr_theta = parse_real("lr_theta", v); }},
      {"train.lr_gamma", "--lr-gamma", "surrogate learning rate",
       [](TrainConfig& c, const std::string& v) { c.lr_gamma = parse_real("lr_gamma", v); }},
      {"train.seed", "--seed", "run seed",
       [](TrainConfig& c, const std::string& v) { c.seed = parse_count("seed", v); }},
      {"train.optimizer", "--optimizer", "sgd|adam",
       [](TrainConfig& c, const std::string& v) {
         c.optimizer = parse_choice<Optimizer>("optimizer", v, {{"sgd", Optimizer::sgd}, {"adam", Optimizer::adam}});
       }},
      {"train.eval_every", "--eval-every", "validate every k iterations (0 = never)",
       count(&TrainConfig::eval_every)},
      {"train.patience", "--patience", "stop after this many validations without improvement (0 = never)",
       count(&TrainConfig::patience)},
      {"train.train_instances", "--train-instances", "size of the training instance pool",
       count(&TrainConfig::train_instances)},
      {"train.threads", "--threads", "worker threads", count(&TrainConfig::threads)},
      {"train.variance_eps", "--variance-eps", "epsilon inside the variance metric's log",
       [](TrainConfig& c, const std::string& v) { c.variance_eps = parse_real("variance_eps", v); }},
      {"train.exact_expectation", "--exact-expectation", "on|off: enumerate allocations instead of sampling",
       [](TrainConfig& c, const std::string& v) { c.exact_expectation = parse_switch("exact_expectation", v); }},
      {"policy.embed_dim", "--embed-dim", "city embedding width",
       [](TrainConfig& c, const std::string& v) { c.model.policy.embed_dim = parse_count("embed_dim", v); }},
      {"policy.key_dim", "--key-dim", "attention key/query width",
       [](TrainConfig& c, const std::string& v) { c.model.policy.key_dim = parse_count("key_dim", v); }},
      {"policy.value_dim", "--value-dim", "attention value width",
       [](TrainConfig& c, const std::string& v) { c.model.policy.value_dim = parse_count("value_dim", v); }},
      {"policy.alloc_key_dim", "--alloc-key-dim", "allocation key/query width",
       [](TrainConfig& c, const std::string& v) { c.model.policy.alloc_key_dim = parse_count("alloc_key_dim", v); }},
      {"policy.clip_alpha", "--clip-alpha", "score clip constant",
       [](TrainConfig& c, const std::string& v) { c.model.policy.clip_alpha = parse_real("clip_alpha", v); }},
      {"policy.message_iterations", "--message-iterations", "message passing rounds",
       [](TrainConfig& c, const std::string& v) {
         c.model.policy.message_iterations = parse_count("message_iterations", v);
       }},
      {"surrogate.hidden_dim", "--surrogate-hidden", "surrogate hidden width",
       [](TrainConfig& c, const std::string& v) { c.model.surrogate.hidden_dim = parse_count("hidden_dim", v); }},
      {"surrogate.layers", "--surrogate-layers", "surrogate dense layers",
       [](TrainConfig& c, const std::string& v) { c.model.surrogate.layers = parse_count("layers", v); }},
      {"surrogate.input", "--surrogate-input", "flatten|column_mean",
       [](TrainConfig& c, const std::string& v) {
         c.model.surrogate.input_reduction = parse_choice<InputReduction>(
             "surrogate input", v, {{"flatten", InputReduction::flatten}, {"column_mean", InputReduction::column_mean}});
       }},
      {"estimator.kind", "--estimator", "cv|reinforce",
       [](TrainConfig& c, const std::string& v) {
         c.model.estimator.kind = parse_choice<EstimatorKind>(
             "estimator", v, {{"cv", EstimatorKind::control_variate}, {"reinforce", EstimatorKind::reinforce}});
       }},
      {"estimator.pathwise", "--pathwise", "on|off: include the surrogate's pathwise term",
       [](TrainConfig& c, const std::string& v) { c.model.estimator.pathwise_term = parse_switch("pathwise", v); }},
      {"estimator.zeta", "--zeta", "control-variate coefficient",
       [](TrainConfig& c, const std::string& v) { c.model.estimator.zeta = parse_real("zeta", v); }},
      {"solver.max_2opt_passes", "--max-2opt-passes", "2-opt pass limit per tour",
       [](TrainConfig& c, const std::string& v) { c.model.solver.max_2opt_passes = parse_count("max_2opt_passes", v); }},
      {"solver.time_budget_ms", "--solver-budget-ms", "2-opt wall-clock budget per tour",
       [](TrainConfig& c, const std::string& v) { c.model.solver.time_budget_ms = parse_real("time_budget_ms", v); }},
  };
  return s;
}

/// Applies a sectioned key = value file onto `cfg`.
inline void apply_config_file(const std::string& path, TrainConfig& cfg, const std::vector<Setting>& settings) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(in);
  } catch (const CLI::Error& e) {
    throw ArgumentError("config " + path + ": " + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    std::string key;
    for (const auto& p : item.parents) key += p + ".";
    key += item.name;
    const auto it = std::find_if(settings.begin(), settings.end(), [&](const Setting& s) { return s.key == key; });
    if (it == settings.end()) throw ArgumentError("config " + path + ": unknown key '" + key + "'");
    if (item.inputs.size() != 1) throw ArgumentError("config " + path + ": '" + key + "' needs exactly one value");
    it->apply(cfg, item.inputs.front());
  }
}

// ---------------------------------------------------------- manifest ----

struct Manifest {
  fs::path path;
  json body;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write() const { write_text(path, body.dump(2) + "\n"); }
  void finish(const std::string& status) {
    body["status"] = status;
    body["wall_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    write();
  }
};

inline Manifest start_manifest(const fs::path& path, const std::string& command, const std::vector<std::string>& args,
                               json config, json outputs, std::uint64_t seed) {
  Manifest m;
  m.path = path;
  m.body = {{"format", "imtsp-manifest"},
            {"command", command},
            {"argv", args},
            {"version", IMTSP_VERSION},
            {"git", IMTSP_GIT_REV},
            {"seed", seed},
            {"config", std::move(config)},
            {"outputs", std::move(outputs)},
            {"started_at", utc_timestamp()},
            {"status", "running"},
            {"wall_ms", nullptr}};
  m.write();
  return m;
}

// ------------------------------------------------------------ commands ----

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::vector<std::string> args;
};

struct GenOptions {
  std::size_t n = 20, m = 3, count = 1;
  std::uint64_t seed = 1;
  std::string out;
};

inline int cmd_gen(const GenOptions& o, Context& ctx) {
  if (o.n < 2) throw ArgumentError("gen: --n must be >= 2");
  if (o.m < 1) throw ArgumentError("gen: --m must be >= 1");
  if (o.count < 1) throw ArgumentError("gen: --count must be >= 1");
  const fs::path dir = o.out.empty() ? default_output_dir() / "instances" : fs::path(o.out);
  ensure_dir(dir);
  for (std::size_t i = 0; i < o.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "instance_%04zu.json", i);
    write_text(dir / name, instance_to_json(generate_instance(o.n, o.m, o.seed + i)) + "\n");
  }
  ctx.out << "wrote " << o.count << " instance(s) to " << dir.string() << "\n";
  return kOk;
}

struct TrainOptions {
  std::string config_path, resume, out;
  std::map<std::string, std::string> flags;  // flag → raw value, only those given
};

inline int cmd_train(const TrainOptions& o, Context& ctx) {
  const auto settings = train_settings();
  std::optional<Checkpoint> resume;
  TrainConfig cfg;
  if (!o.resume.empty()) {
    try {
      resume = load_checkpoint(o.resume);
    } catch (const std::ios_base::failure& e) {
      throw IoError(e.what());
    }
    cfg = resume->config;
  }
  if (!o.config_path.empty()) apply_config_file(o.config_path, cfg, settings);
  for (const Setting& s : settings) {
    const auto it = o.flags.find(s.flag);
    if (it != o.flags.end()) s.apply(cfg, it->second);
  }
  cfg.validate();

  const fs::path dir = o.out.empty() ? default_output_dir() / "run" : fs::path(o.out);
  ensure_dir(dir);
  const fs::path ck_path = dir / "checkpoint.json", csv_path = dir / "metrics.csv";
  Manifest manifest = start_manifest(dir / "manifest.json", "train", ctx.args, config_to_json(cfg),
                                     {{"checkpoint", ck_path.string()}, {"metrics", csv_path.string()},
                                      {"resumed_from", o.resume.empty() ? json() : json(o.resume)}},
                                     cfg.seed);
  manifest.body["variance_metric"] = "sum over parameters of ln(minibatch-mean variance + eps)";
  manifest.write();

  TrainResult r;
  try {
    r = train(cfg, {ck_path.string(), csv_path.string()}, std::move(resume));
  } catch (const std::ios_base::failure& e) {
    throw IoError(e.what());
  }
  manifest.body["iterations_completed"] = r.checkpoint.state.iteration;
  manifest.body["stopped_early"] = r.stopped_early;
  manifest.finish("done");
  ctx.out << "iterations " << r.checkpoint.state.iteration;
  if (!r.metrics.empty()) ctx.out << ", last mean_L " << format_double(r.metrics.back().mean_L);
  ctx.out << "\ncheckpoint " << ck_path.string() << "\nmetrics " << csv_path.string() << "\n";
  return kOk;
}

/// Instance files named on the command line; directories contribute their
/// *.json files in name order.
inline std::vector<fs::path> instance_files(const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file() && e.path().extension() == ".json") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else if (fs::exists(p)) {
      files.push_back(p);
    } else {
      throw IoError("no such instance file or directory: " + in);
    }
  }
  return files;
}

struct EvalOptions {
  std::string checkpoint, baseline = "none", decode = "sample", out;
  std::vector<std::string> instances;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  double classic_budget_ms = 10000.0;
};

inline int cmd_eval(const EvalOptions& o, Context& ctx) {
  const Decode decode = parse_choice<Decode>("decode", o.decode, {{"greedy", Decode::greedy}, {"sample", Decode::sample}});
  parse_choice<int>("baseline", o.baseline, {{"none", 0}, {"classic", 1}, {"random", 2}});
  if (o.threads < 1) throw ArgumentError("eval: --threads must be >= 1");
  Checkpoint ck;
  try {
    ck = load_checkpoint(o.checkpoint);
  } catch (const std::ios_base::failure& e) {
    throw IoError(e.what());
  }
  const auto files = instance_files(o.instances);
  if (files.empty()) throw ArgumentError("eval: no instances given");
  std::vector<Instance> instances;
  std::vector<std::string> names;
  for (const auto& f : files) {
    try {
      instances.push_back(load_instance(f.string()));
    } catch (const std::ios_base::failure& e) {
      throw IoError(e.what());
    }
    names.push_back(f.stem().string());
  }

  const std::size_t M = policy_num_agents(ck.state.theta, ck.config.model.policy);
  for (std::size_t i = 0; i < instances.size(); ++i)
    if (instances[i].num_agents != M)
      throw ArgumentError("eval: checkpoint is for " + std::to_string(M) + " agents, " + files[i].string() + " has " +
                          std::to_string(instances[i].num_agents));

  const fs::path out = o.out.empty() ? default_output_dir() / "eval.csv" : fs::path(o.out);
  ensure_parent(out);
  Manifest manifest = start_manifest(out.string() + ".manifest.json", "eval", ctx.args, config_to_json(ck.config),
                                     {{"results", out.string()}}, o.seed);

  const SolverConfig& solver = ck.config.model.solver;
  std::vector<std::pair<std::string, EvalReport>> reports;
  reports.emplace_back("policy", evaluate_policy(ck.state.theta, ck.config.model.policy, instances, solver, decode,
                                                 o.seed, o.threads));
  if (o.baseline == "random") {
    reports.emplace_back("random", evaluate_random(instances, solver, o.seed, o.threads));
  } else if (o.baseline == "classic") {
    BaselineConfig bc;
    bc.time_budget_ms = o.classic_budget_ms;
    bc.solver = solver;
    reports.emplace_back("classic", imtsp::detail::evaluate_each(instances, o.threads, [&](std::size_t i) {
                           return solve_mtsp_classic(instances[i], bc).L;
                         }));
  }

  std::ostringstream csv;
  csv << "instance,method,L,runtime_ms\n";
  for (std::size_t i = 0; i < instances.size(); ++i)
    for (const auto& [method, r] : reports)
      csv << names[i] << ',' << method << ',' << format_double(r.L[i]) << ',' << format_double(r.runtime_ms[i])
          << '\n';
  for (const auto& [method, r] : reports) {
    double runtime = 0.0;
    for (double t : r.runtime_ms) runtime += t / static_cast<double>(r.runtime_ms.size());
    csv << "mean," << method << ',' << format_double(r.mean) << ',' << format_double(runtime) << '\n';
    csv << "max," << method << ',' << format_double(r.max) << ",\n";
    csv << "min," << method << ',' << format_double(r.min) << ",\n";
    ctx.out << method << ": mean L " << format_double(r.mean) << " over " << r.L.size() << " instance(s)\n";
  }
  write_text(out, csv.str());
  manifest.finish("done");
  ctx.out << "results " << out.string() << "\n";
  return kOk;
}

struct GradcheckOptions {
  std::uint64_t seed = 1;
  std::string fault = "none", out;
};

inline int cmd_gradcheck(const GradcheckOptions& o, Context& ctx) {
  const Fault fault =
      parse_choice<Fault>("inject-fault", o.fault, {{"none", Fault::none}, {"score-sign", Fault::score_sign}});
  const auto results = all_checks(o.seed, fault);
  json report = {{"seed", o.seed}, {"fault", to_string(fault)}, {"checks", json::array()}};
  std::vector<std::string> failing;
  for (const auto& c : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%-4s %-26s max error %.3e (tolerance %.0e)", c.passed ? "ok" : "FAIL",
                  c.name.c_str(), c.error, c.tolerance);
    ctx.out << line << (c.detail.empty() ? "" : "  " + c.detail) << "\n";
    report["checks"].push_back(
        {{"name", c.name}, {"passed", c.passed}, {"max_error", c.error}, {"tolerance", c.tolerance}});
    if (!c.passed) failing.push_back(c.name);
  }
  report["passed"] = failing.empty();
  if (!o.out.empty()) write_text(o.out, report.dump(2) + "\n");
  if (failing.empty()) return kOk;
  std::string names;
  for (const auto& n : failing) names += (names.empty() ? "" : ", ") + n;
  ctx.err << "failing checks: " << names << "\n";
  return kCheckFailed;
}

struct PlotdataOptions {
  std::string metrics, out;
  std::size_t window = 1;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline int cmd_plotdata(const PlotdataOptions& o, Context& ctx) {
  if (o.window < 1) throw ArgumentError("plotdata: --window must be >= 1");
  std::ifstream in(o.metrics);
  if (!in) throw IoError("cannot open " + o.metrics);
  std::string line;
  if (!std::getline(in, line)) throw ArgumentError("plotdata: empty metrics file");
  const auto header = split_csv_line(line);
  const auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  };
  if (col("iteration") == header.size() || col("mean_L") == header.size())
    throw ArgumentError("plotdata: header lacks iteration/mean_L columns");

  std::vector<std::vector<std::pair<double, double>>> points(header.size());
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ArgumentError("plotdata: row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                          " fields, header has " + std::to_string(header.size()));
    const double x = parse_real("iteration (row " + std::to_string(row) + ")", cells[col("iteration")]);
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (c == col("iteration") || cells[c].empty()) continue;
      points[c].emplace_back(x, parse_real(header[c] + " (row " + std::to_string(row) + ")", cells[c]));
    }
  }

  json series = json::object();
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (points[c].empty()) continue;
    std::vector<double> xs, ys;
    for (const auto& [x, y] : points[c]) {
      xs.push_back(x);
      ys.push_back(y);
    }
    series[header[c]] = {{"x", xs}, {"y", moving_average(ys, o.window)}};
  }
  const json doc = {{"source", o.metrics},
                    {"smoothing", {{"kind", "trailing moving average"}, {"window", o.window}}},
                    {"variance_metric", "sum over parameters of ln(minibatch-mean variance + eps)"},
                    {"series", series}};
  const fs::path out = o.out.empty() ? default_output_dir() / "plotdata.json" : fs::path(o.out);
  write_text(out, doc.dump(2) + "\n");
  ctx.out << "wrote " << series.size() << " series to " << out.string() << "\n";
  return kOk;
}

}  // namespace detail

/// Entry point shared by the `imtsp` executable and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace detail;
  Context ctx{out, err, std::vector<std::string>(argv, argv + argc)};

  CLI::App app{"Learned allocation for the min-max multiple travelling salesman problem", "imtsp"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(IMTSP_VERSION) + " (" + IMTSP_GIT_REV + ")");

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate random instances as JSON files");
  gen_cmd->add_option("--n", gen.n, "cities per instance, depot included")->required();
  gen_cmd->add_option("--m", gen.m, "agents")->required();
  gen_cmd->add_option("--count", gen.count, "number of instances");
  gen_cmd->add_option("--seed", gen.seed, "seed of the first instance; instance i uses seed + i");
  gen_cmd->add_option("--out", gen.out, "output directory (default $IMTSP_OUTPUT_DIR/instances)");

  TrainOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "train the allocation policy");
  train_cmd->add_option("--config", train_opts.config_path, "sectioned key = value config file");
  train_cmd->add_option("--resume", train_opts.resume, "checkpoint to continue from");
  train_cmd->add_option("--out", train_opts.out, "output directory (default $IMTSP_OUTPUT_DIR/run)");
  const auto settings = train_settings();
  std::map<std::string, std::string> raw;
  for (const Setting& s : settings)
    train_cmd->add_option(s.flag, raw[s.flag], s.help + " [" + s.key + "]");

  EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on instance files");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--instances", eval.instances, "instance files or directories")->required();
  eval_cmd->add_option("--baseline", eval.baseline, "none|classic|random");
  eval_cmd->add_option("--decode", eval.decode, "greedy|sample");
  eval_cmd->add_option("--seed", eval.seed, "seed for sampled decoding and the random baseline");
  eval_cmd->add_option("--threads", eval.threads, "worker threads");
  eval_cmd->add_option("--classic-budget-ms", eval.classic_budget_ms, "time budget of the classic baseline");
  eval_cmd->add_option("--out", eval.out, "results CSV (default $IMTSP_OUTPUT_DIR/eval.csv)");

  GradcheckOptions gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "run the gradient and estimator checks");
  gc_cmd->add_option("--seed", gc.seed, "check seed");
  gc_cmd->add_option("--inject-fault", gc.fault, "none|score-sign (test hook)");
  gc_cmd->add_option("--out", gc.out, "optional JSON report");

  PlotdataOptions plot;
  auto* plot_cmd = app.add_subcommand("plotdata", "turn a metrics CSV into plot-ready JSON series");
  plot_cmd->add_option("--metrics", plot.metrics, "metrics CSV")->required();
  plot_cmd->add_option("--window", plot.window, "moving-average window");
  plot_cmd->add_option("--out", plot.out, "output JSON (default $IMTSP_OUTPUT_DIR/plotdata.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen(gen, ctx);
    if (train_cmd->parsed()) {
      for (const Setting& s : settings)
        if (train_cmd->count(s.flag)) train_opts.flags[s.flag] = raw[s.flag];
      return cmd_train(train_opts, ctx);
    }
    if (eval_cmd->parsed()) return cmd_eval(eval, ctx);
    if (gc_cmd->parsed()) return cmd_gradcheck(gc, ctx);
    if (plot_cmd->parsed()) return cmd_plotdata(plot, ctx);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::ios_base::failure& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace imtsp::cli
