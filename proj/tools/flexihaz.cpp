// flexihaz: simulate | fit | infer | replicate

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "flexihaz/errors.hpp"
#include "flexihaz/fit.hpp"
#include "flexihaz/inference.hpp"
#include "flexihaz/simstudy.hpp"
#include "flexihaz/survdata.hpp"
#include "flexihaz/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace flexihaz;

namespace {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kIngestion = 3,
  kNumerical = 4,
  kSingular = 5,
  kReplicationFailures = 6,
};

class UsageError : public Error {
 public:
  using Error::Error;
};

void write_atomically(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path() && !fs::exists(path.parent_path())) {
    throw UsageError("output directory does not exist: " + path.parent_path().string());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write " + path.string());
    out << contents;
    if (!out) throw UsageError("failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IngestionError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

fs::path manifest_path(const fs::path& artifact) {
  fs::path m = artifact;
  m += ".manifest.json";
  return m;
}

struct Manifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& path) const {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const json doc = {{"command", command},
                      {"config", config},
                      {"seed", seed},
                      {"artifacts", artifacts},
                      {"wall_clock_seconds", secs},
                      {"version", kVersion},
                      {"deterministic", true}};
    write_atomically(path, doc.dump(2) + "\n");
  }
};

int default_jobs() {
  if (const char* env = std::getenv("FLEXIHAZ_JOBS")) {
    try {
      const int j = std::stoi(env);
      if (j >= 1) return j;
    } catch (const std::exception&) {
    }
  }
  return 1;
}

// Options shared by the commands that train networks.
struct FitOverrides {
  std::string config_path;
  std::optional<int> grid_size;
  std::optional<int> max_epochs;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON file overriding fit defaults");
    cmd->add_option("--grid-size", grid_size, "equally spaced grid points (default min(n,512))")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--max-epochs", max_epochs, "upper bound on training epochs")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--fit-seed", seed, "seed for splits, initialization and shuffling");
    cmd->add_option("--tau", tau, "study horizon (default: largest observed time)")
        ->check(CLI::PositiveNumber);
  }

  FitConfig resolve() const {
    FitConfig c = config_path.empty() ? FitConfig{} : fit_config_from_json(read_json(config_path));
    if (grid_size) c.grid_size = *grid_size;
    if (max_epochs) c.max_epochs = *max_epochs;
    if (seed) c.seed = *seed;
    if (tau) c.tau = *tau;
    c.validate();
    return c;
  }
};

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

json intervals_json(const Eigen::VectorXd& theta, const InformationEstimate& est,
                    const std::vector<double>& levels) {
  json out = json::array();
  for (double level : levels) {
    json ivs = json::array();
    for (const auto& ci : wald_ci(theta, est, level)) ivs.push_back({ci.lower, ci.upper});
    out.push_back({{"level", level}, {"intervals", ivs}});
  }
  return out;
}

void check_levels(const std::vector<double>& levels) {
  if (levels.empty()) throw UsageError("--levels needs at least one value");
  for (double l : levels) {
    if (!(l > 0.0 && l < 1.0)) throw UsageError("levels must lie in (0, 1)");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partially linear hazard regression with a neural nuisance: "
               "simulation, fitting, inference and replication studies"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "draw a dataset from the simulation design");
  SimConfig sim;
  std::vector<double> sim_theta;
  std::string sim_out;
  sim_cmd->add_option("--n", sim.n, "number of subjects")->required();
  sim_cmd->add_option("--seed", sim.seed, "random seed")->required();
  sim_cmd->add_option("--out", sim_out, "output CSV")->required();
  sim_cmd->add_option("--theta", sim_theta, "true theta (default 2 -1)")->delimiter(',');
  sim_cmd->add_option("--tau", sim.tau, "administrative censoring horizon");
  sim_cmd->add_option("--censor-rate", sim.censor_rate, "exponential censoring rate");
  sim_cmd->add_option("--base-rate", sim.base_rate, "baseline hazard multiplier");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "train the model and refine theta");
  std::string fit_data;
  std::string fit_out;
  FitOverrides fit_over;
  fit_cmd->add_option("--data", fit_data, "input CSV")->required();
  fit_cmd->add_option("--out", fit_out, "checkpoint JSON")->required();
  fit_over.add_to(fit_cmd);

  // infer
  auto* inf_cmd = app.add_subcommand("infer", "standard errors and Wald intervals");
  std::string inf_data;
  std::string inf_ckpt;
  std::string inf_out;
  std::vector<double> inf_levels{0.90, 0.95};
  int inf_folds = 5;
  FitOverrides inf_over;
  inf_cmd->add_option("--data", inf_data, "input CSV")->required();
  inf_cmd->add_option("--checkpoint", inf_ckpt, "checkpoint written by `fit`")->required();
  inf_cmd->add_option("--out", inf_out, "output JSON (stdout when omitted)");
  inf_cmd->add_option("--levels", inf_levels, "confidence levels")->delimiter(',');
  inf_cmd->add_option("--folds", inf_folds, "cross-fitting folds")->check(CLI::Range(2, 1 << 30));
  inf_over.add_to(inf_cmd);

  // replicate
  auto* rep_cmd = app.add_subcommand("replicate", "Monte Carlo replication study");
  SimConfig rep_sim;
  std::vector<double> rep_theta;
  int reps = 0;
  int jobs = default_jobs();
  std::string rep_out;
  std::string mode = "full";
  std::vector<double> rep_levels{0.90, 0.95};
  int rep_folds = 5;
  FitOverrides rep_over;
  rep_cmd->add_option("--reps", reps, "number of replications")->required();
  rep_cmd->add_option("--n", rep_sim.n, "subjects per replication")->required();
  rep_cmd->add_option("--seed", rep_sim.seed, "study seed")->required();
  rep_cmd->add_option("--out", rep_out, "output prefix (writes .json, .txt, .csv)")->required();
  rep_cmd->add_option("--jobs", jobs, "parallel replications (env FLEXIHAZ_JOBS)");
  rep_cmd->add_option("--levels", rep_levels, "coverage levels")->delimiter(',');
  rep_cmd->add_option("--folds", rep_folds, "cross-fitting folds")->check(CLI::Range(2, 1 << 30));
  rep_cmd->add_option("--mode", mode, "full | oracle")
      ->check(CLI::IsMember({"full", "oracle"}));
  rep_cmd->add_option("--theta", rep_theta, "true theta (default 2 -1)")->delimiter(',');
  rep_cmd->add_option("--censor-rate", rep_sim.censor_rate, "exponential censoring rate");
  rep_over.add_to(rep_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (sim_cmd->parsed()) {
      Manifest man;
      man.command = "simulate";
      if (!sim_theta.empty()) {
        sim.theta_true = Eigen::Map<const Eigen::VectorXd>(
            sim_theta.data(), static_cast<Eigen::Index>(sim_theta.size()));
      }
      if (sim.n < 1) throw UsageError("--n must be >= 1");
      try {
        sim.validate();
      } catch (const ConfigError& e) {
        throw UsageError(e.what());
      }
      const Dataset data = simulate(sim);
      const fs::path out(sim_out);
      if (out.has_parent_path() && !fs::exists(out.parent_path())) {
        throw UsageError("output directory does not exist: " + out.parent_path().string());
      }
      write_csv(data, out);
      man.config = to_json(sim);
      man.seed = sim.seed;
      man.artifacts = {out.string()};
      man.write(manifest_path(out));
      std::cerr << "wrote " << data.size() << " records (" << data.event_count()
                << " events) to " << out.string() << "\n";
      return kOk;
    }

    if (fit_cmd->parsed()) {
      Manifest man;
      man.command = "fit";
      const FitConfig config = fit_over.resolve();
      const Dataset data = load_csv(fit_data);
      const FitResult result = fit_model(data, config);
      json doc = to_json(result);
      doc["format"] = "flexihaz.checkpoint";
      doc["version"] = 1;
      doc["config"] = to_json(config);
      doc["data"] = fit_data;
      const fs::path out(fit_out);
      write_atomically(out, doc.dump(2) + "\n");
      man.config = to_json(config);
      man.config["data"] = fit_data;
      man.seed = config.seed;
      man.artifacts = {out.string()};
      man.write(manifest_path(out));
      for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "theta";
      for (Eigen::Index j = 0; j < result.state.theta.size(); ++j) {
        std::cout << ' ' << result.state.theta(j);
      }
      std::cout << "\nepochs " << result.epochs_run << " (best " << result.best_epoch
                << "), refine iterations " << result.refine_iterations << "\n";
      return kOk;
    }

    if (inf_cmd->parsed()) {
      Manifest man;
      man.command = "infer";
      check_levels(inf_levels);
      if (!fs::exists(inf_ckpt)) throw IngestionError("checkpoint not found: " + inf_ckpt);
      const json ckpt = read_json(inf_ckpt);
      ModelState state;
      FitConfig config;
      try {
        state = model_state_from_json(ckpt.at("state"));
        config = ckpt.contains("config") ? fit_config_from_json(ckpt.at("config")) : FitConfig{};
      } catch (const json::exception& e) {
        throw IngestionError(std::string("malformed checkpoint: ") + e.what());
      } catch (const ShapeError& e) {
        throw IngestionError(std::string("malformed checkpoint: ") + e.what());
      }
      if (!inf_over.config_path.empty() || inf_over.seed || inf_over.max_epochs ||
          inf_over.grid_size || inf_over.tau) {
        FitOverrides o = inf_over;
        FitConfig base = o.resolve();
        if (o.config_path.empty()) {
          // Only the explicit flags override the checkpoint's config.
          if (o.seed) config.seed = base.seed;
          if (o.max_epochs) config.max_epochs = base.max_epochs;
          if (o.grid_size) config.grid_size = base.grid_size;
          if (o.tau) config.tau = base.tau;
        } else {
          config = base;
        }
      }
      const Dataset data = load_csv(inf_data);
      state.validate(data.d(), data.p());
      const CrossFitResult cf = cross_fit_residuals(data, inf_folds, config);
      const InformationEstimate est = information(cf.residuals, data.size());
      const json doc = {{"format", "flexihaz.inference"},
                        {"version", 1},
                        {"theta", to_vec(state.theta)},
                        {"information", to_json(est)},
                        {"standard_errors", to_vec(est.standard_errors)},
                        {"levels", intervals_json(state.theta, est, inf_levels)},
                        {"folds", inf_folds}};
      if (inf_out.empty()) {
        std::cout << doc.dump(2) << "\n";
      } else {
        const fs::path out(inf_out);
        write_atomically(out, doc.dump(2) + "\n");
        man.config = to_json(config);
        man.config["data"] = inf_data;
        man.config["checkpoint"] = inf_ckpt;
        man.config["levels"] = inf_levels;
        man.config["folds"] = inf_folds;
        man.seed = config.seed;
        man.artifacts = {out.string()};
        man.write(manifest_path(out));
      }
      return kOk;
    }

    if (rep_cmd->parsed()) {
      Manifest man;
      man.command = "replicate";
      check_levels(rep_levels);
      if (reps < 1) throw UsageError("--reps must be >= 1");
      if (jobs < 1) throw UsageError("--jobs must be >= 1");
      if (rep_sim.n < 1) throw UsageError("--n must be >= 1");
      if (!rep_theta.empty()) {
        rep_sim.theta_true = Eigen::Map<const Eigen::VectorXd>(
            rep_theta.data(), static_cast<Eigen::Index>(rep_theta.size()));
      }
      const FitConfig config = rep_over.resolve();
      ReplicateOptions opts;
      opts.jobs = jobs;
      opts.folds = rep_folds;
      opts.mode = mode == "oracle" ? ReplicationMode::kOracleNuisance : ReplicationMode::kFull;
      opts.on_progress = [](const ReplicationRecord& r) {
        std::cerr << "replication " << r.index << (r.ok ? " ok" : " FAILED: " + r.error)
                  << " (" << r.seconds << " s)\n";
      };
      const ReplicationReport report = replicate(rep_sim, config, reps, rep_levels, opts);
      const fs::path json_path = rep_out + ".json";
      const fs::path table_path = rep_out + ".txt";
      const fs::path csv_path = rep_out + ".csv";
      write_atomically(json_path, to_json(report).dump(2) + "\n");
      const std::string table = format_table(report);
      write_atomically(table_path, table);
      write_replications_csv(report, csv_path);
      man.config = {{"simulation", to_json(rep_sim)},
                    {"fit", to_json(config)},
                    {"reps", reps},
                    {"levels", rep_levels},
                    {"folds", rep_folds},
                    {"mode", mode},
                    {"jobs", jobs}};
      man.seed = rep_sim.seed;
      man.artifacts = {json_path.string(), table_path.string(), csv_path.string()};
      man.write(manifest_path(json_path));
      std::cout << table;
      if (report.failure_limit_exceeded) {
        std::cerr << "error: " << report.failures << " of " << reps
                  << " replications failed (limit 10%)\n";
        return kReplicationFailures;
      }
      return kOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const IngestionError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kIngestion;
  } catch (const InferenceError& e) {
    std::cerr << "inference error: " << e.what() << "\n";
    return kSingular;
  } catch (const ShapeError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kIngestion;
  } catch (const Error& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
