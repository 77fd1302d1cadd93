#pragma once

// Simulation design with nonlinear time-covariate interaction and the Monte
// Carlo replication harness that summarizes bias, variability, estimated
// standard errors and Wald coverage.
//
// Data generating model (d = 3, p = dim(theta_true)):
//   X ~ U[-1,1]^3, Z ~ U[-1,1]^p,
//   h(t | X, Z) = base_rate * exp{(0.1 + f(X)^2) t + theta' Z},
//   f(X) = 0.2 (X1 + X2) + 0.5 X1 X2 + X3^2,
//   C = min(Exp(censor_rate), tau), T = min(U, C), Delta = 1{U <= C}.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "flexihaz/fit.hpp"
#include "flexihaz/survdata.hpp"

namespace flexihaz {

struct SimConfig {
  std::size_t n = 2000;
  Eigen::VectorXd theta_true = (Eigen::VectorXd(2) << 2.0, -1.0).finished();
  double tau = 30.0;
  double base_rate = 0.1;
  /// Rate of the exponential censoring law; 0.085 yields ~30% total censoring
  /// (random plus administrative) under the default design.
  double censor_rate = 0.085;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const SimConfig& config);
SimConfig sim_config_from_json(const nlohmann::json& doc);

inline constexpr int kSimNuisanceDim = 3;

/// 0.2 (x1 + x2) + 0.5 x1 x2 + x3^2.
double f_nuisance(const Eigen::Ref<const Eigen::VectorXd>& x);

/// Time slope of the log-hazard, 0.1 + f(x)^2.
double hazard_slope(const Eigen::Ref<const Eigen::VectorXd>& x);

/// The true nuisance log-hazard g(t, x) = log(base_rate) + (0.1 + f(x)^2) t.
double true_log_hazard(double t, const Eigen::Ref<const Eigen::VectorXd>& x,
                       const SimConfig& config);

/// Cumulative hazard int_0^t h(s | x, z) ds in closed form.
double cumulative_hazard(double t, const Eigen::Ref<const Eigen::VectorXd>& x,
                         const Eigen::Ref<const Eigen::VectorXd>& z,
                         const Eigen::VectorXd& theta, const SimConfig& config);

/// Inverse-transform draw: the U solving cumulative_hazard(U) = -log(u).
double sample_event_time(const Eigen::Ref<const Eigen::VectorXd>& x,
                         const Eigen::Ref<const Eigen::VectorXd>& z,
                         const Eigen::VectorXd& theta, const SimConfig& config,
                         double u);

/// Deterministic in config.seed.
Dataset simulate(const SimConfig& config);

struct ReplicationRecord {
  int index = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  Eigen::VectorXd theta;
  Eigen::VectorXd standard_errors;
  /// covered[l][j]: interval at levels[l] contains theta_true(j).
  std::vector<std::vector<bool>> covered;
  double censoring_fraction = 0.0;
  int epochs_run = 0;
  double seconds = 0.0;
};

struct CoordinateSummary {
  double mean_estimate = 0.0;
  std::optional<double> empirical_sd;  ///< absent with fewer than two replications
  double mean_standard_error = 0.0;
  std::vector<double> coverage;        ///< one entry per level
};

struct ReplicationReport {
  std::vector<double> levels;
  Eigen::VectorXd theta_true;
  std::vector<ReplicationRecord> replications;  ///< sorted by index
  std::vector<CoordinateSummary> coordinates;
  int requested = 0;
  int succeeded = 0;
  int failures = 0;
  bool failure_limit_exceeded = false;
  double mean_censoring_fraction = 0.0;
  std::string mode;
};

enum class ReplicationMode {
  /// simulate -> train -> refine -> cross-fit -> information -> Wald.
  kFull,
  /// g fixed at the true log-hazard; theta by refine_theta; SE from the
  /// theta-Hessian (parametric MLE with known nuisance).
  kOracleNuisance,
};

struct ReplicateOptions {
  ReplicationMode mode = ReplicationMode::kFull;
  int jobs = 1;
  int folds = 5;
  /// Called after each replication finishes (from worker threads, serialized).
  std::function<void(const ReplicationRecord&)> on_progress;
};

/// Runs `reps` independent replications; replication r uses seeds derived
/// from (config.seed, r) so results do not depend on `jobs`. Failed
/// replications are recorded and excluded from the aggregates; more than 10%
/// failures sets failure_limit_exceeded.
ReplicationReport replicate(const SimConfig& config, const FitConfig& fit_config,
                            int reps, const std::vector<double>& levels,
                            const ReplicateOptions& options = {});

/// Recomputes aggregates from report.replications.
void summarize(ReplicationReport& report);

nlohmann::json to_json(const ReplicationReport& report);
/// Aligned plain-text table with columns Est, Emp SD, Est SE and one coverage
/// column per level.
std::string format_table(const ReplicationReport& report);
void write_replications_csv(const ReplicationReport& report,
                            const std::filesystem::path& path);

}  // namespace flexihaz
