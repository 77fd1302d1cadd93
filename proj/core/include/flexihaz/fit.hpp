#pragma once

// Estimation pipeline: Cox warm start for theta, mini-batch ADAM on the
// discretized likelihood with validation early stopping, then Newton
// refinement of theta with the network held fixed.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "flexihaz/likelihood.hpp"
#include "flexihaz/survdata.hpp"

namespace flexihaz {

struct FitConfig {
  int depth = 5;            ///< hidden layers
  int width = 20;           ///< units per hidden layer
  double learning_rate = 1e-3;
  std::int64_t batch_size = 100000;  ///< expanded rows per ADAM step
  int patience = 35;        ///< epochs without validation improvement
  double val_fraction = 0.33;
  int grid_size = 0;        ///< 0 selects min(n, 512)
  int max_epochs = 1000;
  std::uint64_t seed = 0;
  double tau = 0.0;         ///< 0 selects the largest observed time

  /// Throws ConfigError on non-positive sizes or val_fraction outside (0,1).
  void validate() const;
  int effective_grid_size(std::size_t n) const;
  double effective_tau(const Dataset& data) const;
  std::vector<int> network_widths(int d) const;
};

nlohmann::json to_json(const FitConfig& config);
/// Starts from the defaults and overrides the keys present in `doc`;
/// unknown keys raise ConfigError naming the key.
FitConfig fit_config_from_json(const nlohmann::json& doc);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double max_abs_g = 0.0;
};

struct FitResult {
  ModelState state;              ///< best-validation network; refined theta after fit_model
  Eigen::VectorXd theta_initial; ///< Z-block of the Cox warm start
  Eigen::VectorXd theta_network; ///< theta of the best-validation snapshot
  std::vector<EpochRecord> train_history;  ///< epoch 0 is the initialization
  int epochs_run = 0;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  int refine_iterations = 0;
  std::vector<std::size_t> train_subjects;
  std::vector<std::size_t> val_subjects;
  std::size_t grid_points = 0;
  double tau = 0.0;
  std::vector<std::string> warnings;
};

nlohmann::json to_json(const FitResult& result);

/// Network and theta training only (no refinement). The returned state is
/// the snapshot with the lowest validation loss, including the initialization.
FitResult train(const Dataset& data, const FitConfig& config);

struct RefineOptions {
  double gradient_tolerance = 1e-10;
  int max_iterations = 100;
  int fallback_steps = 1000;
};

struct RefineResult {
  ModelState state;
  int iterations = 0;
  bool used_fallback = false;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double gradient_norm = 0.0;
};

/// Newton iterations on the loss in theta with g frozen (step halving keeps
/// the loss monotone). Falls back to backtracking gradient descent when the
/// theta-Hessian is numerically singular; throws InferenceError if it still
/// is afterwards.
RefineResult refine_theta(const ModelState& state, const ExpandedRows& rows,
                          const Dataset& data, const RefineOptions& options = {});

/// Same as refine_theta but with g(t_j, X_i) supplied per row, e.g. from a
/// known nuisance function. Returns the refined theta in result.state.theta
/// (result.state.g_params is left empty).
RefineResult refine_theta_with_offsets(const Eigen::VectorXd& theta0,
                                       const Eigen::VectorXd& offsets,
                                       const ExpandedRows& rows,
                                       const Dataset& data,
                                       const RefineOptions& options = {});

/// Loss and theta-Hessian for fixed per-row offsets (used by the oracle check).
double offset_neg_loglik(const Eigen::VectorXd& theta,
                         const Eigen::VectorXd& offsets,
                         const ExpandedRows& rows, const Dataset& data);
Eigen::MatrixXd offset_theta_hessian(const Eigen::VectorXd& theta,
                                     const Eigen::VectorXd& offsets,
                                     const ExpandedRows& rows,
                                     const Dataset& data);

/// train followed by refine_theta on the full-data expansion.
FitResult fit_model(const Dataset& data, const FitConfig& config);

}  // namespace flexihaz
