#pragma once

// Efficient-information estimate for theta from cross-fitted projection
// networks, standard errors and Wald intervals.
//
// For each primary coordinate j a ReLU network f_j(T, X) is fitted by least
// squares on uncensored subjects. With K-fold cross-fitting every subject is
// predicted by networks that never saw it. The residual row of subject i is
// Delta_i * (Z_i - f(T_i, X_i)) and the information estimate is R'R / n.

#include <cstdint>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "flexihaz/fit.hpp"
#include "flexihaz/mlp.hpp"
#include "flexihaz/survdata.hpp"

namespace flexihaz {

struct InformationEstimate {
  Eigen::MatrixXd info;
  Eigen::MatrixXd info_inverse;
  Eigen::VectorXd standard_errors;
  std::size_t n_effective = 0;  ///< residual rows that are not identically zero
  std::size_t n = 0;
  double condition_number = 0.0;
};

nlohmann::json to_json(const InformationEstimate& est);

struct ProjectionFit {
  nn::MlpParams params;
  int epochs_run = 0;
  double best_val_mse = 0.0;
  double train_mse = 0.0;
};

/// Least-squares network regression of z_j on (T, X) over the uncensored
/// records of `train_subset`, using config's architecture, learning rate,
/// batch size, patience and max_epochs, early-stopped on a
/// config.val_fraction slice of those records.
/// Throws InferenceError if there is no uncensored record.
ProjectionFit fit_projection(const Dataset& train_subset, int coordinate,
                             const FitConfig& config, std::uint64_t stream = 0);

/// Evaluates a projection network at (T_i, X_i) for every record.
Eigen::VectorXd predict_projection(const nn::MlpParams& params, const Dataset& data);

struct CrossFitResult {
  Eigen::MatrixXd residuals;    ///< n x p, zero rows for censored subjects
  Eigen::MatrixXd predictions;  ///< n x p out-of-fold predictions
  std::vector<int> fold;        ///< fold index per subject
  int folds = 0;
};

/// Deterministic partition of n subjects into K non-empty folds.
std::vector<int> assign_folds(std::size_t n, int folds, std::uint64_t seed);

CrossFitResult cross_fit_residuals(const Dataset& data, int folds,
                                   const FitConfig& config);

/// Residuals Delta_i (Z_i - projection_i) for supplied projections (n x p).
Eigen::MatrixXd projection_residuals(const Dataset& data,
                                     const Eigen::MatrixXd& projections);

inline constexpr double kMaxConditionNumber = 1e12;

/// info = R'R / n, SE_j = sqrt((info^-1)_jj / n). Throws InferenceError when
/// the condition number of info exceeds kMaxConditionNumber.
InformationEstimate information(const Eigen::MatrixXd& residuals, std::size_t n);

/// Standard normal quantile (Acklam's rational approximation polished by
/// one Halley step against erfc).
double normal_quantile(double p);

struct WaldInterval {
  double lower = 0.0;
  double upper = 0.0;
  double level = 0.0;
  bool contains(double value) const { return lower <= value && value <= upper; }
};

/// theta_j +/- z_{(1+level)/2} SE_j for each coordinate.
std::vector<WaldInterval> wald_ci(const Eigen::VectorXd& theta,
                                  const InformationEstimate& est, double level);

std::vector<WaldInterval> wald_ci(const Eigen::VectorXd& theta,
                                  const Eigen::VectorXd& standard_errors,
                                  double level);

}  // namespace flexihaz
