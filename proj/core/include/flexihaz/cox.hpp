#pragma once

#include <Eigen/Dense>

#include "flexihaz/survdata.hpp"

namespace flexihaz {

struct CoxFit {
  Eigen::VectorXd coefficients;  ///< (x_1..x_d, z_1..z_p)
  Eigen::MatrixXd information;   ///< negative Hessian of the log partial likelihood
  double log_partial_likelihood = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
};

struct CoxOptions {
  int max_iterations = 50;
  double gradient_tolerance = 1e-8;
  int max_halvings = 40;
};

/// Linear Cox proportional hazards fit on the stacked covariates (X, Z) by
/// Newton-Raphson on the Breslow log partial likelihood, halving the step
/// whenever the objective fails to increase.
///
/// Throws EstimationError when there are no events, a covariate column is
/// constant, the information matrix is singular, or Newton does not reach
/// the gradient tolerance within max_iterations.
CoxFit cox_fit(const Dataset& data, const CoxOptions& options = {});

/// Breslow log partial likelihood of an arbitrary design (rows = subjects).
/// Exposed for tests and diagnostics.
double cox_log_partial_likelihood(const Eigen::VectorXd& times,
                                  const Eigen::VectorXi& events,
                                  const Eigen::MatrixXd& design,
                                  const Eigen::VectorXd& beta);

}  // namespace flexihaz
