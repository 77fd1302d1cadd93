#pragma once

// Discretized full log-likelihood of the partially linear hazard model
//   h(t | X, Z) = exp{theta' Z + g(t, X)}
// evaluated on a counting-process expansion:
//   l(theta, g) = (1/n) sum_i sum_j [ delta_ij chi_ij - exposure_ij exp(chi_ij) ],
//   chi_ij = g(t_j, X_i) + theta' Z_i.
// Everything here works with the loss -l (minimized).

#include <span>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "flexihaz/mlp.hpp"
#include "flexihaz/survdata.hpp"

namespace flexihaz {

/// Network for g(t, x) with input layout (t, x_1..x_d) plus the linear
/// coefficients theta for z.
struct ModelState {
  nn::MlpParams g_params;
  Eigen::VectorXd theta;

  /// Throws ShapeError unless g's input width is 1 + d and theta has length p.
  void validate(int d, int p) const;
};

nlohmann::json to_json(const ModelState& state);
ModelState model_state_from_json(const nlohmann::json& doc);

struct LossReport {
  double neg_loglik = 0.0;     ///< -(event_term - exposure_term) / n
  double event_term = 0.0;     ///< sum_rows delta * chi
  double exposure_term = 0.0;  ///< sum_rows exposure * exp(chi)
  double max_abs_g = 0.0;      ///< largest |g| over evaluated rows
  std::size_t n_subjects = 0;
  std::size_t n_rows = 0;
};

nlohmann::json to_json(const LossReport& report);

struct LossGradients {
  nn::MlpParams g_grad;
  Eigen::VectorXd theta_grad;
  LossReport report;
};

/// Exponent above which exp(chi) is treated as overflow.
inline constexpr double kMaxLinearPredictor = 700.0;

LossReport neg_loglik(const ModelState& state, const ExpandedRows& rows,
                      const Dataset& data);

LossGradients loss_gradients(const ModelState& state, const ExpandedRows& rows,
                             const Dataset& data);

/// Hessian of the loss in theta: (1/n) sum_rows exposure exp(chi) z z'.
Eigen::MatrixXd theta_hessian(const ModelState& state, const ExpandedRows& rows,
                              const Dataset& data);

/// Positive log-likelihood l at a given resolution:
/// build_grid(data, grid_size, tau) -> expand -> -neg_loglik.
double loglik_with_mesh(const ModelState& state, const Dataset& data,
                        int grid_size, double tau);

/// g(t_j, X_i) for every row.
Eigen::VectorXd network_offsets(const nn::MlpParams& g_params,
                                const ExpandedRows& rows, const Dataset& data);

/// Chunked evaluator that keeps its activation buffers between calls.
/// Used by the training loop for mini-batch gradients over a subset of rows.
class LikelihoodEvaluator {
 public:
  explicit LikelihoodEvaluator(std::size_t chunk = 1024) : chunk_(chunk) {}

  /// Accumulates loss terms (and gradients when `grads` is non-null) over the
  /// rows listed in `row_ids` (all rows when empty). Gradients are scaled by
  /// `grad_scale`; the report is normalized by data.size().
  LossReport run(const ModelState& state, const ExpandedRows& rows,
                 const Dataset& data, std::span<const std::size_t> row_ids,
                 LossGradients* grads, double grad_scale,
                 Eigen::MatrixXd* hessian = nullptr);

 private:
  std::size_t chunk_;
  nn::BatchCache cache_;
  Eigen::MatrixXd inputs_;
  Eigen::RowVectorXd outputs_;
  Eigen::RowVectorXd upstream_;
};

}  // namespace flexihaz
