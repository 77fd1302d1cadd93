#pragma once

// Dense feed-forward ReLU network with scalar output, exact reverse-mode
// gradients, and an ADAM optimizer that updates network weights together with
// an auxiliary linear coefficient vector.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace flexihaz::nn {

/// Weights W_l (p_{l+1} x p_l) and biases v_l (p_{l+1}) of
/// g(u) = W_K s(W_{K-1} s(... s(W_0 u' + v_0) ...) + v_{K-1}) + v_K,
/// with s = max(., 0) and u' = u / input_scale componentwise.
///
/// input_scale is a fixed (non-trained) preconditioner; it lets callers feed
/// raw study times without the first layer having to absorb a 1/tau factor.
struct MlpParams {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
  Eigen::VectorXd input_scale;

  std::vector<int> widths() const;
  int input_dim() const { return static_cast<int>(weights.front().cols()); }
  std::size_t num_layers() const { return weights.size(); }
  std::size_t num_parameters() const;

  /// Throws ShapeError if the layer shapes are inconsistent.
  void validate() const;
  bool all_finite() const;

  MlpParams zeros_like() const;
  void set_zero();
  MlpParams& operator+=(const MlpParams& other);
  MlpParams& operator*=(double c);

  /// Flat view helpers, ordered layer by layer: weights column-major, then bias.
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& flat);
};

/// He-uniform weights (U(-sqrt(6/fan_in), sqrt(6/fan_in))), zero biases,
/// unit input scale. Throws ConfigError on invalid widths.
MlpParams init_params(std::span<const int> widths, std::uint64_t seed);

/// Pre/post activations of one forward pass. post[0] is the scaled input,
/// pre[l] = W_l post[l] + v_l, post[l+1] = s(pre[l]) for hidden layers.
struct ActivationCache {
  std::vector<Eigen::VectorXd> pre;
  std::vector<Eigen::VectorXd> post;
};

struct ForwardResult {
  double output = 0.0;
  ActivationCache cache;
};

ForwardResult forward(const MlpParams& params, const Eigen::VectorXd& u);

/// Gradient of upstream * g(u) with respect to every W_l and v_l.
MlpParams backward(const MlpParams& params, const ActivationCache& cache,
                   double upstream);

/// d g / d u at the cached point (valid inside one activation region).
Eigen::VectorXd input_gradient(const MlpParams& params,
                               const ActivationCache& cache);

/// Column-batched evaluation. Buffers are reused between calls of equal size,
/// so one BatchCache per worker avoids reallocations in training loops.
struct BatchCache {
  std::vector<Eigen::MatrixXd> pre;
  std::vector<Eigen::MatrixXd> post;
  Eigen::MatrixXd delta;
  Eigen::MatrixXd delta_next;
};

/// inputs is p_0 x B; returns the 1 x B row of outputs.
void forward_batch(const MlpParams& params, const Eigen::MatrixXd& inputs,
                   BatchCache& cache, Eigen::RowVectorXd& outputs);

/// Adds sum_b upstream(b) * d g(u_b) / d params into grads.
void backward_batch(const MlpParams& params, BatchCache& cache,
                    const Eigen::RowVectorXd& upstream, MlpParams& grads);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  MlpParams first_moment;
  MlpParams second_moment;
  Eigen::VectorXd theta_first_moment;
  Eigen::VectorXd theta_second_moment;
  std::int64_t step_count = 0;
  AdamOptions options;

  static AdamState create(const MlpParams& params, Eigen::Index theta_dim,
                          const AdamOptions& options = {});
};

/// One bias-corrected ADAM update applied jointly to params and theta.
/// Throws TrainingError on non-finite gradients (nothing is modified then).
void adam_step(MlpParams& params, Eigen::VectorXd& theta,
               const MlpParams& grads, const Eigen::VectorXd& theta_grad,
               AdamState& state);

nlohmann::json to_json(const MlpParams& params);
MlpParams params_from_json(const nlohmann::json& doc);

}  // namespace flexihaz::nn
