#include "flexihaz/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "flexihaz/errors.hpp"
#include "flexihaz/rng.hpp"

namespace flexihaz {

nlohmann::json to_json(const InformationEstimate& est) {
  auto rows = [](const Eigen::MatrixXd& m) {
    std::vector<double> v;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) v.push_back(m(r, c));
    return v;
  };
  return {{"p", est.info.rows()},
          {"info", rows(est.info)},
          {"info_inverse", rows(est.info_inverse)},
          {"standard_errors",
           std::vector<double>(est.standard_errors.data(),
                               est.standard_errors.data() + est.standard_errors.size())},
          {"n", est.n},
          {"n_effective", est.n_effective},
          {"condition_number", est.condition_number}};
}

namespace {

Eigen::MatrixXd projection_inputs(const Dataset& data,
                                  const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd in(1 + data.d(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& rec = data[idx[k]];
    in(0, static_cast<Eigen::Index>(k)) = rec.time;
    if (data.d() > 0) in.block(1, static_cast<Eigen::Index>(k), data.d(), 1) = rec.x;
  }
  return in;
}

double mse(const nn::MlpParams& params, const Eigen::MatrixXd& inputs,
           const Eigen::RowVectorXd& target, nn::BatchCache& cache) {
  Eigen::RowVectorXd out;
  nn::forward_batch(params, inputs, cache, out);
  return (out - target).squaredNorm() / static_cast<double>(target.size());
}

}  // namespace

ProjectionFit fit_projection(const Dataset& train_subset, int coordinate,
                             const FitConfig& config, std::uint64_t stream) {
  config.validate();
  if (coordinate < 0 || coordinate >= train_subset.p()) {
    throw ConfigError("projection coordinate out of range");
  }
  std::vector<std::size_t> uncensored;
  for (std::size_t i = 0; i < train_subset.size(); ++i) {
    if (train_subset[i].event) uncensored.push_back(i);
  }
  if (uncensored.empty()) {
    throw InferenceError("projection fit needs at least one uncensored record");
  }

  const std::uint64_t seed = mix_seed(config.seed, 0x9703 + stream);
  Rng rng(seed);
  rng.shuffle(uncensored);
  std::size_t n_val = static_cast<std::size_t>(
      std::llround(config.val_fraction * static_cast<double>(uncensored.size())));
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
  if (uncensored.size() < 2) {
    train_idx = uncensored;
    val_idx = uncensored;
  } else {
    n_val = std::clamp<std::size_t>(n_val, 1, uncensored.size() - 1);
    val_idx.assign(uncensored.begin(), uncensored.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx.assign(uncensored.begin() + static_cast<std::ptrdiff_t>(n_val), uncensored.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
  }

  const Eigen::MatrixXd train_in = projection_inputs(train_subset, train_idx);
  const Eigen::MatrixXd val_in = projection_inputs(train_subset, val_idx);
  Eigen::RowVectorXd train_y(static_cast<Eigen::Index>(train_idx.size()));
  Eigen::RowVectorXd val_y(static_cast<Eigen::Index>(val_idx.size()));
  for (std::size_t k = 0; k < train_idx.size(); ++k)
    train_y(static_cast<Eigen::Index>(k)) = train_subset[train_idx[k]].z(coordinate);
  for (std::size_t k = 0; k < val_idx.size(); ++k)
    val_y(static_cast<Eigen::Index>(k)) = train_subset[val_idx[k]].z(coordinate);

  nn::MlpParams params =
      nn::init_params(config.network_widths(train_subset.d()), mix_seed(seed, 1));
  const double time_scale = train_in.row(0).maxCoeff();
  params.input_scale(0) = time_scale > 0.0 ? time_scale : 1.0;
  nn::BatchCache cache;
  {
    // Start from the constant fit: shift the output by the residual mean.
    Eigen::RowVectorXd out;
    nn::forward_batch(params, train_in, cache, out);
    params.biases.back()(0) += (train_y - out).mean();
  }

  nn::AdamOptions opt;
  opt.learning_rate = config.learning_rate;
  nn::AdamState adam = nn::AdamState::create(params, 0, opt);
  Eigen::VectorXd no_theta(0);
  Eigen::VectorXd no_theta_grad(0);

  ProjectionFit best{params, 0, mse(params, val_in, val_y, cache), 0.0};
  int best_epoch = 0;
  const std::size_t n_train = train_idx.size();
  const auto batch = static_cast<std::size_t>(
      std::min<std::int64_t>(config.batch_size, static_cast<std::int64_t>(n_train)));
  std::vector<std::size_t> order(n_train);
  for (std::size_t k = 0; k < n_train; ++k) order[k] = k;
  nn::MlpParams grads = params.zeros_like();
  Eigen::MatrixXd batch_in;
  Eigen::RowVectorXd batch_y;
  Eigen::RowVectorXd out;
  Eigen::RowVectorXd upstream;

  int epoch = 0;
  for (epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n_train; start += batch) {
      const auto len = static_cast<Eigen::Index>(std::min(batch, n_train - start));
      batch_in.resize(train_in.rows(), len);
      batch_y.resize(len);
      for (Eigen::Index b = 0; b < len; ++b) {
        const auto src = static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(b)]);
        batch_in.col(b) = train_in.col(src);
        batch_y(b) = train_y(src);
      }
      nn::forward_batch(params, batch_in, cache, out);
      upstream = 2.0 * (out - batch_y) / static_cast<double>(len);
      grads.set_zero();
      nn::backward_batch(params, cache, upstream, grads);
      nn::adam_step(params, no_theta, grads, no_theta_grad, adam);
    }
    const double val = mse(params, val_in, val_y, cache);
    if (val < best.best_val_mse) {
      best.params = params;
      best.best_val_mse = val;
      best_epoch = epoch;
    } else if (epoch - best_epoch >= config.patience) {
      break;
    }
  }
  best.epochs_run = std::min(epoch, config.max_epochs);
  best.train_mse = mse(best.params, train_in, train_y, cache);
  return best;
}

Eigen::VectorXd predict_projection(const nn::MlpParams& params, const Dataset& data) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  nn::BatchCache cache;
  Eigen::RowVectorXd out;
  nn::forward_batch(params, projection_inputs(data, all), cache, out);
  return out.transpose();
}

std::vector<int> assign_folds(std::size_t n, int folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("cross-fitting needs at least 2 folds");
  if (static_cast<std::size_t>(folds) > n) {
    throw ConfigError("more folds than subjects");
  }
  Rng rng(mix_seed(seed, 0xf01d));
  const auto perm = rng.permutation(n);
  std::vector<int> fold(n);
  for (std::size_t k = 0; k < n; ++k) fold[perm[k]] = static_cast<int>(k % folds);
  return fold;
}

Eigen::MatrixXd projection_residuals(const Dataset& data,
                                     const Eigen::MatrixXd& projections) {
  if (projections.rows() != static_cast<Eigen::Index>(data.size()) ||
      projections.cols() != data.p()) {
    throw ShapeError("projection matrix must be n x p");
  }
  Eigen::MatrixXd R = Eigen::MatrixXd::Zero(projections.rows(), projections.cols());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].event) {
      const auto r = static_cast<Eigen::Index>(i);
      R.row(r) = data[i].z.transpose() - projections.row(r);
    }
  }
  return R;
}

CrossFitResult cross_fit_residuals(const Dataset& data, int folds,
                                   const FitConfig& config) {
  if (data.event_count() == 0) {
    throw InferenceError("all subjects are censored; no residuals to form");
  }
  CrossFitResult res;
  res.folds = folds;
  res.fold = assign_folds(data.size(), folds, config.seed);
  res.predictions = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(data.size()), data.p());

  for (int k = 0; k < folds; ++k) {
    std::vector<std::size_t> in_fold;
    std::vector<std::size_t> out_fold;
    for (std::size_t i = 0; i < data.size(); ++i) {
      (res.fold[i] == k ? in_fold : out_fold).push_back(i);
    }
    const Dataset train = data.subset(out_fold);
    const Dataset held = data.subset(in_fold);
    if (train.event_count() == 0) {
      throw InferenceError("fold " + std::to_string(k) +
                           " has no uncensored subjects outside it");
    }
    // One stream per fold: identical z columns get identical projections, so
    // a duplicated covariate shows up as an exactly singular information.
    for (int j = 0; j < data.p(); ++j) {
      const ProjectionFit pf = fit_projection(train, j, config, static_cast<std::uint64_t>(k));
      const Eigen::VectorXd pred = predict_projection(pf.params, held);
      for (std::size_t m = 0; m < in_fold.size(); ++m) {
        res.predictions(static_cast<Eigen::Index>(in_fold[m]), j) =
            pred(static_cast<Eigen::Index>(m));
      }
    }
  }
  res.residuals = projection_residuals(data, res.predictions);
  return res;
}

InformationEstimate information(const Eigen::MatrixXd& residuals, std::size_t n) {
  if (n == 0 || residuals.rows() != static_cast<Eigen::Index>(n)) {
    throw ShapeError("residual matrix must have n rows");
  }
  const Eigen::Index p = residuals.cols();
  if (p == 0) throw ShapeError("residual matrix has no columns");
  InformationEstimate est;
  est.n = n;
  for (Eigen::Index i = 0; i < residuals.rows(); ++i) {
    if (residuals.row(i).cwiseAbs().maxCoeff() > 0.0) ++est.n_effective;
  }
  est.info = residuals.transpose() * residuals / static_cast<double>(n);
  est.info = 0.5 * (est.info + est.info.transpose());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(est.info, Eigen::EigenvaluesOnly);
  const double lmax = eig.eigenvalues().maxCoeff();
  const double lmin = eig.eigenvalues().minCoeff();
  est.condition_number =
      lmin > 0.0 ? lmax / lmin : std::numeric_limits<double>::infinity();
  if (!(est.condition_number <= kMaxConditionNumber)) {
    throw InferenceError("estimated information is singular (condition number " +
                         std::to_string(est.condition_number) + ")");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(est.info);
  if (llt.info() != Eigen::Success) {
    throw InferenceError("estimated information is not positive definite");
  }
  est.info_inverse = llt.solve(Eigen::MatrixXd::Identity(p, p));
  est.info_inverse = 0.5 * (est.info_inverse + est.info_inverse.transpose());
  est.standard_errors =
      (est.info_inverse.diagonal() / static_cast<double>(n)).cwiseSqrt();
  return est;
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("quantile level must lie in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x = 0.0;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Halley refinement.
  const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

std::vector<WaldInterval> wald_ci(const Eigen::VectorXd& theta,
                                  const Eigen::VectorXd& standard_errors,
                                  double level) {
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("level must lie in (0, 1)");
  if (theta.size() != standard_errors.size()) {
    throw ShapeError("theta and standard errors differ in length");
  }
  const double z = normal_quantile(0.5 * (1.0 + level));
  std::vector<WaldInterval> out;
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    out.push_back({theta(j) - z * standard_errors(j), theta(j) + z * standard_errors(j), level});
  }
  return out;
}

std::vector<WaldInterval> wald_ci(const Eigen::VectorXd& theta,
                                  const InformationEstimate& est, double level) {
  return wald_ci(theta, est.standard_errors, level);
}

}  // namespace flexihaz
