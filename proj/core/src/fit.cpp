#include "flexihaz/fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "flexihaz/cox.hpp"
#include "flexihaz/errors.hpp"
#include "flexihaz/rng.hpp"

namespace flexihaz {

namespace {

constexpr int kMaxSplitAttempts = 10;
constexpr double kSieveWarnBound = 50.0;

// Per-subject sufficient statistics of the loss in theta when g is frozen:
//   loss(theta) = -(1/n) sum_i [ G_i + e_i theta'z_i - exp(theta'z_i + log S_i) ]
// with S_i = sum_j exposure_ij exp(g_ij), G_i = sum_j delta_ij g_ij,
// e_i = sum_j delta_ij.
struct FrozenOffsets {
  Eigen::VectorXd log_s;
  Eigen::VectorXd max_g;
  Eigen::VectorXd events;
  double offset_events = 0.0;
  Eigen::MatrixXd z;  // n x p
  double n = 0.0;

  FrozenOffsets(const Eigen::VectorXd& offsets, const ExpandedRows& rows,
                const Dataset& data) {
    if (offsets.size() != static_cast<Eigen::Index>(rows.size())) {
      throw ShapeError("offset vector length differs from expanded row count");
    }
    const auto ns = static_cast<Eigen::Index>(data.size());
    const double ninf = -std::numeric_limits<double>::infinity();
    log_s = Eigen::VectorXd::Constant(ns, ninf);
    max_g = Eigen::VectorXd::Constant(ns, ninf);
    events = Eigen::VectorXd::Zero(ns);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto i = static_cast<Eigen::Index>(rows.subject[r]);
      const double g = offsets(static_cast<Eigen::Index>(r));
      if (rows.exposure[r] > 0.0) max_g(i) = std::max(max_g(i), g);
      if (rows.delta[r]) {
        events(i) += 1.0;
        offset_events += g;
      }
    }
    // log-sum-exp around the per-subject maximum.
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(ns);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto i = static_cast<Eigen::Index>(rows.subject[r]);
      if (rows.exposure[r] > 0.0) {
        acc(i) += rows.exposure[r] *
                  std::exp(offsets(static_cast<Eigen::Index>(r)) - max_g(i));
      }
    }
    for (Eigen::Index i = 0; i < ns; ++i) {
      if (acc(i) > 0.0) log_s(i) = max_g(i) + std::log(acc(i));
    }
    z = data.z_matrix();
    n = static_cast<double>(data.size());
  }

  // exp(theta'z_i + log S_i), with the overflow contract of the likelihood.
  Eigen::VectorXd rates(const Eigen::VectorXd& theta) const {
    const Eigen::VectorXd lin = z * theta;
    Eigen::VectorXd out(lin.size());
    for (Eigen::Index i = 0; i < lin.size(); ++i) {
      if (std::isinf(log_s(i))) {
        out(i) = 0.0;
        continue;
      }
      if (!(lin(i) + max_g(i) <= kMaxLinearPredictor)) {
        throw NumericalError("linear predictor overflows exp() for subject " +
                             std::to_string(i));
      }
      out(i) = std::exp(lin(i) + log_s(i));
    }
    return out;
  }

  double loss(const Eigen::VectorXd& theta) const {
    const Eigen::VectorXd lin = z * theta;
    const double ev = offset_events + events.dot(lin);
    return -(ev - rates(theta).sum()) / n;
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& theta) const {
    const Eigen::VectorXd resid = events - rates(theta);
    return -(z.transpose() * resid) / n;
  }

  Eigen::MatrixXd hessian(const Eigen::VectorXd& theta) const {
    const Eigen::VectorXd w = rates(theta);
    return z.transpose() * w.asDiagonal() * z / n;
  }
};

bool hessian_is_singular(const Eigen::MatrixXd& H,
                         Eigen::LDLT<Eigen::MatrixXd>& ldlt) {
  if (H.size() == 0) return true;
  ldlt.compute(H);
  const double scale = std::max(H.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  return ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
         ldlt.vectorD().minCoeff() <= 1e-12 * scale;
}

RefineResult refine_frozen(const FrozenOffsets& f, const Eigen::VectorXd& theta0,
                           const RefineOptions& opt) {
  RefineResult res;
  Eigen::VectorXd theta = theta0;
  double loss = f.loss(theta);
  res.initial_loss = loss;
  Eigen::LDLT<Eigen::MatrixXd> ldlt;

  auto gradient_descent = [&](Eigen::VectorXd& th, double& cur) {
    double step = 1.0;
    for (int s = 0; s < opt.fallback_steps; ++s) {
      const Eigen::VectorXd g = f.gradient(th);
      if (g.norm() < opt.gradient_tolerance) return;
      bool moved = false;
      for (int h = 0; h < 60; ++h, step *= 0.5) {
        const Eigen::VectorXd trial = th - step * g;
        const double l = f.loss(trial);
        if (l <= cur - 1e-4 * step * g.squaredNorm()) {
          th = trial;
          cur = l;
          moved = true;
          step *= 2.0;
          break;
        }
      }
      if (!moved) return;
    }
  };

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    const Eigen::VectorXd g = f.gradient(theta);
    res.gradient_norm = g.norm();
    if (res.gradient_norm < opt.gradient_tolerance) break;

    const Eigen::MatrixXd H = f.hessian(theta);
    if (hessian_is_singular(H, ldlt)) {
      res.used_fallback = true;
      gradient_descent(theta, loss);
      res.iterations = iter + 1;
      if (hessian_is_singular(f.hessian(theta), ldlt)) {
        throw InferenceError(
            "theta-Hessian is singular even after gradient-descent fallback; "
            "primary covariates may be degenerate");
      }
      continue;
    }
    const Eigen::VectorXd step = ldlt.solve(g);
    const double noise = 64.0 * std::numeric_limits<double>::epsilon() *
                         (1.0 + std::abs(loss));
    double scale = 1.0;
    bool accepted = false;
    for (int h = 0; h < 60; ++h, scale *= 0.5) {
      const Eigen::VectorXd trial = theta - scale * step;
      const double l = f.loss(trial);
      const bool flat = h == 0 && l <= loss + noise &&
                        f.gradient(trial).norm() < res.gradient_norm;
      if (l <= loss || flat) {
        theta = trial;
        loss = l;
        accepted = true;
        break;
      }
    }
    res.iterations = iter + 1;
    if (!accepted) break;  // optimum up to rounding
  }
  if (loss > res.initial_loss) {
    // Only rounding-level drift can get here; never hand back a worse point.
    theta = theta0;
    loss = res.initial_loss;
  }
  res.gradient_norm = f.gradient(theta).norm();
  res.final_loss = loss;
  res.state.theta = theta;
  return res;
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

Split split_subjects(const Dataset& data, double val_fraction,
                     std::uint64_t seed) {
  const std::size_t n = data.size();
  if (n < 2) throw TrainingError("need at least two subjects to split");
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * n));
  n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  for (int attempt = 0; attempt < kMaxSplitAttempts; ++attempt) {
    Rng rng(mix_seed(seed, 0x5b11 + attempt));
    auto perm = rng.permutation(n);
    Split s;
    s.val.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.train.begin(), s.train.end());
    auto has_event = [&](const std::vector<std::size_t>& idx) {
      return std::any_of(idx.begin(), idx.end(),
                         [&](std::size_t i) { return data[i].event; });
    };
    if (has_event(s.train) && has_event(s.val)) return s;
  }
  throw TrainingError("could not find a train/validation split with events on "
                      "both sides after " +
                      std::to_string(kMaxSplitAttempts) + " attempts");
}

}  // namespace

void FitConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("fit config: " + m); };
  if (depth < 1) fail("depth must be >= 1");
  if (width < 1) fail("width must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (patience < 1) fail("patience must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail("val_fraction must lie in (0, 1)");
  if (grid_size < 0) fail("grid_size must be >= 1 (or 0 for the default)");
  if (max_epochs < 0) fail("max_epochs must be >= 0");
  if (tau < 0.0 || !std::isfinite(tau)) fail("tau must be positive (or 0 for the default)");
}

int FitConfig::effective_grid_size(std::size_t n) const {
  if (grid_size > 0) return grid_size;
  return static_cast<int>(std::min<std::size_t>(std::max<std::size_t>(n, 1), 512));
}

double FitConfig::effective_tau(const Dataset& data) const {
  if (tau > 0.0) return tau;
  const double t = data.max_time();
  if (!(t > 0.0)) throw ConfigError("all observed times are zero; set tau");
  return t;
}

std::vector<int> FitConfig::network_widths(int d) const {
  std::vector<int> w{1 + d};
  for (int k = 0; k < depth; ++k) w.push_back(width);
  w.push_back(1);
  return w;
}

nlohmann::json to_json(const FitConfig& c) {
  return {{"depth", c.depth},
          {"width", c.width},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"patience", c.patience},
          {"val_fraction", c.val_fraction},
          {"grid_size", c.grid_size},
          {"max_epochs", c.max_epochs},
          {"seed", c.seed},
          {"tau", c.tau}};
}

FitConfig fit_config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("fit config must be a JSON object");
  FitConfig c;
  for (const auto& [key, value] : doc.items()) {
    try {
      if (key == "depth") c.depth = value.get<int>();
      else if (key == "width") c.width = value.get<int>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<std::int64_t>();
      else if (key == "patience") c.patience = value.get<int>();
      else if (key == "val_fraction") c.val_fraction = value.get<double>();
      else if (key == "grid_size") c.grid_size = value.get<int>();
      else if (key == "max_epochs") c.max_epochs = value.get<int>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "tau") c.tau = value.get<double>();
      else throw ConfigError("fit config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("fit config: key '" + key + "' has the wrong type");
    }
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const FitResult& r) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& e : r.train_history) {
    hist.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"val_loss", e.val_loss},
                    {"max_abs_g", e.max_abs_g}});
  }
  auto vec = [](const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  };
  return {{"state", to_json(r.state)},
          {"theta", vec(r.state.theta)},
          {"theta_initial", vec(r.theta_initial)},
          {"theta_network", vec(r.theta_network)},
          {"epochs_run", r.epochs_run},
          {"best_epoch", r.best_epoch},
          {"best_val_loss", r.best_val_loss},
          {"refine_iterations", r.refine_iterations},
          {"grid_points", r.grid_points},
          {"tau", r.tau},
          {"n_train", r.train_subjects.size()},
          {"n_val", r.val_subjects.size()},
          {"history", hist},
          {"warnings", r.warnings}};
}

FitResult train(const Dataset& data, const FitConfig& config) {
  config.validate();
  if (data.empty()) throw TrainingError("cannot train on an empty dataset");

  FitResult result;
  const Split split = split_subjects(data, config.val_fraction, config.seed);
  result.train_subjects = split.train;
  result.val_subjects = split.val;
  const Dataset train_data = data.subset(split.train);
  const Dataset val_data = data.subset(split.val);

  result.tau = config.effective_tau(data);
  const TimeGrid grid =
      build_grid(data, config.effective_grid_size(data.size()), result.tau);
  result.grid_points = grid.breakpoints.size();
  const ExpandedRows train_rows = expand(train_data, grid);
  const ExpandedRows val_rows = expand(val_data, grid);
  if (train_rows.empty() || val_rows.empty()) {
    throw TrainingError("expansion produced no rows (all times zero?)");
  }

  const CoxFit cox = cox_fit(data);
  result.theta_initial = cox.coefficients.tail(data.p());

  ModelState state;
  const auto widths = config.network_widths(data.d());
  state.g_params = nn::init_params(widths, mix_seed(config.seed, 0x9e7));
  // Time enters unscaled. Dividing by tau forces the first layer to grow
  // weights of order tau * slope before g can follow a steep hazard.
  state.theta = result.theta_initial;

  LikelihoodEvaluator evaluator;
  // Shift the output bias to the constant-hazard maximizer given theta and
  // the random initial network: c = log(sum delta / sum exposure exp(chi)).
  {
    const LossReport r0 = evaluator.run(state, train_rows, train_data, {}, nullptr, 0.0);
    const double events = static_cast<double>(train_data.event_count());
    state.g_params.biases.back()(0) += std::log(events / r0.exposure_term);
  }

  const LossReport init_train = evaluator.run(state, train_rows, train_data, {}, nullptr, 0.0);
  const LossReport init_val = evaluator.run(state, val_rows, val_data, {}, nullptr, 0.0);
  result.train_history.push_back(
      {0, init_train.neg_loglik, init_val.neg_loglik, init_val.max_abs_g});

  ModelState best = state;
  double best_val = init_val.neg_loglik;
  int best_epoch = 0;
  bool warned = false;

  nn::AdamOptions adam_opt;
  adam_opt.learning_rate = config.learning_rate;
  nn::AdamState adam = nn::AdamState::create(state.g_params, state.theta.size(), adam_opt);

  const std::size_t n_rows = train_rows.size();
  const auto batch = static_cast<std::size_t>(
      std::min<std::int64_t>(config.batch_size, static_cast<std::int64_t>(n_rows)));
  std::vector<std::size_t> order(n_rows);
  for (std::size_t r = 0; r < n_rows; ++r) order[r] = r;
  Rng shuffle_rng(mix_seed(config.seed, 0x5f1e));
  LossGradients grads;
  grads.g_grad = state.g_params.zeros_like();

  int epoch = 0;
  for (epoch = 1; epoch <= config.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double event_sum = 0.0;
    double exposure_sum = 0.0;
    double max_g = 0.0;
    for (std::size_t start = 0; start < n_rows; start += batch) {
      const std::size_t len = std::min(batch, n_rows - start);
      const std::span<const std::size_t> ids(order.data() + start, len);
      // Unbiased estimate of the full-training-set gradient.
      const double scale = static_cast<double>(n_rows) /
                           (static_cast<double>(len) * static_cast<double>(train_data.size()));
      const LossReport rep =
          evaluator.run(state, train_rows, train_data, ids, &grads, scale);
      event_sum += rep.event_term;
      exposure_sum += rep.exposure_term;
      max_g = std::max(max_g, rep.max_abs_g);
      nn::adam_step(state.g_params, state.theta, grads.g_grad, grads.theta_grad, adam);
    }
    const double train_loss =
        -(event_sum - exposure_sum) / static_cast<double>(train_data.size());
    const LossReport val = evaluator.run(state, val_rows, val_data, {}, nullptr, 0.0);
    result.train_history.push_back({epoch, train_loss, val.neg_loglik, max_g});
    if (!warned && max_g > kSieveWarnBound) {
      result.warnings.push_back("max |g| exceeded " + std::to_string(kSieveWarnBound) +
                                " at epoch " + std::to_string(epoch));
      warned = true;
    }
    if (val.neg_loglik < best_val) {
      best_val = val.neg_loglik;
      best = state;
      best_epoch = epoch;
    } else if (epoch - best_epoch >= config.patience) {
      break;
    }
  }
  result.epochs_run = std::min(epoch, config.max_epochs);
  result.state = std::move(best);
  result.best_epoch = best_epoch;
  result.best_val_loss = best_val;
  result.theta_network = result.state.theta;
  return result;
}

RefineResult refine_theta_with_offsets(const Eigen::VectorXd& theta0,
                                       const Eigen::VectorXd& offsets,
                                       const ExpandedRows& rows,
                                       const Dataset& data,
                                       const RefineOptions& options) {
  if (theta0.size() != data.p()) throw ShapeError("theta length differs from p");
  const FrozenOffsets f(offsets, rows, data);
  return refine_frozen(f, theta0, options);
}

RefineResult refine_theta(const ModelState& state, const ExpandedRows& rows,
                          const Dataset& data, const RefineOptions& options) {
  state.validate(data.d(), data.p());
  const Eigen::VectorXd offsets = network_offsets(state.g_params, rows, data);
  RefineResult res = refine_theta_with_offsets(state.theta, offsets, rows, data, options);
  res.state.g_params = state.g_params;
  return res;
}

double offset_neg_loglik(const Eigen::VectorXd& theta,
                         const Eigen::VectorXd& offsets,
                         const ExpandedRows& rows, const Dataset& data) {
  return FrozenOffsets(offsets, rows, data).loss(theta);
}

Eigen::MatrixXd offset_theta_hessian(const Eigen::VectorXd& theta,
                                     const Eigen::VectorXd& offsets,
                                     const ExpandedRows& rows,
                                     const Dataset& data) {
  return FrozenOffsets(offsets, rows, data).hessian(theta);
}

FitResult fit_model(const Dataset& data, const FitConfig& config) {
  FitResult result = train(data, config);
  const TimeGrid grid =
      build_grid(data, config.effective_grid_size(data.size()), result.tau);
  const ExpandedRows rows = expand(data, grid);
  RefineResult refined = refine_theta(result.state, rows, data);
  result.state = std::move(refined.state);
  result.refine_iterations = refined.iterations;
  return result;
}

}  // namespace flexihaz
