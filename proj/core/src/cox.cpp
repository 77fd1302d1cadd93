#include "flexihaz/cox.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "flexihaz/errors.hpp"

namespace flexihaz {

namespace {

struct PartialLik {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd information;
};

// Subjects sorted by decreasing time; risk sets grow as we walk the order and
// tied times are added as a block before any of their events is scored.
PartialLik evaluate(const std::vector<std::size_t>& order,
                    const Eigen::VectorXd& times, const Eigen::VectorXi& events,
                    const Eigen::MatrixXd& W, const Eigen::VectorXd& beta,
                    bool derivatives) {
  const Eigen::Index q = W.cols();
  Eigen::VectorXd eta = W * beta;
  const double shift = eta.maxCoeff();

  PartialLik out;
  out.gradient = Eigen::VectorXd::Zero(q);
  out.information = Eigen::MatrixXd::Zero(q, q);
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(q);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(q, q);

  std::size_t k = 0;
  while (k < order.size()) {
    std::size_t end = k;
    const double t = times(static_cast<Eigen::Index>(order[k]));
    while (end < order.size() && times(static_cast<Eigen::Index>(order[end])) == t) {
      const auto i = static_cast<Eigen::Index>(order[end]);
      const double w = std::exp(eta(i) - shift);
      s0 += w;
      if (derivatives) {
        s1.noalias() += w * W.row(i).transpose();
        s2.noalias() += w * W.row(i).transpose() * W.row(i);
      }
      ++end;
    }
    int n_events = 0;
    for (std::size_t m = k; m < end; ++m) {
      const auto i = static_cast<Eigen::Index>(order[m]);
      if (events(i) != 0) {
        ++n_events;
        out.value += eta(i);
        if (derivatives) out.gradient.noalias() += W.row(i).transpose();
      }
    }
    if (n_events > 0) {
      out.value -= n_events * (std::log(s0) + shift);
      if (derivatives) {
        const Eigen::VectorXd mean = s1 / s0;
        out.gradient.noalias() -= n_events * mean;
        out.information.noalias() +=
            n_events * (s2 / s0 - mean * mean.transpose());
      }
    }
    k = end;
  }
  return out;
}

std::vector<std::size_t> descending_order(const Eigen::VectorXd& times) {
  std::vector<std::size_t> order(static_cast<std::size_t>(times.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return times(static_cast<Eigen::Index>(a)) > times(static_cast<Eigen::Index>(b));
  });
  return order;
}

}  // namespace

double cox_log_partial_likelihood(const Eigen::VectorXd& times,
                                  const Eigen::VectorXi& events,
                                  const Eigen::MatrixXd& design,
                                  const Eigen::VectorXd& beta) {
  return evaluate(descending_order(times), times, events, design, beta, false)
      .value;
}

CoxFit cox_fit(const Dataset& data, const CoxOptions& options) {
  if (data.event_count() == 0) {
    throw EstimationError("Cox initializer: no events in the data");
  }
  const auto n = static_cast<Eigen::Index>(data.size());
  const int q = data.d() + data.p();
  Eigen::MatrixXd W(n, q);
  W << data.x_matrix(), data.z_matrix();
  Eigen::VectorXd times(n);
  Eigen::VectorXi events(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    times(i) = data[static_cast<std::size_t>(i)].time;
    events(i) = data[static_cast<std::size_t>(i)].event ? 1 : 0;
  }
  // Centering leaves the partial likelihood unchanged and keeps exp() tame.
  const Eigen::RowVectorXd center = W.colwise().mean();
  W.rowwise() -= center;
  for (int c = 0; c < q; ++c) {
    if (W.col(c).cwiseAbs().maxCoeff() == 0.0) {
      throw EstimationError("Cox initializer: covariate column " +
                            std::to_string(c + 1) + " is constant");
    }
  }

  const auto order = descending_order(times);
  CoxFit fit;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(q);
  PartialLik cur = evaluate(order, times, events, W, beta, true);

  for (int iter = 0;; ++iter) {
    const double gnorm = cur.gradient.norm();
    if (gnorm < options.gradient_tolerance) {
      fit.iterations = iter;
      fit.gradient_norm = gnorm;
      break;
    }
    if (iter >= options.max_iterations) {
      throw EstimationError("Cox initializer did not converge in " +
                            std::to_string(options.max_iterations) +
                            " iterations (gradient norm " +
                            std::to_string(gnorm) + ")");
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(cur.information);
    const double diag_max = cur.information.diagonal().cwiseAbs().maxCoeff();
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().minCoeff() <= 1e-12 * std::max(diag_max, 1.0)) {
      throw EstimationError(
          "Cox initializer: singular information matrix; covariates may be "
          "collinear");
    }
    const Eigen::VectorXd step = ldlt.solve(cur.gradient);

    // Near the optimum the Newton gain drops below the rounding noise of the
    // summed objective; a full step that lowers the gradient is accepted if it
    // loses no more than that noise.
    const double noise = 64.0 * std::numeric_limits<double>::epsilon() *
                         (1.0 + std::abs(cur.value));
    double scale = 1.0;
    bool accepted = false;
    for (int h = 0; h <= options.max_halvings; ++h, scale *= 0.5) {
      const Eigen::VectorXd trial = beta + scale * step;
      PartialLik next = evaluate(order, times, events, W, trial, true);
      const bool ascent = next.value >= cur.value;
      const bool flat = h == 0 && next.value >= cur.value - noise &&
                        next.gradient.norm() < gnorm;
      if (std::isfinite(next.value) && (ascent || flat)) {
        beta = trial;
        cur = std::move(next);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // No ascent possible along the Newton direction: we sit at the optimum
      // up to rounding.
      fit.iterations = iter + 1;
      fit.gradient_norm = gnorm;
      if (gnorm > std::sqrt(options.gradient_tolerance)) {
        throw EstimationError("Cox initializer: line search failed");
      }
      break;
    }
  }

  fit.coefficients = beta;
  fit.information = cur.information;
  fit.log_partial_likelihood = cur.value;
  return fit;
}

}  // namespace flexihaz
