#include "flexihaz/likelihood.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flexihaz/errors.hpp"

namespace flexihaz {

void ModelState::validate(int d, int p) const {
  g_params.validate();
  if (g_params.input_dim() != 1 + d) {
    throw ShapeError("g network takes " + std::to_string(g_params.input_dim()) +
                     " inputs, data has 1 + " + std::to_string(d));
  }
  if (theta.size() != p) {
    throw ShapeError("theta has length " + std::to_string(theta.size()) +
                     ", data has p = " + std::to_string(p));
  }
  if (!theta.allFinite()) throw ShapeError("theta is not finite");
}

nlohmann::json to_json(const ModelState& state) {
  return {
      {"g", nn::to_json(state.g_params)},
      {"theta", std::vector<double>(state.theta.data(),
                                    state.theta.data() + state.theta.size())},
  };
}

ModelState model_state_from_json(const nlohmann::json& doc) {
  try {
    ModelState s;
    s.g_params = nn::params_from_json(doc.at("g"));
    const auto theta = doc.at("theta").get<std::vector<double>>();
    s.theta = Eigen::Map<const Eigen::VectorXd>(
        theta.data(), static_cast<Eigen::Index>(theta.size()));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ShapeError(std::string("malformed model state: ") + e.what());
  }
}

nlohmann::json to_json(const LossReport& r) {
  return {{"neg_loglik", r.neg_loglik},     {"event_term", r.event_term},
          {"exposure_term", r.exposure_term}, {"max_abs_g", r.max_abs_g},
          {"n_subjects", r.n_subjects},     {"n_rows", r.n_rows}};
}

LossReport LikelihoodEvaluator::run(const ModelState& state,
                                    const ExpandedRows& rows,
                                    const Dataset& data,
                                    std::span<const std::size_t> row_ids,
                                    LossGradients* grads, double grad_scale,
                                    Eigen::MatrixXd* hessian) {
  if (data.empty()) throw ConfigError("likelihood needs at least one subject");
  state.validate(data.d(), data.p());
  const int d = data.d();
  const int p = data.p();

  // theta' z per subject.
  Eigen::VectorXd linear(static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    linear(static_cast<Eigen::Index>(i)) = state.theta.dot(data[i].z);
  }

  if (grads) {
    if (grads->g_grad.num_layers() != state.g_params.num_layers()) {
      grads->g_grad = state.g_params.zeros_like();
    } else {
      grads->g_grad.set_zero();
    }
    grads->theta_grad = Eigen::VectorXd::Zero(p);
  }
  if (hessian) *hessian = Eigen::MatrixXd::Zero(p, p);

  const bool use_all = row_ids.empty();
  const std::size_t total = use_all ? rows.size() : row_ids.size();

  LossReport rep;
  rep.n_subjects = data.size();
  rep.n_rows = total;

  for (std::size_t start = 0; start < total; start += chunk_) {
    const std::size_t len = std::min(chunk_, total - start);
    const auto B = static_cast<Eigen::Index>(len);
    inputs_.resize(1 + d, B);
    for (Eigen::Index b = 0; b < B; ++b) {
      const std::size_t r = use_all ? start + b : row_ids[start + b];
      const auto& rec = data[rows.subject[r]];
      inputs_(0, b) = rows.eval_time[r];
      if (d > 0) inputs_.block(1, b, d, 1) = rec.x;
    }
    nn::forward_batch(state.g_params, inputs_, cache_, outputs_);
    if (grads) upstream_.resize(B);

    for (Eigen::Index b = 0; b < B; ++b) {
      const std::size_t r = use_all ? start + b : row_ids[start + b];
      const std::size_t i = rows.subject[r];
      const double g = outputs_(b);
      const double chi = g + linear(static_cast<Eigen::Index>(i));
      if (!(chi <= kMaxLinearPredictor)) {
        throw NumericalError("linear predictor " + std::to_string(chi) +
                             " overflows exp() at expanded row " +
                             std::to_string(r) + " (subject " +
                             std::to_string(i) + ", interval " +
                             std::to_string(rows.j[r]) + ")");
      }
      const double mu = rows.exposure[r] * std::exp(chi);
      const double delta = rows.delta[r] ? 1.0 : 0.0;
      rep.event_term += delta * chi;
      rep.exposure_term += mu;
      rep.max_abs_g = std::max(rep.max_abs_g, std::abs(g));
      if (grads) {
        const double up = -(delta - mu) * grad_scale;
        upstream_(b) = up;
        grads->theta_grad.noalias() += up * data[i].z;
      }
      if (hessian) {
        hessian->noalias() += mu * data[i].z * data[i].z.transpose();
      }
    }
    if (grads) nn::backward_batch(state.g_params, cache_, upstream_, grads->g_grad);
  }

  const double n = static_cast<double>(data.size());
  rep.neg_loglik = -(rep.event_term - rep.exposure_term) / n;
  if (!std::isfinite(rep.neg_loglik)) {
    throw NumericalError("negative log-likelihood is not finite");
  }
  if (hessian) {
    // mu * z z' rounds differently above and below the diagonal.
    *hessian = (*hessian + hessian->transpose()).eval() / (2.0 * n);
  }
  if (grads) grads->report = rep;
  return rep;
}

LossReport neg_loglik(const ModelState& state, const ExpandedRows& rows,
                      const Dataset& data) {
  LikelihoodEvaluator ev;
  return ev.run(state, rows, data, {}, nullptr, 0.0);
}

LossGradients loss_gradients(const ModelState& state, const ExpandedRows& rows,
                             const Dataset& data) {
  LikelihoodEvaluator ev;
  LossGradients out;
  ev.run(state, rows, data, {}, &out, 1.0 / static_cast<double>(data.size()));
  return out;
}

Eigen::MatrixXd theta_hessian(const ModelState& state, const ExpandedRows& rows,
                              const Dataset& data) {
  LikelihoodEvaluator ev;
  Eigen::MatrixXd h;
  ev.run(state, rows, data, {}, nullptr, 0.0, &h);
  return h;
}

double loglik_with_mesh(const ModelState& state, const Dataset& data,
                        int grid_size, double tau) {
  const TimeGrid grid = build_grid(data, grid_size, tau);
  const ExpandedRows rows = expand(data, grid);
  return -neg_loglik(state, rows, data).neg_loglik;
}

Eigen::VectorXd network_offsets(const nn::MlpParams& g_params,
                                const ExpandedRows& rows, const Dataset& data) {
  if (g_params.input_dim() != 1 + data.d()) {
    throw ShapeError("g network input width does not match 1 + d");
  }
  const int d = data.d();
  constexpr std::size_t kChunk = 1024;
  Eigen::VectorXd g(static_cast<Eigen::Index>(rows.size()));
  nn::BatchCache cache;
  Eigen::MatrixXd inputs;
  Eigen::RowVectorXd out;
  for (std::size_t start = 0; start < rows.size(); start += kChunk) {
    const auto B = static_cast<Eigen::Index>(std::min(kChunk, rows.size() - start));
    inputs.resize(1 + d, B);
    for (Eigen::Index b = 0; b < B; ++b) {
      const std::size_t r = start + b;
      inputs(0, b) = rows.eval_time[r];
      if (d > 0) inputs.block(1, b, d, 1) = data[rows.subject[r]].x;
    }
    nn::forward_batch(g_params, inputs, cache, out);
    g.segment(static_cast<Eigen::Index>(start), B) = out.transpose();
  }
  return g;
}

}  // namespace flexihaz
