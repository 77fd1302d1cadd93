#include "flexihaz/mlp.hpp"

#include <cmath>
#include <string>

#include "flexihaz/errors.hpp"
#include "flexihaz/rng.hpp"

namespace flexihaz::nn {

namespace {

constexpr int kJsonVersion = 1;

void check_finite_grad(const Eigen::Ref<const Eigen::MatrixXd>& g,
                       const char* what) {
  if (!g.allFinite()) {
    throw TrainingError(std::string("non-finite gradient in ") + what);
  }
}

template <typename Derived>
void adam_update(Eigen::MatrixBase<Derived>& param,
                 const Eigen::Ref<const Eigen::MatrixXd>& grad,
                 Eigen::Ref<Eigen::MatrixXd> m, Eigen::Ref<Eigen::MatrixXd> v,
                 const AdamOptions& opt, double bc1, double bc2) {
  m = opt.beta1 * m + (1.0 - opt.beta1) * grad;
  v = opt.beta2 * v + (1.0 - opt.beta2) * grad.cwiseAbs2();
  param.derived().array() -=
      opt.learning_rate * (m.array() / bc1) /
      ((v.array() / bc2).sqrt() + opt.epsilon);
}

}  // namespace

std::vector<int> MlpParams::widths() const {
  std::vector<int> w;
  if (weights.empty()) return w;
  w.push_back(static_cast<int>(weights.front().cols()));
  for (const auto& W : weights) w.push_back(static_cast<int>(W.rows()));
  return w;
}

std::size_t MlpParams::num_parameters() const {
  std::size_t count = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    count += static_cast<std::size_t>(weights[l].size() + biases[l].size());
  }
  return count;
}

void MlpParams::validate() const {
  if (weights.empty()) throw ShapeError("network has no layers");
  if (weights.size() != biases.size()) {
    throw ShapeError("weight/bias layer count mismatch");
  }
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (biases[l].size() != weights[l].rows()) {
      throw ShapeError("bias " + std::to_string(l) + " has length " +
                       std::to_string(biases[l].size()) + ", expected " +
                       std::to_string(weights[l].rows()));
    }
    if (l > 0 && weights[l].cols() != weights[l - 1].rows()) {
      throw ShapeError("layer " + std::to_string(l) + " expects " +
                       std::to_string(weights[l].cols()) + " inputs but layer " +
                       std::to_string(l - 1) + " produces " +
                       std::to_string(weights[l - 1].rows()));
    }
  }
  if (weights.back().rows() != 1) throw ShapeError("output width must be 1");
  if (input_scale.size() != weights.front().cols()) {
    throw ShapeError("input_scale length does not match input width");
  }
}

bool MlpParams::all_finite() const {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
  }
  return input_scale.allFinite();
}

MlpParams MlpParams::zeros_like() const {
  MlpParams z = *this;
  z.set_zero();
  return z;
}

void MlpParams::set_zero() {
  for (auto& W : weights) W.setZero();
  for (auto& v : biases) v.setZero();
}

MlpParams& MlpParams::operator+=(const MlpParams& other) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    weights[l] += other.weights[l];
    biases[l] += other.biases[l];
  }
  return *this;
}

MlpParams& MlpParams::operator*=(double c) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    weights[l] *= c;
    biases[l] *= c;
  }
  return *this;
}

Eigen::VectorXd MlpParams::flatten() const {
  Eigen::VectorXd flat(static_cast<Eigen::Index>(num_parameters()));
  Eigen::Index pos = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    flat.segment(pos, weights[l].size()) =
        Eigen::Map<const Eigen::VectorXd>(weights[l].data(), weights[l].size());
    pos += weights[l].size();
    flat.segment(pos, biases[l].size()) = biases[l];
    pos += biases[l].size();
  }
  return flat;
}

void MlpParams::unflatten(const Eigen::VectorXd& flat) {
  if (flat.size() != static_cast<Eigen::Index>(num_parameters())) {
    throw ShapeError("flat parameter vector has wrong length");
  }
  Eigen::Index pos = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Eigen::Map<Eigen::VectorXd>(weights[l].data(), weights[l].size()) =
        flat.segment(pos, weights[l].size());
    pos += weights[l].size();
    biases[l] = flat.segment(pos, biases[l].size());
    pos += biases[l].size();
  }
}

MlpParams init_params(std::span<const int> widths, std::uint64_t seed) {
  if (widths.size() < 2) {
    throw ConfigError("network needs at least an input and an output width");
  }
  for (int w : widths) {
    if (w < 1) throw ConfigError("network widths must all be >= 1");
  }
  if (widths.back() != 1) throw ConfigError("output width must be 1");

  Rng rng(mix_seed(seed, 0x6e6e));
  MlpParams p;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int fan_in = widths[l];
    const double limit = std::sqrt(6.0 / fan_in);
    Eigen::MatrixXd W(widths[l + 1], fan_in);
    // Row-major fill order so the draw sequence does not depend on storage.
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      for (Eigen::Index c = 0; c < W.cols(); ++c) {
        W(r, c) = rng.uniform(-limit, limit);
      }
    }
    p.weights.push_back(std::move(W));
    p.biases.push_back(Eigen::VectorXd::Zero(widths[l + 1]));
  }
  p.input_scale = Eigen::VectorXd::Ones(widths.front());
  return p;
}

ForwardResult forward(const MlpParams& params, const Eigen::VectorXd& u) {
  if (u.size() != params.input_dim()) {
    throw ShapeError("input has length " + std::to_string(u.size()) +
                     ", network expects " + std::to_string(params.input_dim()));
  }
  const std::size_t L = params.num_layers();
  ForwardResult res;
  res.cache.pre.resize(L);
  res.cache.post.resize(L);
  res.cache.post[0] = u.cwiseQuotient(params.input_scale);
  for (std::size_t l = 0; l < L; ++l) {
    res.cache.pre[l] = params.weights[l] * res.cache.post[l] + params.biases[l];
    if (l + 1 < L) res.cache.post[l + 1] = res.cache.pre[l].cwiseMax(0.0);
  }
  res.output = res.cache.pre[L - 1](0);
  return res;
}

MlpParams backward(const MlpParams& params, const ActivationCache& cache,
                   double upstream) {
  const std::size_t L = params.num_layers();
  if (cache.pre.size() != L || cache.post.size() != L) {
    throw ShapeError("activation cache does not match network depth");
  }
  MlpParams grads = params.zeros_like();
  Eigen::VectorXd delta = Eigen::VectorXd::Constant(1, upstream);
  for (std::size_t l = L; l-- > 0;) {
    if (cache.post[l].size() != params.weights[l].cols()) {
      throw ShapeError("activation cache does not match layer widths");
    }
    grads.weights[l].noalias() = delta * cache.post[l].transpose();
    grads.biases[l] = delta;
    if (l == 0) break;
    Eigen::VectorXd back = params.weights[l].transpose() * delta;
    delta = (cache.pre[l - 1].array() > 0.0).select(back, 0.0);
  }
  return grads;
}

Eigen::VectorXd input_gradient(const MlpParams& params,
                               const ActivationCache& cache) {
  const std::size_t L = params.num_layers();
  Eigen::VectorXd delta = Eigen::VectorXd::Ones(1);
  for (std::size_t l = L; l-- > 1;) {
    Eigen::VectorXd back = params.weights[l].transpose() * delta;
    delta = (cache.pre[l - 1].array() > 0.0).select(back, 0.0);
  }
  Eigen::VectorXd g = params.weights[0].transpose() * delta;
  return g.cwiseQuotient(params.input_scale);
}

void forward_batch(const MlpParams& params, const Eigen::MatrixXd& inputs,
                   BatchCache& cache, Eigen::RowVectorXd& outputs) {
  if (inputs.rows() != params.input_dim()) {
    throw ShapeError("batch input rows do not match network input width");
  }
  const std::size_t L = params.num_layers();
  cache.pre.resize(L);
  cache.post.resize(L);
  cache.post[0] =
      inputs.array().colwise() / params.input_scale.array();
  for (std::size_t l = 0; l < L; ++l) {
    cache.pre[l].noalias() = params.weights[l] * cache.post[l];
    cache.pre[l].colwise() += params.biases[l];
    if (l + 1 < L) cache.post[l + 1] = cache.pre[l].cwiseMax(0.0);
  }
  outputs = cache.pre[L - 1].row(0);
}

void backward_batch(const MlpParams& params, BatchCache& cache,
                    const Eigen::RowVectorXd& upstream, MlpParams& grads) {
  const std::size_t L = params.num_layers();
  if (cache.pre.size() != L || upstream.size() != cache.pre[0].cols()) {
    throw ShapeError("batch cache does not match network or upstream");
  }
  cache.delta = upstream;
  for (std::size_t l = L; l-- > 0;) {
    grads.weights[l].noalias() += cache.delta * cache.post[l].transpose();
    grads.biases[l] += cache.delta.rowwise().sum();
    if (l == 0) break;
    cache.delta_next.noalias() = params.weights[l].transpose() * cache.delta;
    cache.delta = (cache.pre[l - 1].array() > 0.0)
                      .select(cache.delta_next.array(), 0.0)
                      .matrix();
  }
}

AdamState AdamState::create(const MlpParams& params, Eigen::Index theta_dim,
                            const AdamOptions& options) {
  if (!(options.learning_rate > 0) || !(options.epsilon > 0) ||
      !(options.beta1 >= 0 && options.beta1 < 1) ||
      !(options.beta2 >= 0 && options.beta2 < 1)) {
    throw ConfigError("invalid ADAM options");
  }
  AdamState s;
  s.first_moment = params.zeros_like();
  s.second_moment = params.zeros_like();
  s.theta_first_moment = Eigen::VectorXd::Zero(theta_dim);
  s.theta_second_moment = Eigen::VectorXd::Zero(theta_dim);
  s.options = options;
  return s;
}

void adam_step(MlpParams& params, Eigen::VectorXd& theta,
               const MlpParams& grads, const Eigen::VectorXd& theta_grad,
               AdamState& state) {
  const std::size_t L = params.num_layers();
  if (grads.num_layers() != L || state.first_moment.num_layers() != L ||
      theta_grad.size() != theta.size() ||
      state.theta_first_moment.size() != theta.size()) {
    throw ShapeError("ADAM state, gradients and parameters disagree in shape");
  }
  for (std::size_t l = 0; l < L; ++l) {
    check_finite_grad(grads.weights[l], "network weights");
    check_finite_grad(grads.biases[l], "network biases");
  }
  check_finite_grad(theta_grad, "theta");

  state.step_count += 1;
  const auto& opt = state.options;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(opt.beta1, t);
  const double bc2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t l = 0; l < L; ++l) {
    adam_update(params.weights[l], grads.weights[l],
                state.first_moment.weights[l], state.second_moment.weights[l],
                opt, bc1, bc2);
    adam_update(params.biases[l], grads.biases[l],
                state.first_moment.biases[l], state.second_moment.biases[l],
                opt, bc1, bc2);
  }
  if (theta.size() > 0) {
    adam_update(theta, theta_grad, state.theta_first_moment,
                state.theta_second_moment, opt, bc1, bc2);
  }
}

nlohmann::json to_json(const MlpParams& params) {
  params.validate();
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    const auto& W = params.weights[l];
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(W.size()));
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      for (Eigen::Index c = 0; c < W.cols(); ++c) values.push_back(W(r, c));
    }
    layers.push_back({
        {"rows", W.rows()},
        {"cols", W.cols()},
        {"weights", values},
        {"bias", std::vector<double>(params.biases[l].data(),
                                     params.biases[l].data() +
                                         params.biases[l].size())},
    });
  }
  return {
      {"format", "flexihaz.mlp"},
      {"version", kJsonVersion},
      {"widths", params.widths()},
      {"input_scale",
       std::vector<double>(params.input_scale.data(),
                           params.input_scale.data() + params.input_scale.size())},
      {"layers", layers},
  };
}

MlpParams params_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("format").get<std::string>() != "flexihaz.mlp") {
      throw ShapeError("not a flexihaz.mlp document");
    }
    if (doc.at("version").get<int>() != kJsonVersion) {
      throw ShapeError("unsupported flexihaz.mlp version " +
                       doc.at("version").dump());
    }
    MlpParams p;
    for (const auto& layer : doc.at("layers")) {
      const auto rows = layer.at("rows").get<Eigen::Index>();
      const auto cols = layer.at("cols").get<Eigen::Index>();
      const auto values = layer.at("weights").get<std::vector<double>>();
      const auto bias = layer.at("bias").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(values.size()) != rows * cols ||
          static_cast<Eigen::Index>(bias.size()) != rows) {
        throw ShapeError("layer value array does not match its shape");
      }
      Eigen::MatrixXd W(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) W(r, c) = values[r * cols + c];
      }
      p.weights.push_back(std::move(W));
      p.biases.push_back(
          Eigen::Map<const Eigen::VectorXd>(bias.data(), rows));
    }
    const auto scale = doc.at("input_scale").get<std::vector<double>>();
    p.input_scale = Eigen::Map<const Eigen::VectorXd>(
        scale.data(), static_cast<Eigen::Index>(scale.size()));
    p.validate();
    if (doc.at("widths").get<std::vector<int>>() != p.widths()) {
      throw ShapeError("declared widths disagree with layer shapes");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ShapeError(std::string("malformed network document: ") + e.what());
  }
}

}  // namespace flexihaz::nn
