#include "flexihaz/simstudy.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "flexihaz/errors.hpp"
#include "flexihaz/inference.hpp"
#include "flexihaz/likelihood.hpp"
#include "flexihaz/rng.hpp"

namespace flexihaz {

namespace {

constexpr double kFailureCap = 0.10;

std::vector<double> to_vec(const Eigen::VectorXd& v) {
  return {v.data(), v.data() + v.size()};
}

ReplicationRecord run_one(const SimConfig& base, const FitConfig& fit_base,
                          int index, const std::vector<double>& levels,
                          const ReplicateOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  ReplicationRecord rec;
  rec.index = index;
  rec.seed = mix_seed(base.seed, static_cast<std::uint64_t>(index));
  try {
    SimConfig sim = base;
    sim.seed = rec.seed;
    const Dataset data = simulate(sim);
    rec.censoring_fraction =
        1.0 - static_cast<double>(data.event_count()) / static_cast<double>(data.size());

    FitConfig fc = fit_base;
    fc.seed = mix_seed(rec.seed, 0xf17);
    if (fc.tau <= 0.0) fc.tau = sim.tau;

    if (options.mode == ReplicationMode::kFull) {
      const FitResult fit = fit_model(data, fc);
      rec.epochs_run = fit.epochs_run;
      rec.theta = fit.state.theta;
      const CrossFitResult cf = cross_fit_residuals(data, options.folds, fc);
      rec.standard_errors = information(cf.residuals, data.size()).standard_errors;
    } else {
      const TimeGrid grid = build_grid(data, fc.effective_grid_size(data.size()), fc.tau);
      const ExpandedRows rows = expand(data, grid);
      Eigen::VectorXd offsets(static_cast<Eigen::Index>(rows.size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        offsets(static_cast<Eigen::Index>(r)) =
            true_log_hazard(rows.eval_time[r], data[rows.subject[r]].x, sim);
      }
      const RefineResult ref = refine_theta_with_offsets(
          Eigen::VectorXd::Zero(data.p()), offsets, rows, data);
      rec.theta = ref.state.theta;
      const Eigen::MatrixXd H = offset_theta_hessian(rec.theta, offsets, rows, data);
      const Eigen::MatrixXd Hinv = H.llt().solve(Eigen::MatrixXd::Identity(H.rows(), H.cols()));
      rec.standard_errors =
          (Hinv.diagonal() / static_cast<double>(data.size())).cwiseSqrt();
    }
    if (!rec.theta.allFinite() || !rec.standard_errors.allFinite()) {
      throw NumericalError("non-finite estimate or standard error");
    }
    for (double level : levels) {
      const auto ci = wald_ci(rec.theta, rec.standard_errors, level);
      std::vector<bool> cov;
      for (Eigen::Index j = 0; j < base.theta_true.size(); ++j) {
        cov.push_back(ci[static_cast<std::size_t>(j)].contains(base.theta_true(j)));
      }
      rec.covered.push_back(std::move(cov));
    }
    rec.ok = true;
  } catch (const Error& e) {
    rec.ok = false;
    rec.error = e.what();
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

}  // namespace

void SimConfig::validate() const {
  if (n < 1) throw ConfigError("simulation needs n >= 1");
  if (theta_true.size() < 1 || !theta_true.allFinite()) {
    throw ConfigError("theta_true must be a non-empty finite vector");
  }
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be positive");
  if (!(base_rate > 0.0) || !std::isfinite(base_rate)) {
    throw ConfigError("base_rate must be positive");
  }
  if (!(censor_rate >= 0.0) || !std::isfinite(censor_rate)) {
    throw ConfigError("censor_rate must be non-negative");
  }
}

nlohmann::json to_json(const SimConfig& c) {
  return {{"n", c.n},
          {"theta_true", to_vec(c.theta_true)},
          {"tau", c.tau},
          {"base_rate", c.base_rate},
          {"censor_rate", c.censor_rate},
          {"seed", c.seed}};
}

SimConfig sim_config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("simulation config must be a JSON object");
  SimConfig c;
  for (const auto& [key, value] : doc.items()) {
    try {
      if (key == "n") c.n = value.get<std::size_t>();
      else if (key == "theta_true") {
        const auto t = value.get<std::vector<double>>();
        c.theta_true = Eigen::Map<const Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
      } else if (key == "tau") c.tau = value.get<double>();
      else if (key == "base_rate") c.base_rate = value.get<double>();
      else if (key == "censor_rate") c.censor_rate = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("simulation config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("simulation config: key '" + key + "' has the wrong type");
    }
  }
  c.validate();
  return c;
}

double f_nuisance(const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() != kSimNuisanceDim) throw ShapeError("f_nuisance expects a 3-vector");
  return 0.2 * (x(0) + x(1)) + 0.5 * x(0) * x(1) + x(2) * x(2);
}

double hazard_slope(const Eigen::Ref<const Eigen::VectorXd>& x) {
  const double f = f_nuisance(x);
  return 0.1 + f * f;
}

double true_log_hazard(double t, const Eigen::Ref<const Eigen::VectorXd>& x,
                       const SimConfig& config) {
  return std::log(config.base_rate) + hazard_slope(x) * t;
}

double cumulative_hazard(double t, const Eigen::Ref<const Eigen::VectorXd>& x,
                         const Eigen::Ref<const Eigen::VectorXd>& z,
                         const Eigen::VectorXd& theta, const SimConfig& config) {
  const double a = hazard_slope(x);
  const double b = theta.dot(z);
  return config.base_rate * std::exp(b) / a * std::expm1(a * t);
}

double sample_event_time(const Eigen::Ref<const Eigen::VectorXd>& x,
                         const Eigen::Ref<const Eigen::VectorXd>& z,
                         const Eigen::VectorXd& theta, const SimConfig& config,
                         double u) {
  if (!(u > 0.0 && u < 1.0)) throw ConfigError("uniform draw must lie in (0, 1)");
  const double a = hazard_slope(x);
  const double b = theta.dot(z);
  const double e = -std::log(u);
  return std::log1p(a * e / (config.base_rate * std::exp(b))) / a;
}

Dataset simulate(const SimConfig& config) {
  config.validate();
  const auto p = static_cast<int>(config.theta_true.size());
  Rng rng(mix_seed(config.seed, 0x51a));
  std::vector<SurvivalRecord> records;
  records.reserve(config.n);
  for (std::size_t i = 0; i < config.n; ++i) {
    SurvivalRecord rec;
    rec.x.resize(kSimNuisanceDim);
    rec.z.resize(p);
    for (int k = 0; k < kSimNuisanceDim; ++k) rec.x(k) = rng.uniform(-1.0, 1.0);
    for (int k = 0; k < p; ++k) rec.z(k) = rng.uniform(-1.0, 1.0);
    const double u = sample_event_time(rec.x, rec.z, config.theta_true, config, rng.uniform());
    // Always consume the censoring draw so streams stay aligned across rates.
    const double cu = rng.uniform();
    double c = config.tau;
    if (config.censor_rate > 0.0) c = std::min(-std::log(cu) / config.censor_rate, config.tau);
    rec.event = u <= c;
    rec.time = rec.event ? u : c;
    records.push_back(std::move(rec));
  }
  return Dataset(std::move(records), kSimNuisanceDim, p);
}

void summarize(ReplicationReport& report) {
  const auto p = static_cast<std::size_t>(report.theta_true.size());
  report.coordinates.assign(p, {});
  report.succeeded = 0;
  report.failures = 0;
  double cens = 0.0;
  for (const auto& r : report.replications) {
    if (r.ok) {
      ++report.succeeded;
      cens += r.censoring_fraction;
    } else {
      ++report.failures;
    }
  }
  report.mean_censoring_fraction = report.succeeded > 0 ? cens / report.succeeded : 0.0;
  report.failure_limit_exceeded =
      report.requested > 0 &&
      static_cast<double>(report.failures) > kFailureCap * report.requested;
  if (report.succeeded == 0) return;

  const double m = report.succeeded;
  for (std::size_t j = 0; j < p; ++j) {
    auto& c = report.coordinates[j];
    c.coverage.assign(report.levels.size(), 0.0);
    double sum = 0.0;
    double se_sum = 0.0;
    for (const auto& r : report.replications) {
      if (!r.ok) continue;
      sum += r.theta(static_cast<Eigen::Index>(j));
      se_sum += r.standard_errors(static_cast<Eigen::Index>(j));
      for (std::size_t l = 0; l < report.levels.size(); ++l) {
        if (r.covered[l][j]) c.coverage[l] += 1.0;
      }
    }
    c.mean_estimate = sum / m;
    c.mean_standard_error = se_sum / m;
    for (auto& v : c.coverage) v /= m;
    if (report.succeeded >= 2) {
      double ss = 0.0;
      for (const auto& r : report.replications) {
        if (!r.ok) continue;
        const double dv = r.theta(static_cast<Eigen::Index>(j)) - c.mean_estimate;
        ss += dv * dv;
      }
      c.empirical_sd = std::sqrt(ss / (m - 1.0));
    } else {
      c.empirical_sd.reset();
    }
  }
}

ReplicationReport replicate(const SimConfig& config, const FitConfig& fit_config,
                            int reps, const std::vector<double>& levels,
                            const ReplicateOptions& options) {
  config.validate();
  fit_config.validate();
  if (reps < 1) throw ConfigError("reps must be >= 1");
  if (options.jobs < 1) throw ConfigError("jobs must be >= 1");
  for (double l : levels) {
    if (!(l > 0.0 && l < 1.0)) throw ConfigError("coverage levels must lie in (0, 1)");
  }

  ReplicationReport report;
  report.levels = levels;
  report.theta_true = config.theta_true;
  report.requested = reps;
  report.mode = options.mode == ReplicationMode::kFull ? "full" : "oracle-nuisance";
  report.replications.resize(static_cast<std::size_t>(reps));

  std::atomic<int> next{0};
  std::mutex progress_mutex;
  auto worker = [&]() {
    for (int r = next++; r < reps; r = next++) {
      ReplicationRecord rec = run_one(config, fit_config, r, levels, options);
      if (options.on_progress) {
        std::lock_guard<std::mutex> lock(progress_mutex);
        options.on_progress(rec);
      }
      report.replications[static_cast<std::size_t>(r)] = std::move(rec);
    }
  };
  const int jobs = std::min(options.jobs, reps);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
  }
  summarize(report);
  return report;
}

nlohmann::json to_json(const ReplicationReport& report) {
  nlohmann::json coords = nlohmann::json::array();
  for (std::size_t j = 0; j < report.coordinates.size(); ++j) {
    const auto& c = report.coordinates[j];
    nlohmann::json cov = nlohmann::json::object();
    for (std::size_t l = 0; l < report.levels.size() && l < c.coverage.size(); ++l) {
      std::ostringstream key;
      key << report.levels[l];
      cov[key.str()] = c.coverage[l];
    }
    coords.push_back({{"coordinate", j + 1},
                      {"theta_true", report.theta_true(static_cast<Eigen::Index>(j))},
                      {"mean_estimate", c.mean_estimate},
                      {"empirical_sd", c.empirical_sd ? nlohmann::json(*c.empirical_sd)
                                                      : nlohmann::json(nullptr)},
                      {"mean_standard_error", c.mean_standard_error},
                      {"coverage", cov}});
  }
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& r : report.replications) {
    nlohmann::json cov = nlohmann::json::array();
    for (const auto& lv : r.covered) cov.push_back(lv);
    reps.push_back({{"index", r.index},
                    {"seed", r.seed},
                    {"ok", r.ok},
                    {"error", r.error},
                    {"theta", to_vec(r.theta)},
                    {"standard_errors", to_vec(r.standard_errors)},
                    {"covered", cov},
                    {"censoring_fraction", r.censoring_fraction},
                    {"epochs_run", r.epochs_run}});
  }
  return {{"mode", report.mode},
          {"levels", report.levels},
          {"theta_true", to_vec(report.theta_true)},
          {"requested", report.requested},
          {"succeeded", report.succeeded},
          {"failures", report.failures},
          {"failure_limit_exceeded", report.failure_limit_exceeded},
          {"mean_censoring_fraction", report.mean_censoring_fraction},
          {"coordinates", coords},
          {"replications", reps}};
}

std::string format_table(const ReplicationReport& report) {
  std::ostringstream out;
  out << std::fixed;
  out << std::left << std::setw(10) << "" << std::right << std::setw(10) << "Est"
      << std::setw(10) << "Emp SD" << std::setw(10) << "Est SE";
  for (double l : report.levels) {
    std::ostringstream h;
    h << std::setprecision(0) << std::fixed << l * 100.0 << "%";
    out << std::setw(9) << h.str();
  }
  out << '\n';
  for (std::size_t j = 0; j < report.coordinates.size(); ++j) {
    const auto& c = report.coordinates[j];
    out << std::left << std::setw(10) << ("theta_" + std::to_string(j + 1)) << std::right
        << std::setprecision(3) << std::setw(10) << c.mean_estimate;
    if (c.empirical_sd) {
      out << std::setw(10) << *c.empirical_sd;
    } else {
      out << std::setw(10) << "-";
    }
    out << std::setw(10) << c.mean_standard_error;
    for (double v : c.coverage) out << std::setw(9) << v;
    out << '\n';
  }
  out << std::setprecision(3) << "replications: " << report.succeeded << "/"
      << report.requested << " succeeded, mean censoring "
      << report.mean_censoring_fraction << '\n';
  return out.str();
}

void write_replications_csv(const ReplicationReport& report,
                            const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  const auto p = report.theta_true.size();
  out << "index,seed,ok,censoring_fraction,epochs_run";
  for (Eigen::Index j = 1; j <= p; ++j) out << ",theta" << j;
  for (Eigen::Index j = 1; j <= p; ++j) out << ",se" << j;
  for (double l : report.levels) {
    for (Eigen::Index j = 1; j <= p; ++j) out << ",covered" << j << "_" << l;
  }
  out << ",error\n" << std::setprecision(17);
  for (const auto& r : report.replications) {
    out << r.index << ',' << r.seed << ',' << (r.ok ? 1 : 0) << ','
        << r.censoring_fraction << ',' << r.epochs_run;
    for (Eigen::Index j = 0; j < p; ++j) out << ',' << (r.ok ? r.theta(j) : NAN);
    for (Eigen::Index j = 0; j < p; ++j) out << ',' << (r.ok ? r.standard_errors(j) : NAN);
    for (std::size_t l = 0; l < report.levels.size(); ++l) {
      for (Eigen::Index j = 0; j < p; ++j) {
        out << ',' << (r.ok ? static_cast<int>(r.covered[l][static_cast<std::size_t>(j)]) : -1);
      }
    }
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << ',' << err << '\n';
  }
}

}  // namespace flexihaz
