#pragma once

// Independent reference implementations used as test oracles. They share no
// code with the library beyond the parameter containers and run in long
// double so that central differences are not limited by rounding.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

#include "flexihaz/likelihood.hpp"
#include "flexihaz/mlp.hpp"
#include "flexihaz/rng.hpp"
#include "flexihaz/survdata.hpp"

namespace testing {

using ld = long double;

// Plain loops over the layer composition. min_abs_pre reports the smallest
// |pre-activation| seen in hidden layers so callers can avoid ReLU kinks.
inline ld naive_forward(const flexihaz::nn::MlpParams& p,
                        const std::vector<ld>& u, ld* min_abs_pre = nullptr) {
  std::vector<ld> a(u.size());
  for (std::size_t k = 0; k < u.size(); ++k) {
    a[k] = u[k] / static_cast<ld>(p.input_scale(static_cast<Eigen::Index>(k)));
  }
  const std::size_t L = p.weights.size();
  for (std::size_t l = 0; l < L; ++l) {
    const auto& W = p.weights[l];
    std::vector<ld> next(static_cast<std::size_t>(W.rows()));
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      ld s = p.biases[l](r);
      for (Eigen::Index c = 0; c < W.cols(); ++c) {
        s += static_cast<ld>(W(r, c)) * a[static_cast<std::size_t>(c)];
      }
      if (l + 1 < L) {
        if (min_abs_pre) *min_abs_pre = std::min(*min_abs_pre, std::fabs(s));
        s = s > 0 ? s : 0;
      }
      next[static_cast<std::size_t>(r)] = s;
    }
    a = std::move(next);
  }
  return a[0];
}

inline std::vector<ld> row_input(const flexihaz::SurvivalRecord& rec, double t) {
  std::vector<ld> u{t};
  for (Eigen::Index k = 0; k < rec.x.size(); ++k) u.push_back(rec.x(k));
  return u;
}

// -l(theta, g) straight from the double sum over subjects and intervals.
inline ld naive_neg_loglik(const flexihaz::ModelState& s,
                           const flexihaz::ExpandedRows& rows,
                           const flexihaz::Dataset& data,
                           ld* min_abs_pre = nullptr) {
  ld total = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& rec = data[rows.subject[r]];
    ld chi = naive_forward(s.g_params, row_input(rec, rows.eval_time[r]), min_abs_pre);
    for (Eigen::Index k = 0; k < s.theta.size(); ++k) {
      chi += static_cast<ld>(s.theta(k)) * rec.z(k);
    }
    total += (rows.delta[r] ? chi : 0) - static_cast<ld>(rows.exposure[r]) * std::exp(chi);
  }
  return -total / static_cast<ld>(data.size());
}

// Relative error with an absolute floor for tiny coordinates.
inline bool close(double analytic, double reference, double rel = 1e-6,
                  double abs_floor = 1e-9) {
  const double diff = std::fabs(analytic - reference);
  if (std::fabs(reference) < 1e-6) return diff < abs_floor;
  return diff / std::fabs(reference) < rel;
}

inline flexihaz::Dataset random_dataset(flexihaz::Rng& rng, std::size_t n, int d,
                                        int p, double tau) {
  std::vector<flexihaz::SurvivalRecord> recs(n);
  for (auto& r : recs) {
    r.time = rng.uniform(0.0, tau);
    r.event = rng.uniform() < 0.6;
    r.x = Eigen::VectorXd(d);
    r.z = Eigen::VectorXd(p);
    for (int k = 0; k < d; ++k) r.x(k) = rng.uniform(-1.0, 1.0);
    for (int k = 0; k < p; ++k) r.z(k) = rng.uniform(-1.0, 1.0);
  }
  return flexihaz::Dataset(std::move(recs), d, p);
}

inline flexihaz::SurvivalRecord record(double time, bool event,
                                       std::vector<double> x,
                                       std::vector<double> z) {
  flexihaz::SurvivalRecord r;
  r.time = time;
  r.event = event;
  r.x = Eigen::Map<Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  r.z = Eigen::Map<Eigen::VectorXd>(z.data(), static_cast<Eigen::Index>(z.size()));
  return r;
}

// Network whose output is identically c: all weights zero, last bias c.
inline flexihaz::nn::MlpParams constant_network(std::vector<int> widths, double c) {
  auto p = flexihaz::nn::init_params(widths, 1);
  for (auto& W : p.weights) W.setZero();
  p.biases.back()(0) = c;
  return p;
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("flexihaz_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
