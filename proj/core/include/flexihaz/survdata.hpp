#pragma once

// Right-censored survival records, CSV ingestion, quadrature grids and the
// counting-process expansion into one pseudo-observation per risk interval.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace flexihaz {

/// One subject: observed time T = min(U, C), event indicator, nuisance
/// covariates x (length d) and primary covariates z (length p).
struct SurvivalRecord {
  double time = 0.0;
  bool event = false;
  Eigen::VectorXd x;
  Eigen::VectorXd z;
};

/// A set of records sharing the same covariate dimensions.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<SurvivalRecord> records, int d, int p);

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  int d() const { return d_; }
  int p() const { return p_; }

  const SurvivalRecord& operator[](std::size_t i) const { return records_[i]; }
  const std::vector<SurvivalRecord>& records() const { return records_; }

  std::size_t event_count() const;
  double max_time() const;

  /// Records at the given indices, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;

  /// Stacked covariates, one row per subject.
  Eigen::MatrixXd x_matrix() const;
  Eigen::MatrixXd z_matrix() const;

 private:
  std::vector<SurvivalRecord> records_;
  int d_ = 0;
  int p_ = 0;
};

/// Reads `time,event,x1..xd,z1..zp`. Throws IngestionError naming the row.
Dataset load_csv(const std::filesystem::path& path);
void write_csv(const Dataset& data, const std::filesystem::path& path);

/// 0 = t_0 < t_1 < ... < t_m = tau.
struct TimeGrid {
  std::vector<double> breakpoints;
  double tau = 0.0;

  std::size_t intervals() const { return breakpoints.size() - 1; }
  /// Largest spacing (the mesh size).
  double mesh() const;
  /// Throws ConfigError if the grid invariants are violated.
  void validate() const;
};

/// {0, tau} u {k tau / grid_size : k = 1..grid_size} u {observed times},
/// sorted, duplicates (exact equality) removed.
TimeGrid build_grid(const Dataset& data, int grid_size, double tau);

/// Grid from explicit breakpoints (validated).
TimeGrid make_grid(std::vector<double> breakpoints);

struct ExpandedRow {
  std::size_t subject = 0;
  std::int32_t j = 0;
  double eval_time = 0.0;
  double exposure = 0.0;
  bool delta = false;
};

/// Struct-of-arrays table of pseudo-observations, sorted by (subject, j).
struct ExpandedRows {
  std::vector<std::uint32_t> subject;
  std::vector<std::int32_t> j;
  std::vector<double> eval_time;
  std::vector<double> exposure;
  std::vector<std::uint8_t> delta;

  std::size_t size() const { return subject.size(); }
  bool empty() const { return subject.empty(); }
  ExpandedRow operator[](std::size_t r) const {
    return {subject[r], j[r], eval_time[r], exposure[r], delta[r] != 0};
  }
  void reserve(std::size_t n);
  void push_back(const ExpandedRow& row);
};

/// For every subject and every interval (t_{j-1}, t_j] with t_{j-1} < T_i,
/// emits exposure min(T_i, t_j) - t_{j-1} and the event flag of that interval.
/// Zero-exposure rows carry no likelihood contribution and are skipped.
/// Throws ConfigError if some T_i exceeds the grid's tau.
ExpandedRows expand(const Dataset& data, const TimeGrid& grid);

/// Debug export: `subject,j,eval_time,exposure,delta`.
void write_expanded_csv(const ExpandedRows& rows,
                        const std::filesystem::path& path);

}  // namespace flexihaz
