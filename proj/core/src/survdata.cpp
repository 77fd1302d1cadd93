#include "flexihaz/survdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "flexihaz/errors.hpp"

namespace flexihaz {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

double parse_number(const std::string& cell, std::size_t row,
                    const std::string& column) {
  const std::string t = trim(cell);
  double value = 0.0;
  const auto* first = t.data();
  const auto* last = t.data() + t.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (t.empty() || ec != std::errc() || ptr != last || !std::isfinite(value)) {
    throw IngestionError("row " + std::to_string(row) + ": column '" + column +
                             "' is not a finite number: '" + t + "'",
                         row);
  }
  return value;
}

// Matches `prefix` followed by a positive integer; returns that integer or 0.
int indexed_column(const std::string& name, char prefix) {
  if (name.size() < 2 || name[0] != prefix) return 0;
  int k = 0;
  auto [ptr, ec] = std::from_chars(name.data() + 1, name.data() + name.size(), k);
  if (ec != std::errc() || ptr != name.data() + name.size() || k < 1) return 0;
  return k;
}

}  // namespace

Dataset::Dataset(std::vector<SurvivalRecord> records, int d, int p)
    : records_(std::move(records)), d_(d), p_(p) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    if (r.x.size() != d_ || r.z.size() != p_) {
      throw ShapeError("record " + std::to_string(i) +
                       " has covariate dimensions inconsistent with the dataset");
    }
    if (!(r.time >= 0.0) || !std::isfinite(r.time) || !r.x.allFinite() ||
        !r.z.allFinite()) {
      throw ConfigError("record " + std::to_string(i) +
                        " has a negative or non-finite value");
    }
  }
}

std::size_t Dataset::event_count() const {
  return static_cast<std::size_t>(std::count_if(
      records_.begin(), records_.end(), [](const auto& r) { return r.event; }));
}

double Dataset::max_time() const {
  double m = 0.0;
  for (const auto& r : records_) m = std::max(m, r.time);
  return m;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  std::vector<SurvivalRecord> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(records_.at(i));
  return Dataset(std::move(out), d_, p_);
}

Eigen::MatrixXd Dataset::x_matrix() const {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(size()), d_);
  for (std::size_t i = 0; i < size(); ++i) m.row(static_cast<Eigen::Index>(i)) = records_[i].x;
  return m;
}

Eigen::MatrixXd Dataset::z_matrix() const {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(size()), p_);
  for (std::size_t i = 0; i < size(); ++i) m.row(static_cast<Eigen::Index>(i)) = records_[i].z;
  return m;
}

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw IngestionError("empty file " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header = split_line(line);
  for (auto& h : header) h = trim(h);

  // Locate columns by name; x/z columns must be numbered contiguously from 1.
  int time_col = -1;
  int event_col = -1;
  std::vector<int> x_cols;
  std::vector<int> z_cols;
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    const std::string& h = header[c];
    if (h == "time") {
      time_col = c;
    } else if (h == "event") {
      event_col = c;
    } else if (int k = indexed_column(h, 'x'); k > 0) {
      if (static_cast<int>(x_cols.size()) < k) x_cols.resize(k, -1);
      x_cols[k - 1] = c;
    } else if (int k2 = indexed_column(h, 'z'); k2 > 0) {
      if (static_cast<int>(z_cols.size()) < k2) z_cols.resize(k2, -1);
      z_cols[k2 - 1] = c;
    } else {
      throw IngestionError("unexpected column '" + h + "' in header");
    }
  }
  if (time_col < 0) throw IngestionError("missing column 'time'");
  if (event_col < 0) throw IngestionError("missing column 'event'");
  for (std::size_t k = 0; k < x_cols.size(); ++k) {
    if (x_cols[k] < 0) throw IngestionError("missing column 'x" + std::to_string(k + 1) + "'");
  }
  for (std::size_t k = 0; k < z_cols.size(); ++k) {
    if (z_cols[k] < 0) throw IngestionError("missing column 'z" + std::to_string(k + 1) + "'");
  }
  if (z_cols.empty()) throw IngestionError("missing column 'z1'");

  const int d = static_cast<int>(x_cols.size());
  const int p = static_cast<int>(z_cols.size());
  std::vector<SurvivalRecord> records;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw IngestionError("row " + std::to_string(row) + ": expected " +
                               std::to_string(header.size()) + " cells, found " +
                               std::to_string(cells.size()),
                           row);
    }
    SurvivalRecord rec;
    rec.time = parse_number(cells[time_col], row, "time");
    if (rec.time < 0.0) {
      throw IngestionError("row " + std::to_string(row) + ": negative time", row);
    }
    const double ev = parse_number(cells[event_col], row, "event");
    if (ev != 0.0 && ev != 1.0) {
      throw IngestionError("row " + std::to_string(row) +
                               ": event must be 0 or 1, found " + trim(cells[event_col]),
                           row);
    }
    rec.event = ev == 1.0;
    rec.x.resize(d);
    rec.z.resize(p);
    for (int k = 0; k < d; ++k) {
      rec.x(k) = parse_number(cells[x_cols[k]], row, header[x_cols[k]]);
    }
    for (int k = 0; k < p; ++k) {
      rec.z(k) = parse_number(cells[z_cols[k]], row, header[z_cols[k]]);
    }
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw IngestionError("no records in " + path.string());
  return Dataset(std::move(records), d, p);
}

void write_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "time,event";
  for (int k = 1; k <= data.d(); ++k) out << ",x" << k;
  for (int k = 1; k <= data.p(); ++k) out << ",z" << k;
  out << '\n' << std::setprecision(17);
  for (const auto& r : data.records()) {
    out << r.time << ',' << (r.event ? 1 : 0);
    for (int k = 0; k < data.d(); ++k) out << ',' << r.x(k);
    for (int k = 0; k < data.p(); ++k) out << ',' << r.z(k);
    out << '\n';
  }
  if (!out) throw ConfigError("failed writing " + path.string());
}

double TimeGrid::mesh() const {
  double m = 0.0;
  for (std::size_t k = 1; k < breakpoints.size(); ++k) {
    m = std::max(m, breakpoints[k] - breakpoints[k - 1]);
  }
  return m;
}

void TimeGrid::validate() const {
  if (breakpoints.size() < 2) throw ConfigError("grid needs at least two breakpoints");
  if (breakpoints.front() != 0.0) throw ConfigError("grid must start at 0");
  if (breakpoints.back() != tau) throw ConfigError("grid must end at tau");
  for (std::size_t k = 1; k < breakpoints.size(); ++k) {
    if (!(breakpoints[k] > breakpoints[k - 1])) {
      throw ConfigError("grid breakpoints must be strictly increasing");
    }
  }
}

TimeGrid make_grid(std::vector<double> breakpoints) {
  TimeGrid g;
  g.tau = breakpoints.empty() ? 0.0 : breakpoints.back();
  g.breakpoints = std::move(breakpoints);
  g.validate();
  return g;
}

TimeGrid build_grid(const Dataset& data, int grid_size, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ConfigError("tau must be positive and finite");
  }
  if (grid_size < 1) throw ConfigError("grid_size must be >= 1");
  std::vector<double> pts;
  pts.reserve(static_cast<std::size_t>(grid_size) + data.size() + 2);
  pts.push_back(0.0);
  for (int k = 1; k < grid_size; ++k) pts.push_back(tau * k / grid_size);
  pts.push_back(tau);
  for (const auto& r : data.records()) {
    if (r.time > tau) {
      throw ConfigError("observed time " + std::to_string(r.time) +
                        " exceeds tau " + std::to_string(tau));
    }
    pts.push_back(r.time);
  }
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  TimeGrid g{std::move(pts), tau};
  g.validate();
  return g;
}

void ExpandedRows::reserve(std::size_t n) {
  subject.reserve(n);
  j.reserve(n);
  eval_time.reserve(n);
  exposure.reserve(n);
  delta.reserve(n);
}

void ExpandedRows::push_back(const ExpandedRow& row) {
  subject.push_back(static_cast<std::uint32_t>(row.subject));
  j.push_back(row.j);
  eval_time.push_back(row.eval_time);
  exposure.push_back(row.exposure);
  delta.push_back(row.delta ? 1 : 0);
}

ExpandedRows expand(const Dataset& data, const TimeGrid& grid) {
  grid.validate();
  const auto& bp = grid.breakpoints;

  std::size_t total = 0;
  std::vector<std::size_t> n_rows(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double T = data[i].time;
    if (T > grid.tau) {
      throw ConfigError("subject " + std::to_string(i) + " has time " +
                        std::to_string(T) + " beyond tau; truncate first");
    }
    // Intervals j = 1..J with t_{j-1} < T.
    n_rows[i] = static_cast<std::size_t>(
        std::lower_bound(bp.begin(), bp.end(), T) - bp.begin());
    total += n_rows[i];
  }

  ExpandedRows rows;
  rows.reserve(total);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double T = data[i].time;
    for (std::size_t j = 1; j <= n_rows[i]; ++j) {
      const double lo = bp[j - 1];
      const double hi = bp[j];
      const bool contains = T <= hi;  // T in (lo, hi]
      ExpandedRow row;
      row.subject = i;
      row.j = static_cast<std::int32_t>(j);
      row.eval_time = hi;
      row.exposure = std::min(T, hi) - lo;
      row.delta = contains && data[i].event;
      rows.push_back(row);
    }
  }
  return rows;
}

void write_expanded_csv(const ExpandedRows& rows,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "subject,j,eval_time,exposure,delta\n" << std::setprecision(17);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out << rows.subject[r] << ',' << rows.j[r] << ',' << rows.eval_time[r] << ','
        << rows.exposure[r] << ',' << static_cast<int>(rows.delta[r]) << '\n';
  }
}

}  // namespace flexihaz
