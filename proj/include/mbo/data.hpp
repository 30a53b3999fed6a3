#ifndef MBO_DATA_HPP
#define MBO_DATA_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mbo/errors.hpp"
#include "mbo/matrix.hpp"
#include "mbo/rng.hpp"

namespace mbo {

// ---------------------------------------------------------------------------
// Tasks and ground-truth oracles

enum class OracleId {
  Sphere,                   // -||x||^2
  TwoBumpMixture,           // wide bump at -1*1 plus narrow bump at 1.5*1, unit heights
  IllConditionedQuadratic,  // -sum_i lambda_i (x_i - 0.25)^2, lambda spans 1e-2 .. 1e1
};

inline std::string_view to_string(OracleId id) {
  switch (id) {
    case OracleId::Sphere: return "sphere";
    case OracleId::TwoBumpMixture: return "mixture";
    case OracleId::IllConditionedQuadratic: return "quadratic";
  }
  return "unknown";
}

inline OracleId oracle_from_name(std::string_view name) {
  if (name == "sphere") return OracleId::Sphere;
  if (name == "mixture") return OracleId::TwoBumpMixture;
  if (name == "quadratic") return OracleId::IllConditionedQuadratic;
  throw ConfigError("unknown oracle '" + std::string(name) + "'");
}

struct Bounds {
  double lo;
  double hi;
};

struct TaskSpec {
  std::string name;
  std::size_t dim = 0;
  std::vector<Bounds> bounds;
  OracleId oracle = OracleId::Sphere;

  void validate() const {
    if (dim < 1) throw ConfigError("task '" + name + "': dim must be >= 1");
    if (bounds.size() != dim) throw ConfigError("task '" + name + "': bounds length differs from dim");
    for (const auto& b : bounds)
      if (!(b.lo < b.hi)) throw ConfigError("task '" + name + "': every bound needs lo < hi");
  }
};

namespace mixture {
inline constexpr double kWideCentre = -1.0;
inline constexpr double kWideWidth = 1.5;
inline constexpr double kNarrowCentre = 1.5;
inline constexpr double kNarrowWidth = 0.5;
}  // namespace mixture

namespace quadratic {
inline constexpr double kCentre = 0.25;
inline double curvature(std::size_t i, std::size_t dim) {
  const double frac = dim > 1 ? static_cast<double>(i) / static_cast<double>(dim - 1) : 0.0;
  return std::pow(10.0, -2.0 + 3.0 * frac);
}
}  // namespace quadratic

inline TaskSpec make_task(OracleId oracle, std::size_t dim) {
  TaskSpec task;
  task.name = std::string(to_string(oracle)) + std::to_string(dim);
  task.dim = dim;
  task.oracle = oracle;
  const Bounds box = oracle == OracleId::TwoBumpMixture ? Bounds{-3.0, 3.0} : Bounds{-1.0, 1.0};
  task.bounds.assign(dim, box);
  task.validate();
  return task;
}

// Built-in tasks are named <oracle><dim>, e.g. sphere2, sphere8, mixture2, quadratic16.
inline TaskSpec make_task(std::string_view name) {
  const auto split = name.find_first_of("0123456789");
  if (split == std::string_view::npos || split == 0)
    throw ConfigError("task name '" + std::string(name) + "' must look like <oracle><dim>, e.g. mixture2");
  const OracleId oracle = oracle_from_name(name.substr(0, split));
  std::size_t dim = 0;
  const auto digits = name.substr(split);
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), dim);
  if (ec != std::errc{} || ptr != digits.data() + digits.size() || dim == 0)
    throw ConfigError("task name '" + std::string(name) + "' has an invalid dimension");
  return make_task(oracle, dim);
}

struct GroundTruth {
  double reward;
  bool clamped;  // true when x left the task box and was clamped before evaluation
};

inline GroundTruth evaluate(const TaskSpec& task, std::span<const double> x) {
  if (x.size() != task.dim) throw ArgumentError("ground truth: expected " + std::to_string(task.dim) + " features");
  std::vector<double> z(x.begin(), x.end());
  bool clamped = false;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double c = std::clamp(z[i], task.bounds[i].lo, task.bounds[i].hi);
    if (c != z[i] || std::isnan(z[i])) clamped = true;
    z[i] = std::isnan(z[i]) ? task.bounds[i].lo : c;
  }
  double reward = 0.0;
  switch (task.oracle) {
    case OracleId::Sphere:
      reward = -squared_norm(z);
      break;
    case OracleId::TwoBumpMixture: {
      double d1 = 0.0, d2 = 0.0;
      for (double v : z) {
        d1 += (v - mixture::kWideCentre) * (v - mixture::kWideCentre);
        d2 += (v - mixture::kNarrowCentre) * (v - mixture::kNarrowCentre);
      }
      reward = std::exp(-d1 / (2.0 * mixture::kWideWidth * mixture::kWideWidth)) +
               std::exp(-d2 / (2.0 * mixture::kNarrowWidth * mixture::kNarrowWidth));
      break;
    }
    case OracleId::IllConditionedQuadratic:
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double dz = z[i] - quadratic::kCentre;
        reward -= quadratic::curvature(i, z.size()) * dz * dz;
      }
      break;
  }
  return {reward, clamped};
}

inline double ground_truth(const TaskSpec& task, std::span<const double> x) { return evaluate(task, x).reward; }

// ---------------------------------------------------------------------------
// Labelled sets and splits

struct LabeledSet {
  Matrix X;
  std::vector<double> y;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return X.cols(); }

  void validate() const {
    if (X.rows() != y.size()) throw DataError("labelled set: X has " + std::to_string(X.rows()) + " rows but y has " +
                                              std::to_string(y.size()) + " entries");
    if (!all_finite(X.storage()) || !all_finite(y)) throw DataError("labelled set contains non-finite values");
  }

  bool operator==(const LabeledSet&) const = default;
};

inline LabeledSet subset(const LabeledSet& s, std::span<const std::size_t> idx) {
  LabeledSet out{select_rows(s.X, idx), {}};
  out.y.reserve(idx.size());
  for (auto i : idx) out.y.push_back(s.y[i]);
  return out;
}

inline LabeledSet concat(const LabeledSet& a, const LabeledSet& b) {
  LabeledSet out{vstack(a.X, b.X), a.y};
  out.y.insert(out.y.end(), b.y.begin(), b.y.end());
  return out;
}

inline LabeledSet make_dataset(const TaskSpec& task, std::size_t n, std::uint64_t seed) {
  if (n < 2) throw ArgumentError("make_dataset: need n >= 2");
  task.validate();
  Rng rng(seed);
  LabeledSet set{Matrix(n, task.dim), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    auto row = set.X.row(i);
    for (std::size_t j = 0; j < task.dim; ++j) row[j] = rng.uniform(task.bounds[j].lo, task.bounds[j].hi);
    set.y[i] = ground_truth(task, row);
  }
  return set;
}

struct SplitPair {
  LabeledSet train;
  LabeledSet valid;
  double gamma;
};

// Inverse empirical CDF: the smallest y with at least a `q` fraction of the
// sample at or below it.
inline double empirical_quantile(std::vector<double> y, double q) {
  if (y.empty()) throw ArgumentError("quantile of an empty sample");
  std::ranges::sort(y);
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(y.size())));
  return y[std::clamp<std::size_t>(rank, 1, y.size()) - 1];
}

// Rows with y <= gamma train, the rest validate. Row order is preserved on both sides.
inline SplitPair gamma_split(const LabeledSet& d, double gamma_quantile) {
  if (d.size() == 0) throw DataError("gamma_split: empty dataset");
  if (!(gamma_quantile > 0.0 && gamma_quantile < 1.0)) throw ArgumentError("gamma_split: quantile must lie in (0, 1)");
  const double gamma = empirical_quantile(d.y, gamma_quantile);
  std::vector<std::size_t> lo, hi;
  for (std::size_t i = 0; i < d.size(); ++i) (d.y[i] <= gamma ? lo : hi).push_back(i);
  if (lo.empty()) throw DataError("gamma_split: train side is empty");
  if (hi.empty()) throw DataError("gamma_split: valid side is empty (all rewards <= gamma)");
  return {subset(d, lo), subset(d, hi), gamma};
}

// ---------------------------------------------------------------------------
// Min-max normalisation fitted on the training split

struct Normalizer {
  std::vector<double> x_min, x_max;
  double y_min = 0.0, y_max = 1.0;

  std::size_t dim() const { return x_min.size(); }

  Matrix transform_x(const Matrix& X) const {
    check_dim(X);
    Matrix out(X.rows(), X.cols());
    for (std::size_t i = 0; i < X.rows(); ++i)
      for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) = (X(i, j) - x_min[j]) / (x_max[j] - x_min[j]);
    return out;
  }
  Matrix inverse_x(const Matrix& Z) const {
    check_dim(Z);
    Matrix out(Z.rows(), Z.cols());
    for (std::size_t i = 0; i < Z.rows(); ++i)
      for (std::size_t j = 0; j < Z.cols(); ++j) out(i, j) = Z(i, j) * (x_max[j] - x_min[j]) + x_min[j];
    return out;
  }
  double transform_y(double y) const { return (y - y_min) / (y_max - y_min); }
  double inverse_y(double z) const { return z * (y_max - y_min) + y_min; }
  std::vector<double> transform_y(std::span<const double> y) const {
    std::vector<double> out(y.size());
    std::ranges::transform(y, out.begin(), [this](double v) { return transform_y(v); });
    return out;
  }
  std::vector<double> inverse_y(std::span<const double> z) const {
    std::vector<double> out(z.size());
    std::ranges::transform(z, out.begin(), [this](double v) { return inverse_y(v); });
    return out;
  }
  LabeledSet transform(const LabeledSet& s) const { return {transform_x(s.X), transform_y(s.y)}; }

 private:
  void check_dim(const Matrix& X) const {
    if (X.cols() != x_min.size()) throw ArgumentError("normalizer: feature count mismatch");
  }
};

// Constant features (and a constant y) get max := min + 1, so they map to 0.
inline Normalizer fit_normalizer(const LabeledSet& train) {
  if (train.size() == 0) throw DataError("fit_normalizer: empty training set");
  Normalizer n;
  n.x_min.assign(train.dim(), 0.0);
  n.x_max.assign(train.dim(), 0.0);
  for (std::size_t j = 0; j < train.dim(); ++j) {
    double lo = train.X(0, j), hi = train.X(0, j);
    for (std::size_t i = 1; i < train.size(); ++i) {
      lo = std::min(lo, train.X(i, j));
      hi = std::max(hi, train.X(i, j));
    }
    n.x_min[j] = lo;
    n.x_max[j] = hi > lo ? hi : lo + 1.0;
  }
  const auto [ylo, yhi] = std::ranges::minmax(train.y);
  n.y_min = ylo;
  n.y_max = yhi > ylo ? yhi : ylo + 1.0;
  return n;
}

// ---------------------------------------------------------------------------
// CSV: header x0,...,x{d-1},y; one design per line.

inline std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline void write_csv(std::ostream& os, const LabeledSet& set) {
  for (std::size_t j = 0; j < set.dim(); ++j) os << 'x' << j << ',';
  os << "y\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (std::size_t j = 0; j < set.dim(); ++j) os << format_double(set.X(i, j)) << ',';
    os << format_double(set.y[i]) << '\n';
  }
}

inline void save_csv(const LabeledSet& set, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw MissingArtifact("cannot open '" + path + "' for writing");
  write_csv(os, set);
  if (!os) throw MissingArtifact("failed writing '" + path + "'");
}

namespace detail {
inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    cells.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return cells;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}
}  // namespace detail

inline LabeledSet read_csv(std::istream& is) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(is, line)) throw ParseError("csv: missing header", 1);
  ++line_no;
  const auto header = detail::split_commas(detail::trim(line));
  if (header.size() < 2 || detail::trim(header.back()) != "y")
    throw ParseError("csv line 1: header must end with a 'y' column", 1);
  for (std::size_t j = 0; j + 1 < header.size(); ++j)
    if (detail::trim(header[j]) != "x" + std::to_string(j))
      throw ParseError("csv line 1: expected column 'x" + std::to_string(j) + "'", 1);
  const std::size_t d = header.size() - 1;

  std::vector<double> xs, ys;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    ++row;
    const auto where = "csv row " + std::to_string(row) + " (line " + std::to_string(line_no) + ")";
    const auto cells = detail::split_commas(body);
    if (cells.size() != d + 1)
      throw ParseError(where + ": expected " + std::to_string(d + 1) + " cells, got " + std::to_string(cells.size()),
                       line_no);
    for (std::size_t j = 0; j <= d; ++j) {
      const auto cell = detail::trim(cells[j]);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc{} || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        const std::string col = j == d ? "y" : "x" + std::to_string(j);
        throw ParseError(where + ": column " + col + " holds non-numeric value '" + std::string(cell) + "'", line_no);
      }
      (j == d ? ys : xs).push_back(v);
    }
  }
  LabeledSet set{Matrix(ys.size(), d, std::move(xs)), std::move(ys)};
  return set;
}

inline LabeledSet load_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact("cannot open '" + path + "'");
  return read_csv(is);
}

}  // namespace mbo

#endif  // MBO_DATA_HPP
