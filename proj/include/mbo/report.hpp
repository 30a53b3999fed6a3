#ifndef MBO_REPORT_HPP
#define MBO_REPORT_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mbo/harness.hpp"
#include "mbo/metrics.hpp"

namespace mbo {

// Product-moment correlation of two equally long, non-constant samples.
inline double pearson(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ArgumentError("pearson: sample lengths differ");
  if (u.size() < 3) throw ArgumentError("pearson: need at least 3 pairs");
  const double mu = mean_of(u), mv = mean_of(v);
  double suu = 0.0, svv = 0.0, suv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double a = u[i] - mu, b = v[i] - mv;
    suu += a * a;
    svv += b * b;
    suv += a * b;
  }
  if (suu == 0.0 || svv == 0.0) throw UndefinedCorrelation("pearson: constant sample");
  return std::clamp(suv / std::sqrt(suu * svv), -1.0, 1.0);
}

// Hyperparameters attached to every scatter point.
struct CellInfo {
  std::string cell;
  std::string guidance;
  double tau = 0.0;
  double w = 0.0;
  std::size_t width = 0;
  std::uint64_t seed = 0;
};

inline CellInfo cell_info(const RunRecord& r) {
  return {r.cell, std::string(to_string(r.config.guidance)), r.config.tau, r.config.w, r.config.width,
          r.config.model_seed};
}

struct MetricCorrelation {
  MetricId metric = MetricId::CDSM;
  // ok | insufficient (< 3 complete pairs) | undefined (constant column) | absent (inapplicable everywhere)
  std::string status;
  double r = kNaN;
  std::size_t pairs = 0;
  std::vector<std::string> absent_cells;  // cells where the metric does not apply
};

struct ScatterRow {
  MetricId metric = MetricId::CDSM;
  double value = 0.0;
  double test_reward = 0.0;
  CellInfo cell;
};

struct CorrelationReport {
  Matrix U, V;
  std::vector<CellInfo> cells;
  std::vector<MetricCorrelation> rows;  // one per MetricId, in kAllMetrics order
  std::vector<ScatterRow> scatter;
  std::vector<MetricId> ranking;        // ok rows, most negative r first

  const MetricCorrelation& row(MetricId m) const { return rows.at(metric_row(m)); }
};

/// Pearson r per metric row of (U, V) over the columns where both are finite.
/// `absent` lists, per column, the metrics that do not apply to that cell.
inline CorrelationReport correlation_report(const Matrix& U, const Matrix& V, const std::vector<CellInfo>& cells,
                                            const std::vector<std::vector<MetricId>>& absent = {}) {
  if (U.rows() != kAllMetrics.size() || U.rows() != V.rows() || U.cols() != V.cols() || U.cols() != cells.size())
    throw ArgumentError("correlation_report: U, V and cell list are not congruent");
  CorrelationReport rep{U, V, cells, {}, {}, {}};
  for (std::size_t i = 0; i < kAllMetrics.size(); ++i) {
    MetricCorrelation mc;
    mc.metric = kAllMetrics[i];
    std::vector<double> u, v;
    for (std::size_t j = 0; j < U.cols(); ++j) {
      if (j < absent.size() && std::ranges::find(absent[j], mc.metric) != absent[j].end())
        mc.absent_cells.push_back(cells[j].cell);
      if (!std::isfinite(U(i, j)) || !std::isfinite(V(i, j))) continue;
      u.push_back(U(i, j));
      v.push_back(V(i, j));
      rep.scatter.push_back({mc.metric, U(i, j), V(i, j), cells[j]});
    }
    mc.pairs = u.size();
    if (!cells.empty() && mc.absent_cells.size() == cells.size()) {
      mc.status = "absent";
    } else if (u.size() < 3) {
      mc.status = "insufficient";
    } else {
      try {
        mc.r = pearson(u, v);
        mc.status = "ok";
      } catch (const UndefinedCorrelation&) {
        mc.status = "undefined";
      }
    }
    rep.rows.push_back(std::move(mc));
  }
  for (const auto& r : rep.rows)
    if (r.status == "ok") rep.ranking.push_back(r.metric);
  std::ranges::stable_sort(rep.ranking, [&](MetricId a, MetricId b) { return rep.row(a).r < rep.row(b).r; });
  return rep;
}

inline CorrelationReport correlation_report(const std::vector<CellResult>& cells) {
  Matrix U, V;
  assemble_uv(cells, U, V);
  std::vector<CellInfo> info;
  std::vector<std::vector<MetricId>> absent;
  for (const auto& c : cells) {
    info.push_back(cell_info(c.record));
    absent.push_back(c.record.absent);
  }
  return correlation_report(U, V, info, absent);
}

// ---------------------------------------------------------------------------
// Serialisation

inline nlohmann::json matrix_json(const Matrix& M) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < M.rows(); ++i) {
    nlohmann::json r = nlohmann::json::array();
    for (std::size_t j = 0; j < M.cols(); ++j) r.push_back(detail::num_json(M(i, j)));
    rows.push_back(r);
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j, std::size_t cols) {
  Matrix M(j.size(), cols);
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (j[i].size() != cols) throw ParseError("matrix row " + std::to_string(i) + " has the wrong length", 0);
    for (std::size_t c = 0; c < cols; ++c) M(i, c) = detail::json_num(j[i][c]);
  }
  return M;
}

inline nlohmann::json cell_json(const CellInfo& c) {
  return {{"cell", c.cell}, {"guidance", c.guidance}, {"tau", c.tau}, {"w", c.w}, {"width", c.width}, {"seed", c.seed}};
}

inline CellInfo cell_from_json(const nlohmann::json& j) {
  return {j.at("cell").get<std::string>(), j.at("guidance").get<std::string>(), j.at("tau").get<double>(),
          j.at("w").get<double>(),         j.at("width").get<std::size_t>(),    j.at("seed").get<std::uint64_t>()};
}

inline nlohmann::json to_json(const CorrelationReport& rep) {
  using nlohmann::json;
  json j;
  json metrics = json::array();
  for (auto m : kAllMetrics) metrics.push_back(std::string(to_string(m)));
  j["metrics"] = metrics;
  json cells = json::array();
  for (const auto& c : rep.cells) cells.push_back(cell_json(c));
  j["cells"] = cells;
  j["U"] = matrix_json(rep.U);
  j["V"] = matrix_json(rep.V);
  json rows = json::array();
  for (const auto& r : rep.rows)
    rows.push_back({{"metric", std::string(to_string(r.metric))},
                    {"status", r.status},
                    {"r", detail::num_json(r.r)},
                    {"pairs", r.pairs},
                    {"absent_cells", r.absent_cells}});
  j["rows"] = rows;
  json scatter = json::array();
  for (const auto& s : rep.scatter)
    scatter.push_back({{"metric", std::string(to_string(s.metric))},
                       {"value", detail::num_json(s.value)},
                       {"test_reward", detail::num_json(s.test_reward)},
                       {"cell", s.cell.cell}});
  j["scatter"] = scatter;
  json ranking = json::array();
  for (auto m : rep.ranking) ranking.push_back(std::string(to_string(m)));
  j["ranking"] = ranking;
  return j;
}

inline CorrelationReport correlation_report_from_json(const nlohmann::json& j) {
  try {
    CorrelationReport rep;
    for (const auto& c : j.at("cells")) rep.cells.push_back(cell_from_json(c));
    rep.U = matrix_from_json(j.at("U"), rep.cells.size());
    rep.V = matrix_from_json(j.at("V"), rep.cells.size());
    for (const auto& r : j.at("rows"))
      rep.rows.push_back({metric_from_name(r.at("metric").get<std::string>()), r.at("status").get<std::string>(),
                          detail::json_num(r.at("r")), r.at("pairs").get<std::size_t>(),
                          r.at("absent_cells").get<std::vector<std::string>>()});
    for (const auto& s : j.at("scatter")) {
      const auto name = s.at("cell").get<std::string>();
      const auto it = std::ranges::find_if(rep.cells, [&](const CellInfo& c) { return c.cell == name; });
      if (it == rep.cells.end()) throw ParseError("scatter row names unknown cell '" + name + "'", 0);
      rep.scatter.push_back({metric_from_name(s.at("metric").get<std::string>()), detail::json_num(s.at("value")),
                             detail::json_num(s.at("test_reward")), *it});
    }
    for (const auto& m : j.at("ranking")) rep.ranking.push_back(metric_from_name(m.get<std::string>()));
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("correlation report: ") + e.what(), 0);
  }
}

inline bool operator==(const CellInfo& a, const CellInfo& b) {
  return a.cell == b.cell && a.guidance == b.guidance && a.tau == b.tau && a.w == b.w && a.width == b.width &&
         a.seed == b.seed;
}

inline std::string scatter_csv(const CorrelationReport& rep) {
  std::ostringstream os;
  os << "metric,value,test_reward,tau,w,width,seed\n";
  for (const auto& s : rep.scatter)
    os << to_string(s.metric) << ',' << format_double(s.value) << ',' << format_double(s.test_reward) << ','
       << format_double(s.cell.tau) << ',' << format_double(s.cell.w) << ',' << s.cell.width << ',' << s.cell.seed
       << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// SVG scatter plot, one metric per file

namespace detail {
inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}
}  // namespace detail

inline std::string scatter_svg(const CorrelationReport& rep, MetricId metric) {
  constexpr double W = 480, H = 360, L = 70, R = 20, Tp = 40, B = 50;
  std::vector<const ScatterRow*> pts;
  for (const auto& s : rep.scatter)
    if (s.metric == metric) pts.push_back(&s);
  const auto& row = rep.row(metric);

  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (!pts.empty()) {
    x0 = x1 = pts.front()->value;
    y0 = y1 = pts.front()->test_reward;
    for (auto* p : pts) {
      x0 = std::min(x0, p->value);
      x1 = std::max(x1, p->value);
      y0 = std::min(y0, p->test_reward);
      y1 = std::max(y1, p->test_reward);
    }
  }
  auto pad = [](double& lo, double& hi) {
    const double span = hi - lo;
    const double m = span > 0 ? 0.05 * span : std::max(1e-9, 0.05 * std::abs(lo) + 0.5);
    lo -= m;
    hi += m;
  };
  pad(x0, x1);
  pad(y0, y1);
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - Tp - B); };

  std::ostringstream os;
  const std::string name(to_string(metric));
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"360\" viewBox=\"0 0 480 360\">\n";
  os << "<rect width=\"480\" height=\"360\" fill=\"white\"/>\n";
  os << "<text x=\"240\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" << name
     << "  r = " << (row.status == "ok" ? detail::fmt("%.3f", row.r) : row.status) << "  (n = " << row.pairs
     << ")</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << Tp << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  const char* tick = "%.4g";
  os << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\" font-family=\"sans-serif\" font-size=\"10\">"
     << detail::fmt(tick, x0) << "</text>\n";
  os << "<text x=\"" << W - R << "\" y=\"" << H - B + 16
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << detail::fmt(tick, x1) << "</text>\n";
  os << "<text x=\"" << L - 4 << "\" y=\"" << H - B
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << detail::fmt(tick, y0) << "</text>\n";
  os << "<text x=\"" << L - 4 << "\" y=\"" << Tp + 8
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << detail::fmt(tick, y1) << "</text>\n";
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">best validation " << name
     << "</text>\n";
  os << "<text x=\"16\" y=\"" << (Tp + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (Tp + H - B) / 2
     << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">test reward</text>\n";
  for (auto* p : pts)
    os << "<circle cx=\"" << detail::fmt("%.2f", px(p->value)) << "\" cy=\"" << detail::fmt("%.2f", py(p->test_reward))
       << "\" r=\"3.5\" fill=\"#1f77b4\" fill-opacity=\"0.8\"><title>" << p->cell.cell << " tau=" << format_double(p->cell.tau)
       << " width=" << p->cell.width << " seed=" << p->cell.seed << "</title></circle>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace mbo

#endif  // MBO_REPORT_HPP
