#ifndef MBO_METRICS_HPP
#define MBO_METRICS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mbo/diffusion.hpp"
#include "mbo/errors.hpp"
#include "mbo/linalg.hpp"
#include "mbo/matrix.hpp"
#include "mbo/rng.hpp"

namespace mbo {

// Every metric is stored so that smaller is better; reward and density/coverage
// are negated before storage.
enum class MetricId { CDSM, NEG_REWARD, AGREEMENT, FD, NEG_DC };

inline constexpr std::array<MetricId, 5> kAllMetrics = {MetricId::CDSM, MetricId::NEG_REWARD, MetricId::AGREEMENT,
                                                        MetricId::FD, MetricId::NEG_DC};

inline std::string_view to_string(MetricId m) {
  switch (m) {
    case MetricId::CDSM: return "CDSM";
    case MetricId::NEG_REWARD: return "NEG_REWARD";
    case MetricId::AGREEMENT: return "AGREEMENT";
    case MetricId::FD: return "FD";
    case MetricId::NEG_DC: return "NEG_DC";
  }
  return "?";
}

inline MetricId metric_from_name(std::string_view s) {
  for (auto m : kAllMetrics)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown metric '" + std::string(s) + "'");
}

// Any callable mapping a batch of designs to one score per row.
template <class F>
concept Scorer = std::invocable<const F&, const Matrix&> &&
                 std::convertible_to<std::invoke_result_t<const F&, const Matrix&>, std::vector<double>>;

// ---------------------------------------------------------------------------
// Conditional denoising loss on the validation split

inline double m_cdsm(const DiffusionModel& m, const Matrix& valid_X, std::span<const double> valid_y,
                     std::size_t n_draws, std::uint64_t seed) {
  if (m.mode != GuidanceMode::ClassifierFree)
    throw InapplicableMetric("CDSM is undefined for classifier-based models: the noise predictor never sees y");
  if (valid_X.rows() == 0 || valid_y.size() != valid_X.rows()) throw ArgumentError("m_cdsm: bad validation set");
  if (n_draws == 0) throw ArgumentError("m_cdsm: need at least one draw");
  double total = 0.0;
  for (std::size_t r = 0; r < n_draws; ++r) {
    Rng rng(derive_seed(seed, r));
    const NoiseDraws dr = draw_noise(valid_X.rows(), m.dim(), m.schedule.steps(), rng);
    total += denoising_loss_grad(m, valid_X, valid_y, {}, dr, false).loss;
  }
  return total / static_cast<double>(n_draws);
}

// ---------------------------------------------------------------------------
// Oracle-ranked rewards

// Indices of the K largest predictions, descending; ties keep the earlier row.
inline std::vector<std::size_t> top_k_indices(std::span<const double> preds, std::size_t K) {
  if (K == 0) throw ArgumentError("top-K selection needs K >= 1");
  if (preds.size() < K)
    throw ArgumentError("top-K selection: " + std::to_string(preds.size()) + " candidates < K = " + std::to_string(K));
  std::vector<std::size_t> idx(preds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::ranges::stable_sort(idx, [&](std::size_t a, std::size_t b) { return preds[a] > preds[b]; });
  idx.resize(K);
  return idx;
}

inline double mean_of(std::span<const double> v) {
  if (v.empty()) throw ArgumentError("mean of an empty sample");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Linear interpolation between order statistics: 100 -> max, 50 -> median.
inline double percentile(std::vector<double> v, double pct) {
  if (v.empty()) throw ArgumentError("percentile of an empty sample");
  if (!(pct >= 0.0 && pct <= 100.0)) throw ArgumentError("percentile must lie in [0, 100]");
  std::ranges::sort(v);
  const double pos = pct / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return frac == 0.0 ? v[lo] : v[lo] + frac * (v[hi] - v[lo]);
}

// Mean oracle prediction over the oracle's own top K.
inline double m_reward(std::span<const double> preds, std::size_t K) {
  std::vector<double> top;
  for (auto i : top_k_indices(preds, K)) top.push_back(preds[i]);
  return mean_of(top);
}

template <Scorer Oracle>
double m_reward(const Matrix& S, const Oracle& oracle, std::size_t K) {
  const std::vector<double> preds = oracle(S);
  return m_reward(preds, K);
}

struct TestRewardStats {
  double mean = 0.0;
  double median = 0.0;  // 50th percentile
  double max = 0.0;     // 100th percentile
  std::vector<double> selected;  // ground-truth scores of the K selected rows, in rank order
};

// Rank S by `oracle`, keep the top K, score those with `truth`.
template <Scorer Oracle, Scorer Truth>
TestRewardStats test_reward_stats(const Matrix& S, const Oracle& oracle, const Truth& truth, std::size_t K) {
  const std::vector<double> preds = oracle(S);
  const auto idx = top_k_indices(preds, K);
  const std::vector<double> scores = truth(select_rows(S, idx));
  TestRewardStats st;
  st.selected = scores;
  st.mean = mean_of(scores);
  st.median = percentile(scores, 50.0);
  st.max = percentile(scores, 100.0);
  return st;
}

template <Scorer Oracle, Scorer Truth>
double test_reward(const Matrix& S, const Oracle& oracle, const Truth& truth, std::size_t K) {
  return test_reward_stats(S, oracle, truth, K).mean;
}

template <Scorer Oracle, Scorer Truth>
double percentile_reward(const Matrix& S, const Oracle& oracle, const Truth& truth, std::size_t K, double pct) {
  return percentile(test_reward_stats(S, oracle, truth, K).selected, pct);
}

// ---------------------------------------------------------------------------
// Agreement

// Mean over rows of (f(x_i) - y_i)^2, where x_i was sampled conditioned on y_i.
template <Scorer Oracle>
double m_agreement(const Matrix& samples, std::span<const double> y_cond, const Oracle& oracle) {
  if (samples.rows() != y_cond.size() || y_cond.empty()) throw ArgumentError("m_agreement: sample/label mismatch");
  const std::vector<double> f = oracle(samples);
  double s = 0.0;
  for (std::size_t i = 0; i < y_cond.size(); ++i) s += (f[i] - y_cond[i]) * (f[i] - y_cond[i]);
  return s / static_cast<double>(y_cond.size());
}

// Draws one x ~ p_theta(x | y) per validation label, then scores agreement.
template <Scorer Oracle>
double m_agreement(const DiffusionModel& m, const EpsFnFactory& factory, std::span<const double> valid_y,
                   const Oracle& oracle, std::uint64_t seed, NoiseScale noise = NoiseScale::SqrtBeta) {
  if (valid_y.empty()) throw ArgumentError("m_agreement: empty validation set");
  const Matrix samples = sample_conditioned(m, factory, valid_y, seed, noise);
  return m_agreement(samples, valid_y, oracle);
}

// ---------------------------------------------------------------------------
// Frechet distance between Gaussian fits

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).
///
/// The cross term is Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), summed from the
/// eigenvalues of the symmetric product with negatives clipped to 0. Results
/// below zero are clipped to 0.
inline double frechet_gaussian(const GaussianMoments& a, const GaussianMoments& b) {
  const std::size_t p = a.mu.size();
  if (b.mu.size() != p || a.sigma.rows() != p || b.sigma.rows() != p)
    throw ArgumentError("frechet: moment dimensions differ");
  double mean_term = 0.0;
  for (std::size_t j = 0; j < p; ++j) mean_term += (a.mu[j] - b.mu[j]) * (a.mu[j] - b.mu[j]);
  double trace = 0.0;
  for (std::size_t j = 0; j < p; ++j) trace += a.sigma(j, j) + b.sigma(j, j);
  const Matrix root_a = psd_sqrt(a.sigma);
  const Matrix inner = matmul(matmul(root_a, b.sigma), root_a);
  const SymEigen e = sym_eig(inner);
  double cross = 0.0;
  for (double l : e.values) cross += std::sqrt(std::max(l, 0.0));
  const double fd = mean_term + trace - 2.0 * cross;
  return std::max(fd, 0.0);
}

// Adds `eps` to the diagonal when the fit is rank deficient (n <= p).
inline GaussianMoments regularised_moments(const Matrix& H, double eps = 1e-6) {
  GaussianMoments m = mean_cov(H);
  if (H.rows() <= H.cols())
    for (std::size_t j = 0; j < H.cols(); ++j) m.sigma(j, j) += eps;
  return m;
}

// FD between two feature sets (already embedded, or raw inputs).
inline double m_fd(const Matrix& real_features, const Matrix& fake_features) {
  if (real_features.cols() != fake_features.cols()) throw ArgumentError("m_fd: feature dimensions differ");
  return frechet_gaussian(regularised_moments(real_features), regularised_moments(fake_features));
}

// ---------------------------------------------------------------------------
// Density and coverage

struct DensityCoverage {
  double density = 0.0;
  double coverage = 0.0;
  double combined = 0.0;
};

// Squared distance from each real row to its k-th nearest other real row.
inline std::vector<double> knn_radii_squared(const Matrix& real, std::size_t k) {
  const std::size_t n = real.rows();
  if (n <= k) throw ArgumentError("density/coverage: need more than k = " + std::to_string(k) + " real rows");
  std::vector<double> radii(n), dist;
  for (std::size_t i = 0; i < n; ++i) {
    dist.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < real.cols(); ++c) s += (real(i, c) - real(j, c)) * (real(i, c) - real(j, c));
      dist.push_back(s);
    }
    std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k - 1), dist.end());
    radii[i] = dist[k - 1];
  }
  return radii;
}

// Balls are closed: a fake point at exactly the k-NN radius counts as inside.
inline DensityCoverage density_coverage(const Matrix& real, const Matrix& fake, std::size_t k = 3) {
  if (k == 0) throw ArgumentError("density/coverage: k must be positive");
  if (real.cols() != fake.cols()) throw ArgumentError("density/coverage: feature dimensions differ");
  if (fake.rows() == 0) throw ArgumentError("density/coverage: no generated rows");
  const auto radii = knn_radii_squared(real, k);
  const std::size_t n = real.rows();
  std::size_t inside = 0;
  std::vector<std::uint8_t> covered(n, 0);
  for (std::size_t j = 0; j < fake.rows(); ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < real.cols(); ++c) s += (fake(j, c) - real(i, c)) * (fake(j, c) - real(i, c));
      if (s <= radii[i]) {
        ++inside;
        covered[i] = 1;
      }
    }
  }
  DensityCoverage dc;
  dc.density = static_cast<double>(inside) / (static_cast<double>(k) * static_cast<double>(n));
  dc.coverage = static_cast<double>(std::count(covered.begin(), covered.end(), 1)) / static_cast<double>(n);
  dc.combined = dc.density + dc.coverage;
  return dc;
}

inline DensityCoverage m_dc(const Matrix& real_features, const Matrix& fake_features, std::size_t k = 3) {
  return density_coverage(real_features, fake_features, k);
}

}  // namespace mbo

#endif  // MBO_METRICS_HPP
