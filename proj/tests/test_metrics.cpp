#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "mbo/metrics.hpp"
#include "support.hpp"

using namespace mbo;
using namespace mbo::testing;

namespace {

Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e;
}

// Frechet distance computed with Eigen: trace term from the eigenvalues of sqrt(A) B sqrt(A).
double eigen_fd(const Matrix& a, const Matrix& b) {
  auto moments = [](const Matrix& m) {
    const Eigen::MatrixXd x = to_eigen(m);
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Eigen::MatrixXd c = x.rowwise() - mu;
    return std::pair{mu, Eigen::MatrixXd((c.transpose() * c) / static_cast<double>(x.rows() - 1))};
  };
  const auto [ma, sa] = moments(a);
  const auto [mb, sb] = moments(b);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(sa);
  const Eigen::MatrixXd ra = ea.eigenvectors() * ea.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                             ea.eigenvectors().transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ec(ra * sb * ra);
  const double cross = ec.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * cross;
}

Matrix column_of(std::vector<double> v) {
  const std::size_t n = v.size();
  return Matrix(n, 1, std::move(v));
}

auto sum_scorer = [](const Matrix& X) {
  std::vector<double> s(X.rows(), 0.0);
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (double v : X.row(i)) s[i] += v;
  return s;
};

}  // namespace

TEST(Linalg, MeanCovSmallExample) {
  const Matrix H(3, 2, std::vector<double>{1, 2, 3, 4, 5, 9});
  const GaussianMoments m = mean_cov(H);
  EXPECT_DOUBLE_EQ(m.mu[0], 3.0);
  EXPECT_DOUBLE_EQ(m.mu[1], 5.0);
  // deviations (-2,-3), (0,-1), (2,4): sums 8, 14, 26 over n - 1 = 2
  EXPECT_DOUBLE_EQ(m.sigma(0, 0), 4.0);
  EXPECT_DOUBLE_EQ(m.sigma(0, 1), 7.0);
  EXPECT_DOUBLE_EQ(m.sigma(1, 0), 7.0);
  EXPECT_DOUBLE_EQ(m.sigma(1, 1), 13.0);
  EXPECT_THROW(mean_cov(Matrix(1, 2)), ArgumentError);
}

TEST(Linalg, SymEigTwoByTwo) {
  const SymEigen e = sym_eig(Matrix(2, 2, std::vector<double>{2, 1, 1, 2}));
  EXPECT_NEAR(e.values[0], 1.0, 1e-14);
  EXPECT_NEAR(e.values[1], 3.0, 1e-14);
}

TEST(Linalg, SymEigMatchesEigenAndReconstructs) {
  for (std::size_t p : {3u, 8u, 20u, 64u}) {
    const Matrix a = random_matrix(p + 5, p, p);
    const Matrix s = mean_cov(a).sigma;
    const SymEigen e = sym_eig(s);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ref(to_eigen(s));
    for (std::size_t k = 0; k < p; ++k) EXPECT_NEAR(e.values[k], ref.eigenvalues()(k), 1e-10);
    const Matrix back = spectral_apply(e, [](double l) { return l; });
    double worst = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) worst = std::max(worst, std::abs(back.data()[i] - s.data()[i]));
    EXPECT_LE(worst, 1e-8);
  }
}

TEST(Linalg, PsdSqrtSquaresBack) {
  const Matrix s = mean_cov(random_matrix(30, 6, 3)).sigma;
  const Matrix r = psd_sqrt(s);
  const Matrix sq = matmul(r, r);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(sq.data()[i], s.data()[i], 1e-10);
}

TEST(Frechet, IdenticalSetsGiveZero) {
  const Matrix a = random_matrix(50, 4, 1);
  EXPECT_NEAR(m_fd(a, a), 0.0, 1e-9);
}

TEST(Frechet, OneDimensionalExample) {
  // N(0, 1) vs N(1, 4): 1 + 1 + 4 - 2 * 2 = 2
  GaussianMoments a{{0.0}, Matrix(1, 1, 1.0)}, b{{1.0}, Matrix(1, 1, 4.0)};
  EXPECT_NEAR(frechet_gaussian(a, b), 2.0, 1e-14);
}

TEST(Frechet, MatchesEigenOracleAndIsSymmetric) {
  const Matrix a = random_matrix(200, 6, 11), b = random_matrix(150, 6, 12, 1.7);
  const double ab = m_fd(a, b), ba = m_fd(b, a);
  EXPECT_NEAR(ab, eigen_fd(a, b), 1e-9);
  EXPECT_NEAR(ab, ba, 1e-9);
  EXPECT_GT(ab, 0.0);
}

TEST(Frechet, RotationInvariant) {
  const Matrix a = random_matrix(100, 2, 21), b = random_matrix(100, 2, 22, 0.5);
  const double th = 0.7;
  const Matrix R(2, 2, std::vector<double>{std::cos(th), -std::sin(th), std::sin(th), std::cos(th)});
  EXPECT_NEAR(m_fd(matmul(a, R), matmul(b, R)), m_fd(a, b), 1e-9);
}

TEST(Frechet, RankDeficientInputStaysFinite) {
  const Matrix a = random_matrix(3, 8, 1), b = random_matrix(3, 8, 2);
  const double fd = m_fd(a, b);
  EXPECT_TRUE(std::isfinite(fd));
  EXPECT_GE(fd, 0.0);
}

namespace {
// Brute-force density and coverage straight from the definitions.
DensityCoverage brute_dc(const Matrix& real, const Matrix& fake, std::size_t k) {
  const std::size_t n = real.rows();
  auto d2 = [](std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.size(); ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
    return s;
  };
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> ds;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) ds.push_back(d2(real.row(i), real.row(j)));
    std::sort(ds.begin(), ds.end());
    r[i] = ds[k - 1];
  }
  double inside = 0.0, covered = 0.0;
  for (std::size_t j = 0; j < fake.rows(); ++j)
    for (std::size_t i = 0; i < n; ++i) inside += d2(fake.row(j), real.row(i)) <= r[i];
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < fake.rows(); ++j) any = any || d2(fake.row(j), real.row(i)) <= r[i];
    covered += any;
  }
  return {inside / static_cast<double>(k * n), covered / static_cast<double>(n), 0.0};
}
}  // namespace

TEST(DensityCoverage, HandExample) {
  // real {0, 1}, k = 1: both radii are 1; fake 0.1 lies in both balls
  const DensityCoverage dc = m_dc(column_of({0.0, 1.0}), column_of({0.1}), 1);
  EXPECT_DOUBLE_EQ(dc.density, 1.0);
  EXPECT_DOUBLE_EQ(dc.coverage, 1.0);
  EXPECT_DOUBLE_EQ(dc.combined, 2.0);
}

TEST(DensityCoverage, BoundaryPointCounts) {
  const DensityCoverage dc = m_dc(column_of({0.0, 1.0}), column_of({2.0}), 1);
  EXPECT_DOUBLE_EQ(dc.density, 0.5);
  EXPECT_DOUBLE_EQ(dc.coverage, 0.5);
}

TEST(DensityCoverage, MatchesBruteForce) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 4 + rng.below(29), m = 1 + rng.below(32), d = 1 + rng.below(3);
    const Matrix real = random_matrix(n, d, 1000 + trial), fake = random_matrix(m, d, 2000 + trial, 1.3);
    const DensityCoverage got = m_dc(real, fake, 3), want = brute_dc(real, fake, 3);
    ASSERT_DOUBLE_EQ(got.density, want.density) << "trial " << trial;
    ASSERT_DOUBLE_EQ(got.coverage, want.coverage) << "trial " << trial;
    EXPECT_GE(got.coverage, 0.0);
    EXPECT_LE(got.coverage, 1.0);
  }
}

TEST(DensityCoverage, TooFewRealRows) {
  EXPECT_THROW(m_dc(column_of({0.0, 1.0, 2.0}), column_of({0.5}), 3), ArgumentError);
}

TEST(Reward, TopKMean) {
  const std::vector<double> p{0.9, 0.5, 0.1};
  EXPECT_NEAR(m_reward(p, 2), 0.7, 1e-15);
  EXPECT_THROW(m_reward(p, 4), ArgumentError);
  EXPECT_THROW(m_reward(p, 0), ArgumentError);
  const std::vector<double> ties{1.0, 2.0, 2.0, 0.0};
  EXPECT_EQ(top_k_indices(ties, 2), (std::vector<std::size_t>{1, 2}));
}

TEST(Reward, GroundTruthOfOracleSelection) {
  // oracle prefers rows in the order 2, 0; truth is the row sum
  const Matrix S(3, 1, std::vector<double>{0.25, -1.0, 0.75});
  auto oracle = [](const Matrix& X) {
    std::vector<double> p;
    for (std::size_t i = 0; i < X.rows(); ++i) p.push_back(X(i, 0));
    return p;
  };
  const TestRewardStats st = test_reward_stats(S, oracle, sum_scorer, 2);
  EXPECT_DOUBLE_EQ(st.mean, 0.5);
  EXPECT_DOUBLE_EQ(st.max, 0.75);
  EXPECT_DOUBLE_EQ(st.median, 0.5);
  EXPECT_EQ(st.selected, (std::vector<double>{0.75, 0.25}));
}

TEST(Reward, Percentiles) {
  const std::vector<double> v{4.0, 1.0, 3.0, 2.0};
  EXPECT_EQ(percentile(v, 100.0), 4.0);
  EXPECT_EQ(percentile(v, 0.0), 1.0);
  EXPECT_EQ(percentile(v, 50.0), 2.5);
  EXPECT_THROW(percentile(v, 101.0), ArgumentError);
  EXPECT_THROW(percentile({}, 50.0), ArgumentError);
}

TEST(Agreement, MeanSquaredResidual) {
  const Matrix S(2, 2, std::vector<double>{1.0, 1.0, 0.0, 0.5});
  const std::vector<double> y{1.0, 1.5};
  // f = (2, 0.5): residuals 1 and -1
  EXPECT_DOUBLE_EQ(m_agreement(S, y, sum_scorer), 1.0);
  EXPECT_THROW(m_agreement(S, std::vector<double>{1.0}, sum_scorer), ArgumentError);
}

TEST(Cdsm, InapplicableToClassifierBasedModels) {
  const NetConfig c = noise_predictor_config(2, 8, 2, GuidanceMode::ClassifierBased, 8, 4);
  const DiffusionModel m =
      make_diffusion_model(c, make_linear_schedule(10, 1e-4, 0.02), GuidanceMode::ClassifierBased, 1.0, 0);
  EXPECT_THROW(m_cdsm(m, random_matrix(4, 2, 1), std::vector<double>(4, 0.0), 1, 0), InapplicableMetric);
}

TEST(Cdsm, DeterministicAndAveraged) {
  const NetConfig c = noise_predictor_config(2, 8, 2, GuidanceMode::ClassifierFree, 8, 4);
  const DiffusionModel m =
      make_diffusion_model(c, make_linear_schedule(10, 1e-4, 0.02), GuidanceMode::ClassifierFree, 0.1, 3);
  const Matrix X = random_matrix(16, 2, 4);
  const std::vector<double> y(16, 0.5);
  EXPECT_EQ(m_cdsm(m, X, y, 3, 7), m_cdsm(m, X, y, 3, 7));
  double manual = 0.0;
  for (std::size_t r = 0; r < 2; ++r) {
    Rng rng(derive_seed(7, r));
    manual += denoising_loss_grad(m, X, y, {}, draw_noise(16, 2, 10, rng), false).loss;
  }
  EXPECT_DOUBLE_EQ(m_cdsm(m, X, y, 2, 7), manual / 2.0);
}

TEST(Metrics, NamesRoundTrip) {
  for (MetricId m : kAllMetrics) EXPECT_EQ(metric_from_name(to_string(m)), m);
  EXPECT_THROW(metric_from_name("IS"), ConfigError);
}
