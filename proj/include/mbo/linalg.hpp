#ifndef MBO_LINALG_HPP
#define MBO_LINALG_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mbo/errors.hpp"
#include "mbo/matrix.hpp"

namespace mbo {

struct GaussianMoments {
  std::vector<double> mu;
  Matrix sigma;
};

// Sample mean and unbiased (n - 1) covariance of the rows of H.
inline GaussianMoments mean_cov(const Matrix& H) {
  const std::size_t n = H.rows(), p = H.cols();
  if (n < 2) throw ArgumentError("mean_cov: need at least two rows");
  GaussianMoments m{std::vector<double>(p, 0.0), Matrix(p, p)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) m.mu[j] += H(i, j);
  for (double& v : m.mu) v /= static_cast<double>(n);
  Matrix centred(n, p);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) centred(i, j) = H(i, j) - m.mu[j];
  add_transposed_product(centred, centred, m.sigma.data());
  const double inv = 1.0 / static_cast<double>(n - 1);
  for (std::size_t a = 0; a < p; ++a)
    for (std::size_t b = a; b < p; ++b) {
      const double v = 0.5 * (m.sigma(a, b) + m.sigma(b, a)) * inv;
      m.sigma(a, b) = m.sigma(b, a) = v;
    }
  return m;
}

struct SymEigen {
  std::vector<double> values;  // ascending
  Matrix vectors;              // column k pairs with values[k]
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// The input is symmetrised as (M + M^T) / 2. Sweeps continue until the
/// off-diagonal mass falls below 1e-15 of the Frobenius norm.
inline SymEigen sym_eig(const Matrix& M, int max_sweeps = 100) {
  const std::size_t p = M.rows();
  if (M.cols() != p) throw ArgumentError("sym_eig: matrix must be square");
  Matrix A(p, p);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) A(i, j) = 0.5 * (M(i, j) + M(j, i));
  Matrix V(p, p);
  for (std::size_t i = 0; i < p; ++i) V(i, i) = 1.0;
  if (!all_finite(A.storage())) throw NumericError("sym_eig", "non-finite input");

  const double frob2 = squared_norm(A.storage());
  auto off_diagonal = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = i + 1; j < p; ++j) s += 2.0 * A(i, j) * A(i, j);
    return s;
  };

  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    if (off_diagonal() <= 1e-30 * frob2) {
      converged = true;
      break;
    }
    for (std::size_t a = 0; a + 1 < p; ++a) {
      for (std::size_t b = a + 1; b < p; ++b) {
        const double apq = A(a, b);
        if (apq == 0.0) continue;
        const double theta = (A(b, b) - A(a, a)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < p; ++k) {
          const double akp = A(k, a), akq = A(k, b);
          A(k, a) = c * akp - s * akq;
          A(k, b) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < p; ++k) {
          const double apk = A(a, k), aqk = A(b, k);
          A(a, k) = c * apk - s * aqk;
          A(b, k) = s * apk + c * aqk;
        }
        A(a, b) = A(b, a) = 0.0;
        for (std::size_t k = 0; k < p; ++k) {
          const double vkp = V(k, a), vkq = V(k, b);
          V(k, a) = c * vkp - s * vkq;
          V(k, b) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (!converged && off_diagonal() > 1e-30 * frob2)
    throw NumericError("sym_eig", "Jacobi iteration did not converge in " + std::to_string(max_sweeps) + " sweeps");

  std::vector<std::size_t> order(p);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::ranges::stable_sort(order, [&](std::size_t i, std::size_t j) { return A(i, i) < A(j, j); });
  SymEigen out{std::vector<double>(p), Matrix(p, p)};
  for (std::size_t k = 0; k < p; ++k) {
    out.values[k] = A(order[k], order[k]);
    for (std::size_t i = 0; i < p; ++i) out.vectors(i, k) = V(i, order[k]);
  }
  return out;
}

// V diag(f(lambda)) V^T
template <class F>
Matrix spectral_apply(const SymEigen& e, F&& f) {
  const std::size_t p = e.values.size();
  Matrix scaled = e.vectors;
  for (std::size_t k = 0; k < p; ++k) {
    const double fk = f(e.values[k]);
    for (std::size_t i = 0; i < p; ++i) scaled(i, k) *= fk;
  }
  return matmul(scaled, transpose(e.vectors));
}

// Principal square root of a PSD matrix; negative eigenvalues are clipped to 0.
inline Matrix psd_sqrt(const Matrix& S) {
  return spectral_apply(sym_eig(S), [](double l) { return std::sqrt(std::max(l, 0.0)); });
}

}  // namespace mbo

#endif  // MBO_LINALG_HPP
