#ifndef MBO_TESTS_SUPPORT_HPP
#define MBO_TESTS_SUPPORT_HPP

// Test-side oracles: central finite differences and a scalar reference
// implementation of the network family, written without the library's
// matrix kernels.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mbo/net.hpp"
#include "mbo/rng.hpp"

namespace mbo::testing {

inline double rel_err(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / scale;
}

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

// Compares `analytic` with central differences of `f` at `n` random coordinates of `v`.
inline FdReport check_gradient(std::vector<double> v, const std::vector<double>& analytic,
                               const std::function<double(const std::vector<double>&)>& f, std::size_t n,
                               std::uint64_t seed, double h = 1e-4) {
  FdReport rep;
  Rng rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = rng.below(v.size());
    const double keep = v[i];
    v[i] = keep + h;
    const double up = f(v);
    v[i] = keep - h;
    const double down = f(v);
    v[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    rep.max_rel_err = std::max(rep.max_rel_err, rel_err(analytic[i], fd));
    ++rep.checked;
  }
  return rep;
}

inline double ref_silu(double z) { return z / (1.0 + std::exp(-z)); }

// Straight-line evaluation of one row through the network family.
inline std::vector<double> reference_forward_row(const NetParams& p, const NetConfig& c, const std::vector<double>& x,
                                                 int t, double y, bool drop) {
  const ParamLayout L(c);
  const auto& P = p.values;
  const std::size_t d = c.input_dim, le = c.label_embed_dim, w = c.hidden_width;
  std::vector<double> z(x);
  for (std::size_t k = 0; k < le; ++k) z.push_back(drop ? P[L.null_embed + k] : y * P[L.label_scale + k] + P[L.label_shift + k]);
  std::vector<double> temb(c.time_embed_dim);
  for (std::size_t j = 0; j < c.time_embed_dim / 2; ++j) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(c.time_embed_dim / 2));
    temb[2 * j] = std::sin(t * freq);
    temb[2 * j + 1] = std::cos(t * freq);
  }
  std::vector<double> h(w);
  for (std::size_t o = 0; o < w; ++o) {
    double s = P[L.in_b + o];
    for (std::size_t i = 0; i < d + le; ++i) s += z[i] * P[L.in_w + i * w + o];
    h[o] = s;
  }
  for (const auto& blk : L.blocks) {
    std::vector<double> a(w), next(h);
    for (std::size_t o = 0; o < w; ++o) {
      double s = P[blk.ba + o];
      for (std::size_t i = 0; i < w; ++i) s += h[i] * P[blk.wa + i * w + o];
      for (std::size_t i = 0; i < c.time_embed_dim; ++i) s += temb[i] * P[blk.pt + i * w + o];
      a[o] = ref_silu(s);
    }
    for (std::size_t o = 0; o < w; ++o) {
      double s = P[blk.bb + o];
      for (std::size_t i = 0; i < w; ++i) s += a[i] * P[blk.wb + i * w + o];
      next[o] += ref_silu(s);
    }
    h = next;
  }
  std::vector<double> out(c.output_dim);
  for (std::size_t o = 0; o < c.output_dim; ++o) {
    double s = P[L.out_b + o];
    for (std::size_t i = 0; i < w; ++i) s += h[i] * P[L.out_w + i * c.output_dim + o];
    out[o] = s;
  }
  return out;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Matrix m(r, c);
  for (double& v : m.storage()) v = scale * rng.normal();
  return m;
}

// Random parameters including non-zero biases, so every path is exercised.
inline NetParams random_params(const NetConfig& c, std::uint64_t seed, double scale = 0.3) {
  NetParams p = zero_params(c);
  Rng rng(seed);
  for (double& v : p.values) v = scale * rng.normal();
  return p;
}

}  // namespace mbo::testing

#endif  // MBO_TESTS_SUPPORT_HPP
