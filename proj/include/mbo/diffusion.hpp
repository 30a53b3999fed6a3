#ifndef MBO_DIFFUSION_HPP
#define MBO_DIFFUSION_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mbo/errors.hpp"
#include "mbo/matrix.hpp"
#include "mbo/net.hpp"
#include "mbo/rng.hpp"

namespace mbo {

// Timesteps are 0-based: t = 0 is the least noisy step, t = T - 1 the most.
struct NoiseSchedule {
  std::vector<double> beta, alpha, alpha_bar;

  int steps() const { return static_cast<int>(beta.size()); }
  bool operator==(const NoiseSchedule&) const = default;
};

inline NoiseSchedule make_linear_schedule(int T, double beta_min, double beta_max) {
  if (T < 2) throw ConfigError("noise schedule needs T >= 2");
  if (!(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0))
    throw ConfigError("noise schedule needs 0 < beta_min < beta_max < 1");
  NoiseSchedule s;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    s.beta[t] = beta_min + (beta_max - beta_min) * static_cast<double>(t) / static_cast<double>(T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, row by row.
inline Matrix q_sample(const Matrix& x0, std::span<const int> t, const Matrix& eps, const NoiseSchedule& s) {
  if (eps.rows() != x0.rows() || eps.cols() != x0.cols() || t.size() != x0.rows())
    throw ArgumentError("q_sample: batch shapes differ");
  Matrix xt(x0.rows(), x0.cols());
  for (std::size_t i = 0; i < x0.rows(); ++i) {
    if (t[i] < 0 || t[i] >= s.steps()) throw ArgumentError("q_sample: timestep " + std::to_string(t[i]) + " out of range");
    const double a = std::sqrt(s.alpha_bar[t[i]]), b = std::sqrt(1.0 - s.alpha_bar[t[i]]);
    for (std::size_t j = 0; j < x0.cols(); ++j) xt(i, j) = a * x0(i, j) + b * eps(i, j);
  }
  return xt;
}

enum class GuidanceMode { ClassifierFree, ClassifierBased };

inline std::string_view to_string(GuidanceMode m) {
  return m == GuidanceMode::ClassifierFree ? "classifier_free" : "classifier_based";
}

inline GuidanceMode guidance_from_name(std::string_view s) {
  if (s == "classifier_free" || s == "cfg") return GuidanceMode::ClassifierFree;
  if (s == "classifier_based" || s == "cg") return GuidanceMode::ClassifierBased;
  throw ConfigError("unknown guidance mode '" + std::string(s) + "'");
}

// Noise predictor eps_theta(x_t, t[, y]). Classifier-based models never see y.
inline NetConfig noise_predictor_config(std::size_t dim, std::size_t width, std::size_t depth, GuidanceMode mode,
                                        std::size_t time_embed_dim = 32, std::size_t label_embed_dim = 16) {
  NetConfig c;
  c.input_dim = dim;
  c.hidden_width = width;
  c.hidden_depth = depth;
  c.time_embed_dim = time_embed_dim;
  c.label_embed_dim = mode == GuidanceMode::ClassifierFree ? label_embed_dim : 0;
  c.has_null_token = mode == GuidanceMode::ClassifierFree;
  c.output_dim = dim;
  return c;
}

struct DiffusionModel {
  NetParams params;
  NetConfig config;
  NoiseSchedule schedule;
  GuidanceMode mode = GuidanceMode::ClassifierFree;
  double tau = 0.1;

  std::size_t dim() const { return config.input_dim; }

  void validate() const {
    config.validate();
    if (params.size() != param_count(config)) throw ConfigError("diffusion model: parameters do not match config");
    if (config.output_dim != config.input_dim) throw ConfigError("diffusion model: noise predictor must output x");
    if (!config.uses_time()) throw ConfigError("diffusion model: noise predictor needs a time embedding");
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("diffusion model: tau must lie in [0, 1]");
    if (mode == GuidanceMode::ClassifierBased && (tau != 1.0 || config.uses_label()))
      throw ConfigError("classifier-based guidance needs an unconditional backbone (tau = 1)");
    if (mode == GuidanceMode::ClassifierFree && !config.has_null_token)
      throw ConfigError("classifier-free guidance needs a null token");
  }
};

inline DiffusionModel make_diffusion_model(const NetConfig& config, NoiseSchedule schedule, GuidanceMode mode,
                                           double tau, std::uint64_t seed) {
  DiffusionModel m{init_params(config, seed), config, std::move(schedule), mode,
                   mode == GuidanceMode::ClassifierBased ? 1.0 : tau};
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Denoising score matching

// Per-example randomness of one loss evaluation. Drawn row by row in the order
// t, eps (d values), lambda. The stream is independent of tau.
struct NoiseDraws {
  std::vector<int> t;
  Matrix eps;
  std::vector<double> lambda;
};

inline NoiseDraws draw_noise(std::size_t n, std::size_t d, int T, Rng& rng) {
  NoiseDraws dr{std::vector<int>(n), Matrix(n, d), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    dr.t[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(T)));
    for (std::size_t j = 0; j < d; ++j) dr.eps(i, j) = rng.normal();
    dr.lambda[i] = rng.uniform();
  }
  return dr;
}

// Drop flags 1{lambda < tau}.
inline std::vector<std::uint8_t> drop_mask(std::span<const double> lambda, double tau) {
  std::vector<std::uint8_t> m(lambda.size());
  for (std::size_t i = 0; i < lambda.size(); ++i) m[i] = lambda[i] < tau ? 1 : 0;
  return m;
}

struct DenoisingTerms {
  Matrix x_t;
  std::vector<std::uint8_t> drop;
};

// Mean over the batch of ||eps - eps_theta(x_t, t[, y])||^2 and its parameter gradient.
//   labels empty        -> unconditional (null token for classifier-free nets)
//   labels + drop mask  -> each flagged row uses the null token
inline LossGradient denoising_loss_grad(const DiffusionModel& m, const Matrix& x0, std::span<const double> labels,
                                        std::span<const std::uint8_t> drop, const NoiseDraws& draws,
                                        bool with_grad = true) {
  const std::size_t n = x0.rows();
  if (n == 0) throw ArgumentError("denoising loss: empty batch");
  const Matrix xt = q_sample(x0, draws.t, draws.eps, m.schedule);
  std::vector<std::uint8_t> all_null;
  NetInput in{draws.t, {}, {}};
  if (m.config.uses_label()) {
    if (labels.empty()) {
      all_null.assign(n, 1);
      in.drop = all_null;
    } else {
      if (labels.size() != n) throw ArgumentError("denoising loss: label batch mismatch");
      in.y = labels;
      in.drop = drop;
    }
  } else if (!labels.empty()) {
    throw ArgumentError("denoising loss: labels given to an unconditional model");
  }
  auto head = [&](const Matrix& out) {
    HeadLoss hl{0.0, Matrix(n, m.dim())};
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double r = out.data()[i] - draws.eps.data()[i];
      hl.loss += r * r;
      hl.d_output.data()[i] = 2.0 * r * scale;
    }
    hl.loss *= scale;
    return hl;
  };
  if (!with_grad) {
    const HeadLoss hl = head(forward(m.params, m.config, xt, in));
    if (!std::isfinite(hl.loss)) throw NumericError("denoising loss", "non-finite loss");
    return {hl.loss, {}};
  }
  return grad_params(m.params, m.config, xt, in, head, "denoising loss");
}

// Unconditional objective: every example goes through the null token (or the label-free net).
inline double dsm_loss(const DiffusionModel& m, const Matrix& x0, Rng& rng) {
  const NoiseDraws dr = draw_noise(x0.rows(), m.dim(), m.schedule.steps(), rng);
  return denoising_loss_grad(m, x0, {}, {}, dr, false).loss;
}

// Conditional objective with label dropout at rate m.tau.
inline double cdsm_loss(const DiffusionModel& m, const Matrix& x0, std::span<const double> y, Rng& rng) {
  if (m.mode != GuidanceMode::ClassifierFree) throw ArgumentError("cdsm_loss needs a classifier-free model");
  const NoiseDraws dr = draw_noise(x0.rows(), m.dim(), m.schedule.steps(), rng);
  const auto drop = drop_mask(dr.lambda, m.tau);
  return denoising_loss_grad(m, x0, y, drop, dr, false).loss;
}

// One optimiser step's loss and gradient: C-DSM for classifier-free models,
// plain DSM for classifier-based ones.
inline LossGradient training_loss_grad(const DiffusionModel& m, const Matrix& x0, std::span<const double> y,
                                       Rng& rng) {
  const NoiseDraws dr = draw_noise(x0.rows(), m.dim(), m.schedule.steps(), rng);
  if (m.mode == GuidanceMode::ClassifierBased) return denoising_loss_grad(m, x0, {}, {}, dr);
  const auto drop = drop_mask(dr.lambda, m.tau);
  return denoising_loss_grad(m, x0, y, drop, dr);
}

// ---------------------------------------------------------------------------
// Noise predictions and guidance

inline Matrix eps_unconditional(const DiffusionModel& m, const Matrix& xt, int t) {
  const std::vector<int> ts(xt.rows(), t);
  if (!m.config.uses_label()) return forward(m.params, m.config, xt, {ts});
  const std::vector<std::uint8_t> drop(xt.rows(), 1);
  return forward(m.params, m.config, xt, {ts, {}, drop});
}

inline Matrix eps_conditional(const DiffusionModel& m, const Matrix& xt, int t, std::span<const double> y) {
  if (!m.config.uses_label()) throw ArgumentError("eps_conditional: model has no label input");
  const std::vector<int> ts(xt.rows(), t);
  return forward(m.params, m.config, xt, {ts, y});
}

// (w + 1) eps(x_t, t, y) - w eps(x_t, t). Both branches run as one stacked batch.
inline Matrix guided_eps_cfg(const DiffusionModel& m, const Matrix& xt, int t, std::span<const double> y, double w) {
  if (m.mode != GuidanceMode::ClassifierFree) throw ArgumentError("guided_eps_cfg needs a classifier-free model");
  const std::size_t n = xt.rows();
  if (y.size() != n) throw ArgumentError("guided_eps_cfg: label batch mismatch");
  const Matrix both = vstack(xt, xt);
  const std::vector<int> ts(2 * n, t);
  std::vector<double> ys(2 * n, 0.0);
  std::vector<std::uint8_t> drop(2 * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    ys[i] = y[i];
    drop[n + i] = 1;
  }
  const Matrix out = forward(m.params, m.config, both, {ts, ys, drop});
  Matrix eps(n, m.dim());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m.dim(); ++j) eps(i, j) = (w + 1.0) * out(i, j) - w * out(n + i, j);
  return eps;
}

/// eps(x_t, t) - sqrt(1 - abar_t) * w * grad_x log p(y | x_t; t).
///
/// `Regressor` is any type for which `log_prob_grad(reg, x_t, t, y)` is
/// visible by argument-dependent lookup and returns an n x d matrix.
template <class Regressor>
Matrix guided_eps_cg(const DiffusionModel& m, const Regressor& reg, const Matrix& xt, int t,
                     std::span<const double> y, double w) {
  if (m.mode != GuidanceMode::ClassifierBased) throw ArgumentError("guided_eps_cg needs a classifier-based model");
  Matrix eps = eps_unconditional(m, xt, t);
  if (w == 0.0) return eps;
  const Matrix g = log_prob_grad(reg, xt, t, y);
  const double scale = std::sqrt(1.0 - m.schedule.alpha_bar[t]) * w;
  for (std::size_t i = 0; i < eps.size(); ++i) eps.data()[i] -= scale * g.data()[i];
  return eps;
}

// ---------------------------------------------------------------------------
// Ancestral Langevin sampling

// sqrt_beta: sigma_t = sqrt(beta_t); beta: sigma_t = beta_t; zero: no injected noise.
enum class NoiseScale { SqrtBeta, Beta, Zero };

inline NoiseScale noise_scale_from_name(std::string_view s) {
  if (s == "sqrt_beta") return NoiseScale::SqrtBeta;
  if (s == "beta") return NoiseScale::Beta;
  if (s == "zero") return NoiseScale::Zero;
  throw ConfigError("unknown sampler noise scale '" + std::string(s) + "'");
}

inline std::string_view to_string(NoiseScale s) {
  switch (s) {
    case NoiseScale::SqrtBeta: return "sqrt_beta";
    case NoiseScale::Beta: return "beta";
    case NoiseScale::Zero: return "zero";
  }
  return "sqrt_beta";
}

using EpsFn = std::function<Matrix(const Matrix& x_t, int t)>;

// x_T ~ N(0, I); for t = T-1 .. 0:
//   x <- (x - (1 - alpha_t) / sqrt(1 - abar_t) * eps(x, t)) / sqrt(alpha_t) + sigma_t z,
// with z suppressed at t = 0.
inline Matrix sgld_sample(const EpsFn& eps_fn, const NoiseSchedule& s, std::size_t n, std::size_t d,
                          std::uint64_t seed, NoiseScale noise = NoiseScale::SqrtBeta) {
  Rng rng(seed);
  Matrix x(n, d);
  for (double& v : x.storage()) v = rng.normal();
  for (int t = s.steps() - 1; t >= 0; --t) {
    const Matrix eps = eps_fn(x, t);
    if (eps.rows() != n || eps.cols() != d) throw ArgumentError("sgld_sample: eps_fn returned the wrong shape");
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[t]);
    const double coef = (1.0 - s.alpha[t]) / std::sqrt(1.0 - s.alpha_bar[t]);
    double sigma = 0.0;
    if (t > 0 && noise == NoiseScale::SqrtBeta) sigma = std::sqrt(s.beta[t]);
    if (t > 0 && noise == NoiseScale::Beta) sigma = s.beta[t];
    for (std::size_t i = 0; i < x.size(); ++i) {
      double v = inv_sqrt_alpha * (x.data()[i] - coef * eps.data()[i]);
      if (t > 0) v += sigma * rng.normal();
      x.data()[i] = v;
    }
    if (!all_finite(x.storage())) throw NumericError("sampler step t=" + std::to_string(t), "non-finite iterate");
  }
  return x;
}

struct ConditionedSamples {
  Matrix X;
  std::vector<double> y;
};

using EpsFnFactory = std::function<EpsFn(std::span<const double> y)>;

// One sample x_i ~ p_theta(x | y_i) per requested label.
inline Matrix sample_conditioned(const DiffusionModel& m, const EpsFnFactory& factory, std::span<const double> y,
                                 std::uint64_t seed, NoiseScale noise = NoiseScale::SqrtBeta) {
  return sgld_sample(factory(y), m.schedule, y.size(), m.dim(), seed, noise);
}

// Prior swap: y ~ uniform over valid_y (with replacement), x ~ p_theta(x | y).
inline ConditionedSamples sample_extrapolated(const DiffusionModel& m, const EpsFnFactory& factory,
                                              std::span<const double> valid_y, std::size_t n, std::uint64_t seed,
                                              NoiseScale noise = NoiseScale::SqrtBeta) {
  if (valid_y.empty()) throw ArgumentError("sample_extrapolated: empty validation rewards");
  Rng rng(derive_seed(seed, 0));
  ConditionedSamples out{Matrix(), std::vector<double>(n)};
  for (auto& v : out.y) v = valid_y[rng.below(valid_y.size())];
  out.X = sample_conditioned(m, factory, out.y, derive_seed(seed, 1), noise);
  return out;
}

}  // namespace mbo

#endif  // MBO_DIFFUSION_HPP
