#ifndef MBO_ORACLE_HPP
#define MBO_ORACLE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "mbo/data.hpp"
#include "mbo/diffusion.hpp"
#include "mbo/errors.hpp"
#include "mbo/net.hpp"
#include "mbo/rng.hpp"

namespace mbo {

struct RegressorTraining {
  std::size_t width = 256;
  std::size_t depth = 4;
  std::size_t epochs = 2000;
  std::size_t batch_size = 128;
  AdamOptions adam{1e-3, 0.9, 0.999, 1e-8};
  double clip_norm = 10.0;
  std::uint64_t seed = 0;
};

struct ValidationOracle {
  NetParams params;
  NetConfig config;
  Normalizer normalizer;  // the oracle consumes and predicts normalised units
  double probe_mse_first = 0.0;
  double probe_mse_final = 0.0;

  std::size_t embed_dim() const { return config.hidden_width; }
};

struct GuidanceRegressor {
  NetParams params;
  NetConfig config;
  double sigma2 = 1.0;
};

namespace detail {

inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

inline Matrix column(std::span<const double> v) { return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end())); }

inline double mse(const Matrix& pred, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (pred(i, 0) - y[i]) * (pred(i, 0) - y[i]);
  return s / static_cast<double>(y.size());
}

// Shared minibatch loop. `make_batch(X_batch, rng)` returns the inputs and
// conditioning for the forward pass (identity for the clean oracle, noised
// inputs plus timesteps for the guidance regressor).
struct BatchInput {
  Matrix x;
  std::vector<int> t;
};

template <class MakeBatch>
void fit_scalar_regressor(NetParams& params, const NetConfig& config, const LabeledSet& data,
                          const RegressorTraining& opt, Rng& rng, MakeBatch&& make_batch,
                          const std::function<void(std::size_t epoch)>& after_epoch) {
  AdamState adam(params.size(), opt.adam);
  const std::size_t n = data.size();
  const std::size_t bs = std::max<std::size_t>(1, std::min(opt.batch_size, n));
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    const auto order = permutation(n, rng);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t stop = std::min(n, start + bs);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const LabeledSet batch = subset(data, idx);
      BatchInput bi = make_batch(batch.X, rng);
      const Matrix target = column(batch.y);
      auto lg = grad_params(params, config, bi.x, NetInput{bi.t}, [&](const Matrix& out) { return mse_head(out, target); },
                            "regressor loss");
      if (lg.loss > 1e6) throw TrainingError("regressor training diverged (batch loss " + std::to_string(lg.loss) + ")");
      clip_global_norm(lg.grad, opt.clip_norm);
      adam_update(params, lg.grad, adam);
    }
    after_epoch(epoch);
  }
}

}  // namespace detail

inline NetConfig oracle_config(std::size_t dim, std::size_t width, std::size_t depth) {
  NetConfig c;
  c.input_dim = dim;
  c.hidden_width = width;
  c.hidden_depth = depth;
  c.output_dim = 1;
  return c;
}

inline std::vector<double> predict(const ValidationOracle& o, const Matrix& X) {
  const Matrix out = forward(o.params, o.config, X);
  return std::vector<double>(out.storage().begin(), out.storage().end());
}

inline Matrix embed(const ValidationOracle& o, const Matrix& X) { return embed(o.params, o.config, X); }

/// Fits f_phi on train + valid (normalised units) with an MSE loss.
///
/// A probe of up to 256 training rows is scored after the first and the last
/// epoch; training fails if the probe error did not go down.
inline ValidationOracle train_validation_oracle(const LabeledSet& data, const Normalizer& normalizer,
                                                const RegressorTraining& opt) {
  if (data.size() == 0) throw DataError("validation oracle: empty training data");
  data.validate();
  ValidationOracle o;
  o.config = oracle_config(data.dim(), opt.width, opt.depth);
  o.params = init_params(o.config, derive_seed(opt.seed, 0));
  o.normalizer = normalizer;
  Rng rng(derive_seed(opt.seed, 1));
  auto probe_idx = detail::permutation(data.size(), rng);
  probe_idx.resize(std::min<std::size_t>(256, data.size()));
  const LabeledSet probe = subset(data, probe_idx);
  auto probe_mse = [&] { return detail::mse(forward(o.params, o.config, probe.X), probe.y); };
  o.probe_mse_first = o.probe_mse_final = probe_mse();
  detail::fit_scalar_regressor(
      o.params, o.config, data, opt, rng, [](const Matrix& x, Rng&) { return detail::BatchInput{x, {}}; },
      [&](std::size_t epoch) {
        if (epoch == 1) o.probe_mse_first = probe_mse();
      });
  if (opt.epochs > 0) {
    o.probe_mse_final = probe_mse();
    if (!std::isfinite(o.probe_mse_final) || o.probe_mse_final > 1e6)
      throw TrainingError("validation oracle diverged");
    if (opt.epochs > 1 && !(o.probe_mse_final < o.probe_mse_first))
      throw TrainingError("validation oracle probe error did not decrease (" + std::to_string(o.probe_mse_first) +
                          " -> " + std::to_string(o.probe_mse_final) + ")");
  }
  return o;
}

inline NetConfig guidance_config(std::size_t dim, std::size_t width, std::size_t depth,
                                 std::size_t time_embed_dim = 32) {
  NetConfig c = oracle_config(dim, width, depth);
  c.time_embed_dim = time_embed_dim;
  return c;
}

// p(y | x_t; t) regressor on the training split: each step noises x0 at a uniform t.
inline GuidanceRegressor train_guidance_regressor(const LabeledSet& train, const NoiseSchedule& schedule,
                                                  const RegressorTraining& opt, double sigma2 = 1.0) {
  if (train.size() == 0) throw DataError("guidance regressor: empty training data");
  if (!(sigma2 > 0.0)) throw ConfigError("guidance regressor: sigma2 must be positive");
  train.validate();
  GuidanceRegressor g;
  g.config = guidance_config(train.dim(), opt.width, opt.depth);
  g.params = init_params(g.config, derive_seed(opt.seed, 0));
  g.sigma2 = sigma2;
  Rng rng(derive_seed(opt.seed, 1));
  const int T = schedule.steps();
  detail::fit_scalar_regressor(
      g.params, g.config, train, opt, rng,
      [&](const Matrix& x0, Rng& r) {
        const NoiseDraws dr = draw_noise(x0.rows(), x0.cols(), T, r);
        return detail::BatchInput{q_sample(x0, dr.t, dr.eps, schedule), dr.t};
      },
      [](std::size_t) {});
  return g;
}

inline std::vector<double> predict(const GuidanceRegressor& g, const Matrix& xt, int t) {
  const std::vector<int> ts(xt.rows(), t);
  const Matrix out = forward(g.params, g.config, xt, {ts});
  return std::vector<double>(out.storage().begin(), out.storage().end());
}

// grad_x log N(y; g(x_t, t), sigma2) = ((y - g) / sigma2) grad_x g.
inline Matrix log_prob_grad(const GuidanceRegressor& g, const Matrix& xt, int t, std::span<const double> y) {
  if (y.size() != xt.rows()) throw ArgumentError("log_prob_grad: label batch mismatch");
  const std::vector<int> ts(xt.rows(), t);
  const NetInput in{ts};
  const Tape tape = forward_tape(g.params, g.config, xt, in);
  Matrix seed(xt.rows(), 1);
  for (std::size_t i = 0; i < xt.rows(); ++i) seed(i, 0) = (y[i] - tape.out(i, 0)) / g.sigma2;
  Matrix grad = backward(g.params, g.config, tape, in, seed).input;
  if (!all_finite(grad.storage())) throw NumericError("log_prob_grad", "non-finite gradient");
  return grad;
}

}  // namespace mbo

#endif  // MBO_ORACLE_HPP
