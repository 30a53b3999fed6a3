#ifndef MBO_HARNESS_HPP
#define MBO_HARNESS_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mbo/config.hpp"
#include "mbo/data.hpp"
#include "mbo/diffusion.hpp"
#include "mbo/errors.hpp"
#include "mbo/metrics.hpp"
#include "mbo/net.hpp"
#include "mbo/oracle.hpp"

namespace mbo {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Seed streams derived from ExperimentConfig::model_seed.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kTrain = 2;
inline constexpr std::uint64_t kSubsample = 3;
inline constexpr std::uint64_t kFinal = 4;
inline constexpr std::uint64_t kEvalBase = 1'000'000;
}  // namespace stream

// ---------------------------------------------------------------------------
// Shared study state: data split, normaliser, validation oracle, regressors

struct StudyContext {
  TaskSpec task;
  LabeledSet full;
  SplitPair split;
  Normalizer normalizer;
  LabeledSet train_n, valid_n;  // normalised units
  ValidationOracle oracle;
  std::string oracle_key;
  std::map<std::string, GuidanceRegressor> regressors;  // keyed by regressor_cache_key

  double train_max_y() const { return *std::ranges::max_element(split.train.y); }

  const GuidanceRegressor& regressor_for(const ExperimentConfig& c) const {
    const auto it = regressors.find(regressor_cache_key(c));
    if (it == regressors.end()) throw MissingArtifact("no guidance regressor prepared for this configuration");
    return it->second;
  }
};

inline LabeledSet load_or_make_dataset(const ExperimentConfig& c, const TaskSpec& task) {
  if (c.input_csv.empty()) return make_dataset(task, c.n, c.data_seed);
  LabeledSet d = load_csv(c.input_csv);
  if (d.dim() != task.dim)
    throw DataError("input CSV has " + std::to_string(d.dim()) + " features but task '" + task.name + "' has " +
                    std::to_string(task.dim));
  return d;
}

// Everything except the trained networks.
inline StudyContext prepare_data(const ExperimentConfig& c) {
  validate(c);
  StudyContext ctx;
  ctx.task = make_task(c.task);
  ctx.full = load_or_make_dataset(c, ctx.task);
  ctx.split = gamma_split(ctx.full, c.split_quantile);
  ctx.normalizer = fit_normalizer(ctx.split.train);
  ctx.train_n = ctx.normalizer.transform(ctx.split.train);
  ctx.valid_n = ctx.normalizer.transform(ctx.split.valid);
  ctx.oracle_key = oracle_cache_key(c);
  return ctx;
}

inline std::string oracle_checkpoint_path(const std::string& dir, const ExperimentConfig& c) {
  return (std::filesystem::path(dir) / ("validation-" + oracle_cache_key(c) + ".ckpt")).string();
}

inline std::string regressor_checkpoint_path(const std::string& dir, const ExperimentConfig& c) {
  return (std::filesystem::path(dir) / ("guidance-" + regressor_cache_key(c) + ".ckpt")).string();
}

inline void save_oracle(const std::string& path, const ValidationOracle& o) {
  Checkpoint ck{"oracle", o.config, o.params, {}};
  ck.extra["probe_mse_first"] = format_double(o.probe_mse_first);
  ck.extra["probe_mse_final"] = format_double(o.probe_mse_final);
  save_checkpoint(path, ck);
}

inline ValidationOracle load_oracle(const std::string& path, const Normalizer& normalizer) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.role != "oracle") throw ParseError("checkpoint '" + path + "' is not a validation oracle", 0);
  ValidationOracle o{std::move(ck.params), ck.config, normalizer, 0.0, 0.0};
  if (ck.extra.count("probe_mse_first")) o.probe_mse_first = std::stod(ck.extra["probe_mse_first"]);
  if (ck.extra.count("probe_mse_final")) o.probe_mse_final = std::stod(ck.extra["probe_mse_final"]);
  return o;
}

/// Trains the validation oracle on train + valid, or loads it from
/// `cache_dir` when a checkpoint with the same content key exists there.
inline void prepare_oracle(StudyContext& ctx, const ExperimentConfig& c, const std::string& cache_dir = "") {
  const std::string path = cache_dir.empty() ? "" : oracle_checkpoint_path(cache_dir, c);
  if (!path.empty() && std::filesystem::exists(path)) {
    ctx.oracle = load_oracle(path, ctx.normalizer);
    return;
  }
  ctx.oracle = train_validation_oracle(concat(ctx.train_n, ctx.valid_n), ctx.normalizer, c.oracle);
  if (!path.empty()) {
    std::filesystem::create_directories(cache_dir);
    save_oracle(path, ctx.oracle);
  }
}

inline void prepare_regressor(StudyContext& ctx, const ExperimentConfig& c, const std::string& cache_dir = "") {
  const std::string key = regressor_cache_key(c);
  if (ctx.regressors.count(key)) return;
  const std::string path = cache_dir.empty() ? "" : regressor_checkpoint_path(cache_dir, c);
  if (!path.empty() && std::filesystem::exists(path)) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.role != "guidance") throw ParseError("checkpoint '" + path + "' is not a guidance regressor", 0);
    ctx.regressors[key] = GuidanceRegressor{std::move(ck.params), ck.config, c.regressor_sigma2};
    return;
  }
  const auto schedule = make_linear_schedule(c.T, c.beta_min, c.beta_max);
  GuidanceRegressor g = train_guidance_regressor(ctx.train_n, schedule, c.regressor, c.regressor_sigma2);
  if (!path.empty()) {
    std::filesystem::create_directories(cache_dir);
    save_checkpoint(path, Checkpoint{"guidance", g.config, g.params, {}});
  }
  ctx.regressors[key] = std::move(g);
}

inline StudyContext make_context(const ExperimentConfig& c, const std::string& cache_dir = "") {
  StudyContext ctx = prepare_data(c);
  prepare_oracle(ctx, c, cache_dir);
  if (c.guidance == GuidanceMode::ClassifierBased) prepare_regressor(ctx, c, cache_dir);
  return ctx;
}

// Ground truth of normalised designs, in task units. `clamped` counts rows
// that fell outside the task box.
inline std::vector<double> ground_truth_scores(const StudyContext& ctx, const Matrix& Xn, std::size_t* clamped = nullptr) {
  const Matrix X = ctx.normalizer.inverse_x(Xn);
  std::vector<double> out(X.rows());
  std::size_t n_clamped = 0;
  for (std::size_t i = 0; i < X.rows(); ++i) {
    const GroundTruth g = evaluate(ctx.task, X.row(i));
    out[i] = g.reward;
    n_clamped += g.clamped ? 1 : 0;
  }
  if (clamped) *clamped = n_clamped;
  return out;
}

inline Matrix metric_features(const StudyContext& ctx, FeatureSpace space, const Matrix& Xn) {
  return space == FeatureSpace::Embed ? embed(ctx.oracle, Xn) : Xn;
}

// ---------------------------------------------------------------------------
// Models and guided noise predictions

inline DiffusionModel initial_model(const ExperimentConfig& c) {
  const auto schedule = make_linear_schedule(c.T, c.beta_min, c.beta_max);
  const std::size_t dim = make_task(c.task).dim;
  const NetConfig nc = noise_predictor_config(dim, c.width, c.depth, c.guidance, c.time_embed_dim, c.label_embed_dim);
  return make_diffusion_model(nc, schedule, c.guidance, c.tau, derive_seed(c.model_seed, stream::kInit));
}

// The factory borrows `m` and `reg`; both must outlive the returned callables.
inline EpsFnFactory make_eps_factory(const DiffusionModel& m, const GuidanceRegressor* reg, double w) {
  return [&m, reg, w](std::span<const double> y) -> EpsFn {
    std::vector<double> ys(y.begin(), y.end());
    if (m.mode == GuidanceMode::ClassifierFree)
      return [&m, ys = std::move(ys), w](const Matrix& x, int t) { return guided_eps_cfg(m, x, t, ys, w); };
    if (!reg) throw ArgumentError("classifier-based sampling needs a guidance regressor");
    return [&m, reg, ys = std::move(ys), w](const Matrix& x, int t) { return guided_eps_cg(m, *reg, x, t, ys, w); };
  };
}

inline std::vector<MetricId> applicable_metrics(GuidanceMode mode) {
  std::vector<MetricId> out;
  for (auto m : kAllMetrics)
    if (!(m == MetricId::CDSM && mode == GuidanceMode::ClassifierBased)) out.push_back(m);
  return out;
}

// ---------------------------------------------------------------------------
// Algorithm 1: training with per-metric early stopping

struct MetricBest {
  double value = kInf;
  std::size_t epoch = 0;  // 0: initial weights
  std::string checkpoint;
};

struct EvalPoint {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean minibatch loss of this epoch
  std::map<MetricId, double> values;
};

struct RunRecord {
  std::string cell;
  std::string config_hash;
  ExperimentConfig config;
  bool failed = false;
  std::string failure;
  std::map<MetricId, MetricBest> best;
  std::vector<MetricId> absent;
  std::vector<EvalPoint> history;
  std::map<MetricId, NetParams> best_params;  // in memory only; files are referenced by MetricBest::checkpoint
};

// Validation rows used by every evaluation of one run.
struct EvalSet {
  Matrix X;
  std::vector<double> y;
  Matrix real_features;
};

inline EvalSet make_eval_set(const StudyContext& ctx, const ExperimentConfig& c) {
  const LabeledSet& v = ctx.valid_n;
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (v.size() > c.valid_cap) {
    Rng rng(derive_seed(c.model_seed, stream::kSubsample));
    idx = detail::permutation(v.size(), rng);
    idx.resize(c.valid_cap);
    std::ranges::sort(idx);
  }
  const LabeledSet sub = subset(v, idx);
  return {sub.X, sub.y, metric_features(ctx, c.space, sub.X)};
}

/// One evaluation: a candidate per validation row conditioned on its y,
/// then every applicable metric (smaller is better).
inline std::map<MetricId, double> evaluate_metrics(const DiffusionModel& model, const StudyContext& ctx,
                                                   const ExperimentConfig& c, const EvalSet& ev, std::uint64_t seed) {
  const GuidanceRegressor* reg = model.mode == GuidanceMode::ClassifierBased ? &ctx.regressor_for(c) : nullptr;
  const EpsFnFactory factory = make_eps_factory(model, reg, c.w);
  const Matrix samples = sample_conditioned(model, factory, ev.y, derive_seed(seed, 1), c.noise);
  auto oracle = [&](const Matrix& X) { return predict(ctx.oracle, X); };
  const std::vector<double> preds = oracle(samples);
  const Matrix fake = metric_features(ctx, c.space, samples);
  const std::size_t k_reward = std::max<std::size_t>(1, std::min(c.K, samples.rows() / 2));

  std::map<MetricId, double> out;
  if (model.mode == GuidanceMode::ClassifierFree)
    out[MetricId::CDSM] = m_cdsm(model, ctx.valid_n.X, ctx.valid_n.y, c.cdsm_draws, derive_seed(seed, 0));
  out[MetricId::NEG_REWARD] = -m_reward(preds, k_reward);
  out[MetricId::AGREEMENT] = m_agreement(samples, ev.y, oracle);
  out[MetricId::FD] = m_fd(ev.real_features, fake);
  out[MetricId::NEG_DC] = -m_dc(ev.real_features, fake, c.dc_k).combined;
  return out;
}

struct RunOptions {
  std::string run_dir;  // non-empty: write one checkpoint per metric there
  std::function<void(const std::string&)> log;
};

inline std::string metric_checkpoint_path(const std::string& run_dir, MetricId m) {
  return (std::filesystem::path(run_dir) / ("best-" + std::string(to_string(m)) + ".ckpt")).string();
}

/// Trains one diffusion model, evaluating every n_eval epochs. Each metric
/// keeps the weights with its lowest value; ties keep the earlier weights.
/// Divergence produces a record with failed = true.
inline RunRecord run_experiment(const ExperimentConfig& c, const StudyContext& ctx, const RunOptions& opt = {}) {
  validate(c);
  RunRecord rec;
  rec.config = c;
  rec.config_hash = config_hash(c);
  DiffusionModel model = initial_model(c);
  for (auto m : kAllMetrics) {
    if (m == MetricId::CDSM && c.guidance == GuidanceMode::ClassifierBased) {
      rec.absent.push_back(m);
      continue;
    }
    rec.best[m] = MetricBest{};
    rec.best_params[m] = model.params;
  }
  const EvalSet ev = make_eval_set(ctx, c);
  Rng rng(derive_seed(c.model_seed, stream::kTrain));
  AdamState adam(model.params.size(), c.adam);
  const std::size_t n = ctx.train_n.size();
  const std::size_t bs = std::min(c.batch_size, n);

  try {
    for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
      const auto order = detail::permutation(n, rng);
      double loss_sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < n; start += bs) {
        const std::span<const std::size_t> idx(order.data() + start, std::min(n, start + bs) - start);
        const LabeledSet b = subset(ctx.train_n, idx);
        LossGradient lg = training_loss_grad(model, b.X, b.y, rng);
        if (lg.loss > 1e6) throw TrainingError("diverged at epoch " + std::to_string(epoch));
        clip_global_norm(lg.grad, c.clip_norm);
        adam_update(model.params, lg.grad, adam);
        loss_sum += lg.loss;
        ++batches;
      }
      if (epoch % c.n_eval != 0) continue;
      EvalPoint pt{epoch, loss_sum / static_cast<double>(batches),
                   evaluate_metrics(model, ctx, c, ev, derive_seed(c.model_seed, stream::kEvalBase + epoch))};
      for (const auto& [m, v] : pt.values) {
        auto& b = rec.best.at(m);
        if (std::isfinite(v) && v < b.value) {
          b.value = v;
          b.epoch = epoch;
          rec.best_params[m] = model.params;
        }
      }
      if (opt.log) {
        std::string line = rec.cell + " epoch " + std::to_string(epoch) + " loss " + format_double(pt.train_loss);
        for (const auto& [m, v] : pt.values) line += " " + std::string(to_string(m)) + "=" + format_double(v);
        opt.log(line);
      }
      rec.history.push_back(std::move(pt));
    }
  } catch (const NumericError& e) {
    rec.failed = true;
    rec.failure = e.what();
  } catch (const TrainingError& e) {
    rec.failed = true;
    rec.failure = e.what();
  }

  if (!opt.run_dir.empty()) {
    std::filesystem::create_directories(opt.run_dir);
    for (auto& [m, b] : rec.best) {
      b.checkpoint = metric_checkpoint_path(opt.run_dir, m);
      Checkpoint ck{"diffusion", model.config, rec.best_params.at(m), {}};
      ck.extra["metric"] = std::string(to_string(m));
      ck.extra["epoch"] = std::to_string(b.epoch);
      ck.extra["config_hash"] = rec.config_hash;
      save_checkpoint(b.checkpoint, ck);
    }
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Algorithm 2: final evaluation

struct FinalEval {
  MetricId metric = MetricId::AGREEMENT;
  std::size_t epoch = 0;
  double mean = 0.0;
  double median = 0.0;
  double max = 0.0;
  std::size_t clamped = 0;  // selected candidates that fell outside the task box
};

inline NetParams best_weights(const RunRecord& rec, MetricId metric) {
  if (const auto it = rec.best_params.find(metric); it != rec.best_params.end()) return it->second;
  const auto b = rec.best.find(metric);
  if (b == rec.best.end()) throw LookupError("run has no checkpoint for metric " + std::string(to_string(metric)));
  if (b->second.checkpoint.empty() || !std::filesystem::exists(b->second.checkpoint))
    throw LookupError("checkpoint for metric " + std::string(to_string(metric)) + " is missing: '" +
                      b->second.checkpoint + "'");
  return load_checkpoint(b->second.checkpoint).params;
}

inline DiffusionModel model_for(const RunRecord& rec, MetricId metric) {
  DiffusionModel m = initial_model(rec.config);
  NetParams p = best_weights(rec, metric);
  if (p.size() != m.params.size()) throw LookupError("checkpoint does not match the run configuration");
  m.params = std::move(p);
  return m;
}

struct FinalSample {
  ConditionedSamples candidates;
  TestRewardStats stats;
};

// Samples N candidates from the prior-swapped model, ranks by `ranker`, scores
// the top K with `scorer`.
template <Scorer Ranker, Scorer Truth>
FinalSample final_eval_with(const RunRecord& rec, MetricId metric, const StudyContext& ctx, std::size_t N,
                            std::size_t K, std::uint64_t seed, const Ranker& ranker, const Truth& scorer) {
  if (K == 0 || N < K) throw ArgumentError("final_eval: need 1 <= K <= N");
  const DiffusionModel model = model_for(rec, metric);
  const GuidanceRegressor* reg =
      model.mode == GuidanceMode::ClassifierBased ? &ctx.regressor_for(rec.config) : nullptr;
  const EpsFnFactory factory = make_eps_factory(model, reg, rec.config.w);
  FinalSample out;
  out.candidates = sample_extrapolated(model, factory, ctx.valid_n.y, N, seed, rec.config.noise);
  out.stats = test_reward_stats(out.candidates.X, ranker, scorer, K);
  return out;
}

inline std::uint64_t final_eval_seed(const ExperimentConfig& c) { return derive_seed(c.model_seed, stream::kFinal); }

inline FinalEval final_eval(const RunRecord& rec, MetricId metric, const StudyContext& ctx, std::size_t N,
                            std::size_t K, std::uint64_t seed) {
  std::size_t clamped = 0;
  auto ranker = [&](const Matrix& X) { return predict(ctx.oracle, X); };
  auto truth = [&](const Matrix& X) { return ground_truth_scores(ctx, X, &clamped); };
  const FinalSample fs = final_eval_with(rec, metric, ctx, N, K, seed, ranker, truth);
  const auto b = rec.best.find(metric);
  return {metric, b == rec.best.end() ? 0 : b->second.epoch, fs.stats.mean, fs.stats.median, fs.stats.max, clamped};
}

// Every applicable metric with the config's N, K and seed. Metrics whose best
// checkpoints coincide share one evaluation.
inline std::map<MetricId, FinalEval> final_eval_all(const RunRecord& rec, const StudyContext& ctx) {
  std::map<MetricId, FinalEval> out;
  if (rec.failed) return out;
  std::map<std::size_t, FinalEval> by_epoch;
  for (const auto& [m, b] : rec.best) {
    auto it = by_epoch.find(b.epoch);
    if (it == by_epoch.end())
      it = by_epoch.emplace(b.epoch, final_eval(rec, m, ctx, rec.config.n_candidates, rec.config.K,
                                                final_eval_seed(rec.config)))
               .first;
    FinalEval fe = it->second;
    fe.metric = m;
    out[m] = fe;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid runner

// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception
// thrown by any task is rethrown after all threads join.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

inline std::string cell_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "cell-%03zu", i);
  return buf;
}

struct CellResult {
  RunRecord record;
  std::map<MetricId, FinalEval> evals;
};

struct GridResult {
  std::vector<CellResult> cells;
  Matrix U;  // metric x cell best validation values; NaN when absent or failed
  Matrix V;  // metric x cell test rewards; NaN when absent or failed
};

inline std::size_t metric_row(MetricId m) {
  return static_cast<std::size_t>(std::ranges::find(kAllMetrics, m) - kAllMetrics.begin());
}

inline void assemble_uv(const std::vector<CellResult>& cells, Matrix& U, Matrix& V) {
  U = Matrix(kAllMetrics.size(), cells.size(), std::vector<double>(kAllMetrics.size() * cells.size(), kNaN));
  V = U;
  for (std::size_t j = 0; j < cells.size(); ++j) {
    const auto& cr = cells[j];
    if (cr.record.failed) continue;
    for (const auto& [m, fe] : cr.evals) {
      const double u = cr.record.best.at(m).value;
      if (!std::isfinite(u)) continue;
      U(metric_row(m), j) = u;
      V(metric_row(m), j) = fe.mean;
    }
  }
}

// Every cell must share the data split and the validation oracle.
inline void check_shared_context(const std::vector<ExperimentConfig>& cells) {
  for (const auto& c : cells) {
    validate(c);
    if (oracle_cache_key(c) != oracle_cache_key(cells.front()))
      throw ConfigError("grid axes may not change task, data or oracle keys");
  }
}

struct GridOptions {
  std::size_t workers = 1;
  std::string out_dir;   // non-empty: oracles/ and runs/<cell>/ are written below it
  std::function<void(const std::string&)> log;  // called under the collector lock
};

inline GridResult grid_run(const ExperimentConfig& base, const std::vector<GridAxis>& grid, const GridOptions& opt = {}) {
  const std::vector<ExperimentConfig> cells = expand_grid(base, grid);
  if (cells.empty()) throw StudyError("empty grid");
  check_shared_context(cells);
  const std::string oracle_dir = opt.out_dir.empty() ? "" : (std::filesystem::path(opt.out_dir) / "oracles").string();
  StudyContext ctx = prepare_data(cells.front());
  prepare_oracle(ctx, cells.front(), oracle_dir);
  for (const auto& c : cells)
    if (c.guidance == GuidanceMode::ClassifierBased) prepare_regressor(ctx, c, oracle_dir);

  GridResult out;
  out.cells.resize(cells.size());
  std::mutex collector;
  auto log = [&](const std::string& s) {
    if (!opt.log) return;
    std::lock_guard lock(collector);
    opt.log(s);
  };
  parallel_for(cells.size(), opt.workers, [&](std::size_t i) {
    RunOptions ro;
    if (!opt.out_dir.empty()) ro.run_dir = (std::filesystem::path(opt.out_dir) / "runs" / cell_name(i)).string();
    ro.log = log;
    CellResult cr;
    try {
      cr.record = run_experiment(cells[i], ctx, ro);
      cr.record.cell = cell_name(i);
      cr.evals = final_eval_all(cr.record, ctx);
    } catch (const Error& e) {
      cr.record.cell = cell_name(i);
      cr.record.config = cells[i];
      cr.record.config_hash = config_hash(cells[i]);
      cr.record.failed = true;
      cr.record.failure = e.what();
      cr.evals.clear();
    }
    cr.record.best_params.clear();
    std::lock_guard lock(collector);
    out.cells[i] = std::move(cr);
  });
  if (std::ranges::all_of(out.cells, [](const CellResult& c) { return c.record.failed; }))
    throw StudyError("every grid cell failed; first failure: " + out.cells.front().record.failure);
  assemble_uv(out.cells, out.U, out.V);
  return out;
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

// NaN -> null, +-inf -> "inf" / "-inf"
inline nlohmann::json num_json(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double json_num(const nlohmann::json& j) {
  if (j.is_null()) return kNaN;
  if (j.is_string()) {
    if (j == "inf") return kInf;
    if (j == "-inf") return -kInf;
    throw ParseError("expected a number, got '" + j.get<std::string>() + "'", 0);
  }
  return j.get<double>();
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& s : settings()) j[s.key] = s.get(c);
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  for (const auto& [k, v] : j.items()) apply_setting(c, k, v.get<std::string>());
  return c;
}

inline nlohmann::json to_json(const RunRecord& r) {
  using nlohmann::json;
  json j;
  j["cell"] = r.cell;
  j["config_hash"] = r.config_hash;
  j["config"] = config_to_json(r.config);
  j["status"] = r.failed ? "failed" : "ok";
  j["failure"] = r.failure;
  json best = json::object();
  for (const auto& [m, b] : r.best)
    best[std::string(to_string(m))] = {{"value", detail::num_json(b.value)}, {"epoch", b.epoch}, {"checkpoint", b.checkpoint}};
  j["best"] = best;
  json absent = json::array();
  for (auto m : r.absent) absent.push_back(std::string(to_string(m)));
  j["absent"] = absent;
  json hist = json::array();
  for (const auto& p : r.history) {
    json vals = json::object();
    for (const auto& [m, v] : p.values) vals[std::string(to_string(m))] = detail::num_json(v);
    hist.push_back({{"epoch", p.epoch}, {"train_loss", detail::num_json(p.train_loss)}, {"values", vals}});
  }
  j["history"] = hist;
  return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  try {
    RunRecord r;
    r.cell = j.at("cell").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.config = config_from_json(j.at("config"));
    r.failed = j.at("status") == "failed";
    r.failure = j.at("failure").get<std::string>();
    for (const auto& [k, v] : j.at("best").items())
      r.best[metric_from_name(k)] = {detail::json_num(v.at("value")), v.at("epoch").get<std::size_t>(),
                                     v.at("checkpoint").get<std::string>()};
    for (const auto& a : j.at("absent")) r.absent.push_back(metric_from_name(a.get<std::string>()));
    for (const auto& p : j.at("history")) {
      EvalPoint e{p.at("epoch").get<std::size_t>(), detail::json_num(p.at("train_loss")), {}};
      for (const auto& [k, v] : p.at("values").items()) e.values[metric_from_name(k)] = detail::json_num(v);
      r.history.push_back(std::move(e));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("run record: ") + e.what(), 0);
  }
}

inline nlohmann::json to_json(const std::map<MetricId, FinalEval>& evals) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [m, e] : evals)
    j[std::string(to_string(m))] = {{"epoch", e.epoch},
                                    {"mean", detail::num_json(e.mean)},
                                    {"median", detail::num_json(e.median)},
                                    {"max", detail::num_json(e.max)},
                                    {"clamped", e.clamped}};
  return j;
}

inline std::map<MetricId, FinalEval> final_evals_from_json(const nlohmann::json& j) {
  try {
    std::map<MetricId, FinalEval> out;
    for (const auto& [k, v] : j.items()) {
      const MetricId m = metric_from_name(k);
      out[m] = {m, v.at("epoch").get<std::size_t>(), detail::json_num(v.at("mean")), detail::json_num(v.at("median")),
                detail::json_num(v.at("max")), v.at("clamped").get<std::size_t>()};
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("final evaluation: ") + e.what(), 0);
  }
}

}  // namespace mbo

#endif  // MBO_HARNESS_HPP
