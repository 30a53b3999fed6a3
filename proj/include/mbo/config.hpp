#ifndef MBO_CONFIG_HPP
#define MBO_CONFIG_HPP

#include <charconv>
#include <concepts>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mbo/data.hpp"
#include "mbo/diffusion.hpp"
#include "mbo/errors.hpp"
#include "mbo/net.hpp"
#include "mbo/oracle.hpp"

namespace mbo {

enum class FeatureSpace { Embed, Raw };

/// Everything that determines one experiment (one grid cell).
struct ExperimentConfig {
  // data
  std::string task;
  std::size_t n = 2000;
  std::uint64_t data_seed = 0;
  double split_quantile = 0.4;
  std::string input_csv;

  // noise predictor
  std::size_t width = 128;
  std::size_t depth = 4;
  std::size_t time_embed_dim = 32;
  std::size_t label_embed_dim = 16;

  // diffusion training
  GuidanceMode guidance = GuidanceMode::ClassifierFree;
  double tau = 0.1;
  double w = 1.0;
  int T = 200;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  std::size_t epochs = 5000;
  std::size_t n_eval = 250;
  std::size_t batch_size = 128;
  AdamOptions adam{2e-5, 0.0, 0.9, 1e-8};
  double clip_norm = 10.0;
  std::uint64_t model_seed = 0;
  NoiseScale noise = NoiseScale::SqrtBeta;

  // validation oracle and guidance regressor
  RegressorTraining oracle{256, 4, 2000, 128, {1e-3, 0.9, 0.999, 1e-8}, 10.0, 0};
  RegressorTraining regressor{128, 4, 500, 128, {1e-3, 0.9, 0.999, 1e-8}, 10.0, 0};
  double regressor_sigma2 = 1.0;

  // metrics and final evaluation
  FeatureSpace space = FeatureSpace::Embed;
  std::size_t K = 128;
  std::size_t n_candidates = 512;
  std::size_t valid_cap = 512;
  std::size_t cdsm_draws = 4;
  std::size_t dc_k = 3;
};

// ---------------------------------------------------------------------------
// Key registry

struct SettingDoc {
  std::string key;
  std::string help;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

namespace detail {

template <class T>
T parse_number(std::string_view key, std::string_view s) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size())
    throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(s) + "'");
  return v;
}

inline std::string show(double v) { return format_double(v); }
inline std::string show(std::integral auto v) { return std::to_string(v); }

template <class T>
SettingDoc number(std::string key, std::string help, T ExperimentConfig::*field) {
  return {key, std::move(help),
          [key, field](ExperimentConfig& c, std::string_view s) { c.*field = parse_number<T>(key, s); },
          [field](const ExperimentConfig& c) { return show(c.*field); }};
}

template <class T>
SettingDoc nested(std::string key, std::string help, std::function<T&(ExperimentConfig&)> ref) {
  return {key, std::move(help), [key, ref](ExperimentConfig& c, std::string_view s) { ref(c) = parse_number<T>(key, s); },
          [ref](const ExperimentConfig& c) { return show(ref(const_cast<ExperimentConfig&>(c))); }};
}

}  // namespace detail

inline const std::vector<SettingDoc>& settings() {
  using detail::nested;
  using detail::number;
  using C = ExperimentConfig;
  static const std::vector<SettingDoc> table = [] {
    std::vector<SettingDoc> t;
    t.push_back({"task.name", "built-in task <oracle><dim>: sphere2, sphere8, mixture2, quadratic16 (required)",
                 [](C& c, std::string_view s) {
                   if (!s.empty()) make_task(s);
                   c.task = std::string(s);
                 },
                 [](const C& c) { return c.task; }});
    t.push_back(number("data.n", "number of designs drawn uniformly in the task box", &C::n));
    t.push_back(number("data.seed", "dataset seed; also keys the cached validation oracle", &C::data_seed));
    t.push_back(number("data.quantile", "gamma as a reward quantile: rows at or below it train", &C::split_quantile));
    t.push_back({"data.input_csv", "optional CSV (x0..x{d-1},y) used instead of generating designs",
                 [](C& c, std::string_view s) { c.input_csv = std::string(s); },
                 [](const C& c) { return c.input_csv; }});
    t.push_back(number("net.width", "noise predictor hidden width", &C::width));
    t.push_back(number("net.depth", "noise predictor hidden layers (even; residual pairs)", &C::depth));
    t.push_back(number("net.time_embed_dim", "sinusoidal time embedding size (even)", &C::time_embed_dim));
    t.push_back(number("net.label_embed_dim", "label embedding size", &C::label_embed_dim));
    t.push_back({"diffusion.guidance", "classifier_free | classifier_based",
                 [](C& c, std::string_view s) { c.guidance = guidance_from_name(s); },
                 [](const C& c) { return std::string(to_string(c.guidance)); }});
    t.push_back(number("diffusion.tau", "label dropout probability (forced to 1 for classifier_based)", &C::tau));
    t.push_back(number("diffusion.w", "guidance weight used when sampling", &C::w));
    t.push_back(number("diffusion.T", "diffusion timesteps", &C::T));
    t.push_back(number("diffusion.beta_min", "first beta of the linear schedule", &C::beta_min));
    t.push_back(number("diffusion.beta_max", "last beta of the linear schedule", &C::beta_max));
    t.push_back(number("diffusion.epochs", "training epochs (passes over the training split)", &C::epochs));
    t.push_back(number("diffusion.n_eval", "evaluate validation metrics every n_eval epochs", &C::n_eval));
    t.push_back(number("diffusion.batch_size", "minibatch size", &C::batch_size));
    t.push_back(nested<double>("diffusion.lr", "Adam learning rate", [](C& c) -> double& { return c.adam.lr; }));
    t.push_back(nested<double>("diffusion.beta1", "Adam beta1", [](C& c) -> double& { return c.adam.beta1; }));
    t.push_back(nested<double>("diffusion.beta2", "Adam beta2", [](C& c) -> double& { return c.adam.beta2; }));
    t.push_back(nested<double>("diffusion.adam_eps", "Adam epsilon", [](C& c) -> double& { return c.adam.eps; }));
    t.push_back(number("diffusion.clip_norm", "global gradient-norm clip", &C::clip_norm));
    t.push_back(number("diffusion.seed", "model seed (initialisation, minibatches, sampling)", &C::model_seed));
    t.push_back({"sampler.noise_scale", "sqrt_beta | beta | zero: noise injected per sampler step",
                 [](C& c, std::string_view s) { c.noise = noise_scale_from_name(s); },
                 [](const C& c) { return std::string(to_string(c.noise)); }});
    auto reg = [&t](const std::string& sec, RegressorTraining C::*field, const std::string& what) {
      t.push_back(nested<std::size_t>(sec + ".width", what + " hidden width",
                                      [field](C& c) -> std::size_t& { return (c.*field).width; }));
      t.push_back(nested<std::size_t>(sec + ".depth", what + " hidden layers (even)",
                                      [field](C& c) -> std::size_t& { return (c.*field).depth; }));
      t.push_back(nested<std::size_t>(sec + ".epochs", what + " training epochs",
                                      [field](C& c) -> std::size_t& { return (c.*field).epochs; }));
      t.push_back(nested<std::size_t>(sec + ".batch_size", what + " minibatch size",
                                      [field](C& c) -> std::size_t& { return (c.*field).batch_size; }));
      t.push_back(nested<double>(sec + ".lr", what + " Adam learning rate",
                                 [field](C& c) -> double& { return (c.*field).adam.lr; }));
      t.push_back(nested<std::uint64_t>(sec + ".seed", what + " seed",
                                        [field](C& c) -> std::uint64_t& { return (c.*field).seed; }));
    };
    reg("oracle", &C::oracle, "validation oracle");
    reg("guidance", &C::regressor, "guidance regressor");
    t.push_back(number("guidance.sigma2", "variance of the regressor's Gaussian head", &C::regressor_sigma2));
    t.push_back({"metrics.space", "embed | raw: feature space for FD and density/coverage",
                 [](C& c, std::string_view s) {
                   if (s == "embed")
                     c.space = FeatureSpace::Embed;
                   else if (s == "raw")
                     c.space = FeatureSpace::Raw;
                   else
                     throw ConfigError("config key 'metrics.space': expected embed or raw");
                 },
                 [](const C& c) { return std::string(c.space == FeatureSpace::Embed ? "embed" : "raw"); }});
    t.push_back(number("metrics.K", "top-K candidates kept by the validation oracle", &C::K));
    t.push_back(number("metrics.n_candidates", "candidates sampled at final evaluation", &C::n_candidates));
    t.push_back(number("metrics.valid_cap", "validation rows sampled per metric evaluation", &C::valid_cap));
    t.push_back(number("metrics.cdsm_draws", "(t, eps) draws per validation row for CDSM", &C::cdsm_draws));
    t.push_back(number("metrics.dc_k", "k for density/coverage neighbourhoods", &C::dc_k));
    return t;
  }();
  return table;
}

inline const SettingDoc* find_setting(std::string_view key) {
  for (const auto& s : settings())
    if (s.key == key) return &s;
  return nullptr;
}

inline void apply_setting(ExperimentConfig& c, std::string_view key, std::string_view value) {
  const SettingDoc* s = find_setting(key);
  if (!s) throw ConfigError("unknown config key '" + std::string(key) + "'");
  s->set(c, value);
}

inline void validate(const ExperimentConfig& c) {
  if (c.task.empty()) throw ConfigError("missing required config key 'task.name'");
  if (c.n < 2) throw ConfigError("config key 'data.n': need at least 2 designs");
  if (!(c.split_quantile > 0.0 && c.split_quantile < 1.0)) throw ConfigError("config key 'data.quantile' must lie in (0, 1)");
  if (c.n_eval == 0) throw ConfigError("config key 'diffusion.n_eval' must be positive");
  if (c.batch_size == 0) throw ConfigError("config key 'diffusion.batch_size' must be positive");
  if (c.K == 0) throw ConfigError("config key 'metrics.K' must be positive");
  if (c.n_candidates < c.K) throw ConfigError("config key 'metrics.n_candidates' must be >= metrics.K");
  if (c.valid_cap < 2) throw ConfigError("config key 'metrics.valid_cap' must be >= 2");
  if (!(c.tau >= 0.0 && c.tau <= 1.0)) throw ConfigError("config key 'diffusion.tau' must lie in [0, 1]");
  if (c.T < 2) throw ConfigError("config key 'diffusion.T' must be >= 2");
}

// Canonical "key=value" listing; the content hash of an experiment is taken over it.
inline std::string canonical_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& s : settings()) out += s.key + "=" + s.get(c) + "\n";
  return out;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a64(canonical_text(c))); }

// Keys that determine the dataset and its split.
inline std::string data_cache_key(const ExperimentConfig& c) {
  std::string text;
  for (const auto& s : settings())
    if (s.key.starts_with("task.") || s.key.starts_with("data.")) text += s.key + "=" + s.get(c) + "\n";
  return hex64(fnv1a64(text));
}

// Keys that determine the dataset split and therefore the validation oracle.
inline std::string oracle_cache_key(const ExperimentConfig& c) {
  std::string text;
  for (const auto& s : settings())
    if (s.key.starts_with("task.") || s.key.starts_with("data.") || s.key.starts_with("oracle."))
      text += s.key + "=" + s.get(c) + "\n";
  return hex64(fnv1a64(text));
}

inline std::string regressor_cache_key(const ExperimentConfig& c) {
  std::string text;
  for (const auto& s : settings())
    if (s.key.starts_with("task.") || s.key.starts_with("data.") || s.key.starts_with("guidance.") ||
        s.key == "diffusion.T" || s.key == "diffusion.beta_min" || s.key == "diffusion.beta_max")
      text += s.key + "=" + s.get(c) + "\n";
  return hex64(fnv1a64(text));
}

// ---------------------------------------------------------------------------
// Study configuration file
//
//   # comment
//   [section]
//   key = value
//
// Keys become "section.key". [grid] entries hold comma-separated values for
// any experiment key (grid.tau -> diffusion.tau, grid.width -> net.width,
// grid.seed -> diffusion.seed, or a full dotted key).

struct GridAxis {
  std::string key;
  std::vector<std::string> values;
};

struct StudyConfig {
  ExperimentConfig base;
  std::vector<GridAxis> grid;
  std::size_t workers = 0;  // 0: MBO_VALBENCH_WORKERS or 1
  std::string out_dir = "out";
};

inline std::string resolve_grid_key(std::string_view k) {
  if (k == "tau") return "diffusion.tau";
  if (k == "w") return "diffusion.w";
  if (k == "width") return "net.width";
  if (k == "seed") return "diffusion.seed";
  if (k == "guidance") return "diffusion.guidance";
  if (k == "epochs") return "diffusion.epochs";
  return std::string(k);
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  for (auto cell : detail::split_commas(s)) {
    cell = detail::trim(cell);
    if (!cell.empty()) out.emplace_back(cell);
  }
  return out;
}

inline const std::vector<std::pair<std::string, std::string>>& study_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"study.workers", "parallel grid cells (0: $MBO_VALBENCH_WORKERS, else 1)"},
      {"output.dir", "output root holding data/, oracles/, runs/, reports/"},
  };
  return keys;
}

/// Applies one dotted key. Grid keys take comma-separated lists.
inline void set_study_key(StudyConfig& sc, std::string_view key, std::string_view value) {
  if (key == "study.workers") {
    sc.workers = detail::parse_number<std::size_t>(key, value);
  } else if (key == "output.dir") {
    sc.out_dir = std::string(value);
  } else if (key.starts_with("grid.")) {
    const std::string target = resolve_grid_key(key.substr(5));
    if (!find_setting(target)) throw ConfigError("unknown grid axis '" + std::string(key) + "'");
    auto values = split_list(value);
    ExperimentConfig probe = sc.base;
    for (const auto& v : values) apply_setting(probe, target, v);
    std::erase_if(sc.grid, [&](const GridAxis& a) { return a.key == target; });
    if (!values.empty()) sc.grid.push_back({target, std::move(values)});
  } else {
    apply_setting(sc.base, key, value);
  }
}

inline StudyConfig parse_study_config(std::istream& is) {
  StudyConfig sc;
  sc.grid.push_back({"diffusion.seed", {"0", "1", "2"}});
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    auto body = detail::trim(line);
    if (const auto hash = body.find_first_of("#;"); hash != std::string_view::npos) body = detail::trim(body.substr(0, hash));
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": malformed section header");
      section = std::string(detail::trim(body.substr(1, body.size() - 2)));
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const auto k = detail::trim(body.substr(0, eq));
    const auto v = detail::trim(body.substr(eq + 1));
    const std::string key = section.empty() ? std::string(k) : section + "." + std::string(k);
    try {
      set_study_key(sc, key, v);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return sc;
}

inline StudyConfig load_study_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  return parse_study_config(is);
}

// Grid cells in row-major order over the axes (first axis outermost).
inline std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base, const std::vector<GridAxis>& axes) {
  std::vector<ExperimentConfig> cells{base};
  for (const auto& axis : axes) {
    std::vector<ExperimentConfig> next;
    for (const auto& c : cells)
      for (const auto& v : axis.values) {
        ExperimentConfig e = c;
        apply_setting(e, axis.key, v);
        next.push_back(std::move(e));
      }
    cells = std::move(next);
  }
  return cells;
}

// Annotated reference of every key with its default value.
inline std::string config_reference() {
  ExperimentConfig defaults;
  std::ostringstream os;
  os << "# mbo-valbench study configuration reference (generated)\n";
  std::string section;
  for (const auto& s : settings()) {
    const auto dot = s.key.find('.');
    const std::string sec = s.key.substr(0, dot);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << "# " << s.help << '\n' << s.key.substr(dot + 1) << " = " << s.get(defaults) << '\n';
  }
  os << "\n[grid]\n# comma-separated values per axis: tau, w, width, seed, guidance, epochs or any dotted key\n"
        "seed = 0,1,2\n";
  os << "\n[study]\n# " << study_keys()[0].second << "\nworkers = 0\n";
  os << "\n[output]\n# " << study_keys()[1].second << "\ndir = out\n";
  return os.str();
}

}  // namespace mbo

#endif  // MBO_CONFIG_HPP
