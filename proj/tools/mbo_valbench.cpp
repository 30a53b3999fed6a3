// mbo-valbench: command-line front end for the validation-metric study.
//
//   make-data     dataset CSVs and split manifest      -> <out>/data/
//   train-oracle  validation oracle (+ guidance nets)  -> <out>/oracles/
//   run           early-stopped training per grid cell -> <out>/runs/<cell>/
//   eval          final evaluation per cell            -> <out>/runs/<cell>/eval.json
//   correlate     correlation report                   -> <out>/reports/correlation.json
//   report        scatter CSV, one SVG per metric      -> <out>/reports/
//   study         all of the above in order
//   reference     annotated configuration reference
//
// Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numeric failure.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mbo/config.hpp"
#include "mbo/harness.hpp"
#include "mbo/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mbo;

namespace {

enum Exit { kOk = 0, kConfig = 2, kMissing = 3, kNumeric = 4 };

struct Options {
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> dotted;  // --<key> value
  std::string out;
  long workers = -1;
  bool force = false;
  bool verbose = false;
  std::string output;  // reference: destination file
};

struct Layout {
  fs::path root;
  fs::path data() const { return root / "data"; }
  fs::path oracles() const { return root / "oracles"; }
  fs::path runs() const { return root / "runs"; }
  fs::path run(std::size_t i) const { return runs() / cell_name(i); }
  fs::path reports() const { return root / "reports"; }
};

// ---------------------------------------------------------------------------
// Files

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw MissingArtifact("missing artifact '" + p.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Leaves the file untouched when the content is unchanged.
bool write_if_changed(const fs::path& p, const std::string& content) {
  std::error_code ec;
  if (fs::exists(p, ec)) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    if (ss.str() == content) return false;
  }
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot write '" + p.string() + "'");
  os << content;
  if (!os) throw ConfigError("failed writing '" + p.string() + "'");
  return true;
}

json read_json(const fs::path& p) {
  const std::string text = read_file(p);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError("'" + p.string() + "': " + e.what(), 0);
  }
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

std::string csv_text(const LabeledSet& s) {
  std::ostringstream os;
  write_csv(os, s);
  return os.str();
}

// Timestamps live only here, never in the primary outputs.
void sidecar(const Layout& L, const std::string& what, double seconds) {
  std::error_code ec;
  fs::create_directories(L.root, ec);
  std::ofstream os(L.root / "timings.log", std::ios::app);
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  os << buf << ' ' << what << ' ' << format_double(seconds) << "s\n";
}

// ---------------------------------------------------------------------------
// Configuration

StudyConfig resolve_config(const Options& o) {
  StudyConfig sc;
  if (!o.config_path.empty()) {
    sc = load_study_config(o.config_path);
  } else {
    std::istringstream empty;
    sc = parse_study_config(empty);
  }
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_study_key(sc, detail::trim(std::string_view(kv).substr(0, eq)), detail::trim(std::string_view(kv).substr(eq + 1)));
  }
  for (const auto& [k, v] : o.dotted) set_study_key(sc, k, v);
  if (!o.out.empty()) sc.out_dir = o.out;
  if (o.workers >= 0) sc.workers = static_cast<std::size_t>(o.workers);
  if (sc.workers == 0) {
    if (const char* env = std::getenv("MBO_VALBENCH_WORKERS"); env && *env)
      sc.workers = detail::parse_number<std::size_t>("MBO_VALBENCH_WORKERS", env);
    if (sc.workers == 0) sc.workers = 1;
  }
  validate(sc.base);
  const auto cells = expand_grid(sc.base, sc.grid);
  if (cells.empty()) throw ConfigError("the grid has no cells");
  check_shared_context(cells);
  return sc;
}

// ---------------------------------------------------------------------------
// Stages

json manifest_json(const ExperimentConfig& c, const StudyContext& ctx) {
  json m;
  m["task"] = c.task;
  m["dim"] = ctx.task.dim;
  m["n"] = ctx.full.size();
  m["data_seed"] = c.data_seed;
  m["input_csv"] = c.input_csv;
  m["quantile"] = c.split_quantile;
  m["gamma"] = format_double(ctx.split.gamma);
  m["train_count"] = ctx.split.train.size();
  m["valid_count"] = ctx.split.valid.size();
  m["train_max_y"] = format_double(ctx.train_max_y());
  m["data_key"] = data_cache_key(c);
  m["files"] = {"dataset.csv", "train.csv", "valid.csv"};
  return m;
}

void cmd_make_data(const StudyConfig& sc, const Layout& L) {
  const ExperimentConfig& c = sc.base;
  const StudyContext ctx = prepare_data(c);
  bool changed = false;
  changed |= write_if_changed(L.data() / "dataset.csv", csv_text(ctx.full));
  changed |= write_if_changed(L.data() / "train.csv", csv_text(ctx.split.train));
  changed |= write_if_changed(L.data() / "valid.csv", csv_text(ctx.split.valid));
  changed |= write_if_changed(L.data() / "manifest.json", dump(manifest_json(c, ctx)));
  std::cout << "make-data: " << ctx.split.train.size() << " train / " << ctx.split.valid.size()
            << " valid rows, gamma = " << format_double(ctx.split.gamma) << (changed ? "" : " (up to date)") << "\n";
}

// Data must exist and match the configuration.
StudyContext load_data(const StudyConfig& sc, const Layout& L) {
  const fs::path manifest = L.data() / "manifest.json";
  if (!fs::exists(manifest)) throw MissingArtifact("missing artifact '" + manifest.string() + "': run make-data first");
  const json m = read_json(manifest);
  if (m.value("data_key", "") != data_cache_key(sc.base))
    throw MissingArtifact("'" + manifest.string() + "' was made from a different configuration: rerun make-data");
  return prepare_data(sc.base);
}

void cmd_train_oracle(const StudyConfig& sc, const Layout& L) {
  StudyContext ctx = load_data(sc, L);
  const bool cached = fs::exists(oracle_checkpoint_path(L.oracles().string(), sc.base));
  prepare_oracle(ctx, sc.base, L.oracles().string());
  for (const auto& c : expand_grid(sc.base, sc.grid))
    if (c.guidance == GuidanceMode::ClassifierBased) prepare_regressor(ctx, c, L.oracles().string());
  std::cout << "train-oracle: probe MSE " << format_double(ctx.oracle.probe_mse_first) << " -> "
            << format_double(ctx.oracle.probe_mse_final) << (cached ? " (cached)" : "") << "\n";
}

// Data plus the networks trained by train-oracle.
StudyContext load_context(const StudyConfig& sc, const Layout& L) {
  StudyContext ctx = load_data(sc, L);
  const std::string dir = L.oracles().string();
  const std::string oracle_path = oracle_checkpoint_path(dir, sc.base);
  if (!fs::exists(oracle_path))
    throw MissingArtifact("missing artifact '" + oracle_path + "': run train-oracle first");
  prepare_oracle(ctx, sc.base, dir);
  for (const auto& c : expand_grid(sc.base, sc.grid)) {
    if (c.guidance != GuidanceMode::ClassifierBased) continue;
    const std::string p = regressor_checkpoint_path(dir, c);
    if (!fs::exists(p)) throw MissingArtifact("missing artifact '" + p + "': run train-oracle first");
    prepare_regressor(ctx, c, dir);
  }
  return ctx;
}

// Checkpoints are referenced relative to the run directory.
json record_json(RunRecord rec) {
  for (auto& [m, b] : rec.best) b.checkpoint = fs::path(b.checkpoint).filename().string();
  return to_json(rec);
}

RunRecord load_record(const fs::path& run_dir) {
  RunRecord rec = run_record_from_json(read_json(run_dir / "record.json"));
  for (auto& [m, b] : rec.best)
    if (!b.checkpoint.empty()) b.checkpoint = (run_dir / b.checkpoint).string();
  return rec;
}

bool record_current(const fs::path& run_dir, const ExperimentConfig& c) {
  const fs::path p = run_dir / "record.json";
  if (!fs::exists(p)) return false;
  try {
    return read_json(p).value("config_hash", "") == config_hash(c);
  } catch (const Error&) {
    return false;
  }
}

void cmd_run(const StudyConfig& sc, const Layout& L, const Options& o) {
  const auto cells = expand_grid(sc.base, sc.grid);
  const StudyContext ctx = load_context(sc, L);
  std::vector<std::string> status(cells.size());
  std::mutex mu;
  parallel_for(cells.size(), sc.workers, [&](std::size_t i) {
    const fs::path dir = L.run(i);
    if (!o.force && record_current(dir, cells[i])) {
      status[i] = "up to date";
      return;
    }
    std::ostringstream log;
    RunOptions ro;
    ro.run_dir = dir.string();
    ro.log = [&](const std::string& line) {
      log << line << '\n';
      if (o.verbose) {
        std::lock_guard lock(mu);
        std::cerr << line << '\n';
      }
    };
    RunRecord rec = run_experiment(cells[i], ctx, ro);
    rec.cell = cell_name(i);
    write_if_changed(dir / "record.json", dump(record_json(rec)));
    write_if_changed(dir / "train.log", log.str());
    status[i] = rec.failed ? "failed: " + rec.failure : "ok";
  });
  std::size_t failed = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    std::cout << "run " << cell_name(i) << ": " << status[i] << "\n";
    failed += status[i].starts_with("failed");
  }
  if (failed == cells.size()) throw StudyError("every run failed");
}

void cmd_eval(const StudyConfig& sc, const Layout& L, const Options& o) {
  const auto cells = expand_grid(sc.base, sc.grid);
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (!record_current(L.run(i), cells[i]))
      throw MissingArtifact("missing artifact '" + (L.run(i) / "record.json").string() +
                            "' for the current configuration: run the 'run' stage first");
  const StudyContext ctx = load_context(sc, L);
  std::vector<std::string> status(cells.size());
  parallel_for(cells.size(), sc.workers, [&](std::size_t i) {
    const fs::path p = L.run(i) / "eval.json";
    if (!o.force && fs::exists(p) && read_json(p).value("config_hash", "") == config_hash(cells[i])) {
      status[i] = "up to date";
      return;
    }
    const RunRecord rec = load_record(L.run(i));
    const auto evals = final_eval_all(rec, ctx);
    json j;
    j["config_hash"] = rec.config_hash;
    j["train_max_y"] = format_double(ctx.train_max_y());
    j["evals"] = to_json(evals);
    write_if_changed(p, dump(j));
    status[i] = rec.failed ? "skipped (run failed)" : "ok";
  });
  for (std::size_t i = 0; i < cells.size(); ++i) std::cout << "eval " << cell_name(i) << ": " << status[i] << "\n";
}

void cmd_correlate(const StudyConfig& sc, const Layout& L) {
  const auto cells = expand_grid(sc.base, sc.grid);
  std::vector<CellResult> results;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const fs::path e = L.run(i) / "eval.json";
    if (!fs::exists(e)) throw MissingArtifact("missing artifact '" + e.string() + "': run eval first");
    if (!record_current(L.run(i), cells[i]))
      throw MissingArtifact("'" + (L.run(i) / "record.json").string() + "' is stale: rerun run and eval");
    CellResult cr;
    cr.record = load_record(L.run(i));
    const json ej = read_json(e);
    if (ej.value("config_hash", "") != cr.record.config_hash)
      throw MissingArtifact("'" + e.string() + "' is stale: rerun eval");
    cr.evals = final_evals_from_json(ej.at("evals"));
    results.push_back(std::move(cr));
  }
  const CorrelationReport rep = correlation_report(results);
  json j = to_json(rep);
  const bool insufficient = cells.size() < 3;
  j["insufficient_data"] = insufficient;
  write_if_changed(L.reports() / "correlation.json", dump(j));
  if (insufficient) std::cout << "correlate: insufficient data (" << cells.size() << " experiments, need 3)\n";
  for (const auto& r : rep.rows)
    std::cout << "correlate: " << to_string(r.metric) << " " << r.status
              << (r.status == "ok" ? " r=" + format_double(r.r) : "") << " pairs=" << r.pairs << "\n";
}

void cmd_report(const Layout& L) {
  const fs::path p = L.reports() / "correlation.json";
  if (!fs::exists(p)) throw MissingArtifact("missing artifact '" + p.string() + "': run correlate first");
  const CorrelationReport rep = correlation_report_from_json(read_json(p));
  write_if_changed(L.reports() / "scatter.csv", scatter_csv(rep));
  for (auto m : kAllMetrics) write_if_changed(L.reports() / (std::string(to_string(m)) + ".svg"), scatter_svg(rep, m));
  std::ostringstream os;
  os << "metric      status        r         pairs\n";
  for (const auto& r : rep.rows) {
    char line[128];
    std::snprintf(line, sizeof line, "%-11s %-13s %-9s %zu\n", std::string(to_string(r.metric)).c_str(), r.status.c_str(),
                  r.status == "ok" ? detail::fmt("%.4f", r.r).c_str() : "-", r.pairs);
    os << line;
  }
  os << "ranking (most negative r first):";
  for (auto m : rep.ranking) os << ' ' << to_string(m);
  os << '\n';
  write_if_changed(L.reports() / "summary.txt", os.str());
  std::cout << os.str();
}

// ---------------------------------------------------------------------------

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("-c,--config", o.config_path, "study configuration file")->check(CLI::ExistingFile);
  sub->add_option("--set", o.sets, "override any key, e.g. --set grid.tau=0.1,0.4 (repeatable)");
  sub->add_option("-o,--out", o.out, "output directory (overrides output.dir)");
  sub->add_option("-j,--workers", o.workers, "parallel grid cells (fallback: $MBO_VALBENCH_WORKERS, then 1)");
  sub->add_flag("-f,--force", o.force, "recompute even when outputs are up to date");
  sub->add_flag("-v,--verbose", o.verbose, "print training progress to stderr");
  const ExperimentConfig defaults;
  for (const auto& s : settings()) {
    const std::string key = s.key;
    sub->add_option_function<std::string>(
           "--" + key, [&o, key](const std::string& v) { o.dotted[key] = v; }, s.help)
        ->default_str(s.get(defaults))
        ->group("Experiment keys");
  }
}

int run_stage(const std::string& name, const Options& o, const std::function<void(const StudyConfig&, const Layout&)>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  const StudyConfig sc = resolve_config(o);
  const Layout L{fs::path(sc.out_dir)};
  fn(sc, L);
  sidecar(L, name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mbo-valbench: validation metrics for offline model-based optimisation with diffusion models"};
  app.require_subcommand(1);
  Options o;

  auto* make_data = app.add_subcommand("make-data", "generate the dataset, split it and write the manifest");
  auto* train_oracle = app.add_subcommand("train-oracle", "train the validation oracle (and guidance regressors)");
  auto* run = app.add_subcommand("run", "train one diffusion model per grid cell with per-metric early stopping");
  auto* eval = app.add_subcommand("eval", "final evaluation of every cell's best checkpoints");
  auto* correlate = app.add_subcommand("correlate", "Pearson correlation between validation metrics and test reward");
  auto* report = app.add_subcommand("report", "scatter CSV and one SVG per metric");
  auto* study = app.add_subcommand("study", "make-data, train-oracle, run, eval, correlate and report");
  auto* reference = app.add_subcommand("reference", "print the annotated configuration reference");
  for (auto* s : {make_data, train_oracle, run, eval, correlate, report, study}) add_common(s, o);
  reference->add_option("-o,--output", o.output, "write to a file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*reference) {
      if (o.output.empty())
        std::cout << config_reference();
      else
        write_if_changed(o.output, config_reference());
      return kOk;
    }
    if (*make_data) return run_stage("make-data", o, cmd_make_data);
    if (*train_oracle) return run_stage("train-oracle", o, cmd_train_oracle);
    if (*run) return run_stage("run", o, [&](const StudyConfig& sc, const Layout& L) { cmd_run(sc, L, o); });
    if (*eval) return run_stage("eval", o, [&](const StudyConfig& sc, const Layout& L) { cmd_eval(sc, L, o); });
    if (*correlate) return run_stage("correlate", o, cmd_correlate);
    if (*report) return run_stage("report", o, [](const StudyConfig&, const Layout& L) { cmd_report(L); });
    if (*study)
      return run_stage("study", o, [&](const StudyConfig& sc, const Layout& L) {
        cmd_make_data(sc, L);
        cmd_train_oracle(sc, L);
        cmd_run(sc, L, o);
        cmd_eval(sc, L, o);
        cmd_correlate(sc, L);
        cmd_report(L);
      });
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const LookupError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const TrainingError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const StudyError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
  return kOk;
}
