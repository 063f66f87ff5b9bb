#pragma once

// Batch commands behind the crokit executable. Configuration is an INI-style
// file (keys at top level or under [section]) overlaid with command-line
// overrides; every artifact carries the resolved configuration and seed.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "json.hpp"

#include "crokit/baselines.hpp"
#include "crokit/data.hpp"
#include "crokit/error.hpp"
#include "crokit/evaluation.hpp"
#include "crokit/training.hpp"

namespace crokit::cli {

// ---------------------------------------------------------------------------
// Logging

enum class LogLevel { error = 0, info = 1, debug = 2 };

inline LogLevel log_level_from(const char* s) {
  if (s == nullptr) return LogLevel::info;
  const std::string v(s);
  if (v == "error") return LogLevel::error;
  if (v == "info" || v.empty()) return LogLevel::info;
  if (v == "debug") return LogLevel::debug;
  throw InputError("CROKIT_LOG must be error, info or debug (got '" + v + "')");
}

class Logger {
 public:
  explicit Logger(LogLevel level = LogLevel::info, std::ostream* os = &std::cerr) : level_(level), os_(os) {}
  void error(const std::string& m) const { write(LogLevel::error, "error", m); }
  void info(const std::string& m) const { write(LogLevel::info, "info", m); }
  void debug(const std::string& m) const { write(LogLevel::debug, "debug", m); }
  LogLevel level() const { return level_; }

 private:
  void write(LogLevel l, const char* tag, const std::string& m) const {
    if (os_ != nullptr && static_cast<int>(l) <= static_cast<int>(level_)) *os_ << "crokit " << tag << ": " << m << '\n';
  }
  LogLevel level_;
  std::ostream* os_;
};

// ---------------------------------------------------------------------------
// Configuration

/// Keys a config file or override may set. Anything else is rejected so that
/// typos do not silently fall back to defaults.
inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "seed", "alpha", "epsilon", "jobs", "method", "out",
      "data.n", "data.env", "data.dataset", "data.kind", "data.perturb_sd", "data.assets", "data.indices",
      "data.periods", "data.covariates", "data.dim",
      "train.epochs", "train.tro_steps", "train.batch", "train.gamma", "train.step", "train.optimizer",
      "train.beta_start", "train.beta_end", "train.hidden", "train.psi_dependent_radius", "train.regressor_hidden",
      "train.regressor_ridge", "train.full_data_regressor", "train.warm_start", "train.convergence_tol", "train.convergence_window",
      "baseline.epochs", "baseline.step", "baseline.hidden", "baseline.ridge",
      "eval.checkpoint", "eval.oracle", "eval.conditional_points", "eval.conditional_draws", "eval.set_points",
      "eval.set_draws", "eval.confidence",
      "backtest.prices", "backtest.train", "backtest.validation", "backtest.test", "backtest.stride",
      "backtest.assets", "backtest.volume_window"};
  return keys;
}

class RunConfig {
 public:
  RunConfig() = default;

  static RunConfig load(const std::string& path) {
    RunConfig c;
    std::ifstream is(path);
    if (!is) throw InputError("cannot open config '" + path + "'");
    try {
      boost::property_tree::read_ini(is, c.tree_);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw InputError("config '" + path + "': " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    for (const auto& [k, v] : c.tree_) {
      if (v.empty()) {
        c.check_key(k);
      } else {
        for (const auto& [k2, v2] : v) c.check_key(k + "." + k2);
      }
    }
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    check_key(key);
    tree_.put(key, value);
  }

  bool has(const std::string& key) const { return tree_.get_optional<std::string>(key).has_value(); }

  template <class T>
  T get(const std::string& key, T fallback) const {
    const auto raw = tree_.get_optional<std::string>(key);
    if (!raw) return fallback;
    if constexpr (std::is_same_v<T, std::string>) {
      return *raw;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (*raw == "true" || *raw == "1" || *raw == "yes") return true;
      if (*raw == "false" || *raw == "0" || *raw == "no") return false;
      throw InputError("config key '" + key + "': expected a boolean, got '" + *raw + "'");
    } else {
      std::istringstream is(*raw);
      T v{};
      is >> v;
      if (!is || !(is >> std::ws).eof()) {
        throw InputError("config key '" + key + "': cannot parse '" + *raw + "'");
      }
      return v;
    }
  }

  std::vector<Index> get_list(const std::string& key, std::vector<Index> fallback) const {
    const auto raw = tree_.get_optional<std::string>(key);
    if (!raw) return fallback;
    std::vector<Index> out;
    for (const auto& cell : detail::split_csv(*raw)) {
      if (cell.empty()) continue;
      try {
        std::size_t used = 0;
        const long v = std::stol(cell, &used);
        if (used != cell.size() || v < 1) throw std::invalid_argument(cell);
        out.push_back(static_cast<Index>(v));
      } catch (const std::exception&) {
        throw InputError("config key '" + key + "': expected comma-separated positive integers, got '" + *raw + "'");
      }
    }
    return out;
  }

  std::uint64_t seed() const { return get<std::uint64_t>("seed", 0); }
  std::string out() const { return get<std::string>("out", "."); }
  std::string method() const { return get<std::string>("method", "dts"); }
  double alpha() const { return get<double>("alpha", 0.9); }
  double epsilon() const { return get<double>("epsilon", 0.1); }
  int jobs() const { return get<int>("jobs", 1); }

  /// The raw settings as nested JSON (values kept as strings).
  nlohmann::json raw_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : tree_) {
      if (v.empty()) {
        j[k] = v.data();
      } else {
        for (const auto& [k2, v2] : v) j[k][k2] = v2.data();
      }
    }
    return j;
  }

 private:
  static void check_key(const std::string& key) {
    if (!known_keys().count(key)) throw InputError("unknown config key '" + key + "'");
  }
  boost::property_tree::ptree tree_;
};

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> m = {"eto-es", "eto-cs", "eto-ccs", "ecro", "dts"};
  return m;
}

inline void check_method(const std::string& m) {
  const auto& ms = method_names();
  if (std::find(ms.begin(), ms.end(), m) == ms.end()) {
    throw InputError("unknown method '" + m + "' (expected eto-es, eto-cs, eto-ccs, ecro or dts)");
  }
}

inline TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.epochs = c.get("train.epochs", t.epochs);
  t.tro_steps = c.get("train.tro_steps", t.tro_steps);
  t.batch_size = c.get("train.batch", t.batch_size);
  t.alpha = c.alpha();
  t.epsilon = c.epsilon();
  t.gamma = c.get("train.gamma", t.gamma);
  t.optimizer.step = c.get("train.step", t.optimizer.step);
  t.optimizer.kind = parse_optimizer(c.get<std::string>("train.optimizer", optimizer_name(t.optimizer.kind)));
  t.beta_start = c.get("train.beta_start", t.beta_start);
  t.beta_end = c.get("train.beta_end", t.beta_end);
  t.seed = c.seed();
  t.full_data_regressor = c.get("train.full_data_regressor", t.full_data_regressor);
  t.warm_start = c.get("train.warm_start", t.warm_start);
  t.convergence_tol = c.get("train.convergence_tol", t.convergence_tol);
  t.convergence_window = c.get("train.convergence_window", t.convergence_window);
  t.jobs = c.jobs();
  t.predictor.hidden = c.get_list("train.hidden", t.predictor.hidden);
  t.predictor.psi_dependent_radius = c.get("train.psi_dependent_radius", t.predictor.psi_dependent_radius);
  t.regressor.hidden = c.get("train.regressor_hidden", t.regressor.hidden);
  t.regressor.ridge = c.get("train.regressor_ridge", t.regressor.ridge);
  t.validate();
  return t;
}

inline FitConfig fit_config(const RunConfig& c) {
  FitConfig f;
  f.epochs = c.get("baseline.epochs", f.epochs);
  f.step = c.get("baseline.step", f.step);
  f.hidden = c.get_list("baseline.hidden", f.hidden);
  f.ridge = c.get("baseline.ridge", f.ridge);
  f.seed = c.seed();
  detail::require(f.epochs >= 1 && f.step > 0, "baseline: epochs and step must be positive");
  return f;
}

inline EvalConfig eval_config(const RunConfig& c) {
  EvalConfig e;
  e.alpha = c.alpha();
  e.epsilon = c.epsilon();
  e.conditional_points = c.get("eval.conditional_points", e.conditional_points);
  e.conditional_draws = c.get("eval.conditional_draws", e.conditional_draws);
  e.seed = c.seed();
  e.jobs = c.jobs();
  return e;
}

inline WindowSpec window_spec(const RunConfig& c) {
  WindowSpec w;
  w.train = c.get<Index>("backtest.train", 252);
  w.validation = c.get<Index>("backtest.validation", 126);
  w.test = c.get<Index>("backtest.test", 126);
  w.stride = c.get<Index>("backtest.stride", 126);
  return w;
}

/// Every setting with defaults filled in, as embedded in artifacts.
inline nlohmann::json resolved_json(const RunConfig& c) {
  const TrainConfig t = train_config(c);
  const FitConfig f = fit_config(c);
  const EvalConfig e = eval_config(c);
  const WindowSpec w = window_spec(c);
  nlohmann::json tj = t.to_json();
  tj["convergence_tol"] = t.convergence_tol;
  tj["convergence_window"] = t.convergence_window;
  return {{"seed", c.seed()},
          {"alpha", c.alpha()},
          {"epsilon", c.epsilon()},
          {"jobs", c.jobs()},
          {"method", c.method()},
          {"data",
           {{"n", c.get<Index>("data.n", 2000)},
            {"kind", c.get<std::string>("data.kind", "mixture")},
            {"env", c.get<std::string>("data.env", "")},
            {"dataset", c.get<std::string>("data.dataset", "")},
            {"perturb_sd", c.get("data.perturb_sd", 0.1)}}},
          {"train", tj},
          {"baseline", {{"epochs", f.epochs}, {"step", f.step}, {"hidden", f.hidden}, {"ridge", f.ridge}}},
          {"eval",
           {{"conditional_points", e.conditional_points},
            {"conditional_draws", e.conditional_draws},
            {"confidence", c.get("eval.confidence", 0.95)}}},
          {"backtest",
           {{"train", w.train},
            {"validation", w.validation},
            {"test", w.test},
            {"stride", w.stride},
            {"assets", c.get<Index>("backtest.assets", 15)}}},
          {"file", c.raw_json()}};
}

// ---------------------------------------------------------------------------
// Files

inline std::filesystem::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory '" + dir + "': " + ec.message());
  return std::filesystem::path(dir);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write '" + path.string() + "'");
  os << text;
  if (!os) throw InputError("write failed for '" + path.string() + "'");
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("'" + path + "': " + e.what());
  }
}

inline MixtureEnv load_env(const std::string& path) { return MixtureEnv::from_json(read_json(path).at("env")); }

// ---------------------------------------------------------------------------
// Models

/// A fitted model of any method: parameters plus the JSON needed to rebuild
/// its set function.
struct Model {
  std::string method;
  ParamVector params;
  nlohmann::json meta;
};

inline SetFunction model_sets(const Model& m) {
  const std::string kind = m.meta.at("kind").get<std::string>();
  if (kind == "gaussian") {
    GaussianModel g;
    g.net = Mlp::from_json(m.meta.at("model").at("net"));
    g.params = m.params;
    const double eps = m.meta.at("epsilon").get<double>();
    return [g, eps](const Vec& psi) { return eto_set(g, psi, eps); };
  }
  if (kind == "conformal") {
    const ConformalCalibration c = conformal_from_json(m.meta.at("conformal"), m.params);
    return [c](const Vec& psi) { return conformal_set(c, psi); };
  }
  if (kind == "set_predictor") return predictor_sets(SetPredictor::from_json(m.meta.at("predictor")), m.params);
  throw InputError("checkpoint: unknown model kind '" + kind + "'");
}

inline void save_model(const std::filesystem::path& path, const Model& m) {
  save_params(path.string(), m.params, m.meta);
}

inline Model load_model(const std::string& path) {
  auto [params, meta] = load_params(path);
  if (!meta.contains("method") || !meta.contains("kind")) throw InputError("checkpoint '" + path + "' has no model metadata");
  return {meta.at("method").get<std::string>(), std::move(params), std::move(meta)};
}

/// Fits `method` on the train/validation rows of `d`. Training logs (JSONL)
/// go to `log`; the per-epoch history is returned in `history` when present.
inline Model fit_model(const std::string& method, const Dataset& d, const RunConfig& cfg, std::ostream* log,
                       nlohmann::json* history, const Logger& logger) {
  check_method(method);
  const Dataset tr = d.part(Split::train);
  const Dataset va = d.part(Split::validation);
  detail::require(tr.size() > 0, "dataset has no training rows");
  Model m;
  m.method = method;
  m.meta = {{"method", method},
            {"epsilon", cfg.epsilon()},
            {"alpha", cfg.alpha()},
            {"seed", cfg.seed()},
            {"covariates", d.covariates()},
            {"dim", d.dim()},
            {"config", resolved_json(cfg)}};
  const auto t0 = std::chrono::steady_clock::now();
  auto ms = [&] { return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count(); };

  if (method == "eto-es") {
    const GaussianModel g = fit_gaussian_eto(tr, fit_config(cfg), &va);
    double nll = 0.0;
    for (Index i = 0; i < tr.size(); ++i) nll += g.nll(tr.psi.row(i).transpose(), tr.xi.row(i).transpose());
    nll /= static_cast<double>(tr.size());
    m.params = g.params;
    m.meta["kind"] = "gaussian";
    m.meta["model"] = g.to_json();
    m.meta["radius"] = chi_squared_radius(d.dim(), cfg.epsilon());
    const nlohmann::json rec = {{"stage", "mle_fit"}, {"loss", nll}, {"wall_ms", ms()}};
    if (log) *log << rec.dump() << '\n';
    logger.info("eto-es: Gaussian MLE fitted, train NLL " + detail::format_double(nll));
    return m;
  }
  if (method == "eto-cs" || method == "eto-ccs") {
    detail::require(va.size() > 0, method + ": needs validation rows for calibration");
    const PointPredictor pp = fit_point_predictor(tr, fit_config(cfg));
    const ShapeRule rule = method == "eto-cs" ? ShapeRule::global : ShapeRule::local_knn;
    const ConformalCalibration c = calibrate_conformal(pp, rule, va, cfg.epsilon());
    m.params = pp.params;
    m.meta["kind"] = "conformal";
    m.meta["conformal"] = conformal_to_json(c);
    const nlohmann::json rec = {{"stage", "calibration"}, {"quantile", c.q}, {"wall_ms", ms()}};
    if (log) *log << rec.dump() << '\n';
    logger.info(method + ": calibrated on " + std::to_string(va.size()) + " rows, score quantile " +
                detail::format_double(c.q));
    return m;
  }

  TrainConfig tc = train_config(cfg);
  tc.log = log;
  const TrainMethod tm = method == "ecro" ? TrainMethod::ecro : TrainMethod::dual;
  const TrainResult res = train(tm, tr, va, tc);
  if (res.history.empty()) throw NumericError(method + ": training failed in the first epoch: " + res.abort_reason);
  if (res.aborted) logger.error(method + ": training aborted, keeping the last good epoch (" + res.abort_reason + ")");
  const Checkpoint sel = tm == TrainMethod::ecro ? select_by_cvar(res.history) : select_model(res.history, tc.epsilon);
  if (sel.flagged) logger.error(method + ": no epoch reached validation coverage " + detail::format_double(1 - tc.epsilon));
  logger.info(method + ": selected epoch " + std::to_string(sel.epoch) + " of " + std::to_string(res.history.size()) +
              ", validation CVaR " + detail::format_double(sel.val_cvar) + ", coverage " +
              detail::format_double(sel.val_coverage));
  m.params = sel.theta;
  m.meta["kind"] = "set_predictor";
  m.meta["predictor"] = res.predictor.to_json();
  m.meta["selected"] = sel.metrics_json();
  m.meta["aborted"] = res.aborted;
  m.meta["abort_reason"] = res.abort_reason;
  m.meta["converged"] = res.converged;
  if (history) {
    nlohmann::json h = nlohmann::json::array();
    h.push_back(res.initial.metrics_json());
    for (const auto& c : res.history) h.push_back(c.metrics_json());
    *history = {{"method", method}, {"epochs", h}, {"selected", sel.metrics_json()}, {"aborted", res.aborted},
                {"abort_reason", res.abort_reason}, {"converged", res.converged}, {"config", m.meta["config"]}};
  }
  return m;
}

// ---------------------------------------------------------------------------
// Commands

inline void check_dims(const RunConfig& cfg, const Dataset& d) {
  if (cfg.has("data.covariates") && cfg.get<Index>("data.covariates", 0) != d.covariates()) {
    throw InputError("config declares " + cfg.get<std::string>("data.covariates", "") + " covariates, dataset has " +
                     std::to_string(d.covariates()));
  }
  if (cfg.has("data.dim") && cfg.get<Index>("data.dim", 0) != d.dim()) {
    throw InputError("config declares dimension " + cfg.get<std::string>("data.dim", "") + ", dataset has " +
                     std::to_string(d.dim()));
  }
}

/// Synthetic mixture dataset (dataset.csv + env.json), or with data.kind =
/// stocks a synthetic price panel (prices.csv).
inline void cmd_generate(const RunConfig& cfg, const Logger& logger) {
  const auto out = ensure_dir(cfg.out());
  const nlohmann::json meta = {{"seed", cfg.seed()}, {"config", resolved_json(cfg)}};
  const std::string kind = cfg.get<std::string>("data.kind", "mixture");
  if (kind == "stocks") {
    const StockPanel p = synthetic_stock_panel(cfg.get<Index>("data.assets", 20), cfg.get<Index>("data.indices", 2),
                                               cfg.get<Index>("data.periods", 756), cfg.seed());
    std::ostringstream os;
    write_stock_panel(os, p);
    write_text(out / "prices.csv", os.str());
    write_text(out / "prices.json", meta.dump(2) + "\n");
    logger.info("wrote " + std::to_string(p.periods()) + " dates for " + std::to_string(p.assets.size()) + " assets");
    return;
  }
  if (kind != "mixture") throw InputError("data.kind must be mixture or stocks (got '" + kind + "')");
  const std::string env_path = cfg.get<std::string>("data.env", "");
  const MixtureEnv base = env_path.empty() ? default_env() : load_env(env_path);
  const double sd = cfg.get("data.perturb_sd", 0.1);
  const MixtureEnv env = sd > 0 ? base.perturbed(cfg.seed(), sd) : base;
  const Index n = cfg.get<Index>("data.n", 2000);
  const Dataset d = sample_env(env, n, cfg.seed());
  std::ostringstream os;
  write_dataset_csv(os, d, meta);
  write_text(out / "dataset.csv", os.str());
  write_text(out / "env.json", nlohmann::json{{"env", env.to_json()}, {"seed", cfg.seed()}, {"config", meta["config"]}}.dump(2) + "\n");
  logger.info("wrote " + std::to_string(n) + " samples to " + (out / "dataset.csv").string());
}

inline void cmd_train(const RunConfig& cfg, const Logger& logger) {
  const std::string method = cfg.method();
  check_method(method);
  const std::string path = cfg.get<std::string>("data.dataset", "");
  if (path.empty()) throw InputError("train: no dataset given (--dataset)");
  const Dataset d = load_dataset(path);
  check_dims(cfg, d);
  const auto out = ensure_dir(cfg.out());
  std::ofstream log(out / "train_log.jsonl");
  if (!log) throw InputError("cannot write '" + (out / "train_log.jsonl").string() + "'");
  nlohmann::json history;
  Model m = fit_model(method, d, cfg, &log, &history, logger);
  m.meta["dataset"] = path;
  save_model(out / "checkpoint.bin", m);
  if (!history.is_null()) write_text(out / "history.json", history.dump(2) + "\n");
  logger.info("wrote checkpoint " + (out / "checkpoint.bin").string());
}

inline void cmd_evaluate(const RunConfig& cfg, const Logger& logger) {
  const std::string ckpt = cfg.get<std::string>("eval.checkpoint", "");
  if (ckpt.empty()) throw InputError("evaluate: no checkpoint given (--checkpoint)");
  const std::string path = cfg.get<std::string>("data.dataset", "");
  if (path.empty()) throw InputError("evaluate: no dataset given (--dataset)");
  const Model m = load_model(ckpt);
  const Dataset d = load_dataset(path);
  check_dims(cfg, d);
  if (m.meta.at("covariates").get<Index>() != d.covariates() || m.meta.at("dim").get<Index>() != d.dim()) {
    throw InputError("evaluate: checkpoint and dataset dimensions differ");
  }
  const Dataset test = d.part(Split::test);
  const std::string oracle_path = cfg.get<std::string>("eval.oracle", "");
  std::optional<MixtureEnv> oracle;
  if (!oracle_path.empty()) oracle = load_env(oracle_path);

  EvalConfig ec = eval_config(cfg);
  // The model was calibrated for its own target; report against it.
  ec.epsilon = m.meta.at("epsilon").get<double>();
  ec.alpha = m.meta.at("alpha").get<double>();
  const SetFunction sets = model_sets(m);
  EvalReport r = evaluate(m.method, sets, test, ec, oracle ? &*oracle : nullptr);
  r.config = {{"seed", cfg.seed()}, {"evaluate", resolved_json(cfg)}, {"model", m.meta.at("config")},
              {"checkpoint", ckpt}, {"dataset", path}};
  const auto out = ensure_dir(cfg.out());
  write_text(out / "report.json", r.to_json().dump(2) + "\n");
  if (!r.conditional_coverage.empty()) {
    std::ostringstream os;
    os << "# method=" << r.method << " seed=" << cfg.seed() << '\n' << "conditional_coverage,cdf\n";
    for (const auto& p : coverage_cdf(r.conditional_coverage)) {
      os << detail::format_double(p.probability) << ',' << detail::format_double(p.cumulative) << '\n';
    }
    write_text(out / "cdf.csv", os.str());
  }
  const Index n_sets = std::min<Index>(cfg.get<Index>("eval.set_points", 5), test.size());
  const nlohmann::json sj = {{"method", r.method},
                             {"seed", cfg.seed()},
                             {"config", r.config},
                             {"sets", sets_json(sets, test.psi.topRows(n_sets), oracle ? &*oracle : nullptr,
                                                cfg.get("eval.set_draws", 500), cfg.seed())}};
  write_text(out / "sets.json", sj.dump() + "\n");
  logger.info(r.method + ": CVaR " + detail::format_double(r.cvar) + ", coverage " +
              detail::format_double(r.marginal_coverage) + " on " + std::to_string(r.samples) + " test rows");
}

/// Reports with a common (alpha, eps) produce table.csv/json; several eps
/// targets produce one table per target plus coverage_sweep.csv.
inline void cmd_compare(const RunConfig& cfg, const std::vector<std::string>& inputs, const Logger& logger) {
  if (inputs.empty()) throw InputError("compare: no report files given");
  std::vector<EvalReport> reports;
  for (const auto& p : inputs) reports.push_back(EvalReport::from_json(read_json(p)));
  const double conf = cfg.get("eval.confidence", 0.95);
  std::vector<std::pair<double, double>> keys;
  for (const auto& r : reports) {
    if (std::find(keys.begin(), keys.end(), std::make_pair(r.alpha, r.epsilon)) == keys.end()) {
      keys.emplace_back(r.alpha, r.epsilon);
    }
  }
  for (const auto& [a, e] : keys) {
    for (const auto& [a2, e2] : keys) {
      if (e == e2 && a != a2) throw InputError("compare: reports share epsilon but use different alpha");
    }
  }
  const auto out = ensure_dir(cfg.out());
  const nlohmann::json inputs_json = inputs;
  for (const auto& [a, e] : keys) {
    std::vector<EvalReport> group;
    for (const auto& r : reports) {
      if (r.alpha == a && r.epsilon == e) group.push_back(r);
    }
    const Comparison c = compare(group, conf);
    const std::string stem = keys.size() == 1 ? "table" : "table_target_" + detail::format_double(1.0 - e);
    std::ostringstream csv;
    csv << "# seed=" << cfg.seed() << " alpha=" << detail::format_double(a) << " epsilon=" << detail::format_double(e)
        << " confidence=" << detail::format_double(conf) << '\n'
        << c.to_csv();
    write_text(out / (stem + ".csv"), csv.str());
    nlohmann::json j = c.to_json();
    j["inputs"] = inputs_json;
    j["config"] = resolved_json(cfg);
    write_text(out / (stem + ".json"), j.dump(2) + "\n");
    for (const auto& row : c.rows) {
      logger.info(row.method + " (1-eps=" + detail::format_double(1 - e) + "): CVaR " + detail::format_double(row.cvar.mean) +
                  ", coverage " + detail::format_double(row.coverage.mean) + " over " + std::to_string(row.cvar.runs) +
                  " runs");
    }
  }
  write_text(out / "coverage_sweep.csv", coverage_sweep_csv(reports));
}

/// Columns of a returns dataset restricted to the chosen assets; psi keeps the
/// chosen assets' lagged returns and volume scores and all index returns.
inline Dataset select_return_assets(const Dataset& d, Index assets, const std::vector<std::size_t>& which) {
  const Index indices = d.covariates() - 2 * assets;
  detail::require(indices >= 0 && d.dim() == assets, "select_return_assets: dataset layout does not match asset count");
  const Index k = static_cast<Index>(which.size());
  Dataset out = d;
  out.xi.resize(d.size(), k);
  out.psi.resize(d.size(), 2 * k + indices);
  for (Index j = 0; j < k; ++j) {
    const auto a = static_cast<Index>(which[static_cast<std::size_t>(j)]);
    out.xi.col(j) = d.xi.col(a);
    out.psi.col(j) = d.psi.col(a);
    out.psi.col(k + j) = d.psi.col(assets + a);
  }
  if (indices > 0) out.psi.rightCols(indices) = d.psi.rightCols(indices);
  return out;
}

/// Rolling-window backtest on a price panel: per window a fresh asset subset,
/// a fit on train/validation and an evaluation on the test block.
inline void cmd_backtest(const RunConfig& cfg, const Logger& logger) {
  const std::string method = cfg.method();
  check_method(method);
  const std::string prices = cfg.get<std::string>("backtest.prices", "");
  if (prices.empty()) throw InputError("backtest: no price file given (--prices)");
  const StockPanel panel = load_stock_panel(prices);
  ReturnsOptions ro;
  ro.volume_window = cfg.get<Index>("backtest.volume_window", ro.volume_window);
  const Dataset all = make_returns(panel, ro);
  const auto n_assets = static_cast<Index>(panel.assets.size());
  const Index pick = std::min<Index>(cfg.get<Index>("backtest.assets", 15), n_assets);
  const auto windows = rolling_windows(all, window_spec(cfg));
  const auto out = ensure_dir(cfg.out());
  std::vector<std::string> report_paths;
  std::ostringstream summary;
  summary << "window,first_date,last_test_date,assets,cvar,mean_cost,coverage\n";
  nlohmann::json wj = nlohmann::json::array();
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const std::uint64_t wseed = cfg.seed() + w;
    const auto which = pick_assets(static_cast<std::size_t>(n_assets), static_cast<std::size_t>(pick), wseed);
    const Dataset d = select_return_assets(windows[w], n_assets, which);
    const auto wdir = ensure_dir((out / ("window_" + std::to_string(w))).string());
    std::ofstream log(wdir / "train_log.jsonl");
    const Model m = fit_model(method, d, cfg, &log, nullptr, logger);
    save_model(wdir / "checkpoint.bin", m);
    EvalConfig ec = eval_config(cfg);
    EvalReport r = evaluate(method, model_sets(m), d.part(Split::test), ec, nullptr);
    std::vector<std::string> names;
    for (auto a : which) names.push_back(panel.assets[a]);
    r.config = {{"seed", cfg.seed()}, {"window_seed", wseed}, {"window", w}, {"assets", names},
                {"first_date", d.dates.front()}, {"last_date", d.dates.back()}, {"config", resolved_json(cfg)}};
    write_text(wdir / "report.json", r.to_json().dump(2) + "\n");
    report_paths.push_back((wdir / "report.json").string());
    summary << w << ',' << d.dates.front() << ',' << d.dates.back() << ',' << which.size() << ','
            << detail::format_double(r.cvar) << ',' << detail::format_double(r.mean_cost) << ','
            << detail::format_double(r.marginal_coverage) << '\n';
    wj.push_back({{"window", w}, {"assets", names}, {"seed", wseed}, {"cvar", r.cvar}, {"coverage", r.marginal_coverage}});
    logger.info("window " + std::to_string(w) + " (" + d.dates.front() + " .. " + d.dates.back() + "): CVaR " +
                detail::format_double(r.cvar) + ", coverage " + detail::format_double(r.marginal_coverage));
  }
  write_text(out / "backtest.csv", summary.str());
  write_text(out / "backtest.json",
             nlohmann::json{{"method", method}, {"prices", prices}, {"windows", wj}, {"reports", report_paths},
                            {"seed", cfg.seed()}, {"config", resolved_json(cfg)}}
                     .dump(2) +
                 "\n");
}

}  // namespace crokit::cli
