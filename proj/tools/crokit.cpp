// crokit: generate data, train set predictors, evaluate and compare them.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "crokit/cli.hpp"

namespace {

struct Overrides {
  std::string config;
  std::vector<std::pair<std::string, std::string>> values;
  std::vector<std::string> sets;
};

// Binds --flag to a config key; the value is applied after the config file.
void bind(CLI::App* app, Overrides& ov, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(flag, [&ov, key](const std::string& v) { ov.values.emplace_back(key, v); }, help);
}

void common_flags(CLI::App* app, Overrides& ov) {
  app->add_option("--config", ov.config, "INI-style config file");
  bind(app, ov, "--seed", "seed", "random seed");
  bind(app, ov, "--out", "out", "output directory");
  bind(app, ov, "--jobs", "jobs", "worker threads");
  app->add_option("--set", ov.sets, "override any config key: section.key=value");
}

void model_flags(CLI::App* app, Overrides& ov) {
  app->add_option_function<std::string>(
         "--method", [&ov](const std::string& v) { ov.values.emplace_back("method", v); }, "set construction method")
      ->check(CLI::IsMember({"eto-es", "eto-cs", "eto-ccs", "ecro", "dts"}));
  bind(app, ov, "--alpha", "alpha", "CVaR level");
  bind(app, ov, "--epsilon", "epsilon", "miscoverage target");
  bind(app, ov, "--gamma", "train.gamma", "task-loss weight in the dual loss");
  bind(app, ov, "--tro-steps", "train.tro_steps", "trust-region steps per sample and epoch");
  bind(app, ov, "--epochs", "train.epochs", "training epochs");
  bind(app, ov, "--batch", "train.batch", "batch size");
}

crokit::cli::RunConfig resolve(const Overrides& ov) {
  crokit::cli::RunConfig cfg = ov.config.empty() ? crokit::cli::RunConfig() : crokit::cli::RunConfig::load(ov.config);
  for (const auto& [k, v] : ov.values) cfg.set(k, v);
  for (const auto& s : ov.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw crokit::InputError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contextual robust portfolio optimization experiments"};
  app.require_subcommand(1);
  Overrides ov;
  std::vector<std::string> reports;

  auto* gen = app.add_subcommand("generate", "sample a synthetic dataset (or price panel)");
  common_flags(gen, ov);
  bind(gen, ov, "--n", "data.n", "number of samples");
  bind(gen, ov, "--env", "data.env", "base environment JSON");
  bind(gen, ov, "--kind", "data.kind", "mixture or stocks");

  auto* trn = app.add_subcommand("train", "fit one method and write its selected checkpoint");
  common_flags(trn, ov);
  model_flags(trn, ov);
  bind(trn, ov, "--dataset", "data.dataset", "dataset CSV");

  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on the test split");
  common_flags(ev, ov);
  bind(ev, ov, "--checkpoint", "eval.checkpoint", "checkpoint file");
  bind(ev, ov, "--dataset", "data.dataset", "dataset CSV");
  bind(ev, ov, "--oracle", "eval.oracle", "environment JSON for conditional coverage");

  auto* cmp = app.add_subcommand("compare", "summarize reports across methods and seeds");
  common_flags(cmp, ov);
  cmp->add_option("reports", reports, "report.json files")->required();
  bind(cmp, ov, "--confidence", "eval.confidence", "confidence level of the t intervals");

  auto* bt = app.add_subcommand("backtest", "rolling-window backtest on a price panel");
  common_flags(bt, ov);
  model_flags(bt, ov);
  bind(bt, ov, "--prices", "backtest.prices", "price panel CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  crokit::cli::Logger logger;
  try {
    logger = crokit::cli::Logger(crokit::cli::log_level_from(std::getenv("CROKIT_LOG")));
    const crokit::cli::RunConfig cfg = resolve(ov);
    if (*gen) crokit::cli::cmd_generate(cfg, logger);
    if (*trn) crokit::cli::cmd_train(cfg, logger);
    if (*ev) crokit::cli::cmd_evaluate(cfg, logger);
    if (*cmp) crokit::cli::cmd_compare(cfg, reports, logger);
    if (*bt) crokit::cli::cmd_backtest(cfg, logger);
  } catch (const crokit::InputError& e) {
    logger.error(e.what());
    return 2;
  } catch (const crokit::NumericError& e) {
    logger.error(e.what());
    return 1;
  } catch (const std::exception& e) {
    logger.error(e.what());
    return 1;
  }
  return 0;
}
