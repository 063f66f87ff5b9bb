// Trains a DTS set predictor on one synthetic environment and compares it with
// the Gaussian estimate-then-optimize baseline on the test split.

#include <cstdio>

#include "crokit.hpp"

using namespace crokit;

int main() {
  const std::uint64_t seed = 1;
  const MixtureEnv env = default_env().perturbed(seed);
  const Dataset d = sample_env(env, 2000, seed);
  const Dataset train_set = d.part(Split::train), val = d.part(Split::validation), test = d.part(Split::test);

  EvalConfig ec;
  ec.seed = seed;
  ec.conditional_points = 100;

  FitConfig fc;
  fc.seed = seed;
  const GaussianModel g = fit_gaussian_eto(train_set, fc, &val);
  const EvalReport eto = evaluate("eto-es", [&](const Vec& p) { return eto_set(g, p, 0.1); }, test, ec, &env);

  TrainConfig tc;
  tc.seed = seed;
  tc.epochs = 20;
  const TrainResult res = train(TrainMethod::dual, train_set, val, tc);
  const Checkpoint best = select_model(res.history, tc.epsilon);
  const EvalReport dts = evaluate("dts", predictor_sets(res.predictor, best.theta), test, ec, &env);

  for (const EvalReport* r : {&eto, &dts}) {
    std::printf("%-7s CVaR %.3f  coverage %.3f  median conditional coverage %.3f\n", r->method.c_str(), r->cvar,
                r->marginal_coverage, quantile_of(r->conditional_coverage, 0.5));
  }
}
