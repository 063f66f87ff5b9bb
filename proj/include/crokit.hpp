#pragma once

#include "crokit/baselines.hpp"
#include "crokit/coverage.hpp"
#include "crokit/data.hpp"
#include "crokit/error.hpp"
#include "crokit/evaluation.hpp"
#include "crokit/implicit.hpp"
#include "crokit/logistic.hpp"
#include "crokit/nn.hpp"
#include "crokit/policy.hpp"
#include "crokit/risk.hpp"
#include "crokit/solver.hpp"
#include "crokit/training.hpp"
#include "crokit/uncertainty.hpp"
#include "crokit/cli.hpp"
