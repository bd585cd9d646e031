#pragma once

#include "qasf/param_vector.hpp"

namespace qasf::nn {

enum class OptimizerKind { sgd, sgd_momentum };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 0.01;
  double momentum = 0.0;
  ParamVector velocity;  // sgd_momentum only; compatible with the parameters
};

OptimizerState make_optimizer(OptimizerKind kind, double learning_rate, double momentum,
                              const ParamVector& params);

struct StepResult {
  ParamVector params;
  OptimizerState state;
};

// sgd:      p <- p - lr * g
// momentum: v <- m * v + g;  p <- p - lr * v
StepResult optimizer_step(const OptimizerState& state, const ParamVector& params,
                          const ParamVector& grads);

}  // namespace qasf::nn
