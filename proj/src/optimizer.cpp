#include "qasf/optimizer.hpp"

#include <cmath>

#include "qasf/errors.hpp"

namespace qasf::nn {

OptimizerState make_optimizer(OptimizerKind kind, double learning_rate, double momentum,
                              const ParamVector& params) {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be a nonnegative finite number");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  OptimizerState s;
  s.kind = kind;
  s.learning_rate = learning_rate;
  s.momentum = momentum;
  if (kind == OptimizerKind::sgd_momentum) s.velocity = params.zeros_like();
  return s;
}

StepResult optimizer_step(const OptimizerState& state, const ParamVector& params,
                          const ParamVector& grads) {
  params.require_compatible(grads, "optimizer step (gradients)");
  StepResult out{params, state};
  if (state.kind == OptimizerKind::sgd) {
    out.params.axpy(-state.learning_rate, grads);
    return out;
  }
  params.require_compatible(state.velocity, "optimizer step (velocity)");
  auto& v = out.state.velocity;
  for (std::size_t s = 0; s < v.segment_count(); ++s) {
    auto vd = v.segments()[s].value.data();
    auto gd = grads.segments()[s].value.data();
    auto pd = out.params.segments()[s].value.data();
    for (std::size_t k = 0; k < vd.size(); ++k) {
      vd[k] = state.momentum * vd[k] + gd[k];
      pd[k] -= state.learning_rate * vd[k];
    }
  }
  return out;
}

}  // namespace qasf::nn
