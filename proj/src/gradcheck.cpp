#include "qasf/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "qasf/errors.hpp"
#include "qasf/loss.hpp"

namespace qasf::nn {

ParamVector finite_difference_gradient(const std::function<double(const ParamVector&)>& loss,
                                       const ParamVector& params, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite difference step must be positive");
  ParamVector probe = params;
  ParamVector grad = params.zeros_like();
  for (std::size_t s = 0; s < probe.segment_count(); ++s) {
    auto values = probe.segments()[s].value.data();
    auto out = grad.segments()[s].value.data();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double orig = values[k];
      values[k] = orig + eps;
      const double plus = loss(probe);
      values[k] = orig - eps;
      const double minus = loss(probe);
      values[k] = orig;
      out[k] = (plus - minus) / (2.0 * eps);
    }
  }
  return grad;
}

ParamVector finite_difference_gradient(const Network& net, const ParamVector& params,
                                       const Tensor& input, std::span<const std::uint8_t> labels,
                                       double eps) {
  return finite_difference_gradient(
      [&](const ParamVector& p) {
        return cross_entropy_loss(forward(net, p, input).output, labels).loss;
      },
      params, eps);
}

double max_relative_error(const ParamVector& a, const ParamVector& b, double floor) {
  a.require_compatible(b, "max_relative_error");
  double worst = 0.0;
  for (std::size_t s = 0; s < a.segment_count(); ++s) {
    auto x = a.segments()[s].value.data();
    auto y = b.segments()[s].value.data();
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double denom = std::max({std::abs(x[k]), std::abs(y[k]), floor});
      worst = std::max(worst, std::abs(x[k] - y[k]) / denom);
    }
  }
  return worst;
}

}  // namespace qasf::nn
