#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "qasf/network.hpp"

namespace qasf::nn {

// Central differences, one scalar at a time: (f(p + eps) - f(p - eps)) / 2eps.
ParamVector finite_difference_gradient(const std::function<double(const ParamVector&)>& loss,
                                       const ParamVector& params, double eps);

// Same, with the loss being mean cross-entropy of `net` on (input, labels).
ParamVector finite_difference_gradient(const Network& net, const ParamVector& params,
                                       const Tensor& input, std::span<const std::uint8_t> labels,
                                       double eps);

// max over scalars of |a - b| / max(|a|, |b|, floor).
double max_relative_error(const ParamVector& a, const ParamVector& b, double floor);

}  // namespace qasf::nn
