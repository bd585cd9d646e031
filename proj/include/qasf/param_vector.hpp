#pragma once

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qasf/tensor.hpp"

namespace qasf::nn {

struct Segment {
  std::string name;
  Tensor value;

  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Ordered, named collection of tensors. Holds the learnable weights of one
/// model part (or a gradient of them); also used as the payload container
/// for boundary messages.
///
/// Two ParamVectors are compatible when their segment names, order and
/// shapes match exactly. Every arithmetic operation requires compatibility
/// and throws ConfigError otherwise.
class ParamVector {
 public:
  ParamVector() = default;

  void add(std::string name, Tensor value);

  bool contains(std::string_view name) const;
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);

  const std::vector<Segment>& segments() const { return segments_; }
  std::vector<Segment>& segments() { return segments_; }
  std::size_t segment_count() const { return segments_.size(); }
  std::size_t scalar_count() const;
  bool empty() const { return segments_.empty(); }

  auto begin() const { return segments_.begin(); }
  auto end() const { return segments_.end(); }

  bool compatible_with(const ParamVector& other) const;
  void require_compatible(const ParamVector& other, std::string_view what) const;

  ParamVector zeros_like() const;

  // this += alpha * x
  void axpy(double alpha, const ParamVector& x);
  void scale(double alpha);

  double max_abs() const;
  bool all_finite() const;

  // Flat scalar view across segments, in segment order.
  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> values);

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<Segment> segments_;
};

// Concatenate the segments of several ParamVectors; names must be unique.
ParamVector merge(std::span<const ParamVector> parts);
// The segments of `source` whose names are listed, in that order.
ParamVector select(const ParamVector& source, std::span<const std::string> names);
std::vector<std::string> segment_names(const ParamVector& params);

// sum_i coeffs[i] * parts[i], accumulated in client order.
ParamVector linear_combination(std::span<const std::reference_wrapper<const ParamVector>> parts,
                               std::span<const double> coeffs);

/// Convex combination with nonnegative weights summing to one.
///
/// Each scalar is summed over the sorted products, so the result does not
/// depend on the order of the parts, and is clamped to the [min, max] of the
/// parts so rounding never leaves the convex hull.
ParamVector convex_combination(std::span<const std::reference_wrapper<const ParamVector>> parts,
                               std::span<const double> weights);

}  // namespace qasf::nn
