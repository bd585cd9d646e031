#include "qasf/param_vector.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "qasf/errors.hpp"

namespace qasf::nn {

void ParamVector::add(std::string name, Tensor value) {
  if (contains(name)) throw ConfigError("duplicate parameter segment '" + name + "'");
  segments_.push_back({std::move(name), std::move(value)});
}

bool ParamVector::contains(std::string_view name) const {
  return std::any_of(segments_.begin(), segments_.end(),
                     [&](const Segment& s) { return s.name == name; });
}

const Tensor& ParamVector::at(std::string_view name) const {
  for (const auto& s : segments_) {
    if (s.name == name) return s.value;
  }
  throw ConfigError("missing parameter segment '" + std::string(name) + "'");
}

Tensor& ParamVector::at(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).at(name));
}

std::size_t ParamVector::scalar_count() const {
  std::size_t n = 0;
  for (const auto& s : segments_) n += s.value.size();
  return n;
}

bool ParamVector::compatible_with(const ParamVector& other) const {
  if (segments_.size() != other.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    if (segments_[i].name != other.segments_[i].name) return false;
    if (segments_[i].value.shape() != other.segments_[i].value.shape()) return false;
  }
  return true;
}

void ParamVector::require_compatible(const ParamVector& other, std::string_view what) const {
  if (compatible_with(other)) return;
  std::string detail;
  if (segments_.size() != other.segments_.size()) {
    detail = std::to_string(segments_.size()) + " vs " + std::to_string(other.segments_.size()) +
             " segments";
  } else {
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      const auto& a = segments_[i];
      const auto& b = other.segments_[i];
      if (a.name != b.name || a.value.shape() != b.value.shape()) {
        detail = "segment " + std::to_string(i) + ": '" + a.name + "' " +
                 shape_string(a.value.shape()) + " vs '" + b.name + "' " +
                 shape_string(b.value.shape());
        break;
      }
    }
  }
  throw ConfigError("incompatible parameter vectors in " + std::string(what) + " (" + detail + ")");
}

ParamVector ParamVector::zeros_like() const {
  ParamVector out;
  out.segments_.reserve(segments_.size());
  for (const auto& s : segments_) out.segments_.push_back({s.name, Tensor(s.value.shape())});
  return out;
}

void ParamVector::axpy(double alpha, const ParamVector& x) {
  require_compatible(x, "axpy");
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    auto dst = segments_[i].value.data();
    auto src = x.segments_[i].value.data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += alpha * src[k];
  }
}

void ParamVector::scale(double alpha) {
  for (auto& s : segments_) {
    for (double& v : s.value.data()) v *= alpha;
  }
}

double ParamVector::max_abs() const {
  double m = 0.0;
  for (const auto& s : segments_) {
    for (double v : s.value.data()) m = std::max(m, std::abs(v));
  }
  return m;
}

bool ParamVector::all_finite() const {
  return std::all_of(segments_.begin(), segments_.end(),
                     [](const Segment& s) { return s.value.all_finite(); });
}

std::vector<double> ParamVector::flatten() const {
  std::vector<double> out;
  out.reserve(scalar_count());
  for (const auto& s : segments_) out.insert(out.end(), s.value.data().begin(), s.value.data().end());
  return out;
}

void ParamVector::assign_flat(std::span<const double> values) {
  if (values.size() != scalar_count()) throw ConfigError("assign_flat: length mismatch");
  std::size_t k = 0;
  for (auto& s : segments_) {
    for (double& v : s.value.data()) v = values[k++];
  }
}

ParamVector merge(std::span<const ParamVector> parts) {
  ParamVector out;
  for (const auto& p : parts) {
    for (const auto& s : p) out.add(s.name, s.value);
  }
  return out;
}

ParamVector select(const ParamVector& source, std::span<const std::string> names) {
  ParamVector out;
  for (const auto& n : names) out.add(n, source.at(n));
  return out;
}

std::vector<std::string> segment_names(const ParamVector& params) {
  std::vector<std::string> out;
  for (const auto& s : params) out.push_back(s.name);
  return out;
}

namespace {

void check_parts(std::span<const std::reference_wrapper<const ParamVector>> parts,
                 std::span<const double> coeffs, std::string_view what) {
  if (parts.empty()) throw ConfigError(std::string(what) + ": no parameter vectors");
  if (parts.size() != coeffs.size()) {
    throw ConfigError(std::string(what) + ": " + std::to_string(parts.size()) +
                      " parameter vectors but " + std::to_string(coeffs.size()) + " coefficients");
  }
  for (const auto& p : parts) parts.front().get().require_compatible(p.get(), what);
}

}  // namespace

ParamVector linear_combination(std::span<const std::reference_wrapper<const ParamVector>> parts,
                               std::span<const double> coeffs) {
  check_parts(parts, coeffs, "linear_combination");
  ParamVector out = parts.front().get().zeros_like();
  for (std::size_t i = 0; i < parts.size(); ++i) out.axpy(coeffs[i], parts[i].get());
  return out;
}

ParamVector convex_combination(std::span<const std::reference_wrapper<const ParamVector>> parts,
                               std::span<const double> weights) {
  check_parts(parts, weights, "convex_combination");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw DataError("convex_combination: negative or non-finite weight");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw DataError("convex_combination: weights do not sum to 1");

  const std::size_t n = parts.size();
  ParamVector out = parts.front().get().zeros_like();
  std::vector<double> terms(n);
  for (std::size_t s = 0; s < out.segment_count(); ++s) {
    auto dst = out.segments()[s].value.data();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      double lo = parts[0].get().segments()[s].value[k];
      double hi = lo;
      for (std::size_t i = 0; i < n; ++i) {
        const double v = parts[i].get().segments()[s].value[k];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        terms[i] = weights[i] * v;
      }
      std::sort(terms.begin(), terms.end());
      double acc = 0.0;
      for (double t : terms) acc += t;
      dst[k] = std::clamp(acc, lo, hi);
    }
  }
  return out;
}

}  // namespace qasf::nn
