#include "qasf/loss.hpp"

#include <cmath>

#include "qasf/errors.hpp"

namespace qasf::nn {

namespace {

void check_labels(const Tensor& logits, std::span<const std::uint8_t> labels) {
  if (logits.rank() != 4) throw ConfigError("logits must be (N, C, H, W), got " + shape_string(logits.shape()));
  const std::size_t N = logits.dim(0), P = logits.dim(2) * logits.dim(3);
  if (labels.size() != N * P) {
    throw DataError("label count " + std::to_string(labels.size()) + " does not match logits " +
                    shape_string(logits.shape()));
  }
  const std::size_t C = logits.dim(1);
  for (std::uint8_t y : labels) {
    if (y >= C) {
      throw DataError("mask class " + std::to_string(y) + " out of range for " + std::to_string(C) +
                      " classes");
    }
  }
}

// Accumulates per-sample loss sums; writes softmax - onehot into `grad` when
// non-null (unscaled).
std::vector<double> pixel_losses(const Tensor& logits, std::span<const std::uint8_t> labels,
                                 Tensor* grad) {
  const std::size_t N = logits.dim(0), C = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  std::vector<double> sums(N, 0.0);
  std::vector<double> e(C);
  const double* lp = logits.ptr();
  for (std::size_t n = 0; n < N; ++n) {
    const double* base = lp + n * C * P;
    double acc = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
      double mx = base[p];
      for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, base[c * P + p]);
      double z = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        e[c] = std::exp(base[c * P + p] - mx);
        z += e[c];
      }
      const std::size_t y = labels[n * P + p];
      acc += std::log(z) - (base[y * P + p] - mx);
      if (grad != nullptr) {
        double* g = grad->ptr() + n * C * P;
        for (std::size_t c = 0; c < C; ++c) g[c * P + p] = e[c] / z - (c == y ? 1.0 : 0.0);
      }
    }
    sums[n] = acc;
  }
  return sums;
}

}  // namespace

LossResult cross_entropy_loss(const Tensor& logits, std::span<const std::uint8_t> labels) {
  check_labels(logits, labels);
  const std::size_t N = logits.dim(0), P = logits.dim(2) * logits.dim(3);
  LossResult out;
  out.logit_gradient = Tensor(logits.shape());
  auto sums = pixel_losses(logits, labels, &out.logit_gradient);
  double total = 0.0;
  out.per_sample.resize(N);
  for (std::size_t n = 0; n < N; ++n) {
    total += sums[n];
    out.per_sample[n] = sums[n] / static_cast<double>(P);
  }
  const double count = static_cast<double>(N * P);
  out.loss = total / count;
  for (double& g : out.logit_gradient.data()) g /= count;
  if (!std::isfinite(out.loss)) throw DataError("cross-entropy loss is not finite");
  return out;
}

std::vector<double> per_sample_cross_entropy(const Tensor& logits,
                                             std::span<const std::uint8_t> labels) {
  check_labels(logits, labels);
  const double P = static_cast<double>(logits.dim(2) * logits.dim(3));
  auto sums = pixel_losses(logits, labels, nullptr);
  for (double& s : sums) {
    s /= P;
    if (!std::isfinite(s)) throw DataError("cross-entropy loss is not finite");
  }
  return sums;
}

std::vector<std::uint8_t> argmax_classes(const Tensor& logits) {
  if (logits.rank() != 4) throw ConfigError("logits must be (N, C, H, W)");
  const std::size_t N = logits.dim(0), C = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  if (C > 256) throw ConfigError("too many classes for a byte mask");
  std::vector<std::uint8_t> out(N * P);
  for (std::size_t n = 0; n < N; ++n) {
    const double* base = logits.ptr() + n * C * P;
    for (std::size_t p = 0; p < P; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c) {
        if (base[c * P + p] > base[best * P + p]) best = c;
      }
      out[n * P + p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

}  // namespace qasf::nn
