#include "qasf/metrics.hpp"

#include <numeric>

#include "qasf/errors.hpp"
#include "qasf/loss.hpp"

namespace qasf::metrics {

namespace {

void require_same_size(std::size_t a, std::size_t b) {
  if (a != b) {
    throw DataError("mask size mismatch: " + std::to_string(a) + " vs " + std::to_string(b) +
                    " pixels");
  }
}

}  // namespace

double pixel_accuracy(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  require_same_size(pred.size(), gt.size());
  if (gt.empty()) throw DataError("pixel accuracy of an empty mask");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) hits += pred[i] == gt[i];
  return static_cast<double>(hits) / static_cast<double>(gt.size());
}

std::optional<double> jaccard(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                              int label) {
  require_same_size(pred.size(), gt.size());
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool p = pred[i] == label, g = gt[i] == label;
    inter += p && g;
    uni += p || g;
  }
  if (uni == 0) return std::nullopt;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

Report summarize(std::span<const data::SegSample> samples, std::span<const std::uint8_t> prediction,
                 std::span<const double> per_sample_loss) {
  if (samples.empty()) throw DataError("evaluation on an empty sample set");
  require_same_size(per_sample_loss.size(), samples.size());
  Report r;
  r.samples = samples.size();
  std::array<double, 4> sum{};
  std::array<std::size_t, 4> defined{};
  std::size_t offset = 0;
  double acc = 0.0;
  for (const auto& s : samples) {
    const std::size_t n = s.mask.size();
    if (offset + n > prediction.size()) throw DataError("prediction shorter than the sample set");
    const auto pred = prediction.subspan(offset, n);
    acc += pixel_accuracy(pred, s.mask);
    for (int c = 1; c < data::kClassCount; ++c) {
      if (auto j = jaccard(pred, s.mask, c)) {
        sum[c - 1] += *j;
        ++defined[c - 1];
      }
    }
    offset += n;
  }
  require_same_size(offset, prediction.size());
  const double n = static_cast<double>(samples.size());
  r.accuracy = acc / n;
  r.loss = std::accumulate(per_sample_loss.begin(), per_sample_loss.end(), 0.0) / n;
  for (std::size_t c = 0; c < 4; ++c) {
    if (defined[c] > 0) r.jaccard[c] = sum[c] / static_cast<double>(defined[c]);
  }
  return r;
}

Report evaluate_global(const nn::Network& net, const nn::ParamVector& params,
                       std::span<const data::SegSample> test) {
  if (test.empty()) throw DataError("evaluation on an empty test set");
  const auto fwd = nn::forward(net, params, data::batch_images(test));
  const auto labels = data::batch_labels(test);
  const auto losses = nn::per_sample_cross_entropy(fwd.output, labels);
  return summarize(test, nn::argmax_classes(fwd.output), losses);
}

}  // namespace qasf::metrics
