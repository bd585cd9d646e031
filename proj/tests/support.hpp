#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "qasf/network.hpp"
#include "qasf/rng.hpp"

namespace qasf::testing {

inline nn::Tensor random_tensor(const nn::Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(nn::shape_size(shape));
  for (auto& x : v) x = u(rng);
  return nn::Tensor(shape, std::move(v));
}

inline std::vector<std::uint8_t> random_labels(std::size_t n, int classes, Rng& rng) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<std::uint8_t> out(n);
  for (auto& l : out) l = static_cast<std::uint8_t>(u(rng));
  return out;
}

inline nn::ParamVector random_like(const nn::ParamVector& p, Rng& rng, double scale = 1.0) {
  nn::ParamVector out;
  for (const auto& s : p) out.add(s.name, random_tensor(s.value.shape(), rng, -scale, scale));
  return out;
}

// Direct 4-loop zero-padded convolution, written independently of the
// library kernels.
inline nn::Tensor naive_conv(const nn::Tensor& x, const nn::Tensor& w, const nn::Tensor& b,
                             int stride) {
  const long N = long(x.dim(0)), C = long(x.dim(1)), H = long(x.dim(2)), W = long(x.dim(3));
  const long F = long(w.dim(0)), k = long(w.dim(2)), pad = k / 2;
  const long OH = (H + 2 * pad - k) / stride + 1, OW = (W + 2 * pad - k) / stride + 1;
  nn::Tensor out({std::size_t(N), std::size_t(F), std::size_t(OH), std::size_t(OW)});
  for (long n = 0; n < N; ++n)
    for (long f = 0; f < F; ++f)
      for (long y = 0; y < OH; ++y)
        for (long xx = 0; xx < OW; ++xx) {
          double acc = b[std::size_t(f)];
          for (long c = 0; c < C; ++c)
            for (long ky = 0; ky < k; ++ky)
              for (long kx = 0; kx < k; ++kx) {
                const long iy = y * stride + ky - pad, ix = xx * stride + kx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += w[std::size_t(((f * C + c) * k + ky) * k + kx)] *
                       x[std::size_t(((n * C + c) * H + iy) * W + ix)];
              }
          out[std::size_t(((n * F + f) * OH + y) * OW + xx)] = acc;
        }
  return out;
}

inline double max_abs_diff(const nn::Tensor& a, const nn::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Smallest distance of any ReLU input from zero and of any max-pool winner
// from its runner-up. Finite differences are only trusted when this is well
// above the perturbation size.
inline double kink_margin(const nn::Network& net, const nn::ForwardCache& cache) {
  double margin = INFINITY;
  for (std::size_t i = cache.begin; i < cache.end; ++i) {
    const auto kind = net.layers[i].kind;
    if (kind != nn::LayerKind::relu && kind != nn::LayerKind::maxpool2x2) continue;
    const auto& rec = cache.records[i - cache.begin];
    const nn::Tensor& in = !rec.concat_input.empty() ? rec.concat_input
                           : i == cache.begin        ? cache.input
                                                     : cache.records[i - 1 - cache.begin].output;
    if (kind == nn::LayerKind::relu) {
      for (double v : in.data()) margin = std::min(margin, std::abs(v));
      continue;
    }
    const std::size_t planes = in.dim(0) * in.dim(1), H = in.dim(2), W = in.dim(3);
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t y = 0; y + 1 < H; y += 2) {
        for (std::size_t x = 0; x + 1 < W; x += 2) {
          double v[4];
          int k = 0;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) v[k++] = in[(p * H + y + dy) * W + x + dx];
          std::sort(v, v + 4);
          // Tied zeros come from a ReLU whose own margin is checked.
          if (v[3] == 0.0) continue;
          margin = std::min(margin, v[3] - v[2]);
        }
      }
    }
  }
  return margin;
}

// A random shape-valid network of `max_layers` or fewer layers whose last
// layer is a conv producing `classes` channels; at most `max_params`
// parameters. May carry one skip route.
inline nn::Network random_net(Rng& rng, int classes, std::size_t max_layers = 3,
                              std::size_t max_params = 500) {
  std::uniform_int_distribution<int> pick(0, 4);
  std::uniform_int_distribution<int> small(1, 3);
  std::bernoulli_distribution coin(0.5);
  for (;;) {
    const std::size_t C = std::size_t(small(rng) == 3 ? 2 : 1);
    const std::size_t H = coin(rng) ? 4 : 6, W = coin(rng) ? 4 : 6;
    nn::Network net{{C, H, W}, {}, {}};
    const std::size_t body = std::uniform_int_distribution<std::size_t>(1, max_layers - 1)(rng);
    std::size_t h = H, w = W;
    for (std::size_t i = 0; i < body; ++i) {
      const std::string name = "l" + std::to_string(i);
      switch (pick(rng)) {
        case 0: net.layers.push_back(nn::LayerSpec::conv(name, small(rng), coin(rng) ? 3 : 1)); break;
        case 1: net.layers.push_back(nn::LayerSpec::relu(name)); break;
        case 2: net.layers.push_back(nn::LayerSpec::batchnorm(name)); break;
        case 3:
          if (h % 2 == 0 && w % 2 == 0 && h >= 4 && w >= 4) {
            net.layers.push_back(nn::LayerSpec::maxpool(name));
            h /= 2;
            w /= 2;
          } else {
            net.layers.push_back(nn::LayerSpec::relu(name));
          }
          break;
        default:
          if (h <= 6) {
            net.layers.push_back(nn::LayerSpec::upsample(name));
            h *= 2;
            w *= 2;
          } else {
            net.layers.push_back(nn::LayerSpec::batchnorm(name));
          }
      }
    }
    net.layers.push_back(nn::LayerSpec::conv("out", classes, coin(rng) ? 3 : 1));
    if (net.layers.size() >= 3 && coin(rng)) {
      net.skips.push_back({0, net.layers.size() - 1});
      try {
        nn::plan_shapes(net);
      } catch (const std::exception&) {
        net.skips.clear();
      }
    }
    try {
      nn::plan_shapes(net);
    } catch (const std::exception&) {
      continue;
    }
    if (nn::init_params(net, 0).scalar_count() <= max_params) return net;
  }
}

}  // namespace qasf::testing
