#include "qasf/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <set>
#include <unordered_set>

#include <Eigen/Core>

#include "qasf/errors.hpp"
#include "qasf/rng.hpp"

namespace qasf::nn {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2x2: return "maxpool2x2";
    case LayerKind::upsample2x2: return "upsample2x2";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::argmax_output: return "argmax-output";
  }
  return "?";
}

LayerSpec LayerSpec::conv(std::string name, int filters, int kernel, int stride) {
  return {LayerKind::conv2d, std::move(name), filters, kernel, stride};
}
LayerSpec LayerSpec::batchnorm(std::string name) { return {LayerKind::batchnorm, std::move(name)}; }
LayerSpec LayerSpec::relu(std::string name) { return {LayerKind::relu, std::move(name)}; }
LayerSpec LayerSpec::maxpool(std::string name) { return {LayerKind::maxpool2x2, std::move(name)}; }
LayerSpec LayerSpec::upsample(std::string name) { return {LayerKind::upsample2x2, std::move(name)}; }
LayerSpec LayerSpec::argmax_output(std::string name) {
  return {LayerKind::argmax_output, std::move(name)};
}

namespace {

constexpr double kBatchNormEps = 1e-5;

std::string layer_label(const Network& net, std::size_t i) {
  const auto& l = net.layers[i];
  return "layer " + std::to_string(i) + " '" + l.name + "' (" + std::string(to_string(l.kind)) + ")";
}

}  // namespace

ShapePlan plan_shapes(const Network& net) {
  if (net.input_shape.size() != 3 || shape_size(net.input_shape) == 0) {
    throw ConfigError("network input shape must be (C, H, W) with positive dims, got " +
                      shape_string(net.input_shape));
  }
  const std::size_t n = net.layers.size();
  std::unordered_set<std::string> names;
  for (std::size_t i = 0; i < n; ++i) {
    if (net.layers[i].name.empty()) throw ConfigError("layer " + std::to_string(i) + " has no name");
    if (!names.insert(net.layers[i].name).second) {
      throw ConfigError(layer_label(net, i) + ": duplicate layer name");
    }
  }
  for (const auto& r : net.skips) {
    if (r.to >= n || r.from >= r.to) {
      throw ConfigError("invalid skip route " + std::to_string(r.from) + " -> " + std::to_string(r.to));
    }
  }

  ShapePlan plan;
  plan.inputs.resize(n);
  plan.outputs.resize(n);
  Shape cur = net.input_shape;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& layer = net.layers[i];
    Shape in = cur;
    for (const auto& r : net.skips) {
      if (r.to != i) continue;
      const Shape& src = plan.outputs[r.from];
      if (src[1] != in[1] || src[2] != in[2]) {
        throw ConfigError(layer_label(net, i) + ": skip from layer " + std::to_string(r.from) +
                          " has spatial size " + shape_string(src) + ", expected " + shape_string(in));
      }
      in[0] += src[0];
    }
    plan.inputs[i] = in;
    Shape out = in;
    switch (layer.kind) {
      case LayerKind::conv2d: {
        if (layer.filters <= 0) throw ConfigError(layer_label(net, i) + ": filter count must be positive");
        if (layer.kernel <= 0 || layer.kernel % 2 == 0) {
          throw ConfigError(layer_label(net, i) + ": kernel size must be odd and positive");
        }
        if (layer.stride <= 0) throw ConfigError(layer_label(net, i) + ": stride must be positive");
        const std::size_t k = static_cast<std::size_t>(layer.kernel);
        const std::size_t s = static_cast<std::size_t>(layer.stride);
        const std::size_t pad = k / 2;
        out = {static_cast<std::size_t>(layer.filters), (in[1] + 2 * pad - k) / s + 1,
               (in[2] + 2 * pad - k) / s + 1};
        break;
      }
      case LayerKind::relu:
      case LayerKind::batchnorm:
        break;
      case LayerKind::maxpool2x2:
        if (in[1] % 2 != 0 || in[2] % 2 != 0) {
          throw ConfigError(layer_label(net, i) + ": input " + shape_string(in) +
                            " has odd spatial size");
        }
        out = {in[0], in[1] / 2, in[2] / 2};
        break;
      case LayerKind::upsample2x2:
        out = {in[0], in[1] * 2, in[2] * 2};
        break;
      case LayerKind::argmax_output:
        if (i + 1 != n) throw ConfigError(layer_label(net, i) + ": argmax output must be the last layer");
        break;
    }
    plan.outputs[i] = out;
    cur = out;
  }
  return plan;
}

Shape output_shape(const Network& net) {
  auto plan = plan_shapes(net);
  return plan.outputs.empty() ? net.input_shape : plan.outputs.back();
}

std::vector<std::string> param_names(const Network& net, std::size_t begin, std::size_t end) {
  std::vector<std::string> out;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& l = net.layers[i];
    if (l.kind == LayerKind::conv2d) {
      out.push_back(l.name + ".weight");
      out.push_back(l.name + ".bias");
    } else if (l.kind == LayerKind::batchnorm) {
      out.push_back(l.name + ".gamma");
      out.push_back(l.name + ".beta");
    }
  }
  return out;
}

std::vector<std::string> param_names(const Network& net) {
  return param_names(net, 0, net.layers.size());
}

ParamVector init_params(const Network& net, std::size_t begin, std::size_t end,
                        std::uint64_t seed) {
  const auto plan = plan_shapes(net);
  if (begin > end || end > net.layers.size()) throw ConfigError("init_params: bad layer range");
  ParamVector out;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& l = net.layers[i];
    const std::size_t channels = plan.inputs[i][0];
    if (l.kind == LayerKind::conv2d) {
      const std::size_t f = static_cast<std::size_t>(l.filters);
      const std::size_t k = static_cast<std::size_t>(l.kernel);
      const double limit = std::sqrt(6.0 / static_cast<double>(channels * k * k));
      Rng rng(derive_seed(seed, {i}));
      std::uniform_real_distribution<double> dist(-limit, limit);
      std::vector<double> w(f * channels * k * k);
      for (auto& v : w) v = dist(rng);
      out.add(l.name + ".weight", Tensor({f, channels, k, k}, std::move(w)));
      out.add(l.name + ".bias", Tensor({f}));
    } else if (l.kind == LayerKind::batchnorm) {
      out.add(l.name + ".gamma", Tensor({channels}, 1.0));
      out.add(l.name + ".beta", Tensor({channels}));
    }
  }
  return out;
}

ParamVector init_params(const Network& net, std::uint64_t seed) {
  return init_params(net, 0, net.layers.size(), seed);
}

namespace {

// ---- kernels -------------------------------------------------------------

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

// Unrolls the receptive fields of one sample into a (C*k*k) x (OH*OW) matrix.
void im2col(const double* in, long C, long H, long W, long k, long s, long OH, long OW,
            double* col) {
  const long pad = k / 2;
  for (long c = 0; c < C; ++c) {
    for (long ky = 0; ky < k; ++ky) {
      for (long kx = 0; kx < k; ++kx) {
        double* row = col + ((c * k + ky) * k + kx) * OH * OW;
        for (long y = 0; y < OH; ++y) {
          const long iy = y * s + ky - pad;
          double* dst = row + y * OW;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + OW, 0.0);
            continue;
          }
          const double* src = in + (c * H + iy) * W;
          if (s == 1) {
            const long off = kx - pad;
            const long x0 = std::max(0L, -off), x1 = std::min(OW, W - off);
            std::fill(dst, dst + x0, 0.0);
            std::copy(src + x0 + off, src + x1 + off, dst + x0);
            std::fill(dst + std::max(x0, x1), dst + OW, 0.0);
            continue;
          }
          for (long x = 0; x < OW; ++x) {
            const long ix = x * s + kx - pad;
            dst[x] = ix >= 0 && ix < W ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, long C, long H, long W, long k, long s, long OH, long OW,
                double* in) {
  const long pad = k / 2;
  for (long c = 0; c < C; ++c) {
    for (long ky = 0; ky < k; ++ky) {
      for (long kx = 0; kx < k; ++kx) {
        const double* row = col + ((c * k + ky) * k + kx) * OH * OW;
        for (long y = 0; y < OH; ++y) {
          const long iy = y * s + ky - pad;
          if (iy < 0 || iy >= H) continue;
          double* dst = in + (c * H + iy) * W;
          const double* src = row + y * OW;
          if (s == 1) {
            const long off = kx - pad;
            const long x0 = std::max(0L, -off), x1 = std::min(OW, W - off);
            double* __restrict d = dst + off;
            for (long x = x0; x < x1; ++x) d[x] += src[x];
            continue;
          }
          for (long x = 0; x < OW; ++x) {
            const long ix = x * s + kx - pad;
            if (ix >= 0 && ix < W) dst[ix] += src[x];
          }
        }
      }
    }
  }
}

// Per-sample GEMMs, so each sample's result is independent of the batch it
// travels in.
Tensor conv_forward(const Tensor& x, const Tensor& w, const Tensor& b, int kernel, int stride) {
  const long N = long(x.dim(0)), C = long(x.dim(1)), H = long(x.dim(2)), W = long(x.dim(3));
  const long F = long(w.dim(0)), k = kernel, s = stride, pad = kernel / 2;
  const long OH = (H + 2 * pad - k) / s + 1, OW = (W + 2 * pad - k) / s + 1;
  const long K = C * k * k, P = OH * OW;
  Tensor out({std::size_t(N), std::size_t(F), std::size_t(OH), std::size_t(OW)});
  std::vector<double> col(std::size_t(K * P));
  for (long n = 0; n < N; ++n) {
    im2col(x.ptr() + n * C * H * W, C, H, W, k, s, OH, OW, col.data());
    double* o = out.ptr() + n * F * P;
    for (long f = 0; f < F; ++f) std::fill(o + f * P, o + (f + 1) * P, b[std::size_t(f)]);
    RowMap(o, F, P).noalias() += ConstRowMap(w.ptr(), F, K) * ConstRowMap(col.data(), K, P);
  }
  return out;
}

void conv_backward(const Tensor& x, const Tensor& w, const Tensor& dout, int kernel, int stride,
                   Tensor& dx, Tensor& dw, Tensor& db) {
  const long N = long(x.dim(0)), C = long(x.dim(1)), H = long(x.dim(2)), W = long(x.dim(3));
  const long F = long(w.dim(0)), k = kernel, s = stride;
  const long OH = long(dout.dim(2)), OW = long(dout.dim(3));
  const long K = C * k * k, P = OH * OW;
  dx = Tensor(x.shape());
  dw = Tensor(w.shape());
  db = Tensor({std::size_t(F)});
  std::vector<double> col(std::size_t(K * P)), dcol(std::size_t(K * P));
  for (long n = 0; n < N; ++n) {
    const double* g = dout.ptr() + n * F * P;
    for (long f = 0; f < F; ++f) {
      double acc = 0.0;
      for (long i = 0; i < P; ++i) acc += g[f * P + i];
      db[std::size_t(f)] += acc;
    }
    im2col(x.ptr() + n * C * H * W, C, H, W, k, s, OH, OW, col.data());
    const ConstRowMap gm(g, F, P);
    RowMap(dw.ptr(), F, K).noalias() += gm * ConstRowMap(col.data(), K, P).transpose();
    RowMap(dcol.data(), K, P).noalias() = ConstRowMap(w.ptr(), F, K).transpose() * gm;
    col2im_add(dcol.data(), C, H, W, k, s, OH, OW, dx.ptr() + n * C * H * W);
  }
}

Tensor relu_forward(const Tensor& x) {
  Tensor out(x.shape());
  const double* a = x.ptr();
  double* o = out.ptr();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = a[i] > 0.0 ? a[i] : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& out, const Tensor& dout) {
  Tensor dx(out.shape());
  const double* o = out.ptr();
  const double* g = dout.ptr();
  double* d = dx.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) d[i] = o[i] > 0.0 ? g[i] : 0.0;
  return dx;
}

Tensor maxpool_forward(const Tensor& x, std::vector<std::uint32_t>& argmax) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = H / 2, OW = W / 2;
  Tensor out({N, C, OH, OW});
  argmax.assign(out.size(), 0);
  const double* xp = x.ptr();
  std::size_t o = 0;
  for (std::size_t p = 0; p < N * C; ++p) {
    const std::size_t base = p * H * W;
    for (std::size_t y = 0; y < OH; ++y) {
      for (std::size_t xx = 0; xx < OW; ++xx, ++o) {
        std::size_t best = base + (2 * y) * W + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * y + dy) * W + 2 * xx + dx;
            if (xp[idx] > xp[best]) best = idx;
          }
        }
        out[o] = xp[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return out;
}

Tensor maxpool_backward(const Shape& in_shape, const std::vector<std::uint32_t>& argmax,
                        const Tensor& dout) {
  Tensor dx(in_shape);
  for (std::size_t o = 0; o < dout.size(); ++o) dx[argmax[o]] += dout[o];
  return dx;
}

Tensor upsample_forward(const Tensor& x) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out({N, C, 2 * H, 2 * W});
  const double* xp = x.ptr();
  double* op = out.ptr();
  for (std::size_t p = 0; p < N * C; ++p) {
    for (std::size_t y = 0; y < 2 * H; ++y) {
      const double* irow = xp + p * H * W + (y / 2) * W;
      double* orow = op + p * 4 * H * W + y * 2 * W;
      for (std::size_t xx = 0; xx < 2 * W; ++xx) orow[xx] = irow[xx / 2];
    }
  }
  return out;
}

Tensor upsample_backward(const Shape& in_shape, const Tensor& dout) {
  const std::size_t N = in_shape[0], C = in_shape[1], H = in_shape[2], W = in_shape[3];
  Tensor dx(in_shape);
  const double* gp = dout.ptr();
  double* dp = dx.ptr();
  for (std::size_t p = 0; p < N * C; ++p) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t xx = 0; xx < W; ++xx) {
        const double* g = gp + p * 4 * H * W + (2 * y) * 2 * W + 2 * xx;
        dp[p * H * W + y * W + xx] = (g[0] + g[1]) + (g[2 * W] + g[2 * W + 1]);
      }
    }
  }
  return dx;
}

Tensor batchnorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& xhat,
                         std::vector<double>& inv_std) {
  const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  const double m = static_cast<double>(N * P);
  Tensor out(x.shape());
  xhat = Tensor(x.shape());
  inv_std.assign(C, 0.0);
  const double* xp = x.ptr();
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* row = xp + (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) sum += row[i];
    }
    const double mean = sum / m;
    double var = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* row = xp + (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) {
        const double d = row[i] - mean;
        var += d * d;
      }
    }
    var /= m;
    const double is = 1.0 / std::sqrt(var + kBatchNormEps);
    inv_std[c] = is;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) {
        const double h = (xp[off + i] - mean) * is;
        xhat[off + i] = h;
        out[off + i] = gamma[c] * h + beta[c];
      }
    }
  }
  return out;
}

void batchnorm_backward(const Tensor& xhat, const std::vector<double>& inv_std,
                        const Tensor& gamma, const Tensor& dout, Tensor& dx, Tensor& dgamma,
                        Tensor& dbeta) {
  const std::size_t N = xhat.dim(0), C = xhat.dim(1), P = xhat.dim(2) * xhat.dim(3);
  const double m = static_cast<double>(N * P);
  dx = Tensor(xhat.shape());
  dgamma = Tensor({C});
  dbeta = Tensor({C});
  for (std::size_t c = 0; c < C; ++c) {
    double sg = 0.0, sgh = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) {
        sg += dout[off + i];
        sgh += dout[off + i] * xhat[off + i];
      }
    }
    dbeta[c] = sg;
    dgamma[c] = sgh;
    // dx = gamma * inv_std / m * (m * g - sum(g) - xhat * sum(g * xhat))
    const double scale = gamma[c] * inv_std[c] / m;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) {
        dx[off + i] = scale * (m * dout[off + i] - sg - xhat[off + i] * sgh);
      }
    }
  }
}

// ---- stage plumbing ------------------------------------------------------

std::uint64_t stage_fingerprint(const Network& net, std::size_t begin, std::size_t end,
                                std::size_t batch) {
  std::uint64_t h = derive_seed(0x5eed, {begin, end, batch, net.layers.size()});
  for (std::size_t i = begin; i < end; ++i) {
    h = derive_seed(h, {static_cast<std::uint64_t>(net.layers[i].kind),
                        std::hash<std::string>{}(net.layers[i].name)});
  }
  return h == 0 ? 1 : h;
}

void add_into(SkipMap& map, std::size_t key, const Tensor& g) {
  auto it = map.find(key);
  if (it == map.end()) {
    map.emplace(key, g);
    return;
  }
  if (it->second.shape() != g.shape()) throw ProtocolError("skip gradient shape mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
}

Tensor concat_channels(const Tensor& main, const std::vector<const Tensor*>& extra) {
  const std::size_t N = main.dim(0), H = main.dim(2), W = main.dim(3), P = H * W;
  std::size_t C = main.dim(1);
  for (const Tensor* t : extra) C += t->dim(1);
  Tensor out({N, C, H, W});
  double* op = out.ptr();
  for (std::size_t n = 0; n < N; ++n) {
    double* dst = op + n * C * P;
    std::memcpy(dst, main.ptr() + n * main.dim(1) * P, main.dim(1) * P * sizeof(double));
    dst += main.dim(1) * P;
    for (const Tensor* t : extra) {
      const std::size_t tc = t->dim(1);
      std::memcpy(dst, t->ptr() + n * tc * P, tc * P * sizeof(double));
      dst += tc * P;
    }
  }
  return out;
}

// Channel slice [c0, c0 + cn) of a (N, C, H, W) tensor.
Tensor slice_channels(const Tensor& t, std::size_t c0, std::size_t cn) {
  const std::size_t N = t.dim(0), C = t.dim(1), P = t.dim(2) * t.dim(3);
  Tensor out({N, cn, t.dim(2), t.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::memcpy(out.ptr() + n * cn * P, t.ptr() + (n * C + c0) * P, cn * P * sizeof(double));
  }
  return out;
}

void check_batch(const Tensor& t, const Shape& per_sample, const std::string& what) {
  if (t.rank() != 4 || t.dim(1) != per_sample[0] || t.dim(2) != per_sample[1] ||
      t.dim(3) != per_sample[2]) {
    throw ConfigError(what + ": expected (N, " + std::to_string(per_sample[0]) + ", " +
                      std::to_string(per_sample[1]) + ", " + std::to_string(per_sample[2]) +
                      "), got " + shape_string(t.shape()));
  }
}

std::vector<std::size_t> outgoing_sources(const Network& net, std::size_t end) {
  std::set<std::size_t> keys;
  for (const auto& r : net.skips) {
    if (r.to >= end && r.from < end) keys.insert(r.from);
  }
  return {keys.begin(), keys.end()};
}

}  // namespace

StageOutput forward_stage(const Network& net, std::size_t begin, std::size_t end,
                          const ParamVector& params, const Tensor& input,
                          const SkipMap& incoming) {
  const auto plan = plan_shapes(net);
  if (begin > end || end > net.layers.size()) throw ConfigError("forward: bad layer range");
  const Shape& expected = begin == 0 ? net.input_shape : plan.outputs[begin - 1];
  check_batch(input, expected,
              begin < end ? "input of " + layer_label(net, begin) : std::string("stage input"));
  const std::size_t batch = input.dim(0);

  for (const auto& r : net.skips) {
    if (r.from < begin && r.to >= begin) {
      auto it = incoming.find(r.from);
      if (it == incoming.end()) {
        throw ProtocolError("missing skip tensor from layer " + std::to_string(r.from));
      }
      check_batch(it->second, plan.outputs[r.from], "skip tensor from layer " + std::to_string(r.from));
      if (it->second.dim(0) != batch) throw ProtocolError("skip tensor batch mismatch");
    }
  }

  StageOutput result;
  ForwardCache& cache = result.cache;
  cache.begin = begin;
  cache.end = end;
  cache.batch = batch;
  cache.input = input;
  cache.records.resize(end - begin);

  for (std::size_t i = begin; i < end; ++i) {
    const auto& layer = net.layers[i];
    LayerRecord& rec = cache.records[i - begin];
    const Tensor* x = i == begin ? &cache.input : &cache.records[i - 1 - begin].output;

    std::vector<const Tensor*> extra;
    for (const auto& r : net.skips) {
      if (r.to != i) continue;
      extra.push_back(r.from >= begin ? &cache.records[r.from - begin].output : &incoming.at(r.from));
    }
    if (!extra.empty()) {
      rec.concat_input = concat_channels(*x, extra);
      x = &rec.concat_input;
    }

    switch (layer.kind) {
      case LayerKind::conv2d:
        rec.output = conv_forward(*x, params.at(layer.name + ".weight"),
                                  params.at(layer.name + ".bias"), layer.kernel, layer.stride);
        break;
      case LayerKind::relu:
        rec.output = relu_forward(*x);
        break;
      case LayerKind::maxpool2x2:
        rec.output = maxpool_forward(*x, rec.argmax);
        break;
      case LayerKind::upsample2x2:
        rec.output = upsample_forward(*x);
        break;
      case LayerKind::batchnorm:
        rec.output = batchnorm_forward(*x, params.at(layer.name + ".gamma"),
                                       params.at(layer.name + ".beta"), rec.xhat, rec.inv_std);
        break;
      case LayerKind::argmax_output:
        rec.output = *x;
        break;
    }
#ifndef NDEBUG
    rec.output.require_finite("output of " + layer_label(net, i));
#endif
  }

  result.output = begin == end ? input : cache.records.back().output;
  for (std::size_t src : outgoing_sources(net, end)) {
    if (src >= begin) {
      result.skips.emplace(src, cache.records[src - begin].output);
    } else {
      result.skips.emplace(src, incoming.at(src));
    }
  }
  cache.fingerprint = stage_fingerprint(net, begin, end, batch);
  return result;
}

StageGradients backward_stage(const Network& net, std::size_t begin, std::size_t end,
                              const ParamVector& params, const ForwardCache& cache,
                              const Tensor& grad_output, const SkipMap& grad_skips) {
  if (!cache.valid()) throw ProtocolError("backward without a forward cache");
  if (cache.begin != begin || cache.end != end || cache.records.size() != end - begin ||
      cache.fingerprint != stage_fingerprint(net, begin, end, cache.batch)) {
    throw ProtocolError("forward cache does not belong to this stage");
  }
  const Tensor& out = begin == end ? cache.input : cache.records.back().output;
  if (grad_output.shape() != out.shape()) {
    throw ProtocolError("output gradient " + shape_string(grad_output.shape()) +
                        " does not match forward output " + shape_string(out.shape()));
  }

  const auto plan = plan_shapes(net);
  StageGradients result;
  SkipMap pending;
  for (std::size_t src : outgoing_sources(net, end)) {
    auto it = grad_skips.find(src);
    if (it == grad_skips.end()) {
      throw ProtocolError("missing gradient for skip tensor from layer " + std::to_string(src));
    }
    add_into(src >= begin ? pending : result.skips, src, it->second);
  }

  std::vector<Segment> grads;  // filled back to front
  Tensor g = grad_output;
  for (std::size_t i = end; i-- > begin;) {
    const auto& layer = net.layers[i];
    const LayerRecord& rec = cache.records[i - begin];
    if (auto it = pending.find(i); it != pending.end()) {
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += it->second[k];
    }
    const Tensor& x = !rec.concat_input.empty() ? rec.concat_input
                      : i == begin              ? cache.input
                                                : cache.records[i - 1 - begin].output;
    Tensor dx;
    switch (layer.kind) {
      case LayerKind::conv2d: {
        Tensor dw, db;
        conv_backward(x, params.at(layer.name + ".weight"), g, layer.kernel, layer.stride, dx, dw, db);
        grads.push_back({layer.name + ".bias", std::move(db)});
        grads.push_back({layer.name + ".weight", std::move(dw)});
        break;
      }
      case LayerKind::relu:
        dx = relu_backward(rec.output, g);
        break;
      case LayerKind::maxpool2x2:
        dx = maxpool_backward(x.shape(), rec.argmax, g);
        break;
      case LayerKind::upsample2x2:
        dx = upsample_backward(x.shape(), g);
        break;
      case LayerKind::batchnorm: {
        Tensor dgamma, dbeta;
        batchnorm_backward(rec.xhat, rec.inv_std, params.at(layer.name + ".gamma"), g, dx, dgamma,
                           dbeta);
        grads.push_back({layer.name + ".beta", std::move(dbeta)});
        grads.push_back({layer.name + ".gamma", std::move(dgamma)});
        break;
      }
      case LayerKind::argmax_output:
        dx = g;
        break;
    }

    if (!rec.concat_input.empty()) {
      std::size_t c0 = i == begin ? cache.input.dim(1) : cache.records[i - 1 - begin].output.dim(1);
      Tensor main = slice_channels(dx, 0, c0);
      for (const auto& r : net.skips) {
        if (r.to != i) continue;
        const std::size_t channels = plan.outputs[r.from][0];
        add_into(r.from >= begin ? pending : result.skips, r.from, slice_channels(dx, c0, channels));
        c0 += channels;
      }
      dx = std::move(main);
    }
    g = std::move(dx);
  }
  result.input = std::move(g);

  std::reverse(grads.begin(), grads.end());
  for (auto& s : grads) {
    if (!params.contains(s.name)) throw ConfigError("missing parameter segment '" + s.name + "'");
    result.params.add(std::move(s.name), std::move(s.value));
  }
  // Order must mirror `params` so the two are compatible.
  result.params.require_compatible(params, "backward gradient");
  return result;
}

ForwardResult forward(const Network& net, const ParamVector& params, const Tensor& input) {
  auto out = forward_stage(net, 0, net.layers.size(), params, input, {});
  return {std::move(out.output), std::move(out.cache)};
}

BackwardResult backward(const Network& net, const ParamVector& params, const ForwardCache& cache,
                        const Tensor& grad_output) {
  auto out = backward_stage(net, 0, net.layers.size(), params, cache, grad_output, {});
  return {std::move(out.params), std::move(out.input)};
}

}  // namespace qasf::nn
