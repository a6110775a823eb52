// SPDX-License-Identifier: Apache-2.0
//
// Primitive NCHW kernels with their analytic backward rules.
//
// Reductions (convolution taps, pooling means, batch statistics) accumulate in
// double regardless of the storage type and run in a fixed sequential order, so
// results are deterministic per build and single-precision outputs are rounded
// once at the end.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "spci/layers.hpp"
#include "spci/random.hpp"
#include "spci/tensor.hpp"

namespace spci::ops {

enum class PoolMode { avg, max };
enum class PoolAxis { spatial, channel };

namespace detail {

// Unfolds x[n] into a [C_in*k*k, H*W] matrix, zero padded.
template <typename T>
std::vector<T> im2col(const Tensor<T>& x, std::size_t n, std::size_t k) {
  const std::size_t C = x.c(), H = x.h(), W = x.w(), HW = H * W;
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<T> col(C * k * k * HW, T(0));
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t u = 0; u < k; ++u) {
      for (std::size_t v = 0; v < k; ++v) {
        T* row = col.data() + ((c * k + u) * k + v) * HW;
        for (std::size_t i = 0; i < H; ++i) {
          const auto si = static_cast<std::ptrdiff_t>(i + u) - pad;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t j = 0; j < W; ++j) {
            const auto sj = static_cast<std::ptrdiff_t>(j + v) - pad;
            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
            row[i * W + j] = x.at(n, c, static_cast<std::size_t>(si), static_cast<std::size_t>(sj));
          }
        }
      }
    }
  }
  return col;
}

template <typename T>
void check_conv(const Tensor<T>& x, const ConvLayer<T>& layer) {
  if (x.c() != layer.c_in()) {
    throw ShapeError("conv2d: input " + x.shape().str() + " incompatible with weight " +
                     layer.weight.shape().str());
  }
  if (layer.kernel() % 2 == 0 || layer.weight.h() != layer.weight.w()) {
    throw ShapeError("conv2d: kernel must be square and odd, weight " + layer.weight.shape().str());
  }
  if (layer.bias.size() != layer.c_out()) {
    throw ShapeError("conv2d: bias " + layer.bias.shape().str() + " does not match weight " +
                     layer.weight.shape().str());
  }
}

template <typename T>
T clamp_open_unit(double s) {
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
  const T v = static_cast<T>(s);
  return v < lo ? lo : (v > hi ? hi : v);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvLayer<T>& layer) {
  detail::check_conv(x, layer);
  const std::size_t N = x.n(), Cout = layer.c_out(), k = layer.kernel();
  const std::size_t HW = x.h() * x.w(), R = x.c() * k * k;
  Tensor<T> y(Shape{N, Cout, x.h(), x.w()});
  std::vector<double> acc(HW);
  for (std::size_t n = 0; n < N; ++n) {
    const std::vector<T> col = detail::im2col(x, n, k);
    for (std::size_t o = 0; o < Cout; ++o) {
      const double b = layer.use_bias ? static_cast<double>(layer.bias[o]) : 0.0;
      std::fill(acc.begin(), acc.end(), b);
      const T* wrow = layer.weight.data().data() + o * R;
      for (std::size_t r = 0; r < R; ++r) {
        const double wv = wrow[r];
        const T* crow = col.data() + r * HW;
        for (std::size_t p = 0; p < HW; ++p) acc[p] += wv * static_cast<double>(crow[p]);
      }
      T* out = &y.at(n, o, 0, 0);
      for (std::size_t p = 0; p < HW; ++p) out[p] = static_cast<T>(acc[p]);
    }
  }
  return y;
}

template <typename T>
struct ConvGrads {
  Tensor<T> dx;
  Tensor<T> dweight;
  Tensor<T> dbias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvLayer<T>& layer, const Tensor<T>& dy) {
  detail::check_conv(x, layer);
  const std::size_t N = x.n(), C = x.c(), H = x.h(), W = x.w(), HW = H * W;
  const std::size_t Cout = layer.c_out(), k = layer.kernel(), R = C * k * k;
  require_same_shape(dy.shape(), Shape{N, Cout, H, W}, "conv2d_backward");
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);

  std::vector<double> dw(Cout * R, 0.0), db(Cout, 0.0);
  std::vector<double> dx(x.size(), 0.0);
  std::vector<double> dcol(R * HW);
  for (std::size_t n = 0; n < N; ++n) {
    const std::vector<T> col = detail::im2col(x, n, k);
    std::fill(dcol.begin(), dcol.end(), 0.0);
    for (std::size_t o = 0; o < Cout; ++o) {
      const T* g = &dy.at(n, o, 0, 0);
      for (std::size_t p = 0; p < HW; ++p) db[o] += g[p];
      const T* wrow = layer.weight.data().data() + o * R;
      for (std::size_t r = 0; r < R; ++r) {
        const T* crow = col.data() + r * HW;
        double s = 0.0;
        for (std::size_t p = 0; p < HW; ++p) s += static_cast<double>(g[p]) * crow[p];
        dw[o * R + r] += s;
        const double wv = wrow[r];
        double* drow = dcol.data() + r * HW;
        for (std::size_t p = 0; p < HW; ++p) drow[p] += wv * g[p];
      }
    }
    // col2im
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t u = 0; u < k; ++u) {
        for (std::size_t v = 0; v < k; ++v) {
          const double* drow = dcol.data() + ((c * k + u) * k + v) * HW;
          for (std::size_t i = 0; i < H; ++i) {
            const auto si = static_cast<std::ptrdiff_t>(i + u) - pad;
            if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t j = 0; j < W; ++j) {
              const auto sj = static_cast<std::ptrdiff_t>(j + v) - pad;
              if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
              dx[x.index(n, c, static_cast<std::size_t>(si), static_cast<std::size_t>(sj))] +=
                  drow[i * W + j];
            }
          }
        }
      }
    }
  }

  ConvGrads<T> out{Tensor<T>(x.shape()), Tensor<T>(layer.weight.shape()),
                   Tensor<T>(layer.bias.shape())};
  for (std::size_t i = 0; i < dx.size(); ++i) out.dx[i] = static_cast<T>(dx[i]);
  for (std::size_t i = 0; i < dw.size(); ++i) out.dweight[i] = static_cast<T>(dw[i]);
  for (std::size_t o = 0; o < Cout; ++o) out.dbias[o] = layer.use_bias ? static_cast<T>(db[o]) : T(0);
  return out;
}

// ---------------------------------------------------------------------------
// Pooling

template <typename T>
Tensor<T> pool(const Tensor<T>& x, PoolMode mode, PoolAxis axis) {
  const std::size_t N = x.n(), C = x.c(), HW = x.h() * x.w();
  if (axis == PoolAxis::spatial) {
    Tensor<T> y(Shape{N, C, 1, 1});
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const T* p = &x.at(n, c, 0, 0);
        if (mode == PoolMode::avg) {
          double s = 0.0;
          for (std::size_t i = 0; i < HW; ++i) s += p[i];
          y.at(n, c, 0, 0) = static_cast<T>(s / static_cast<double>(HW));
        } else {
          T m = p[0];
          for (std::size_t i = 1; i < HW; ++i) m = p[i] > m ? p[i] : m;
          y.at(n, c, 0, 0) = m;
        }
      }
    }
    return y;
  }
  Tensor<T> y(Shape{N, 1, x.h(), x.w()});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < HW; ++i) {
      if (mode == PoolMode::avg) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += x[(n * C + c) * HW + i];
        y[n * HW + i] = static_cast<T>(s / static_cast<double>(C));
      } else {
        T m = x[n * C * HW + i];
        for (std::size_t c = 1; c < C; ++c) {
          const T v = x[(n * C + c) * HW + i];
          m = v > m ? v : m;
        }
        y[n * HW + i] = m;
      }
    }
  }
  return y;
}

// Max routes the gradient to the first maximal element in scan order.
template <typename T>
Tensor<T> pool_backward(const Tensor<T>& x, PoolMode mode, PoolAxis axis, const Tensor<T>& dy) {
  const std::size_t N = x.n(), C = x.c(), HW = x.h() * x.w();
  Tensor<T> dx(x.shape());
  if (axis == PoolAxis::spatial) {
    require_same_shape(dy.shape(), Shape{N, C, 1, 1}, "pool_backward");
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const T g = dy.at(n, c, 0, 0);
        const T* p = &x.at(n, c, 0, 0);
        T* d = &dx.at(n, c, 0, 0);
        if (mode == PoolMode::avg) {
          const T share = static_cast<T>(static_cast<double>(g) / static_cast<double>(HW));
          for (std::size_t i = 0; i < HW; ++i) d[i] = share;
        } else {
          std::size_t arg = 0;
          for (std::size_t i = 1; i < HW; ++i) arg = p[i] > p[arg] ? i : arg;
          d[arg] = g;
        }
      }
    }
    return dx;
  }
  require_same_shape(dy.shape(), Shape{N, 1, x.h(), x.w()}, "pool_backward");
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < HW; ++i) {
      const T g = dy[n * HW + i];
      if (mode == PoolMode::avg) {
        const T share = static_cast<T>(static_cast<double>(g) / static_cast<double>(C));
        for (std::size_t c = 0; c < C; ++c) dx[(n * C + c) * HW + i] = share;
      } else {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < C; ++c) {
          arg = x[(n * C + c) * HW + i] > x[(n * C + arg) * HW + i] ? c : arg;
        }
        dx[(n * C + arg) * HW + i] = g;
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Pointwise activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

// relu'(0) = 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  require_same_shape(x.shape(), dy.shape(), "relu_backward");
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
  return dx;
}

// Output is clamped into the open interval (0,1) so saturated pre-activations
// never produce an attention weight of exactly 0 or 1.
template <typename T>
T sigmoid_scalar(T t) {
  const double v = static_cast<double>(t);
  double s;
  if (v >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-v));
  } else {
    const double e = std::exp(v);
    s = e / (1.0 + e);
  }
  return detail::clamp_open_unit<T>(s);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid_scalar(x[i]);
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  require_same_shape(y.shape(), dy.shape(), "sigmoid_backward");
  Tensor<T> dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (T(1) - y[i]);
  return dx;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct BatchNormSaved {
  Tensor<T> xhat;
  std::vector<double> inv_std;
};

template <typename T>
void check_batchnorm(const Tensor<T>& x, const BatchNormLayer<T>& layer, Mode mode) {
  if (x.c() != layer.channels()) {
    throw ShapeError("batchnorm: input " + x.shape().str() + " has " + std::to_string(x.c()) +
                     " channels, layer has " + std::to_string(layer.channels()));
  }
  if (mode == Mode::train && x.n() * x.plane() < 2) {
    throw ShapeError("batchnorm: train mode needs at least 2 values per channel, input " +
                     x.shape().str());
  }
}

// Train mode normalizes with biased batch statistics and folds the unbiased
// variance into the running estimate; eval mode reads running statistics only.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormLayer<T>& layer, Mode mode,
                    BatchNormSaved<T>* saved = nullptr) {
  check_batchnorm(x, layer, mode);
  const std::size_t N = x.n(), C = x.c(), HW = x.plane();
  const double M = static_cast<double>(N * HW);
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<double> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) s += x[(n * C + c) * HW + i];
      mean = s / M;
      double q = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = x[(n * C + c) * HW + i] - mean;
          q += d * d;
        }
      }
      var = q / M;
      const double mom = layer.momentum;
      layer.running_mean[c] = static_cast<T>((1.0 - mom) * layer.running_mean[c] + mom * mean);
      layer.running_var[c] =
          static_cast<T>((1.0 - mom) * layer.running_var[c] + mom * var * M / (M - 1.0));
    } else {
      mean = layer.running_mean[c];
      var = layer.running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + layer.eps);
    inv_std[c] = is;
    const double g = layer.gamma[c], b = layer.beta[c];
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        const double xh = (x[idx] - mean) * is;
        xhat[idx] = static_cast<T>(xh);
        y[idx] = static_cast<T>(g * xh + b);
      }
    }
  }
  if (saved) {
    saved->xhat = std::move(xhat);
    saved->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> dx;
  Tensor<T> dgamma;
  Tensor<T> dbeta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormSaved<T>& saved, const BatchNormLayer<T>& layer,
                                     Mode mode, const Tensor<T>& dy) {
  require_same_shape(saved.xhat.shape(), dy.shape(), "batchnorm_backward");
  const std::size_t N = dy.n(), C = dy.c(), HW = dy.plane();
  const double M = static_cast<double>(N * HW);
  BatchNormGrads<T> out{Tensor<T>(dy.shape()), Tensor<T>(layer.gamma.shape()),
                        Tensor<T>(layer.beta.shape())};
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        sum_dy += dy[idx];
        sum_dy_xhat += static_cast<double>(dy[idx]) * saved.xhat[idx];
      }
    }
    out.dgamma[c] = static_cast<T>(sum_dy_xhat);
    out.dbeta[c] = static_cast<T>(sum_dy);
    const double g = layer.gamma[c], is = saved.inv_std[c];
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        double d;
        if (mode == Mode::train) {
          d = g * is / M * (M * dy[idx] - sum_dy - saved.xhat[idx] * sum_dy_xhat);
        } else {
          d = g * is * dy[idx];
        }
        out.dx[idx] = static_cast<T>(d);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Tensor<T> concat_channel(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("concat_channel: incompatible shapes " + a.shape().str() + " and " +
                     b.shape().str());
  }
  const std::size_t N = a.n(), HW = a.plane(), Ca = a.c(), Cb = b.c();
  Tensor<T> y(Shape{N, Ca + Cb, a.h(), a.w()});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(&a.at(n, 0, 0, 0), Ca * HW, &y.at(n, 0, 0, 0));
    std::copy_n(&b.at(n, 0, 0, 0), Cb * HW, &y.at(n, Ca, 0, 0));
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> concat_channel_backward(const Shape& a, const Shape& b,
                                                        const Tensor<T>& dy) {
  Tensor<T> da(a), db(b);
  const std::size_t HW = a.h * a.w;
  for (std::size_t n = 0; n < a.n; ++n) {
    std::copy_n(&dy.at(n, 0, 0, 0), a.c * HW, &da.at(n, 0, 0, 0));
    std::copy_n(&dy.at(n, a.c, 0, 0), b.c * HW, &db.at(n, 0, 0, 0));
  }
  return {std::move(da), std::move(db)};
}

enum class Broadcast { channel, spatial, full };

inline Broadcast broadcast_kind(const Shape& x, const Shape& w) {
  if (w.n == x.n && w.c == x.c && w.h == x.h && w.w == x.w) return Broadcast::full;
  if (w.n == x.n && w.c == x.c && w.h == 1 && w.w == 1) return Broadcast::channel;
  if (w.n == x.n && w.c == 1 && w.h == x.h && w.w == x.w) return Broadcast::spatial;
  throw ShapeError("mul_broadcast: weight " + w.str() + " does not broadcast against " + x.str());
}

template <typename T>
Tensor<T> mul_broadcast(const Tensor<T>& x, const Tensor<T>& w) {
  const Broadcast kind = broadcast_kind(x.shape(), w.shape());
  const std::size_t N = x.n(), C = x.c(), HW = x.plane();
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        const T wv = kind == Broadcast::full      ? w[idx]
                     : kind == Broadcast::channel ? w[n * C + c]
                                                  : w[n * HW + i];
        y[idx] = x[idx] * wv;
      }
    }
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> mul_broadcast_backward(const Tensor<T>& x, const Tensor<T>& w,
                                                       const Tensor<T>& dy) {
  const Broadcast kind = broadcast_kind(x.shape(), w.shape());
  require_same_shape(x.shape(), dy.shape(), "mul_broadcast_backward");
  const std::size_t N = x.n(), C = x.c(), HW = x.plane();
  Tensor<T> dx(x.shape());
  std::vector<double> dw(w.size(), 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        const std::size_t widx = kind == Broadcast::full      ? idx
                                 : kind == Broadcast::channel ? n * C + c
                                                              : n * HW + i;
        dx[idx] = dy[idx] * w[widx];
        dw[widx] += static_cast<double>(dy[idx]) * x[idx];
      }
    }
  }
  Tensor<T> dwt(w.shape());
  for (std::size_t i = 0; i < dw.size(); ++i) dwt[i] = static_cast<T>(dw[i]);
  return {std::move(dx), std::move(dwt)};
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
  require_same_shape(a.shape(), b.shape(), "add");
  require_same_shape(a.shape(), c.shape(), "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i] + c[i];
  return y;
}

// Inverted dropout mask: 0 with probability p, 1/(1-p) otherwise.
template <typename T>
Tensor<T> dropout_mask(const Shape& shape, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(p));
  }
  Tensor<T> mask(shape, T(1));
  if (p == 0.0) return mask;
  Rng rng(seed);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : mask.data()) m = rng.uniform() < p ? T(0) : keep;
  return mask;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(p));
  }
  if (mode == Mode::eval || p == 0.0) return x;
  const Tensor<T> mask = dropout_mask<T>(x.shape(), p, seed);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask[i];
  return y;
}

// Keeps every second row and column starting at 0. Composed with a same-padded
// stride-1 convolution this equals a stride-2 convolution with padding k/2.
template <typename T>
Tensor<T> subsample2(const Tensor<T>& x) {
  const std::size_t Ho = (x.h() + 1) / 2, Wo = (x.w() + 1) / 2;
  Tensor<T> y(Shape{x.n(), x.c(), Ho, Wo});
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) y.at(n, c, i, j) = x.at(n, c, 2 * i, 2 * j);
  return y;
}

template <typename T>
Tensor<T> subsample2_backward(const Shape& x, const Tensor<T>& dy) {
  Tensor<T> dx(x);
  for (std::size_t n = 0; n < dy.n(); ++n)
    for (std::size_t c = 0; c < dy.c(); ++c)
      for (std::size_t i = 0; i < dy.h(); ++i)
        for (std::size_t j = 0; j < dy.w(); ++j) dx.at(n, c, 2 * i, 2 * j) = dy.at(n, c, i, j);
  return dx;
}

}  // namespace spci::ops
