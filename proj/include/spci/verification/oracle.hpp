// SPDX-License-Identifier: Apache-2.0
//
// Reference implementations used to check the production kernels. They only
// share the Tensor container and layer structs with ops.hpp: everything is
// computed in double with plain loop nests, straight from the definitions.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "spci/layers.hpp"
#include "spci/spci.hpp"
#include "spci/tensor.hpp"

namespace spci::verify {

// |a - n| / max(|a|, |n|, 1e-8)
inline double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

template <typename A, typename B>
double max_rel_error(const Tensor<A>& a, const Tensor<B>& b) {
  require_same_shape(a.shape(), b.shape(), "max_rel_error");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, rel_error(static_cast<double>(a[i]), static_cast<double>(b[i])));
  }
  return worst;
}

// Six nested loops over (n, o, i, j, c, u, v) with explicit bounds checks.
template <typename T>
Tensor<double> naive_conv_oracle(const Tensor<T>& x, const ConvLayer<T>& layer) {
  const std::size_t N = x.n(), C = x.c(), H = x.h(), W = x.w();
  const std::size_t O = layer.weight.n(), K = layer.weight.h();
  if (layer.weight.c() != C || K % 2 == 0 || layer.weight.w() != K) {
    throw ShapeError("naive_conv_oracle: input " + x.shape().str() + " incompatible with weight " +
                     layer.weight.shape().str());
  }
  const long pad = static_cast<long>(K / 2);
  Tensor<double> y(Shape{N, O, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < O; ++o) {
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          double s = layer.use_bias ? static_cast<double>(layer.bias[o]) : 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t u = 0; u < K; ++u) {
              for (std::size_t v = 0; v < K; ++v) {
                const long r = static_cast<long>(i + u) - pad;
                const long q = static_cast<long>(j + v) - pad;
                if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) {
                  continue;
                }
                s += static_cast<double>(layer.weight.at(o, c, u, v)) *
                     static_cast<double>(
                         x.at(n, c, static_cast<std::size_t>(r), static_cast<std::size_t>(q)));
              }
            }
          }
          y.at(n, o, i, j) = s;
        }
      }
    }
  }
  return y;
}

namespace eq {

inline double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }
inline double relu(double t) { return t > 0.0 ? t : 0.0; }

template <typename T>
Tensor<double> conv(const Tensor<double>& x, const ConvLayer<T>& layer) {
  return naive_conv_oracle(x, layer.template cast<double>());
}

template <typename T>
Tensor<double> bn_eval(const Tensor<double>& x, const BatchNormLayer<T>& bn) {
  Tensor<double> y(x.shape());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t i = 0; i < x.h(); ++i)
        for (std::size_t j = 0; j < x.w(); ++j) {
          const double m = bn.running_mean[c], v = bn.running_var[c];
          y.at(n, c, i, j) =
              double(bn.gamma[c]) * (x.at(n, c, i, j) - m) / std::sqrt(v + bn.eps) + bn.beta[c];
        }
  return y;
}

template <typename T>
struct Gate {
  Tensor<double> out;
  Tensor<double> weights;
};

// w_s = sigmoid(conv2(relu(conv1(GAP(f))))); out = f * w_s
template <typename T>
Gate<T> ssg(const Tensor<T>& f_in, const SsgParams<T>& p) {
  const Tensor<double> f = f_in.template cast<double>();
  Tensor<double> gap(Shape{f.n(), f.c(), 1, 1});
  for (std::size_t n = 0; n < f.n(); ++n)
    for (std::size_t c = 0; c < f.c(); ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < f.h(); ++i)
        for (std::size_t j = 0; j < f.w(); ++j) s += f.at(n, c, i, j);
      gap.at(n, c, 0, 0) = s / static_cast<double>(f.h() * f.w());
    }
  Tensor<double> hidden = conv(gap, p.conv1);
  for (auto& v : hidden.data()) v = relu(v);
  Tensor<double> w = conv(hidden, p.conv2);
  for (auto& v : w.data()) v = sigmoid(v);
  Tensor<double> out(f.shape());
  for (std::size_t n = 0; n < f.n(); ++n)
    for (std::size_t c = 0; c < f.c(); ++c)
      for (std::size_t i = 0; i < f.h(); ++i)
        for (std::size_t j = 0; j < f.w(); ++j)
          out.at(n, c, i, j) = f.at(n, c, i, j) * w.at(n, c, 0, 0);
  return {out, w};
}

// w_p = sigmoid(conv7([mean_c f ; max_c f])); out = f * w_p
template <typename T>
Gate<T> pfm(const Tensor<T>& f_in, const PfmParams<T>& p) {
  const Tensor<double> f = f_in.template cast<double>();
  Tensor<double> pooled(Shape{f.n(), 2, f.h(), f.w()});
  for (std::size_t n = 0; n < f.n(); ++n)
    for (std::size_t i = 0; i < f.h(); ++i)
      for (std::size_t j = 0; j < f.w(); ++j) {
        double s = 0.0, m = -INFINITY;
        for (std::size_t c = 0; c < f.c(); ++c) {
          s += f.at(n, c, i, j);
          m = std::max(m, f.at(n, c, i, j));
        }
        pooled.at(n, 0, i, j) = s / static_cast<double>(f.c());
        pooled.at(n, 1, i, j) = m;
      }
  Tensor<double> w = conv(pooled, p.conv7);
  for (auto& v : w.data()) v = sigmoid(v);
  Tensor<double> out(f.shape());
  for (std::size_t n = 0; n < f.n(); ++n)
    for (std::size_t c = 0; c < f.c(); ++c)
      for (std::size_t i = 0; i < f.h(); ++i)
        for (std::size_t j = 0; j < f.w(); ++j)
          out.at(n, c, i, j) = f.at(n, c, i, j) * w.at(n, 0, i, j);
  return {out, w};
}

// X1 = relu(bn1(conv1 f)); X2 = relu(bn2(conv2 X1)); w_c = sigmoid(conv3 X2);
// out = f * w_c. Batch norm in eval form.
template <typename T>
Gate<T> cdm_eval(const Tensor<T>& f_in, const CdmParams<T>& p) {
  const Tensor<double> f = f_in.template cast<double>();
  Tensor<double> x1 = bn_eval(conv(f, p.conv1), p.bn1);
  for (auto& v : x1.data()) v = relu(v);
  Tensor<double> x2 = bn_eval(conv(x1, p.conv2), p.bn2);
  for (auto& v : x2.data()) v = relu(v);
  Tensor<double> w = conv(x2, p.conv3);
  for (auto& v : w.data()) v = sigmoid(v);
  Tensor<double> out(f.shape());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = f[i] * w[i];
  return {out, w};
}

// Eval-mode composition: SSG -> transform -> PFM -> CDM, summed.
template <typename T>
Tensor<double> spci_eval(const Tensor<T>& f, const SpciParams<T>& p) {
  Tensor<double> s = f.template cast<double>();
  if (p.flags.ssg) s = ssg(f, p.ssg).out;
  const Tensor<double> alpha = conv(s, p.transform);
  const auto pcast = p.template cast<double>();
  const Tensor<double> beta = p.flags.pfm ? pfm(alpha, pcast.pfm).out : alpha;
  const Tensor<double> gamma = p.flags.cdm ? cdm_eval(beta, pcast.cdm).out : beta;
  Tensor<double> out(alpha.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha[i] + beta[i] + gamma[i];
  return out;
}

}  // namespace eq

}  // namespace spci::verify
