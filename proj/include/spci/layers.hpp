// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "spci/random.hpp"
#include "spci/tensor.hpp"

namespace spci {

enum class Mode { train, eval };

inline const char* to_string(Mode m) { return m == Mode::train ? "train" : "eval"; }

// Batch norm and dropout can run in different modes; a bare Mode sets both.
struct Modes {
  Mode bn = Mode::eval;
  Mode dropout = Mode::eval;

  constexpr Modes() = default;
  constexpr Modes(Mode both) : bn(both), dropout(both) {}  // NOLINT(google-explicit-constructor)
  constexpr Modes(Mode bn_mode, Mode dropout_mode) : bn(bn_mode), dropout(dropout_mode) {}
};

// Stride-1, same-padded convolution. Weight is stored as a Tensor with shape
// [C_out, C_in, k, k]; bias as [1, C_out, 1, 1].
template <typename T>
struct ConvLayer {
  Tensor<T> weight;
  Tensor<T> bias;
  bool use_bias = true;

  ConvLayer() = default;
  ConvLayer(std::size_t c_in, std::size_t c_out, std::size_t k)
      : weight(Shape{c_out, c_in, k, k}), bias(Shape{1, c_out, 1, 1}) {
    if (k % 2 == 0) throw ShapeError("convolution kernel must be odd, got " + std::to_string(k));
  }

  std::size_t c_out() const { return weight.n(); }
  std::size_t c_in() const { return weight.c(); }
  std::size_t kernel() const { return weight.h(); }
  std::size_t padding() const { return kernel() / 2; }

  // Fan-in scaled uniform draw, bound sqrt(6 / fan_in). Bias is zeroed.
  void init_uniform(Rng& rng) {
    const double fan_in = static_cast<double>(c_in() * kernel() * kernel());
    const double bound = std::sqrt(6.0 / fan_in);
    for (auto& v : weight.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    bias.fill(T(0));
  }

  template <typename U>
  ConvLayer<U> cast() const {
    ConvLayer<U> out;
    out.weight = weight.template cast<U>();
    out.bias = bias.template cast<U>();
    out.use_bias = use_bias;
    return out;
  }

  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

// Per-channel affine normalization. All four vectors are stored as [1,C,1,1].
template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t channels)
      : gamma(Shape{1, channels, 1, 1}, T(1)),
        beta(Shape{1, channels, 1, 1}),
        running_mean(Shape{1, channels, 1, 1}),
        running_var(Shape{1, channels, 1, 1}, T(1)) {}

  std::size_t channels() const { return gamma.c(); }

  template <typename U>
  BatchNormLayer<U> cast() const {
    BatchNormLayer<U> out;
    out.gamma = gamma.template cast<U>();
    out.beta = beta.template cast<U>();
    out.running_mean = running_mean.template cast<U>();
    out.running_var = running_var.template cast<U>();
    out.eps = eps;
    out.momentum = momentum;
    return out;
  }

  friend bool operator==(const BatchNormLayer&, const BatchNormLayer&) = default;
};

}  // namespace spci
