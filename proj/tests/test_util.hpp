// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "spci/layers.hpp"
#include "spci/random.hpp"
#include "spci/spci.hpp"
#include "spci/tensor.hpp"

namespace spci::testing {

template <typename T>
Tensor<T> random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(scale * rng.normal());
  return t;
}

template <typename T>
Tensor<T> random_tensor(const Shape& s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return random_tensor<T>(s, rng, scale);
}

template <typename T>
ConvLayer<T> random_conv(std::size_t c_in, std::size_t c_out, std::size_t k, Rng& rng) {
  ConvLayer<T> l(c_in, c_out, k);
  for (auto& v : l.weight.data()) v = static_cast<T>(rng.uniform(-0.5, 0.5));
  for (auto& v : l.bias.data()) v = static_cast<T>(rng.uniform(-0.5, 0.5));
  return l;
}

// Non-trivial batch norm state so eval-mode checks exercise every term.
template <typename T>
void randomize_bn(BatchNormLayer<T>& bn, Rng& rng) {
  for (std::size_t c = 0; c < bn.channels(); ++c) {
    bn.gamma[c] = static_cast<T>(rng.uniform(0.5, 1.5));
    bn.beta[c] = static_cast<T>(rng.uniform(-0.3, 0.3));
    bn.running_mean[c] = static_cast<T>(rng.uniform(-0.2, 0.2));
    bn.running_var[c] = static_cast<T>(rng.uniform(0.5, 2.0));
  }
}

// Seeded block with non-zero biases and batch norm state.
template <typename T>
SpciParams<T> random_spci(std::size_t c_in, std::size_t c_out, std::uint64_t seed) {
  SpciParams<T> p = init_spci<T>(c_in, c_out, kDefaultReduction, kDefaultDropout, seed);
  Rng rng(derive_seed(seed, 1));
  visit_params(p, [&](const std::string& name, Tensor<T>& t, bool) {
    if (name.ends_with(".bias")) {
      for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-0.2, 0.2));
    }
  });
  randomize_bn(p.cdm.bn1, rng);
  randomize_bn(p.cdm.bn2, rng);
  return p;
}

}  // namespace spci::testing
