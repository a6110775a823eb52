// SPDX-License-Identifier: Apache-2.0
//
// Selective-Perspective-Class Integration block.
//
//   s = SSG(f)              channel gate from a spatially pooled descriptor
//   alpha = transform(s)    1x1 convolution C_in -> C_out
//   beta  = PFM(alpha)      spatial gate from channel-pooled avg/max maps
//   gamma = CDM(beta)       per-element gate from a 1x1/3x3/1x1 conv stack
//   out = dropout(alpha + beta + gamma)
//
// A disabled submodule passes its input through unchanged.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include "spci/autograd.hpp"
#include "spci/layers.hpp"
#include "spci/random.hpp"
#include "spci/tensor.hpp"

namespace spci {

inline constexpr std::size_t kDefaultReduction = 16;
inline constexpr double kDefaultDropout = 0.1;
inline constexpr std::size_t kMinMidChannels = 8;

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

inline std::size_t ssg_mid_channels(std::size_t channels, std::size_t reduction) {
  if (reduction == 0) throw ConfigError("SSG reduction ratio must be positive");
  return std::max(ceil_div(channels, reduction), kMinMidChannels);
}

inline std::size_t cdm_mid_channels(std::size_t channels) {
  return std::max(ceil_div(channels, 2), kMinMidChannels);
}

template <typename T>
struct SsgParams {
  std::size_t reduction = kDefaultReduction;
  ConvLayer<T> conv1;  // 1x1, C -> C_mid
  ConvLayer<T> conv2;  // 1x1, C_mid -> C

  std::size_t channels() const { return conv1.c_in(); }

  friend bool operator==(const SsgParams&, const SsgParams&) = default;
};

template <typename T>
struct PfmParams {
  ConvLayer<T> conv7;  // 7x7, 2 -> 1

  friend bool operator==(const PfmParams&, const PfmParams&) = default;
};

template <typename T>
struct CdmParams {
  ConvLayer<T> conv1;  // 1x1, C -> C_mid
  BatchNormLayer<T> bn1;
  ConvLayer<T> conv2;  // 3x3, C_mid -> C_mid
  BatchNormLayer<T> bn2;
  ConvLayer<T> conv3;  // 1x1, C_mid -> C

  std::size_t channels() const { return conv1.c_in(); }
  std::size_t mid_channels() const { return conv1.c_out(); }

  friend bool operator==(const CdmParams&, const CdmParams&) = default;
};

struct SpciFlags {
  bool ssg = true;
  bool pfm = true;
  bool cdm = true;

  friend bool operator==(const SpciFlags&, const SpciFlags&) = default;
};

template <typename T>
struct SpciParams {
  SsgParams<T> ssg;
  ConvLayer<T> transform;
  PfmParams<T> pfm;
  CdmParams<T> cdm;
  double dropout = kDefaultDropout;
  SpciFlags flags;

  std::size_t c_in() const { return transform.c_in(); }
  std::size_t c_out() const { return transform.c_out(); }

  template <typename U>
  SpciParams<U> cast() const {
    SpciParams<U> out;
    out.ssg.reduction = ssg.reduction;
    out.ssg.conv1 = ssg.conv1.template cast<U>();
    out.ssg.conv2 = ssg.conv2.template cast<U>();
    out.transform = transform.template cast<U>();
    out.pfm.conv7 = pfm.conv7.template cast<U>();
    out.cdm.conv1 = cdm.conv1.template cast<U>();
    out.cdm.bn1 = cdm.bn1.template cast<U>();
    out.cdm.conv2 = cdm.conv2.template cast<U>();
    out.cdm.bn2 = cdm.bn2.template cast<U>();
    out.cdm.conv3 = cdm.conv3.template cast<U>();
    out.dropout = dropout;
    out.flags = flags;
    return out;
  }

  friend bool operator==(const SpciParams&, const SpciParams&) = default;
};

// Calls fn(name, tensor, trainable) for every stored tensor in a fixed order.
// Bias tensors of bias-free convolutions are skipped. P may be const.
template <typename P, typename Fn>
void visit_conv(const std::string& name, P& conv, Fn&& fn) {
  fn(name + ".weight", conv.weight, true);
  if (conv.use_bias) fn(name + ".bias", conv.bias, true);
}

template <typename P, typename Fn>
void visit_bn(const std::string& name, P& bn, Fn&& fn) {
  fn(name + ".gamma", bn.gamma, true);
  fn(name + ".beta", bn.beta, true);
  fn(name + ".running_mean", bn.running_mean, false);
  fn(name + ".running_var", bn.running_var, false);
}

template <typename P, typename Fn>
void visit_params(P& p, Fn&& fn, const std::string& prefix = "") {
  visit_conv(prefix + "ssg.conv1", p.ssg.conv1, fn);
  visit_conv(prefix + "ssg.conv2", p.ssg.conv2, fn);
  visit_conv(prefix + "transform", p.transform, fn);
  visit_conv(prefix + "pfm.conv7", p.pfm.conv7, fn);
  visit_conv(prefix + "cdm.conv1", p.cdm.conv1, fn);
  visit_bn(prefix + "cdm.bn1", p.cdm.bn1, fn);
  visit_conv(prefix + "cdm.conv2", p.cdm.conv2, fn);
  visit_bn(prefix + "cdm.bn2", p.cdm.bn2, fn);
  visit_conv(prefix + "cdm.conv3", p.cdm.conv3, fn);
}

// Allocates every layer with the shapes implied by (c_in, c_out, r) but
// leaves all values at their defaults (zero weights, identity batch norm).
template <typename T>
SpciParams<T> make_spci(std::size_t c_in, std::size_t c_out,
                        std::size_t reduction = kDefaultReduction,
                        double dropout = kDefaultDropout) {
  if (c_in == 0 || c_out == 0) throw ConfigError("SPCI channel counts must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(dropout));
  }
  SpciParams<T> p;
  const std::size_t ssg_mid = ssg_mid_channels(c_in, reduction);
  const std::size_t cdm_mid = cdm_mid_channels(c_out);
  p.ssg.reduction = reduction;
  p.ssg.conv1 = ConvLayer<T>(c_in, ssg_mid, 1);
  p.ssg.conv2 = ConvLayer<T>(ssg_mid, c_in, 1);
  p.transform = ConvLayer<T>(c_in, c_out, 1);
  p.pfm.conv7 = ConvLayer<T>(2, 1, 7);
  p.cdm.conv1 = ConvLayer<T>(c_out, cdm_mid, 1);
  p.cdm.bn1 = BatchNormLayer<T>(cdm_mid);
  p.cdm.conv2 = ConvLayer<T>(cdm_mid, cdm_mid, 3);
  p.cdm.bn2 = BatchNormLayer<T>(cdm_mid);
  p.cdm.conv3 = ConvLayer<T>(cdm_mid, c_out, 1);
  p.dropout = dropout;
  return p;
}

// Seeded initialization: fan-in uniform weights, zero biases, identity batch
// norm statistics. Layers draw from one stream in declaration order.
template <typename T>
SpciParams<T> init_spci(std::size_t c_in, std::size_t c_out,
                        std::size_t reduction = kDefaultReduction,
                        double dropout = kDefaultDropout, std::uint64_t seed = 0) {
  SpciParams<T> p = make_spci<T>(c_in, c_out, reduction, dropout);
  Rng rng(seed);
  p.ssg.conv1.init_uniform(rng);
  p.ssg.conv2.init_uniform(rng);
  p.transform.init_uniform(rng);
  p.pfm.conv7.init_uniform(rng);
  p.cdm.conv1.init_uniform(rng);
  p.cdm.conv2.init_uniform(rng);
  p.cdm.conv3.init_uniform(rng);
  return p;
}

// ---------------------------------------------------------------------------
// Tape forms. These are the single implementation; the value forms below run
// them on a non-recording tape.

struct GateVars {
  Var out;
  Var weights;
};

template <typename T>
GateVars ssg_forward(Tape<T>& tape, Var f, const SsgParams<T>& p) {
  if (tape.value(f).c() != p.channels()) {
    throw ShapeError("ssg_forward: input " + tape.value(f).shape().str() + " but SSG expects " +
                     std::to_string(p.channels()) + " channels");
  }
  const Var gap = tape.pool(f, ops::PoolMode::avg, ops::PoolAxis::spatial);
  const Var hidden = tape.relu(tape.conv2d(gap, p.conv1));
  const Var w = tape.sigmoid(tape.conv2d(hidden, p.conv2));
  return {tape.mul_broadcast(f, w), w};
}

template <typename T>
GateVars pfm_forward(Tape<T>& tape, Var f, const PfmParams<T>& p) {
  const Var avg = tape.pool(f, ops::PoolMode::avg, ops::PoolAxis::channel);
  const Var max = tape.pool(f, ops::PoolMode::max, ops::PoolAxis::channel);
  const Var w = tape.sigmoid(tape.conv2d(tape.concat_channel(avg, max), p.conv7));
  return {tape.mul_broadcast(f, w), w};
}

template <typename T>
GateVars cdm_forward(Tape<T>& tape, Var f, CdmParams<T>& p, Mode bn_mode) {
  if (tape.value(f).c() != p.channels()) {
    throw ShapeError("cdm_forward: input " + tape.value(f).shape().str() + " but CDM expects " +
                     std::to_string(p.channels()) + " channels");
  }
  const Var x1 = tape.relu(tape.batchnorm(tape.conv2d(f, p.conv1), p.bn1, bn_mode));
  const Var x2 = tape.relu(tape.batchnorm(tape.conv2d(x1, p.conv2), p.bn2, bn_mode));
  const Var w = tape.sigmoid(tape.conv2d(x2, p.conv3));
  return {tape.mul_broadcast(f, w), w};
}

struct SpciVars {
  Var out;
  Var alpha;
  Var beta;
  Var gamma;
  std::optional<Var> w_s;
  std::optional<Var> w_p;
  std::optional<Var> w_c;
};

template <typename T>
SpciVars spci_forward(Tape<T>& tape, Var f, SpciParams<T>& p, Modes mode, std::uint64_t seed) {
  if (tape.value(f).c() != p.c_in()) {
    throw ShapeError("spci_forward: input " + tape.value(f).shape().str() + " but block expects " +
                     std::to_string(p.c_in()) + " channels");
  }
  SpciVars v;
  Var s = f;
  if (p.flags.ssg) {
    const GateVars g = ssg_forward(tape, f, p.ssg);
    s = g.out;
    v.w_s = g.weights;
  }
  v.alpha = tape.conv2d(s, p.transform);
  v.beta = v.alpha;
  if (p.flags.pfm) {
    const GateVars g = pfm_forward(tape, v.alpha, p.pfm);
    v.beta = g.out;
    v.w_p = g.weights;
  }
  v.gamma = v.beta;
  if (p.flags.cdm) {
    const GateVars g = cdm_forward(tape, v.beta, p.cdm, mode.bn);
    v.gamma = g.out;
    v.w_c = g.weights;
  }
  v.out = tape.dropout(tape.add(v.alpha, v.beta, v.gamma), p.dropout, mode.dropout, seed);
  return v;
}

// ---------------------------------------------------------------------------
// Value forms.

template <typename T>
struct GateResult {
  Tensor<T> out;
  Tensor<T> weights;
};

template <typename T>
GateResult<T> ssg_forward(const Tensor<T>& f, const SsgParams<T>& p) {
  Tape<T> tape(false);
  const GateVars v = ssg_forward(tape, tape.input(f), p);
  return {tape.value(v.out), tape.value(v.weights)};
}

template <typename T>
GateResult<T> pfm_forward(const Tensor<T>& f, const PfmParams<T>& p) {
  Tape<T> tape(false);
  const GateVars v = pfm_forward(tape, tape.input(f), p);
  return {tape.value(v.out), tape.value(v.weights)};
}

// Train mode updates the batch norm running statistics in p.
template <typename T>
GateResult<T> cdm_forward(const Tensor<T>& f, CdmParams<T>& p, Mode bn_mode) {
  Tape<T> tape(false);
  const GateVars v = cdm_forward(tape, tape.input(f), p, bn_mode);
  return {tape.value(v.out), tape.value(v.weights)};
}

template <typename T>
struct SpciResult {
  Tensor<T> out;
  Tensor<T> alpha;
  Tensor<T> beta;
  Tensor<T> gamma;
  std::optional<Tensor<T>> w_s;
  std::optional<Tensor<T>> w_p;
  std::optional<Tensor<T>> w_c;
};

template <typename T>
SpciResult<T> collect(const Tape<T>& tape, const SpciVars& v) {
  SpciResult<T> r{tape.value(v.out), tape.value(v.alpha), tape.value(v.beta), tape.value(v.gamma),
                  std::nullopt, std::nullopt, std::nullopt};
  if (v.w_s) r.w_s = tape.value(*v.w_s);
  if (v.w_p) r.w_p = tape.value(*v.w_p);
  if (v.w_c) r.w_c = tape.value(*v.w_c);
  return r;
}

template <typename T>
SpciResult<T> spci_forward(const Tensor<T>& f, SpciParams<T>& p, Modes mode, std::uint64_t seed) {
  Tape<T> tape(false);
  const SpciVars v = spci_forward(tape, tape.input(f), p, mode, seed);
  return collect(tape, v);
}

}  // namespace spci
