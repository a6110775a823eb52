// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over the primitives in ops.hpp.
//
// A Tape owns every intermediate value of one forward pass. Each
// differentiable op appends exactly one GradRecord; backward() walks the
// records in reverse and may be called once per tape.
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "spci/layers.hpp"
#include "spci/ops.hpp"
#include "spci/tensor.hpp"

namespace spci {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

enum class OpKind {
  conv2d,
  pool,
  relu,
  sigmoid,
  batchnorm,
  concat_channel,
  mul_broadcast,
  add,
  dropout,
  subsample2,
};

template <typename T>
struct GradRecord {
  OpKind op;
  std::vector<std::size_t> inputs;  // value ids; parameter leaves included
  std::size_t output;
  // Op-specific saved state.
  ops::PoolMode pool_mode = ops::PoolMode::avg;
  ops::PoolAxis pool_axis = ops::PoolAxis::spatial;
  Mode mode = Mode::eval;
  const ConvLayer<T>* conv = nullptr;
  const BatchNormLayer<T>* bn = nullptr;
  std::optional<ops::BatchNormSaved<T>> bn_saved;
  std::optional<Tensor<T>> mask;
};

template <typename T>
class Gradients {
 public:
  Gradients(std::vector<std::optional<Tensor<T>>> grads,
            std::unordered_map<const void*, std::size_t> params, std::vector<Shape> shapes)
      : grads_(std::move(grads)), params_(std::move(params)), shapes_(std::move(shapes)) {}

  // Gradient w.r.t. a value on the tape; zeros when the value did not
  // influence the seeded output.
  Tensor<T> wrt(Var v) const {
    if (v.id >= grads_.size()) throw StateError("gradient requested for unknown tape value");
    return grads_[v.id] ? *grads_[v.id] : Tensor<T>(shapes_[v.id]);
  }

  // Gradient w.r.t. a parameter tensor, looked up by identity.
  Tensor<T> wrt(const Tensor<T>& param) const {
    const auto it = params_.find(&param);
    if (it == params_.end()) {
      throw StateError("gradient requested for a parameter that was not used on the tape");
    }
    return wrt(Var{it->second});
  }

  bool has(const Tensor<T>& param) const { return params_.count(&param) != 0; }

 private:
  std::vector<std::optional<Tensor<T>>> grads_;
  std::unordered_map<const void*, std::size_t> params_;
  std::vector<Shape> shapes_;
};

template <typename T>
class Tape {
 public:
  // record=false runs forward only; no GradRecords are kept.
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var input(Tensor<T> t) { return push(std::move(t)); }

  // Leaf for a parameter tensor, memoized by address so a parameter used in
  // several places accumulates into one gradient.
  Var param(const Tensor<T>& p) {
    const auto it = params_.find(&p);
    if (it != params_.end()) return Var{it->second};
    const Var v = push(p);
    params_.emplace(&p, v.id);
    return v;
  }

  const Tensor<T>& value(Var v) const { return values_.at(v.id); }
  std::size_t num_records() const { return records_.size(); }
  const std::vector<GradRecord<T>>& records() const { return records_; }

  Var conv2d(Var x, const ConvLayer<T>& layer) {
    const Var w = param(layer.weight);
    const Var b = param(layer.bias);
    Var out = push(ops::conv2d(value(x), layer));
    if (record_) {
      GradRecord<T> r{OpKind::conv2d, {x.id, w.id, b.id}, out.id};
      r.conv = &layer;
      records_.push_back(std::move(r));
    }
    return out;
  }

  Var pool(Var x, ops::PoolMode mode, ops::PoolAxis axis) {
    Var out = push(ops::pool(value(x), mode, axis));
    if (record_) {
      GradRecord<T> r{OpKind::pool, {x.id}, out.id};
      r.pool_mode = mode;
      r.pool_axis = axis;
      records_.push_back(std::move(r));
    }
    return out;
  }

  Var relu(Var x) { return unary(OpKind::relu, x, ops::relu(value(x))); }
  Var sigmoid(Var x) { return unary(OpKind::sigmoid, x, ops::sigmoid(value(x))); }
  Var subsample2(Var x) { return unary(OpKind::subsample2, x, ops::subsample2(value(x))); }

  Var batchnorm(Var x, BatchNormLayer<T>& layer, Mode mode) {
    const Var g = param(layer.gamma);
    const Var b = param(layer.beta);
    ops::BatchNormSaved<T> saved;
    Var out = push(ops::batchnorm(value(x), layer, mode, record_ ? &saved : nullptr));
    if (record_) {
      GradRecord<T> r{OpKind::batchnorm, {x.id, g.id, b.id}, out.id};
      r.bn = &layer;
      r.mode = mode;
      r.bn_saved = std::move(saved);
      records_.push_back(std::move(r));
    }
    return out;
  }

  Var concat_channel(Var a, Var b) {
    Var out = push(ops::concat_channel(value(a), value(b)));
    if (record_) records_.push_back(GradRecord<T>{OpKind::concat_channel, {a.id, b.id}, out.id});
    return out;
  }

  Var mul_broadcast(Var x, Var w) {
    Var out = push(ops::mul_broadcast(value(x), value(w)));
    if (record_) records_.push_back(GradRecord<T>{OpKind::mul_broadcast, {x.id, w.id}, out.id});
    return out;
  }

  Var add(Var a, Var b, Var c) {
    Var out = push(ops::add(value(a), value(b), value(c)));
    if (record_) records_.push_back(GradRecord<T>{OpKind::add, {a.id, b.id, c.id}, out.id});
    return out;
  }

  Var dropout(Var x, double p, Mode mode, std::uint64_t seed) {
    const Tensor<T>& xv = value(x);
    std::optional<Tensor<T>> mask;
    Var out;
    if (mode == Mode::eval || p == 0.0) {
      out = push(ops::dropout(xv, p, mode, seed));
    } else {
      mask = ops::dropout_mask<T>(xv.shape(), p, seed);
      Tensor<T> y(xv.shape());
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * (*mask)[i];
      out = push(std::move(y));
    }
    if (record_) {
      GradRecord<T> r{OpKind::dropout, {x.id}, out.id};
      r.mask = std::move(mask);
      records_.push_back(std::move(r));
    }
    return out;
  }

  Gradients<T> backward(Var out, const Tensor<T>& seed_grad) {
    if (!record_) throw StateError("backward on a tape that was not recording");
    if (consumed_) throw StateError("tape already consumed by a previous backward pass");
    require_same_shape(value(out).shape(), seed_grad.shape(), "backward seed");
    consumed_ = true;

    std::vector<std::optional<Tensor<T>>> grads(values_.size());
    grads[out.id] = seed_grad;
    auto accumulate = [&](std::size_t id, Tensor<T> g) {
      if (!grads[id]) {
        grads[id] = std::move(g);
        return;
      }
      Tensor<T>& dst = *grads[id];
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    };

    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      const GradRecord<T>& r = *it;
      if (!grads[r.output]) continue;
      const Tensor<T>& dy = *grads[r.output];
      const auto& in = r.inputs;
      switch (r.op) {
        case OpKind::conv2d: {
          auto g = ops::conv2d_backward(values_[in[0]], *r.conv, dy);
          accumulate(in[0], std::move(g.dx));
          accumulate(in[1], std::move(g.dweight));
          accumulate(in[2], std::move(g.dbias));
          break;
        }
        case OpKind::pool:
          accumulate(in[0], ops::pool_backward(values_[in[0]], r.pool_mode, r.pool_axis, dy));
          break;
        case OpKind::relu:
          accumulate(in[0], ops::relu_backward(values_[in[0]], dy));
          break;
        case OpKind::sigmoid:
          accumulate(in[0], ops::sigmoid_backward(values_[r.output], dy));
          break;
        case OpKind::batchnorm: {
          auto g = ops::batchnorm_backward(*r.bn_saved, *r.bn, r.mode, dy);
          accumulate(in[0], std::move(g.dx));
          accumulate(in[1], std::move(g.dgamma));
          accumulate(in[2], std::move(g.dbeta));
          break;
        }
        case OpKind::concat_channel: {
          auto [da, db] =
              ops::concat_channel_backward(values_[in[0]].shape(), values_[in[1]].shape(), dy);
          accumulate(in[0], std::move(da));
          accumulate(in[1], std::move(db));
          break;
        }
        case OpKind::mul_broadcast: {
          auto [dx, dw] = ops::mul_broadcast_backward(values_[in[0]], values_[in[1]], dy);
          accumulate(in[0], std::move(dx));
          accumulate(in[1], std::move(dw));
          break;
        }
        case OpKind::add:
          accumulate(in[0], dy);
          accumulate(in[1], dy);
          accumulate(in[2], dy);
          break;
        case OpKind::dropout: {
          if (!r.mask) {
            accumulate(in[0], dy);
          } else {
            Tensor<T> dx(dy.shape());
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = dy[i] * (*r.mask)[i];
            accumulate(in[0], std::move(dx));
          }
          break;
        }
        case OpKind::subsample2:
          accumulate(in[0], ops::subsample2_backward(values_[in[0]].shape(), dy));
          break;
      }
    }

    std::vector<Shape> shapes;
    shapes.reserve(values_.size());
    for (const auto& v : values_) shapes.push_back(v.shape());
    return Gradients<T>(std::move(grads), params_, std::move(shapes));
  }

 private:
  Var push(Tensor<T> t) {
    if (consumed_) throw StateError("tape already consumed by a previous backward pass");
    values_.push_back(std::move(t));
    return Var{values_.size() - 1};
  }

  Var unary(OpKind op, Var x, Tensor<T> y) {
    Var out = push(std::move(y));
    if (record_) records_.push_back(GradRecord<T>{op, {x.id}, out.id});
    return out;
  }

  bool record_;
  bool consumed_ = false;
  std::deque<Tensor<T>> values_;  // deque keeps references stable across push
  std::vector<GradRecord<T>> records_;
  std::unordered_map<const void*, std::size_t> params_;
};

}  // namespace spci
