// SPDX-License-Identifier: Apache-2.0
//
// End-to-end learnability check: a two-stage conv chain, one SPCI block,
// global average pooling and a linear head, trained with softmax
// cross-entropy and plain SGD on four synthetic 16x16 classes.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "spci/autograd.hpp"
#include "spci/layers.hpp"
#include "spci/random.hpp"
#include "spci/spci.hpp"
#include "spci/tensor.hpp"

namespace spci {

struct TrainToyConfig {
  std::size_t steps = 200;
  double lr = 0.05;
  std::size_t batch = 8;
  std::uint64_t seed = 0;
  double noise = 0.25;
  SpciFlags flags;
  Modes modes{Mode::train, Mode::train};
};

struct TrainToyResult {
  std::vector<double> losses;
  bool diverged = false;

  double initial_loss() const { return losses.front(); }
  double final_loss() const { return losses.back(); }

  // One "step loss" line per step; %.17g so the file is a bit-exact record.
  void write(std::ostream& os) const {
    char buf[64];
    for (std::size_t i = 0; i < losses.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu %.17g\n", i, losses[i]);
      os << buf;
    }
  }
};

// Class k lights up quadrant k of a 16x16 image; pixels carry N(0, noise^2).
// Labels cycle 0..3 so every batch is class balanced.
inline std::pair<Tensor<float>, std::vector<std::size_t>> make_toy_batch(std::size_t batch,
                                                                        double noise,
                                                                        std::uint64_t seed) {
  constexpr std::size_t kSide = 16, kHalf = kSide / 2;
  Tensor<float> x(Shape{batch, 1, kSide, kSide});
  std::vector<std::size_t> labels(batch);
  Rng rng(seed);
  for (std::size_t n = 0; n < batch; ++n) {
    const std::size_t k = n % 4;
    labels[n] = k;
    const std::size_t r0 = (k / 2) * kHalf, c0 = (k % 2) * kHalf;
    for (std::size_t i = 0; i < kSide; ++i) {
      for (std::size_t j = 0; j < kSide; ++j) {
        const bool lit = i >= r0 && i < r0 + kHalf && j >= c0 && j < c0 + kHalf;
        x.at(n, 0, i, j) = static_cast<float>((lit ? 1.0 : 0.0) + noise * rng.normal());
      }
    }
  }
  return {x, labels};
}

struct ToyModel {
  ConvLayer<float> stage1;  // 1 -> 8, stride 2
  ConvLayer<float> stage2;  // 8 -> 16, stride 2
  SpciParams<float> block;  // 16 -> 16
  ConvLayer<float> head;    // 1x1, 16 -> 4, acts as the linear layer

  template <typename Fn>
  void visit(Fn&& fn) {
    visit_conv("stage1", stage1, fn);
    visit_conv("stage2", stage2, fn);
    visit_params(block, fn, "spci.");
    visit_conv("head", head, fn);
  }
};

inline ToyModel make_toy_model(std::uint64_t seed, const SpciFlags& flags) {
  ToyModel m;
  Rng rng(derive_seed(seed, 1));
  m.stage1 = ConvLayer<float>(1, 8, 3);
  m.stage1.init_uniform(rng);
  m.stage2 = ConvLayer<float>(8, 16, 3);
  m.stage2.init_uniform(rng);
  m.head = ConvLayer<float>(16, 4, 1);
  m.head.init_uniform(rng);
  m.block = init_spci<float>(16, 16, kDefaultReduction, kDefaultDropout, derive_seed(seed, 2));
  m.block.flags = flags;
  return m;
}

// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
inline double softmax_xent(const Tensor<float>& logits, const std::vector<std::size_t>& labels,
                           Tensor<float>& dlogits) {
  const std::size_t B = logits.n(), K = logits.c();
  dlogits = Tensor<float>(logits.shape());
  double loss = 0.0;
  for (std::size_t n = 0; n < B; ++n) {
    double m = logits.at(n, 0, 0, 0);
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, double(logits.at(n, k, 0, 0)));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logits.at(n, k, 0, 0) - m);
    for (std::size_t k = 0; k < K; ++k) {
      const double p = std::exp(logits.at(n, k, 0, 0) - m) / z;
      dlogits.at(n, k, 0, 0) =
          static_cast<float>((p - (k == labels[n] ? 1.0 : 0.0)) / static_cast<double>(B));
    }
    loss += -(logits.at(n, labels[n], 0, 0) - m - std::log(z));
  }
  return loss / static_cast<double>(B);
}

// Full-batch training on one fixed batch. The dropout mask seed is fixed per
// run, so with lr = 0 every step sees the same function and the same loss.
inline TrainToyResult train_toy(const TrainToyConfig& cfg) {
  if (cfg.batch == 0 || cfg.steps == 0) throw ConfigError("train-toy needs positive batch and steps");
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("learning rate must be >= 0");
  ToyModel model = make_toy_model(cfg.seed, cfg.flags);
  const auto [x, labels] = make_toy_batch(cfg.batch, cfg.noise, derive_seed(cfg.seed, 3));
  const std::uint64_t dropout_seed = derive_seed(cfg.seed, 4);

  TrainToyResult result;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tape<float> tape;
    Var h = tape.input(x);
    h = tape.relu(tape.subsample2(tape.conv2d(h, model.stage1)));
    h = tape.relu(tape.subsample2(tape.conv2d(h, model.stage2)));
    h = spci_forward(tape, h, model.block, cfg.modes, dropout_seed).out;
    h = tape.pool(h, ops::PoolMode::avg, ops::PoolAxis::spatial);
    const Var logits = tape.conv2d(h, model.head);

    Tensor<float> dlogits;
    const double loss = softmax_xent(tape.value(logits), labels, dlogits);
    result.losses.push_back(loss);
    if (!std::isfinite(loss) || loss > 10.0 * result.losses.front()) {
      result.diverged = true;
      return result;
    }
    const Gradients<float> grads = tape.backward(logits, dlogits);
    model.visit([&](const std::string&, Tensor<float>& t, bool trainable) {
      if (!trainable || !grads.has(t)) return;
      const Tensor<float> g = grads.wrt(t);
      for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = static_cast<float>(t[i] - cfg.lr * g[i]);
      }
    });
  }
  return result;
}

}  // namespace spci
