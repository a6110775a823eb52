// SPDX-License-Identifier: Apache-2.0
//
// Closed-form parameter and operation counting.
//
// Conventions: conv params = C_out*C_in*k^2 (+ C_out with bias); conv MACs =
// C_out*C_in*k^2*H_out*W_out per batch item; FLOPs = 2*MACs. Batch norm holds
// 4C params (gamma, beta, running mean, running var). Pooling, activations,
// batch norm, broadcast multiply and the fusion add count as one elementwise
// op per output element and are reported separately from FLOPs. Disabled SPCI
// submodules are not counted.
#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "spci/backbone.hpp"
#include "spci/layers.hpp"
#include "spci/spci.hpp"
#include "spci/tensor.hpp"

namespace spci::verify {

struct CostEntry {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t elementwise_ops = 0;
};

struct CostReport {
  std::vector<CostEntry> entries;

  std::uint64_t total_params() const {
    std::uint64_t s = 0;
    for (const auto& e : entries) s += e.params;
    return s;
  }
  std::uint64_t total_macs() const {
    std::uint64_t s = 0;
    for (const auto& e : entries) s += e.macs;
    return s;
  }
  std::uint64_t total_flops() const { return 2 * total_macs(); }
  std::uint64_t total_elementwise_ops() const {
    std::uint64_t s = 0;
    for (const auto& e : entries) s += e.elementwise_ops;
    return s;
  }

  void append(const CostReport& other) {
    entries.insert(entries.end(), other.entries.begin(), other.entries.end());
  }

  void write(std::ostream& os) const {
    os << "convention flops=2*macs\n";
    for (const auto& e : entries) {
      if (e.params) os << "layer." << e.name << ".params " << e.params << '\n';
      if (e.macs) os << "layer." << e.name << ".macs " << e.macs << '\n';
      if (e.elementwise_ops) os << "layer." << e.name << ".elementwise_ops " << e.elementwise_ops << '\n';
    }
    os << "total.params " << total_params() << '\n'
       << "total.macs " << total_macs() << '\n'
       << "total.flops " << total_flops() << '\n'
       << "total.elementwise_ops " << total_elementwise_ops() << '\n';
  }
};

template <typename T>
CostEntry count_conv(const std::string& name, const ConvLayer<T>& conv, std::size_t n,
                     std::size_t h_out, std::size_t w_out) {
  const std::uint64_t k2 = conv.kernel() * conv.kernel();
  const std::uint64_t per_pixel = conv.c_out() * conv.c_in() * k2;
  return {name, per_pixel + (conv.use_bias ? conv.c_out() : 0),
          per_pixel * n * h_out * w_out, 0};
}

template <typename T>
CostReport count_cost(const ConvLayer<T>& conv, const Shape& input) {
  return CostReport{{count_conv("conv", conv, input.n, input.h, input.w)}};
}

template <typename T>
CostReport count_cost(const SpciParams<T>& p, const Shape& input, const std::string& prefix = "") {
  const std::uint64_t N = input.n, HW = input.h * input.w;
  const std::uint64_t Cin = p.c_in(), C = p.c_out();
  CostReport r;
  auto ew = [&](const std::string& name, std::uint64_t ops) {
    r.entries.push_back({prefix + name, 0, 0, ops});
  };
  if (p.flags.ssg) {
    const std::uint64_t mid = p.ssg.conv1.c_out();
    ew("ssg.gap", N * Cin);
    r.entries.push_back(count_conv(prefix + "ssg.conv1", p.ssg.conv1, N, 1, 1));
    ew("ssg.relu", N * mid);
    r.entries.push_back(count_conv(prefix + "ssg.conv2", p.ssg.conv2, N, 1, 1));
    ew("ssg.sigmoid", N * Cin);
    ew("ssg.mul", N * Cin * HW);
  }
  r.entries.push_back(count_conv(prefix + "transform", p.transform, N, input.h, input.w));
  if (p.flags.pfm) {
    ew("pfm.avgpool", N * HW);
    ew("pfm.maxpool", N * HW);
    r.entries.push_back(count_conv(prefix + "pfm.conv7", p.pfm.conv7, N, input.h, input.w));
    ew("pfm.sigmoid", N * HW);
    ew("pfm.mul", N * C * HW);
  }
  if (p.flags.cdm) {
    const std::uint64_t mid = p.cdm.mid_channels();
    r.entries.push_back(count_conv(prefix + "cdm.conv1", p.cdm.conv1, N, input.h, input.w));
    r.entries.push_back({prefix + "cdm.bn1", 4 * mid, 0, N * mid * HW});
    ew("cdm.relu1", N * mid * HW);
    r.entries.push_back(count_conv(prefix + "cdm.conv2", p.cdm.conv2, N, input.h, input.w));
    r.entries.push_back({prefix + "cdm.bn2", 4 * mid, 0, N * mid * HW});
    ew("cdm.relu2", N * mid * HW);
    r.entries.push_back(count_conv(prefix + "cdm.conv3", p.cdm.conv3, N, input.h, input.w));
    ew("cdm.sigmoid", N * C * HW);
    ew("cdm.mul", N * C * HW);
  }
  ew("fusion.add", N * C * HW);
  return r;
}

// Stage convolutions are counted at their stride-2 output resolution.
template <typename T>
CostReport count_cost(const Backbone<T>& b, std::size_t batch = 1) {
  CostReport r;
  std::size_t h = b.config.input_h, w = b.config.input_w;
  for (std::size_t k = 0; k < b.stages.size(); ++k) {
    h /= 2;
    w /= 2;
    const std::string name = "stage" + std::to_string(k + 1);
    r.entries.push_back(count_conv(name + ".conv", b.stages[k], batch, h, w));
    r.entries.push_back({name + ".relu", 0, 0, batch * b.stages[k].c_out() * h * w});
    const int stage = static_cast<int>(k + 1);
    if (auto it = b.blocks.find(stage); it != b.blocks.end()) {
      r.append(count_cost(it->second, Shape{batch, b.stages[k].c_out(), h, w},
                          "spci_p" + std::to_string(stage) + "."));
    }
  }
  return r;
}

}  // namespace spci::verify
