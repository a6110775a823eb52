// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "spci/autograd.hpp"
#include "spci/random.hpp"
#include "spci/spci.hpp"
#include "spci/verification/oracle.hpp"

namespace spci::verify {

// Central differences (f(theta+h) - f(theta-h)) / 2h for every coordinate of
// theta. theta is restored bit-exactly after each probe.
template <typename F>
std::vector<double> finite_diff_grad(F&& f, std::span<double> theta, double h) {
  std::vector<double> g(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    theta[i] = saved + h;
    const double fp = f();
    theta[i] = saved - h;
    const double fm = f();
    theta[i] = saved;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

struct ParamCheck {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

struct GradCheckReport {
  double step = 1e-4;
  double tolerance = 1e-4;
  double kink_margin = 0.0;
  std::vector<ParamCheck> params;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& p : params) m = std::max(m, p.max_rel_error);
    return m;
  }
  bool pass() const { return max_rel_error() < tolerance; }

  void write(std::ostream& os) const {
    os << "step " << step << '\n' << "tolerance " << tolerance << '\n';
    os << "kink_margin " << kink_margin << '\n';
    for (const auto& p : params) {
      os << "param." << p.name << ".count " << p.count << '\n';
      os << "param." << p.name << ".max_rel_error " << p.max_rel_error << '\n';
      os << "param." << p.name << ".worst_index " << p.worst_index << '\n';
    }
    os << "max_rel_error " << max_rel_error() << '\n';
    os << "pass " << (pass() ? 1 : 0) << '\n';
  }
};

inline ParamCheck compare_gradients(const std::string& name, std::span<const double> analytic,
                                    std::span<const double> numeric) {
  ParamCheck c{name, analytic.size()};
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = rel_error(analytic[i], numeric[i]);
    if (e > c.max_rel_error || i == 0) {
      c.max_rel_error = e;
      c.worst_index = i;
      c.analytic_at_worst = analytic[i];
      c.numeric_at_worst = numeric[i];
    }
  }
  return c;
}

// Distance of the current test point from the non-differentiable set: the
// smallest |t| over relu inputs and the smallest top-1/top-2 gap over max
// pooling windows. Computed from a recording tape after a forward pass.
template <typename T>
double kink_margin(const Tape<T>& tape) {
  double margin = std::numeric_limits<double>::infinity();
  for (const auto& r : tape.records()) {
    const Tensor<T>& x = tape.value(Var{r.inputs[0]});
    if (r.op == OpKind::relu) {
      for (auto v : x.data()) margin = std::min(margin, std::abs(static_cast<double>(v)));
    } else if (r.op == OpKind::pool && r.pool_mode == ops::PoolMode::max) {
      const bool channel = r.pool_axis == ops::PoolAxis::channel;
      const std::size_t outer = channel ? x.n() * x.plane() : x.n() * x.c();
      const std::size_t len = channel ? x.c() : x.plane();
      for (std::size_t o = 0; o < outer; ++o) {
        double a = -INFINITY, b = -INFINITY;
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t idx = channel ? ((o / x.plane()) * x.c() + k) * x.plane() +
                                                o % x.plane()
                                          : o * x.plane() + k;
          const double v = x[idx];
          if (v > a) {
            b = a;
            a = v;
          } else if (v > b) {
            b = v;
          }
        }
        if (len > 1) margin = std::min(margin, a - b);
      }
    }
  }
  return margin;
}

// Gradient check of the full block under loss = sum(out), in eval mode
// unless told otherwise. Every trainable parameter and the input are probed.
inline GradCheckReport gradcheck_spci(SpciParams<double>& params, const Tensor<double>& input,
                                      double h = 1e-4, double tolerance = 1e-4,
                                      Mode mode = Mode::eval, std::uint64_t seed = 0) {
  GradCheckReport report;
  report.step = h;
  report.tolerance = tolerance;

  Tensor<double> x = input;
  auto loss = [&]() {
    // Running statistics only change in train mode and are not read there.
    Tape<double> tape(false);
    const SpciVars v = spci_forward(tape, tape.input(x), params, mode, seed);
    double s = 0.0;
    for (double o : tape.value(v.out).data()) s += o;
    return s;
  };

  Tape<double> tape;
  const Var xv = tape.input(x);
  const SpciVars v = spci_forward(tape, xv, params, mode, seed);
  report.kink_margin = kink_margin(tape);
  const Tensor<double> ones(tape.value(v.out).shape(), 1.0);
  const Gradients<double> grads = tape.backward(v.out, ones);

  {
    const Tensor<double> a = grads.wrt(xv);
    const auto n = finite_diff_grad(loss, x.data(), h);
    report.params.push_back(compare_gradients("input", a.data(), n));
  }
  visit_params(params, [&](const std::string& name, Tensor<double>& t, bool trainable) {
    if (!trainable || !grads.has(t)) return;
    const Tensor<double> a = grads.wrt(t);
    const auto n = finite_diff_grad(loss, t.data(), h);
    report.params.push_back(compare_gradients(name, a.data(), n));
  });
  return report;
}

// Draws inputs from N(0,1) until the test point sits at least `margin` away
// from every relu kink and max-pool tie. Returns the input and its seed.
inline std::pair<Tensor<double>, std::uint64_t> smooth_test_point(SpciParams<double>& params,
                                                                  const Shape& shape,
                                                                  std::uint64_t seed,
                                                                  double margin = 1e-3,
                                                                  int attempts = 1000) {
  for (int a = 0; a < attempts; ++a) {
    const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(a));
    Rng rng(s);
    Tensor<double> x(shape);
    for (auto& v : x.data()) v = rng.normal();
    Tape<double> tape;
    spci_forward(tape, tape.input(x), params, Mode::eval, 0);
    if (kink_margin(tape) >= margin) return {x, s};
  }
  throw StateError("no test point found away from relu kinks");
}

}  // namespace spci::verify
