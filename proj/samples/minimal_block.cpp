// SPDX-License-Identifier: Apache-2.0
//
// Runs one seeded SPCI block on a random feature map and prints the range of
// each attention map.

#include <algorithm>
#include <cstdio>

#include "spci/random.hpp"
#include "spci/spci.hpp"

int main() {
  using namespace spci;
  SpciParams<float> block = init_spci<float>(16, 16, kDefaultReduction, kDefaultDropout, 42);

  Tensor<float> x(Shape{2, 16, 20, 20});
  Rng rng(7);
  for (auto& v : x.data()) v = static_cast<float>(rng.normal());

  const SpciResult<float> r = spci_forward(x, block, Mode::eval, 0);
  auto range = [](const char* name, const Tensor<float>& t) {
    const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
    std::printf("%-4s %s  [%.4f, %.4f]\n", name, t.shape().str().c_str(), *lo, *hi);
  };
  range("w_s", *r.w_s);
  range("w_p", *r.w_p);
  range("w_c", *r.w_c);
  range("out", r.out);
  return 0;
}
