// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient oracle. Independent of the tape: evaluates a
// scalar function twice per coordinate with central differences. Meant to
// run in double precision, where the truncation plus rounding error at
// h = 1e-5 sits far below the comparison tolerances used in the tests.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "egotr/tensor.hpp"

namespace egotr {

// Central-difference gradient of f at x, one coordinate at a time.
// f is called with x temporarily perturbed in place; x is restored bitwise.
template <typename T, typename F>
std::vector<T> finite_diff_grad(F&& f, Tensor<T>& x, T h = T(1e-5)) {
  std::vector<T> g(x.numel());
  auto d = x.data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const T keep = d[i];
    d[i] = keep + h;
    const T fp = f(std::as_const(x));
    d[i] = keep - h;
    const T fm = f(std::as_const(x));
    d[i] = keep;
    g[i] = (fp - fm) / (T(2) * h);
  }
  return g;
}

// Largest relative error between two gradient vectors. The denominator is
// floored so that coordinates whose true magnitude sits below the floor
// (where the finite-difference estimate itself is unreliable) are compared
// absolutely against the floor instead of blowing up the ratio.
template <typename T>
T max_rel_err(std::span<const T> a, std::span<const T> b,
              T floor = T(1e-4)) {
  T worst = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T ma = std::abs(a[i]), mb = std::abs(b[i]);
    T den = ma > mb ? ma : mb;
    if (den < floor) den = floor;
    const T e = std::abs(a[i] - b[i]) / den;
    worst = e > worst ? e : worst;
  }
  return worst;
}

}  // namespace egotr
