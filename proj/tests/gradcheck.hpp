#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "asac/tensor.hpp"

namespace asac::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Largest relative error between analytic and central-difference gradients of
/// the scalar f over every element of every input. Relative error is
/// |a - n| / max(1, |a|, |n|), so tiny gradients are compared absolutely.
inline double gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    analytic.emplace_back(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      double up, down;
      {
        NoGradGuard g;
        up = f().item();
        data[i] = saved - h;
        down = f().item();
      }
      data[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
    }
  }
  return worst;
}

}  // namespace asac::testing
