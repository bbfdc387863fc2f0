#pragma once

#include <cmath>
#include <vector>

#include "ensldm/rng.hpp"
#include "ensldm/tensor.hpp"

namespace testutil {

template <class T>
ensldm::Tensor<T> random_tensor(std::vector<int> shape, ensldm::Rng& rng, double scale = 1.0) {
  ensldm::Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(scale * rng.gaussian());
  return t;
}

inline double rel_err(double a, double b) {
  double m = std::max(std::abs(a), std::abs(b));
  return m > 0 ? std::abs(a - b) / m : 0.0;
}

template <class T>
double max_abs_diff(const ensldm::Tensor<T>& a, const ensldm::Tensor<T>& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  }
  return m;
}

template <class T>
bool bitwise_equal(const ensldm::Tensor<T>& a, const ensldm::Tensor<T>& b) {
  if (!a.same_shape(b)) return false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace testutil
