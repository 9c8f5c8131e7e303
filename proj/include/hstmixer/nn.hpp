#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hstmixer/ops.hpp"
#include "hstmixer/tensor.hpp"

namespace hstmixer {

using Rng = std::mt19937_64;

template <typename S>
using ParameterList = std::vector<std::pair<std::string, Tensor<S>>>;

// Xavier-uniform for a [fan_in, fan_out] weight.
template <typename S>
Tensor<S> xavier_uniform(Index fan_in, Index fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / double(fan_in + fan_out));
  return Tensor<S>::randu({fan_in, fan_out}, rng, -a, a).set_requires_grad();
}

template <typename S>
Tensor<S> gaussian_param(Shape shape, double stddev, Rng& rng) {
  return Tensor<S>::randn(std::move(shape), rng, stddev).set_requires_grad();
}

template <typename S>
Tensor<S> zeros_param(Shape shape) {
  return Tensor<S>::zeros(std::move(shape)).set_requires_grad();
}

template <typename S>
Tensor<S> ones_param(Shape shape) {
  return Tensor<S>::full(std::move(shape), S(1)).set_requires_grad();
}

// Affine map y = x W + b, with W [in, out] Xavier-initialized and b zero.
template <typename S>
struct Linear {
  Tensor<S> weight, bias;

  Linear() = default;
  Linear(Index in, Index out, Rng& rng)
      : weight(xavier_uniform<S>(in, out, rng)), bias(zeros_param<S>({out})) {}

  Tensor<S> operator()(const Tensor<S>& x) const {
    return linear(x, weight, bias);
  }

  void collect(const std::string& prefix, ParameterList<S>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

// Applies an affine map along an arbitrary axis by rotating it to the back.
template <typename S>
Tensor<S> linear_along(const Tensor<S>& x, Index axis, const Linear<S>& fc) {
  const Index rank = x.rank();
  if (axis < 0) axis += rank;
  if (axis == rank - 1) return fc(x);
  std::vector<Index> perm;
  for (Index k = 0; k < rank; ++k)
    if (k != axis) perm.push_back(k);
  perm.push_back(axis);
  Tensor<S> y = fc(permute(x, perm));
  std::vector<Index> inv(rank);
  for (Index k = 0; k < rank; ++k) inv[perm[k]] = k;
  return permute(y, inv);
}

}  // namespace hstmixer
