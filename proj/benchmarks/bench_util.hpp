#pragma once

#include <random>

#include "deepcsp/tensor.hpp"

namespace deepcsp::bench {

inline Tensor gaussian(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline Tensor spd(std::size_t d, std::uint64_t seed) {
  const Tensor g = gaussian({d, 2 * d}, seed);
  Tensor a = (0.5 / static_cast<double>(d)) * matmul(g, transpose(g));
  for (std::size_t i = 0; i < d; ++i) a(i, i) += 0.1;
  return a;
}

}  // namespace deepcsp::bench
