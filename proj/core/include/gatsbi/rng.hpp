#pragma once

#include <torch/torch.h>

#include "gatsbi/common.hpp"

namespace gatsbi {

/// Seeded source of tensor-valued draws. Every stochastic operation in the
/// library draws through one of these; nothing touches global RNG state, so
/// equal seeds give bit-identical runs.
class RandomSource {
  public:
    explicit RandomSource(uint64_t seed);

    /// Standard normal draws.
    torch::Tensor normal(torch::IntArrayRef shape, torch::Dtype dtype = torch::kFloat32);
    /// Uniform draws in [0, 1).
    torch::Tensor uniform(torch::IntArrayRef shape, torch::Dtype dtype = torch::kFloat32);
    /// Uniform integer draws in [lo, hi).
    int64_t randint(int64_t lo, int64_t hi);
    /// Fisher-Yates permutation of [0, n).
    std::vector<int64_t> permutation(int64_t n);

    /// Independent child stream; children with distinct ids never correlate.
    RandomSource fork(uint64_t stream) const;

    uint64_t seed() const { return seed_; }

  private:
    uint64_t seed_;
    at::Generator gen_;
};

}  // namespace gatsbi
