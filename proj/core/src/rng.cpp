#include "gatsbi/rng.hpp"

#include <numeric>

namespace gatsbi {

RandomSource::RandomSource(uint64_t seed) : seed_(seed), gen_(at::detail::createCPUGenerator(seed)) {}

torch::Tensor RandomSource::normal(torch::IntArrayRef shape, torch::Dtype dtype) {
    return torch::randn(shape, gen_, torch::TensorOptions().dtype(dtype));
}

torch::Tensor RandomSource::uniform(torch::IntArrayRef shape, torch::Dtype dtype) {
    return torch::rand(shape, gen_, torch::TensorOptions().dtype(dtype));
}

int64_t RandomSource::randint(int64_t lo, int64_t hi) {
    require(lo < hi, "randint needs lo < hi");
    return torch::randint(lo, hi, {1}, gen_, torch::TensorOptions().dtype(torch::kInt64)).item<int64_t>();
}

std::vector<int64_t> RandomSource::permutation(int64_t n) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    for (int64_t i = n - 1; i > 0; --i) {
        int64_t j = randint(0, i + 1);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    return idx;
}

RandomSource RandomSource::fork(uint64_t stream) const {
    return RandomSource(derive_seed(seed_, stream));
}

}  // namespace gatsbi
