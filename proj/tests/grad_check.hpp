#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include <gatsbi/rng.hpp>

namespace gatsbi::testing {

/// Central finite-difference gradient of `loss_fn` w.r.t. elements of
/// `leaves`, compared against autograd. Returns the max relative error, with
/// the denominator floored to avoid blowing up near-zero gradients. When
/// `max_checks > 0` and the leaves hold more elements than that, a random
/// subsample of elements is checked (spread across all leaves).
///
/// Differences below the finite-difference resolution are ignored: each loss
/// evaluation carries ~eps·|L| of rounding error, so the FD quotient is only
/// reliable down to ~eps·|L|/step. Real gradient defects (wrong term, wrong
/// sign, missing path) sit orders of magnitude above that floor.
inline double max_grad_rel_err(const std::vector<torch::Tensor>& leaves,
                               const std::function<torch::Tensor()>& loss_fn, double step = 1e-5,
                               int64_t max_checks = 0, uint64_t sample_seed = 1) {
    torch::Tensor loss = loss_fn();
    for (const auto& l : leaves)
        if (l.grad().defined()) l.mutable_grad().zero_();
    loss.backward();
    const double atol =
        std::max(1e-6, 1e-8 * std::abs(loss.item<double>()) * (1e-5 / step));

    int64_t total = 0;
    for (const auto& leaf : leaves) total += leaf.numel();
    std::vector<int64_t> picked;
    if (max_checks > 0 && total > max_checks) {
        RandomSource rng(sample_seed);
        std::vector<int64_t> perm = rng.permutation(total);
        picked.assign(perm.begin(), perm.begin() + max_checks);
        std::sort(picked.begin(), picked.end());
    }

    double worst = 0.0;
    int64_t base = 0;
    size_t pick_at = 0;
    for (const auto& leaf : leaves) {
        torch::Tensor grad = leaf.grad();
        torch::Tensor flat = leaf.detach().view(-1);
        torch::Tensor gflat = grad.defined() ? grad.view(-1) : torch::zeros_like(flat);
        for (int64_t i = 0; i < flat.numel(); ++i) {
            if (!picked.empty()) {
                if (pick_at >= picked.size() || picked[pick_at] != base + i) continue;
                ++pick_at;
            }
            double orig = flat[i].item<double>();
            double fd;
            {
                torch::NoGradGuard ng;
                flat[i] = orig + step;
                double up = loss_fn().item<double>();
                flat[i] = orig - step;
                double down = loss_fn().item<double>();
                flat[i] = orig;
                fd = (up - down) / (2.0 * step);
            }
            double ad = gflat[i].item<double>();
            double diff = std::max(0.0, std::abs(fd - ad) - atol);
            double denom = std::max({std::abs(fd), std::abs(ad), 1e-6});
            worst = std::max(worst, diff / denom);
        }
        base += flat.numel();
    }
    return worst;
}

}  // namespace gatsbi::testing
