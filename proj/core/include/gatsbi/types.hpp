#pragma once

#include <string>

#include <torch/torch.h>

#include "gatsbi/common.hpp"

namespace gatsbi {

inline constexpr double kLogStdMin = -10.0;
inline constexpr double kLogStdMax = 3.0;

/// Diagonal Gaussian over a latent. Mean and log-std share one shape; the
/// log-std is clamped at construction so downstream KLs stay finite.
struct GaussianLatent {
    torch::Tensor mean;
    torch::Tensor log_std;

    GaussianLatent() = default;
    GaussianLatent(torch::Tensor mean_, torch::Tensor log_std_raw)
        : mean(std::move(mean_)), log_std(log_std_raw.clamp(kLogStdMin, kLogStdMax)) {
        if (!mean.sizes().equals(log_std.sizes()))
            throw InvariantError("GaussianLatent mean/log_std shapes differ");
    }

    torch::Tensor std() const { return log_std.exp(); }
    bool defined() const { return mean.defined(); }
};

/// Hidden and cell state of one gated recurrent cell.
struct RecurrentState {
    torch::Tensor hidden;
    torch::Tensor cell;

    static RecurrentState zeros(int64_t batch, int64_t dim, torch::Dtype dtype) {
        auto opts = torch::TensorOptions().dtype(dtype);
        return {torch::zeros({batch, dim}, opts), torch::zeros({batch, dim}, opts)};
    }
    bool defined() const { return hidden.defined(); }
};

/// One training/evaluation unit: T frames plus T action vectors.
struct Episode {
    torch::Tensor frames;   // [T, 3, H, W] in [0, 1]
    torch::Tensor actions;  // [T, A]
    std::string id;

    int64_t length() const { return frames.defined() ? frames.size(0) : 0; }
    void validate() const;
};

/// Writes entries "frames" and "actions" (plus any extras) to one container.
void save_episode(const std::string& path, const Episode& episode,
                  const std::map<std::string, torch::Tensor>& extras = {});

/// Loads an episode, clamping frames into [0,1] at the I/O boundary.
Episode load_episode(const std::string& path);

}  // namespace gatsbi
