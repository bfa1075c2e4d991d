#pragma once

#include <vector>

#include <torch/torch.h>

#include "gatsbi/config.hpp"
#include "gatsbi/rng.hpp"
#include "gatsbi/types.hpp"

namespace gatsbi {

/// KL(q ‖ p) between diagonal Gaussians, summed over the last dimension.
/// Shapes must match exactly; leading dimensions are preserved.
torch::Tensor kl_diag_gaussian(const GaussianLatent& q, const GaussianLatent& p);

/// Reparameterized draw: mean + std ⊙ ε with ε ~ N(0, I) from rng.
torch::Tensor reparam_sample(const GaussianLatent& g, RandomSource& rng);

/// Negative log-likelihood of x under N(mu, sigma²·I), summed over all elements.
torch::Tensor gaussian_nll(const torch::Tensor& x, const torch::Tensor& mu, double sigma);

/// As gaussian_nll but summed per batch element: [B, ...] -> [B].
torch::Tensor gaussian_nll_per_sample(const torch::Tensor& x, const torch::Tensor& mu, double sigma);

/// Fully-connected stack with CELU hidden activations and a linear output.
torch::nn::Sequential make_mlp(int64_t in_dim, const std::vector<int64_t>& hidden, int64_t out_dim);

/// Group count giving ~16 channels per group (all our widths divide evenly).
int64_t norm_groups(int64_t channels);

/// Feature → (mean, log_std) head; the log-std is clamped by GaussianLatent.
struct GaussianHeadImpl : torch::nn::Module {
    GaussianHeadImpl(int64_t in_dim, int64_t out_dim);
    GaussianLatent forward(const torch::Tensor& feat);

    torch::nn::Linear proj{nullptr};
    int64_t out_dim;
};
TORCH_MODULE(GaussianHead);

/// One gated recurrent history cell: state' = LSTM([z_prev, frame_code], state).
struct SSMCellImpl : torch::nn::Module {
    SSMCellImpl(int64_t z_dim, int64_t code_dim, int64_t hidden_dim);
    RecurrentState update(const torch::Tensor& z_prev, const torch::Tensor& frame_code,
                          const RecurrentState& prev);
    RecurrentState initial_state(int64_t batch, torch::Dtype dtype) const {
        return RecurrentState::zeros(batch, hidden_dim, dtype);
    }

    torch::nn::LSTMCell cell{nullptr};
    int64_t z_dim, code_dim, hidden_dim;
};
TORCH_MODULE(SSMCell);

/// Lifts raw actions to the shared enhanced-action embedding.
struct ActionEnhancerImpl : torch::nn::Module {
    ActionEnhancerImpl(int64_t action_dim, int64_t hidden, int64_t out_dim);
    torch::Tensor forward(const torch::Tensor& action);  // [B, A] -> [B, out]

    torch::nn::Sequential net{nullptr};
    int64_t action_dim, out_dim;
};
TORCH_MODULE(ActionEnhancer);

/// Stride-2 conv ladder (7×7 stem, then 3×3) down to 1/16 resolution,
/// flattened into a fixed-size code.
struct FrameEncoderImpl : torch::nn::Module {
    FrameEncoderImpl(int64_t in_ch, const std::vector<int64_t>& channels, int64_t image_hw,
                     int64_t code_dim);
    torch::Tensor forward(const torch::Tensor& img);  // [B, C, H, W] -> [B, code]

    torch::nn::Sequential trunk{nullptr};
    torch::nn::Linear head{nullptr};
    int64_t in_ch, code_dim;
};
TORCH_MODULE(FrameEncoder);

/// Generic stride-2 conv ladder (3×3 kernels), one stage per channel entry,
/// flattened into a fixed-size code. Image size must divide by 2^stages.
struct ConvEncoderImpl : torch::nn::Module {
    ConvEncoderImpl(int64_t in_ch, const std::vector<int64_t>& channels, int64_t image_hw,
                    int64_t code_dim);
    torch::Tensor forward(const torch::Tensor& img);  // [B, C, H, W] -> [B, code]

    torch::nn::Sequential trunk{nullptr};
    torch::nn::Linear head{nullptr};
    int64_t in_ch, code_dim;
};
TORCH_MODULE(ConvEncoder);

/// Latent → full-resolution map through sub-pixel (pixel-shuffle) upsampling.
struct SubPixelDecoderImpl : torch::nn::Module {
    SubPixelDecoderImpl(int64_t latent_dim, const std::vector<int64_t>& channels, int64_t out_hw,
                        int64_t out_ch);
    torch::Tensor forward(const torch::Tensor& z);  // [B, L] -> [B, out_ch, H, W]

    static std::vector<int64_t> upsample_factors(int64_t out_hw);

    torch::nn::Sequential net{nullptr};
    int64_t latent_dim, out_hw, out_ch;
};
TORCH_MODULE(SubPixelDecoder);

/// Spatial-broadcast decoder: latent tiled over a grid with two linear
/// coordinate channels in [-1,1], convolved at constant resolution, then
/// bilinearly resized to the target size when broadcast happens coarser.
struct BroadcastDecoderImpl : torch::nn::Module {
    BroadcastDecoderImpl(int64_t latent_dim, int64_t channels, int64_t out_hw, int64_t broadcast_hw,
                         int64_t out_ch);
    torch::Tensor forward(const torch::Tensor& z);

    /// The [2, broadcast_hw, broadcast_hw] coordinate grid (for tests).
    torch::Tensor coord_grid(torch::Dtype dtype) const;

    torch::nn::Sequential net{nullptr};
    int64_t latent_dim, out_hw, broadcast_hw, out_ch;
};
TORCH_MODULE(BroadcastDecoder);

/// Deterministic re-initialization of every parameter from the given stream:
/// matrices get fan-in-scaled normals, norm scales 1, biases 0. Parameters are
/// visited in name order so the result is independent of registration order.
void reinit_parameters(torch::nn::Module& module, RandomSource& rng);

}  // namespace gatsbi
