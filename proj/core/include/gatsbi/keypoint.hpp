#pragma once

#include <string>
#include <utility>

#include <torch/torch.h>

#include "gatsbi/config.hpp"
#include "gatsbi/mixture.hpp"
#include "gatsbi/nets.hpp"
#include "gatsbi/rng.hpp"
#include "gatsbi/types.hpp"

namespace gatsbi {

/// Width of the rendered keypoint blobs, in [-1,1] grid coordinates.
inline constexpr double kBlobSigma = 0.15;
/// Length scale of the keypoint separation penalty, same coordinates.
inline constexpr double kSepSigma = 0.1;

/// One detection pass over a difference image: the raw per-keypoint maps,
/// their coordinate/intensity read-out, and the latent heads.
struct KeypointSet {
    torch::Tensor feature_maps;  // [B, N, G, G], pre-sigmoid
    torch::Tensor coords;        // [B, N, 2] spatial-softmax centers, (x, y) in [-1, 1]
    torch::Tensor intensity;     // [B, N] mean sigmoid activation per map
    GaussianLatent posterior;    // q(z^kp | o, h, â) over the N·z_kp flat latent
    GaussianLatent prior;        // p(z^kp | h, â)
    torch::Tensor z;             // [B, N, z_kp] posterior draw
    RecurrentState history;      // the state that conditioned this detection
};

struct KeypointLoss {
    torch::Tensor total;
    torch::Tensor kl;       // posterior/prior agreement on the keypoint latents
    torch::Tensor heatmap;  // ‖γ − π^r‖₂ per sample, batch mean
    torch::Tensor sep;      // pairwise blob-overlap penalty
    torch::Tensor sparse;   // mean keypoint intensity
    torch::Tensor image;    // difference-image reconstruction error
};

/// γ = clamp(bicubic(σ(Σ_n ḡ_n)), 0, 1): [B, N, G, G] → [B, 1, h, w].
/// Border samples replicate edge cells; the clamp runs after interpolation
/// because the cubic kernel overshoots.
torch::Tensor aggregate_keypoint_map(const torch::Tensor& feature_maps, int64_t h, int64_t w);

/// Per-map spatial softmax → (coords [B, N, 2], intensity [B, N]). The x
/// coordinate runs along width, y along height, both in [-1, 1].
std::pair<torch::Tensor, torch::Tensor> keypoint_readout(const torch::Tensor& feature_maps);

/// Isotropic Gaussian bumps at the given centers: [B, N, grid, grid] with
/// value intensity_n at an exact center and kBlobSigma falloff.
torch::Tensor keypoint_blob_maps(const torch::Tensor& coords, const torch::Tensor& intensity,
                                 int64_t grid);

/// Index of the mask that overlaps γ on the most pixels, both thresholded at
/// 0.5; ties go to the smaller index. γ [B, 1, H, W], masks [B, K, 1, H, W],
/// result [B] int64.
torch::Tensor select_agent_index(const torch::Tensor& gamma, const torch::Tensor& masks);

/// The agent's slice of one mixture timestep. Every field is a view into the
/// inputs, never a copy. The history comes from the prior-side bank, which
/// sees the same realized latents during inference but keeps advancing once
/// observations stop, so downstream consumers stay consistent across the
/// observe/generate boundary.
struct AgentView {
    torch::Tensor z;     // [B, z_mask]
    torch::Tensor h;     // [B, h_mask]
    torch::Tensor mask;  // [B, 1, H, W]
};
AgentView agent_views(const MaskLatentStack& mask_stack, const MixtureHistories& hist,
                      const torch::Tensor& masks, int64_t k_agent);

/// Batched variant: one agent index per batch row ([B] int64), gathering each
/// row's slice independently.
AgentView agent_views(const MaskLatentStack& mask_stack, const MixtureHistories& hist,
                      const torch::Tensor& masks, const torch::Tensor& k_agent);

/// Keypoint module: a conv detector turns the difference image o_t − o_0
/// into N raw feature maps; their aggregated map locates the agent among
/// the mixture modes, and a VRNN-style latent over the read-out coordinates
/// shares dynamics with the agent through the enhanced action.
struct KeypointModuleImpl : torch::nn::Module {
    explicit KeypointModuleImpl(const ModelConfig& cfg);

    RecurrentState initial_state(int64_t batch) const;

    /// Detect on frame − first_frame and draw z^kp from the posterior. The
    /// enhanced action reaches both latent heads, or neither when
    /// joint_action_conditioning is off.
    KeypointSet detect(const torch::Tensor& frame, const torch::Tensor& first_frame,
                       const RecurrentState& h, const torch::Tensor& a_hat_prev,
                       RandomSource& rng);

    /// γ for this detection at full image resolution: [B, 1, H, W].
    torch::Tensor keypoint_map(const KeypointSet& kp) const;

    /// Difference image rebuilt from blobs at the detected centers: [B, 3, H, W].
    torch::Tensor decode_difference(const KeypointSet& kp);

    /// h' = LSTM([z^kp, read-out], h).
    RecurrentState advance_history(const KeypointSet& kp, const RecurrentState& h);

    /// Scaled KL + heatmap regression + separation + sparsity + difference
    /// reconstruction. γ and the selected agent mask come from the caller so
    /// the same tensors feed the selection and the regression.
    KeypointLoss loss(const torch::Tensor& frame, const torch::Tensor& first_frame,
                      const KeypointSet& kp, const torch::Tensor& gamma,
                      const torch::Tensor& agent_mask);

    torch::nn::Sequential detector{nullptr};      // difference image → N raw maps
    ModeHead post_head{nullptr};                  // (read-out, h, â) → q
    ModeHead prior_head{nullptr};                 // (0, h, â) → p
    SSMCell rnn{nullptr};
    torch::nn::Sequential blob_decoder{nullptr};  // N blob maps → 3-channel difference
    ModelConfig cfg;
};
TORCH_MODULE(KeypointModule);

/// Debug export: per-episode γ maps as container entry "kp_map" [T, H, W].
void save_keypoint_maps(const std::string& path, const torch::Tensor& gamma_sequence);

}  // namespace gatsbi
