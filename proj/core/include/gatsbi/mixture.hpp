#pragma once

#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "gatsbi/config.hpp"
#include "gatsbi/nets.hpp"
#include "gatsbi/rng.hpp"
#include "gatsbi/types.hpp"

namespace gatsbi {

/// Stick-breaking over scene modes: K−1 logit maps [B, K−1, 1, H, W] become
/// K masks [B, K, 1, H, W] with an exact per-pixel sum of 1 — mode k keeps
/// σ(l_k) of whatever the earlier modes left over, the last takes the rest.
torch::Tensor stick_break(const torch::Tensor& mask_logits);

/// μ^mix = Σ_k π_k ⊙ o_k. Masks [B, K, 1, H, W], components [B, K, 3, H, W].
/// Throws InvariantError when the per-pixel mask sum strays beyond 1e-3.
torch::Tensor compose_mixture(const torch::Tensor& masks, const torch::Tensor& components);

/// What the mixture cannot explain: o_t − μ^mix_t, elementwise, unclamped.
torch::Tensor salient_residual(const torch::Tensor& frame, const torch::Tensor& mu_mix);

/// Recurrent banks for the K modes. Posterior and prior run separate states
/// (and separate cell weights unless configured shared); both are driven by
/// the realized latents so their KL terms stay comparable.
struct MixtureHistories {
    std::vector<RecurrentState> mask_post, mask_prior;
    std::vector<RecurrentState> comp_post, comp_prior;
};

/// Rolling per-sequence state: the history banks plus the previous realized
/// latents that feed the residual transition (zeros at sequence start).
struct MixtureState {
    MixtureHistories hist;
    torch::Tensor z_mask_prev;  // [B, K, z_m]
    torch::Tensor z_comp_prev;  // [B, K, z_c]
};

/// One timestep of latents for one entity type across all K modes.
struct MaskLatentStack {
    std::vector<GaussianLatent> posterior;  // q(z̄_k); empty on generated steps
    std::vector<GaussianLatent> prior;      // p(z̄_k); teacher-forced during inference
    torch::Tensor pre_samples;              // [B, K, z] draws before the residual transition
    torch::Tensor samples;                  // [B, K, z] residual-updated latents
    torch::Tensor reg;                      // [B] accumulated residual magnitude penalty
};
using ComponentLatentStack = MaskLatentStack;

/// Full mixture read-out for one timestep.
struct MixtureOutput {
    MaskLatentStack mask;
    ComponentLatentStack comp;
    torch::Tensor masks;       // [B, K, 1, H, W], per-pixel sum 1
    torch::Tensor components;  // [B, K, 3, H, W], unconstrained appearances
    torch::Tensor mu_mix;      // [B, 3, H, W]
    torch::Tensor salient;     // [B, 3, H, W]
};

struct MixtureLoss {
    torch::Tensor total;     // nll + kl_mask + kl_comp + residual (batch mean)
    torch::Tensor nll;
    torch::Tensor kl_mask;
    torch::Tensor kl_comp;
    torch::Tensor residual;
};

/// Autoregressive latent chain over the K modes. Each mode builds a feature
/// from (code, history, action slot), feeds it with the previous mode's
/// latent through an LSTM threaded across modes, and reads a Gaussian off
/// the LSTM state. The prior instance shares this architecture and passes a
/// zero code, so tying its weights to the posterior's collapses the KL.
struct ModeChainImpl : torch::nn::Module {
    ModeChainImpl(int64_t code_dim, int64_t h_dim, int64_t act_dim, int64_t feat_dim,
                  int64_t hidden_dim, int64_t z_dim);
    GaussianLatent step(const torch::Tensor& code, const torch::Tensor& h,
                        const torch::Tensor& act_slot, const torch::Tensor& z_prev_mode,
                        RecurrentState& chain_state);
    RecurrentState initial_state(int64_t batch, torch::Dtype dtype) const {
        return RecurrentState::zeros(batch, hidden_dim, dtype);
    }

    torch::nn::Sequential feat{nullptr};
    torch::nn::LSTMCell chain{nullptr};
    GaussianHead head{nullptr};
    int64_t code_dim, h_dim, act_dim, z_dim, hidden_dim;
};
TORCH_MODULE(ModeChain);

/// Independent per-mode Gaussian head over (code, history, action slot);
/// used for the component latents, which carry no across-mode chain.
struct ModeHeadImpl : torch::nn::Module {
    ModeHeadImpl(int64_t code_dim, int64_t h_dim, int64_t act_dim, int64_t hidden_dim,
                 int64_t z_dim);
    GaussianLatent forward(const torch::Tensor& code, const torch::Tensor& h,
                           const torch::Tensor& act_slot);

    torch::nn::Sequential feat{nullptr};
    GaussianHead head{nullptr};
    int64_t code_dim, z_dim;
};
TORCH_MODULE(ModeHead);

/// Residual latent transition z_{t+1} = z_t + Δ·g(z̄_{t+1}, z_t) with the
/// magnitude penalty λ‖Δ·g‖₂. Δ = 0 reduces to the identity with zero cost.
struct ResidualTransitionImpl : torch::nn::Module {
    ResidualTransitionImpl(int64_t z_dim, int64_t hidden_dim, double delta, double lambda);
    /// Returns (z_next, penalty); penalty has the inputs' leading shape.
    std::pair<torch::Tensor, torch::Tensor> update(const torch::Tensor& z_prev,
                                                   const torch::Tensor& z_bar);

    torch::nn::Sequential net{nullptr};
    int64_t z_dim;
    double delta, lambda;
};
TORCH_MODULE(ResidualTransition);

/// Scene-mixture module: stick-breaking masks with an autoregressive latent
/// chain, per-mode component appearances, action conditioning entering at
/// the first mode, residual latent dynamics, and the mixture ELBO.
struct MixtureModuleImpl : torch::nn::Module {
    explicit MixtureModuleImpl(const ModelConfig& cfg);

    MixtureState initial_state(int64_t batch) const;

    /// Posterior pipeline over one observed frame; advances both banks.
    MixtureOutput observe_step(const torch::Tensor& frame, const torch::Tensor& a_hat_prev,
                               MixtureState& state, RandomSource& rng);
    /// Prior pipeline with no observation; advances the prior bank only.
    MixtureOutput generate_step(const torch::Tensor& a_hat_prev, MixtureState& state,
                                RandomSource& rng);

    // Pieces of the pipeline, exposed for targeted use. None advance state.
    MaskLatentStack infer_mask_latents(const torch::Tensor& frame, const torch::Tensor& a_hat_prev,
                                       const MixtureState& state, RandomSource& rng);
    MaskLatentStack generate_mask_latents(const torch::Tensor& a_hat_prev,
                                          const MixtureState& state, RandomSource& rng);
    ComponentLatentStack infer_component_latents(const torch::Tensor& frame,
                                                 const torch::Tensor& masks,
                                                 const torch::Tensor& a_hat_prev,
                                                 const MixtureState& state, RandomSource& rng);
    ComponentLatentStack generate_component_latents(const torch::Tensor& a_hat_prev,
                                                    const MixtureState& state, RandomSource& rng);
    /// K−1 mask logit maps from the first K−1 mode latents: [B, K−1, 1, H, W].
    torch::Tensor decode_mask_logits(const torch::Tensor& z_mask, const torch::Tensor& a_hat_prev);
    /// K component images [B, K, 3, H, W] (raw decoder output, unconstrained).
    torch::Tensor decode_components(const torch::Tensor& z_comp, const torch::Tensor& a_hat_prev);
    /// Feed the realized latents and the reconstruction into the chosen banks.
    void advance_histories(MixtureState& state, const torch::Tensor& z_mask,
                           const torch::Tensor& z_comp, const torch::Tensor& mu_mix,
                           bool update_post, bool update_prior);

    /// −ELBO over an inferred slice: reconstruction NLL at σ_mix plus the
    /// mode KLs plus the residual penalties, averaged over the batch.
    MixtureLoss mixture_elbo(const torch::Tensor& frames,
                             const std::vector<MixtureOutput>& steps) const;

    /// When set, infer/generate record the head inputs of the last call.
    struct TraceEntry {
        torch::Tensor code, h, act, z_prev_mode;
    };
    bool trace = false;
    std::vector<TraceEntry> traced_mask, traced_comp;

    FrameEncoder enc_obs{nullptr};   // observation → posterior code
    FrameEncoder enc_hist{nullptr};  // μ^mix → history update code
    ConvEncoder comp_enc{nullptr};   // (frame ⊕ mask) → component code
    ModeChain post_mask{nullptr}, prior_mask{nullptr};
    ModeHead post_comp{nullptr}, prior_comp{nullptr};
    SSMCell mask_rnn_post{nullptr}, mask_rnn_prior{nullptr};
    SSMCell comp_rnn_post{nullptr}, comp_rnn_prior{nullptr};
    torch::nn::Sequential mask_cond{nullptr}, comp_cond{nullptr};  // (z ⊕ â) → decoder input
    SubPixelDecoder mask_dec{nullptr};
    BroadcastDecoder comp_dec{nullptr};
    ResidualTransition mask_res{nullptr}, comp_res{nullptr};
    ModelConfig cfg;

  private:
    MaskLatentStack run_mask_chain(const torch::Tensor& obs_code, const torch::Tensor& a_hat_prev,
                                   const MixtureState& state, bool posterior, RandomSource& rng);
    ComponentLatentStack run_comp_heads(const std::vector<torch::Tensor>& codes,
                                        const torch::Tensor& a_hat_prev, const MixtureState& state,
                                        bool posterior, RandomSource& rng);
};
TORCH_MODULE(MixtureModule);

/// Writes one timestep's decomposition (no batch dimension) as container
/// entries "masks" [K,1,H,W], "components" [K,3,H,W], "mu_mix" [3,H,W].
void save_decomposition(const std::string& path, const torch::Tensor& masks,
                        const torch::Tensor& components, const torch::Tensor& mu_mix);

}  // namespace gatsbi
