#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "gatsbi/config.hpp"
#include "gatsbi/interaction.hpp"
#include "gatsbi/keypoint.hpp"
#include "gatsbi/mixture.hpp"
#include "gatsbi/objects.hpp"

namespace gatsbi {

/// Counts of head invocations per latent bank, for auditing the inference/
/// generation split: a conditioned rollout must show exactly n_cond
/// posterior-side calls per bank and prior-side calls for the rest.
struct CallStats {
    int64_t mask_posterior = 0, mask_prior = 0;
    int64_t comp_posterior = 0, comp_prior = 0;
    int64_t kp_posterior = 0;
    int64_t obj_posterior = 0, obj_prior = 0;
    int64_t graphs = 0;
};

/// Runtime structure switches for ablation sweeps: override the interaction
/// mode and the graph connectivity on a trained model without touching its
/// parameters.
struct StructureOverride {
    std::optional<InterMode> inter_mode;
    std::optional<int64_t> knn_k;
    std::optional<bool> fully_connected;
};

/// Rolling state across one sequence.
struct SequenceState {
    MixtureState mix;
    RecurrentState kp_hist;
    ObjectSet objects;
    torch::Tensor interactions;  // fused vectors from the previous step's graph
    torch::Tensor first_frame;   // keypoint difference reference (set at t=0)
    torch::Tensor k_agent;       // [B] int64; last observed agent assignment
    int64_t t = 0;
};

/// Everything one timestep produces.
struct StepOutput {
    MixtureOutput mix;
    KeypointSet kp;          // populated on observed steps only
    torch::Tensor gamma;     // [B, 1, H, W]; observed steps only
    torch::Tensor k_agent;   // [B] int64
    AgentFeature agent;
    ObjectsStep objects;
    torch::Tensor interactions;  // [B, I, inter_out] built on this step's graph
    torch::Tensor mu_full;       // composed frame: objects over the mixture scene
};

/// Full agent-centric world model: scene mixture (agent + background modes),
/// keypoint-based agent identification, grid-attention objects, and the
/// interaction graph driving object dynamics. One observe_step per frame
/// during inference; generate_step continues on the prior for prediction.
class GatsbiModelImpl : public torch::nn::Module {
  public:
    explicit GatsbiModelImpl(const ModelConfig& cfg);

    /// Fresh per-sequence state; first_frame is captured by the first
    /// observe_step.
    SequenceState initial_state(int64_t batch) const;

    /// One observed frame: posterior everywhere, histories advance on both
    /// banks. `action_prev` is the action recorded one step earlier (ignored
    /// at t=0, where no action precedes the frame); `action_cur` labels this
    /// step and parameterizes the interaction graph that drives the next
    /// transition. alpha_fix pins the object/scene blend when set.
    StepOutput observe_step(const torch::Tensor& frame, const torch::Tensor& action_prev,
                            const torch::Tensor& action_cur, SequenceState& state,
                            RandomSource& rng,
                            std::optional<double> alpha_fix = std::nullopt);

    /// One generated frame: prior-side latents only, no keypoint detection,
    /// agent assignment frozen at the last observed step.
    StepOutput generate_step(const torch::Tensor& action_prev, const torch::Tensor& action_cur,
                             SequenceState& state, RandomSource& rng,
                             std::optional<double> alpha_fix = std::nullopt);

    /// Runs observe_step over frames [B, T, 3, H, W] with actions [B, T, A].
    std::vector<StepOutput> observe_sequence(const torch::Tensor& frames,
                                             const torch::Tensor& actions, SequenceState& state,
                                             RandomSource& rng,
                                             std::optional<double> alpha_fix = std::nullopt);

    /// Conditioned prediction: posterior inference on the first n_cond frames,
    /// prior generation to `horizon` steps total, actions supplied throughout.
    /// Returns every step in order; read predictions from mu_full.
    std::vector<StepOutput> rollout(const torch::Tensor& frames, const torch::Tensor& actions,
                                    int64_t n_cond, int64_t horizon, RandomSource& rng);

    /// Applies the set fields; empty optionals keep the current setting.
    void apply_structure(const StructureOverride& s);

    /// â_t; zero-width actions are rejected by config validation.
    torch::Tensor enhance(const torch::Tensor& action);

    CallStats stats;

    MixtureModule mixture{nullptr};
    KeypointModule keypoint{nullptr};
    ObjectsModule objects{nullptr};
    InteractionModule interaction{nullptr};
    ActionEnhancer enhancer{nullptr};  // registered under the shared prefix
    ModelConfig cfg;

  private:
    StepOutput finish_step(StepOutput out, const torch::Tensor& action_cur, SequenceState& state);
};

TORCH_MODULE(GatsbiModel);

}  // namespace gatsbi
