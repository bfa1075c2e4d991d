#include "gatsbi/model.hpp"

#include <utility>

#include "gatsbi/common.hpp"

namespace gatsbi {

GatsbiModelImpl::GatsbiModelImpl(const ModelConfig& config) : cfg(config) {
    cfg.validate();
    mixture = register_module("mixture", MixtureModule(cfg));
    keypoint = register_module("keypoint", KeypointModule(cfg));
    objects = register_module("objects", ObjectsModule(cfg));
    interaction = register_module("interaction", InteractionModule(cfg));
    // The action enhancer is shared by every consumer of â, so it lives in
    // its own parameter group rather than under any one submodule.
    enhancer = register_module(
        "shared", ActionEnhancer(cfg.action_dim, cfg.widths.act_hidden, cfg.act_enhanced_dim));
    to(cfg.dtype);
}

SequenceState GatsbiModelImpl::initial_state(int64_t batch) const {
    require(batch >= 1, "batch must be positive");
    SequenceState s;
    s.mix = mixture->initial_state(batch);
    s.kp_hist = keypoint->initial_state(batch);
    s.objects = objects->empty_set(batch);
    s.t = 0;
    return s;
}

torch::Tensor GatsbiModelImpl::enhance(const torch::Tensor& action) {
    require(action.defined() && action.dim() == 2 && action.size(1) == cfg.action_dim,
            "actions must be [B, action_dim]");
    return enhancer->forward(action);
}

namespace {

torch::Tensor check_frame(const torch::Tensor& frame, const ModelConfig& cfg) {
    require(frame.defined() && frame.dim() == 4 && frame.size(1) == 3 &&
                frame.size(2) == cfg.image_h && frame.size(3) == cfg.image_w,
            "frames must be [B, 3, H, W] at the configured resolution");
    return frame;
}

}  // namespace

StepOutput GatsbiModelImpl::finish_step(StepOutput out, const torch::Tensor& action_cur,
                                        SequenceState& state) {
    AgentFeature agent{out.agent.z, out.agent.h, enhance(action_cur)};
    auto graph = interaction->build_graph(out.objects.objects, agent, out.mix.mu_mix);
    ++stats.graphs;
    out.agent = agent;
    out.interactions = interaction->total_interaction(graph);
    out.mu_full = out.objects.mu;
    state.objects = out.objects.objects;
    state.interactions = out.interactions;
    state.k_agent = out.k_agent;
    ++state.t;
    return out;
}

StepOutput GatsbiModelImpl::observe_step(const torch::Tensor& frame,
                                         const torch::Tensor& action_prev,
                                         const torch::Tensor& action_cur, SequenceState& state,
                                         RandomSource& rng, std::optional<double> alpha_fix) {
    check_frame(frame, cfg);
    const auto B = frame.size(0);
    if (state.t == 0) state.first_frame = frame;

    // No action precedes the first frame; its slot stays exactly zero.
    auto a_hat_prev = state.t == 0
                          ? torch::zeros({B, cfg.act_enhanced_dim},
                                         torch::TensorOptions().dtype(cfg.dtype))
                          : enhance(action_prev);

    StepOutput out;
    out.mix = mixture->observe_step(frame, a_hat_prev, state.mix, rng);
    ++stats.mask_posterior;
    ++stats.comp_posterior;

    out.kp = keypoint->detect(frame, state.first_frame, state.kp_hist, a_hat_prev, rng);
    ++stats.kp_posterior;
    out.gamma = keypoint->keypoint_map(out.kp);
    out.k_agent = select_agent_index(out.gamma, out.mix.masks);
    state.kp_hist = keypoint->advance_history(out.kp, state.kp_hist);

    auto view = agent_views(out.mix.mask, state.mix.hist, out.mix.masks, out.k_agent);
    out.agent = {view.z, view.h, {}};

    out.objects = objects->observe_step(frame, out.mix.salient, out.mix.mu_mix, state.objects,
                                        state.interactions, rng, alpha_fix);
    ++stats.obj_posterior;

    return finish_step(std::move(out), action_cur, state);
}

StepOutput GatsbiModelImpl::generate_step(const torch::Tensor& action_prev,
                                          const torch::Tensor& action_cur, SequenceState& state,
                                          RandomSource& rng, std::optional<double> alpha_fix) {
    require(state.t > 0, "generation needs at least one observed step");
    require(state.k_agent.defined(), "no agent assignment recorded");

    auto a_hat_prev = enhance(action_prev);

    StepOutput out;
    out.mix = mixture->generate_step(a_hat_prev, state.mix, rng);
    ++stats.mask_prior;
    ++stats.comp_prior;

    // The detector never runs without an observation; the agent keeps the
    // mode it was last seen in.
    out.k_agent = state.k_agent;
    auto view = agent_views(out.mix.mask, state.mix.hist, out.mix.masks, out.k_agent);
    out.agent = {view.z, view.h, {}};

    out.objects =
        objects->generate_step(out.mix.mu_mix, state.objects, state.interactions, rng, alpha_fix);
    ++stats.obj_prior;

    return finish_step(std::move(out), action_cur, state);
}

std::vector<StepOutput> GatsbiModelImpl::observe_sequence(const torch::Tensor& frames,
                                                          const torch::Tensor& actions,
                                                          SequenceState& state, RandomSource& rng,
                                                          std::optional<double> alpha_fix) {
    require(frames.defined() && frames.dim() == 5, "frames must be [B, T, 3, H, W]");
    require(actions.defined() && actions.dim() == 3 && actions.size(0) == frames.size(0) &&
                actions.size(1) >= frames.size(1),
            "need one action per frame");
    const auto T = frames.size(1);
    std::vector<StepOutput> steps;
    steps.reserve(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
        auto prev = t == 0 ? torch::Tensor() : actions.select(1, t - 1);
        steps.push_back(
            observe_step(frames.select(1, t), prev, actions.select(1, t), state, rng, alpha_fix));
    }
    return steps;
}

std::vector<StepOutput> GatsbiModelImpl::rollout(const torch::Tensor& frames,
                                                 const torch::Tensor& actions, int64_t n_cond,
                                                 int64_t horizon, RandomSource& rng) {
    require(frames.defined() && frames.dim() == 5, "frames must be [B, T, 3, H, W]");
    require(actions.defined() && actions.dim() == 3 && actions.size(0) == frames.size(0),
            "actions must be [B, T, A] with the frames' batch");
    require(n_cond >= 1, "conditioning needs at least one frame");
    require(horizon >= n_cond, "horizon shorter than the conditioning prefix");
    require(frames.size(1) >= n_cond, "not enough frames to condition on");
    require(actions.size(1) >= horizon, "not enough actions for the horizon");

    auto state = initial_state(frames.size(0));
    std::vector<StepOutput> steps;
    steps.reserve(static_cast<size_t>(horizon));
    for (int64_t t = 0; t < n_cond; ++t) {
        auto prev = t == 0 ? torch::Tensor() : actions.select(1, t - 1);
        steps.push_back(observe_step(frames.select(1, t), prev, actions.select(1, t), state, rng));
    }
    for (int64_t t = n_cond; t < horizon; ++t) {
        steps.push_back(
            generate_step(actions.select(1, t - 1), actions.select(1, t), state, rng));
    }
    return steps;
}

void GatsbiModelImpl::apply_structure(const StructureOverride& s) {
    if (s.inter_mode) interaction->cfg.inter_mode = *s.inter_mode;
    if (s.knn_k) {
        require(*s.knn_k >= 0, "neighbor count must be non-negative");
        interaction->cfg.knn_k = *s.knn_k;
    }
    if (s.fully_connected) interaction->cfg.fully_connected = *s.fully_connected;
}

}  // namespace gatsbi
