#include "gatsbi/mixture.hpp"

#include "gatsbi/tensor_store.hpp"

namespace gatsbi {

torch::Tensor stick_break(const torch::Tensor& mask_logits) {
    require(mask_logits.dim() == 5 && mask_logits.size(2) == 1,
            "stick_break expects logits [B, K-1, 1, H, W]");
    require(mask_logits.size(1) >= 1, "stick_break needs at least one logit map (K >= 2)");
    torch::Tensor s = torch::sigmoid(mask_logits);
    torch::Tensor rest = torch::ones_like(s.select(1, 0));
    std::vector<torch::Tensor> masks;
    for (int64_t k = 0; k < s.size(1); ++k) {
        torch::Tensor sk = s.select(1, k);
        masks.push_back(sk * rest);
        rest = rest * (1.0 - sk);
    }
    masks.push_back(rest);
    return torch::stack(masks, 1);
}

torch::Tensor compose_mixture(const torch::Tensor& masks, const torch::Tensor& components) {
    require(masks.dim() == 5 && masks.size(2) == 1, "compose_mixture expects masks [B, K, 1, H, W]");
    require(components.dim() == 5, "compose_mixture expects components [B, K, C, H, W]");
    require(masks.size(0) == components.size(0) && masks.size(1) == components.size(1) &&
                masks.size(3) == components.size(3) && masks.size(4) == components.size(4),
            "compose_mixture: masks and components disagree in batch/modes/size");
    const double worst = (masks.sum(1) - 1.0).abs().max().item<double>();
    if (worst > 1e-3)
        throw InvariantError("compose_mixture: mask sum deviates from 1 by " + std::to_string(worst));
    return (masks * components).sum(1);
}

torch::Tensor salient_residual(const torch::Tensor& frame, const torch::Tensor& mu_mix) {
    require(frame.sizes().equals(mu_mix.sizes()), "salient_residual: shape mismatch");
    return frame - mu_mix;
}

ModeChainImpl::ModeChainImpl(int64_t code_dim_, int64_t h_dim_, int64_t act_dim_, int64_t feat_dim,
                             int64_t hidden_dim_, int64_t z_dim_)
    : code_dim(code_dim_), h_dim(h_dim_), act_dim(act_dim_), z_dim(z_dim_), hidden_dim(hidden_dim_) {
    feat = register_module("feat", make_mlp(code_dim + h_dim + act_dim, {feat_dim}, feat_dim));
    chain = register_module("chain", torch::nn::LSTMCell(feat_dim + z_dim, hidden_dim));
    head = register_module("head", GaussianHead(hidden_dim, z_dim));
}

GaussianLatent ModeChainImpl::step(const torch::Tensor& code, const torch::Tensor& h,
                                   const torch::Tensor& act_slot, const torch::Tensor& z_prev_mode,
                                   RecurrentState& chain_state) {
    require(code.size(-1) == code_dim && h.size(-1) == h_dim && act_slot.size(-1) == act_dim &&
                z_prev_mode.size(-1) == z_dim,
            "mode chain: input dims do not match construction");
    torch::Tensor e = feat->forward(torch::cat({code, h, act_slot}, -1));
    auto [ch, cc] = chain->forward(torch::cat({e, z_prev_mode}, -1),
                                   std::make_tuple(chain_state.hidden, chain_state.cell));
    chain_state = RecurrentState{ch, cc};
    return head->forward(ch);
}

ModeHeadImpl::ModeHeadImpl(int64_t code_dim_, int64_t h_dim, int64_t act_dim, int64_t hidden_dim,
                           int64_t z_dim_)
    : code_dim(code_dim_), z_dim(z_dim_) {
    feat = register_module("feat", make_mlp(code_dim + h_dim + act_dim, {hidden_dim}, hidden_dim));
    head = register_module("head", GaussianHead(hidden_dim, z_dim));
}

GaussianLatent ModeHeadImpl::forward(const torch::Tensor& code, const torch::Tensor& h,
                                     const torch::Tensor& act_slot) {
    require(code.size(-1) == code_dim, "mode head: code dim does not match construction");
    return head->forward(torch::celu(feat->forward(torch::cat({code, h, act_slot}, -1))));
}

ResidualTransitionImpl::ResidualTransitionImpl(int64_t z_dim_, int64_t hidden_dim, double delta_,
                                               double lambda_)
    : z_dim(z_dim_), delta(delta_), lambda(lambda_) {
    net = register_module("net", make_mlp(2 * z_dim, {hidden_dim}, z_dim));
}

std::pair<torch::Tensor, torch::Tensor> ResidualTransitionImpl::update(const torch::Tensor& z_prev,
                                                                       const torch::Tensor& z_bar) {
    require(z_prev.sizes().equals(z_bar.sizes()), "residual update: latent shapes differ");
    torch::Tensor g = delta * net->forward(torch::cat({z_bar, z_prev}, -1));
    return {z_prev + g, lambda * g.norm(2, {-1})};
}

MixtureModuleImpl::MixtureModuleImpl(const ModelConfig& cfg_) : cfg(cfg_) {
    cfg.validate();
    const auto& w = cfg.widths;
    const int64_t code = w.mode_feat_dim;
    const int64_t act = cfg.act_enhanced_dim;

    enc_obs = register_module("enc_obs", FrameEncoder(3, w.frame_enc_channels, cfg.image_h, code));
    enc_hist =
        register_module("enc_hist", FrameEncoder(3, w.frame_enc_channels, cfg.image_h, w.hist_code_dim));
    comp_enc = register_module("comp_enc", ConvEncoder(4, w.comp_enc_channels, cfg.image_h, code));

    post_mask = register_module(
        "post_mask", ModeChain(code, cfg.h_mask_dim, act, w.mode_feat_dim, w.head_hidden, cfg.z_mask_dim));
    prior_mask = register_module(
        "prior_mask", ModeChain(code, cfg.h_mask_dim, act, w.mode_feat_dim, w.head_hidden, cfg.z_mask_dim));
    post_comp =
        register_module("post_comp", ModeHead(code, cfg.h_comp_dim, act, w.head_hidden, cfg.z_comp_dim));
    prior_comp =
        register_module("prior_comp", ModeHead(code, cfg.h_comp_dim, act, w.head_hidden, cfg.z_comp_dim));

    mask_rnn_post =
        register_module("mask_rnn_post", SSMCell(cfg.z_mask_dim, w.hist_code_dim, cfg.h_mask_dim));
    comp_rnn_post =
        register_module("comp_rnn_post", SSMCell(cfg.z_comp_dim, w.hist_code_dim, cfg.h_comp_dim));
    if (cfg.separate_prior_posterior_rnn) {
        mask_rnn_prior =
            register_module("mask_rnn_prior", SSMCell(cfg.z_mask_dim, w.hist_code_dim, cfg.h_mask_dim));
        comp_rnn_prior =
            register_module("comp_rnn_prior", SSMCell(cfg.z_comp_dim, w.hist_code_dim, cfg.h_comp_dim));
    } else {
        mask_rnn_prior = mask_rnn_post;
        comp_rnn_prior = comp_rnn_post;
    }

    mask_cond =
        register_module("mask_cond", make_mlp(cfg.z_mask_dim + act, {w.head_hidden}, cfg.z_mask_dim));
    comp_cond =
        register_module("comp_cond", make_mlp(cfg.z_comp_dim + act, {w.head_hidden}, cfg.z_comp_dim));
    mask_dec = register_module("mask_dec",
                               SubPixelDecoder(cfg.z_mask_dim, w.mask_dec_channels, cfg.image_h, 1));
    comp_dec = register_module(
        "comp_dec", BroadcastDecoder(cfg.z_comp_dim, w.comp_dec_channels, cfg.image_h,
                                     cfg.image_h / w.comp_dec_stride, 3));

    mask_res = register_module("mask_res", ResidualTransition(cfg.z_mask_dim, w.head_hidden,
                                                              cfg.residual_delta, cfg.residual_lambda));
    comp_res = register_module("comp_res", ResidualTransition(cfg.z_comp_dim, w.head_hidden,
                                                              cfg.residual_delta, cfg.residual_lambda));
    this->to(cfg.dtype);
}

MixtureState MixtureModuleImpl::initial_state(int64_t batch) const {
    MixtureState s;
    for (int64_t k = 0; k < cfg.num_modes; ++k) {
        s.hist.mask_post.push_back(RecurrentState::zeros(batch, cfg.h_mask_dim, cfg.dtype));
        s.hist.mask_prior.push_back(RecurrentState::zeros(batch, cfg.h_mask_dim, cfg.dtype));
        s.hist.comp_post.push_back(RecurrentState::zeros(batch, cfg.h_comp_dim, cfg.dtype));
        s.hist.comp_prior.push_back(RecurrentState::zeros(batch, cfg.h_comp_dim, cfg.dtype));
    }
    auto opts = torch::TensorOptions().dtype(cfg.dtype);
    s.z_mask_prev = torch::zeros({batch, cfg.num_modes, cfg.z_mask_dim}, opts);
    s.z_comp_prev = torch::zeros({batch, cfg.num_modes, cfg.z_comp_dim}, opts);
    return s;
}

MaskLatentStack MixtureModuleImpl::run_mask_chain(const torch::Tensor& obs_code,
                                                  const torch::Tensor& a_hat_prev,
                                                  const MixtureState& state, bool posterior,
                                                  RandomSource& rng) {
    require(a_hat_prev.size(-1) == cfg.act_enhanced_dim, "mask chain: enhanced action dim mismatch");
    require(static_cast<int64_t>(state.hist.mask_post.size()) == cfg.num_modes,
            "mask chain: state has wrong mode count");
    const int64_t batch = a_hat_prev.size(0);
    auto opts = a_hat_prev.options();
    torch::Tensor zero_code = torch::zeros({batch, cfg.widths.mode_feat_dim}, opts);
    torch::Tensor zero_act = torch::zeros_like(a_hat_prev);

    RecurrentState post_cs = post_mask->initial_state(batch, a_hat_prev.scalar_type());
    RecurrentState prior_cs = prior_mask->initial_state(batch, a_hat_prev.scalar_type());
    torch::Tensor z_prev_mode = torch::zeros({batch, cfg.z_mask_dim}, opts);
    if (trace) traced_mask.clear();

    MaskLatentStack stack;
    std::vector<torch::Tensor> pre, post;
    torch::Tensor reg = torch::zeros({batch}, opts);
    for (int64_t k = 0; k < cfg.num_modes; ++k) {
        torch::Tensor act_slot = (k == 0) ? a_hat_prev : zero_act;
        GaussianLatent q;
        if (posterior) {
            if (trace)
                traced_mask.push_back({obs_code.detach(), state.hist.mask_post[k].hidden.detach(),
                                       act_slot.detach(), z_prev_mode.detach()});
            q = post_mask->step(obs_code, state.hist.mask_post[k].hidden, act_slot, z_prev_mode,
                                post_cs);
            stack.posterior.push_back(q);
        }
        GaussianLatent p = prior_mask->step(zero_code, state.hist.mask_prior[k].hidden, act_slot,
                                            z_prev_mode, prior_cs);
        stack.prior.push_back(p);

        torch::Tensor z_bar = reparam_sample(posterior ? q : p, rng);
        auto [z_k, pen] = mask_res->update(state.z_mask_prev.select(1, k), z_bar);
        pre.push_back(z_bar);
        post.push_back(z_k);
        reg = reg + pen;
        z_prev_mode = z_k;
    }
    stack.pre_samples = torch::stack(pre, 1);
    stack.samples = torch::stack(post, 1);
    stack.reg = reg;
    return stack;
}

MaskLatentStack MixtureModuleImpl::infer_mask_latents(const torch::Tensor& frame,
                                                      const torch::Tensor& a_hat_prev,
                                                      const MixtureState& state, RandomSource& rng) {
    require(frame.dim() == 4 && frame.size(1) == 3, "infer_mask_latents expects frames [B, 3, H, W]");
    return run_mask_chain(enc_obs->forward(frame), a_hat_prev, state, /*posterior=*/true, rng);
}

MaskLatentStack MixtureModuleImpl::generate_mask_latents(const torch::Tensor& a_hat_prev,
                                                         const MixtureState& state,
                                                         RandomSource& rng) {
    return run_mask_chain({}, a_hat_prev, state, /*posterior=*/false, rng);
}

ComponentLatentStack MixtureModuleImpl::run_comp_heads(const std::vector<torch::Tensor>& codes,
                                                       const torch::Tensor& a_hat_prev,
                                                       const MixtureState& state, bool posterior,
                                                       RandomSource& rng) {
    const int64_t batch = a_hat_prev.size(0);
    auto opts = a_hat_prev.options();
    torch::Tensor zero_code = torch::zeros({batch, cfg.widths.mode_feat_dim}, opts);
    torch::Tensor zero_act = torch::zeros_like(a_hat_prev);
    if (trace) traced_comp.clear();

    ComponentLatentStack stack;
    std::vector<torch::Tensor> pre, post;
    torch::Tensor reg = torch::zeros({batch}, opts);
    for (int64_t k = 0; k < cfg.num_modes; ++k) {
        torch::Tensor act_slot = (k == 0) ? a_hat_prev : zero_act;
        GaussianLatent q;
        if (posterior) {
            if (trace)
                traced_comp.push_back({codes[k].detach(), state.hist.comp_post[k].hidden.detach(),
                                       act_slot.detach(), torch::Tensor()});
            q = post_comp->forward(codes[k], state.hist.comp_post[k].hidden, act_slot);
            stack.posterior.push_back(q);
        }
        GaussianLatent p = prior_comp->forward(zero_code, state.hist.comp_prior[k].hidden, act_slot);
        stack.prior.push_back(p);

        torch::Tensor z_bar = reparam_sample(posterior ? q : p, rng);
        auto [z_k, pen] = comp_res->update(state.z_comp_prev.select(1, k), z_bar);
        pre.push_back(z_bar);
        post.push_back(z_k);
        reg = reg + pen;
    }
    stack.pre_samples = torch::stack(pre, 1);
    stack.samples = torch::stack(post, 1);
    stack.reg = reg;
    return stack;
}

ComponentLatentStack MixtureModuleImpl::infer_component_latents(const torch::Tensor& frame,
                                                                const torch::Tensor& masks,
                                                                const torch::Tensor& a_hat_prev,
                                                                const MixtureState& state,
                                                                RandomSource& rng) {
    require(masks.dim() == 5 && masks.size(1) == cfg.num_modes && masks.size(2) == 1,
            "infer_component_latents expects masks [B, K, 1, H, W]");
    require(frame.dim() == 4 && frame.size(1) == 3, "infer_component_latents expects frames [B, 3, H, W]");
    std::vector<torch::Tensor> codes;
    for (int64_t k = 0; k < cfg.num_modes; ++k)
        codes.push_back(comp_enc->forward(torch::cat({frame, masks.select(1, k)}, 1)));
    return run_comp_heads(codes, a_hat_prev, state, /*posterior=*/true, rng);
}

ComponentLatentStack MixtureModuleImpl::generate_component_latents(const torch::Tensor& a_hat_prev,
                                                                   const MixtureState& state,
                                                                   RandomSource& rng) {
    return run_comp_heads({}, a_hat_prev, state, /*posterior=*/false, rng);
}

torch::Tensor MixtureModuleImpl::decode_mask_logits(const torch::Tensor& z_mask,
                                                    const torch::Tensor& a_hat_prev) {
    require(z_mask.dim() == 3 && z_mask.size(1) == cfg.num_modes && z_mask.size(2) == cfg.z_mask_dim,
            "decode_mask_logits expects latents [B, K, z_m]");
    const int64_t batch = z_mask.size(0), km1 = cfg.num_modes - 1;
    torch::Tensor z = z_mask.narrow(1, 0, km1).reshape({batch * km1, cfg.z_mask_dim});
    torch::Tensor a = a_hat_prev.unsqueeze(1)
                          .expand({batch, km1, cfg.act_enhanced_dim})
                          .reshape({batch * km1, cfg.act_enhanced_dim});
    torch::Tensor maps = mask_dec->forward(mask_cond->forward(torch::cat({z, a}, -1)));
    return maps.view({batch, km1, 1, cfg.image_h, cfg.image_w});
}

torch::Tensor MixtureModuleImpl::decode_components(const torch::Tensor& z_comp,
                                                   const torch::Tensor& a_hat_prev) {
    require(z_comp.dim() == 3 && z_comp.size(1) == cfg.num_modes && z_comp.size(2) == cfg.z_comp_dim,
            "decode_components expects latents [B, K, z_c]");
    const int64_t batch = z_comp.size(0), K = cfg.num_modes;
    torch::Tensor z = z_comp.reshape({batch * K, cfg.z_comp_dim});
    torch::Tensor a = a_hat_prev.unsqueeze(1)
                          .expand({batch, K, cfg.act_enhanced_dim})
                          .reshape({batch * K, cfg.act_enhanced_dim});
    torch::Tensor imgs = comp_dec->forward(comp_cond->forward(torch::cat({z, a}, -1)));
    return imgs.view({batch, K, 3, cfg.image_h, cfg.image_w});
}

void MixtureModuleImpl::advance_histories(MixtureState& state, const torch::Tensor& z_mask,
                                          const torch::Tensor& z_comp, const torch::Tensor& mu_mix,
                                          bool update_post, bool update_prior) {
    torch::Tensor code = enc_hist->forward(mu_mix);
    for (int64_t k = 0; k < cfg.num_modes; ++k) {
        if (update_post) {
            state.hist.mask_post[k] =
                mask_rnn_post->update(z_mask.select(1, k), code, state.hist.mask_post[k]);
            state.hist.comp_post[k] =
                comp_rnn_post->update(z_comp.select(1, k), code, state.hist.comp_post[k]);
        }
        if (update_prior) {
            state.hist.mask_prior[k] =
                mask_rnn_prior->update(z_mask.select(1, k), code, state.hist.mask_prior[k]);
            state.hist.comp_prior[k] =
                comp_rnn_prior->update(z_comp.select(1, k), code, state.hist.comp_prior[k]);
        }
    }
}

MixtureOutput MixtureModuleImpl::observe_step(const torch::Tensor& frame,
                                              const torch::Tensor& a_hat_prev, MixtureState& state,
                                              RandomSource& rng) {
    MixtureOutput out;
    out.mask = infer_mask_latents(frame, a_hat_prev, state, rng);
    out.masks = stick_break(decode_mask_logits(out.mask.samples, a_hat_prev));
    out.comp = infer_component_latents(frame, out.masks, a_hat_prev, state, rng);
    out.components = decode_components(out.comp.samples, a_hat_prev);
    out.mu_mix = compose_mixture(out.masks, out.components);
    out.salient = salient_residual(frame, out.mu_mix);
    advance_histories(state, out.mask.samples, out.comp.samples, out.mu_mix,
                      /*update_post=*/true, /*update_prior=*/true);
    state.z_mask_prev = out.mask.samples;
    state.z_comp_prev = out.comp.samples;
    return out;
}

MixtureOutput MixtureModuleImpl::generate_step(const torch::Tensor& a_hat_prev, MixtureState& state,
                                               RandomSource& rng) {
    MixtureOutput out;
    out.mask = generate_mask_latents(a_hat_prev, state, rng);
    out.masks = stick_break(decode_mask_logits(out.mask.samples, a_hat_prev));
    out.comp = generate_component_latents(a_hat_prev, state, rng);
    out.components = decode_components(out.comp.samples, a_hat_prev);
    out.mu_mix = compose_mixture(out.masks, out.components);
    advance_histories(state, out.mask.samples, out.comp.samples, out.mu_mix,
                      /*update_post=*/false, /*update_prior=*/true);
    state.z_mask_prev = out.mask.samples;
    state.z_comp_prev = out.comp.samples;
    return out;
}

MixtureLoss MixtureModuleImpl::mixture_elbo(const torch::Tensor& frames,
                                            const std::vector<MixtureOutput>& steps) const {
    require(frames.dim() == 5, "mixture_elbo expects frames [B, T, 3, H, W]");
    require(frames.size(1) == static_cast<int64_t>(steps.size()),
            "mixture_elbo: frame count does not match step count");
    require(!steps.empty(), "mixture_elbo: no steps");
    const int64_t batch = frames.size(0);
    auto opts = frames.options();
    torch::Tensor nll = torch::zeros({batch}, opts);
    torch::Tensor kl_m = torch::zeros({batch}, opts);
    torch::Tensor kl_c = torch::zeros({batch}, opts);
    torch::Tensor reg = torch::zeros({batch}, opts);
    for (size_t t = 0; t < steps.size(); ++t) {
        const MixtureOutput& s = steps[t];
        require(s.mask.posterior.size() == s.mask.prior.size() &&
                    s.comp.posterior.size() == s.comp.prior.size() && !s.mask.posterior.empty(),
                "mixture_elbo needs inferred steps with matching posterior/prior stacks");
        nll = nll + gaussian_nll_per_sample(frames.select(1, t), s.mu_mix, cfg.sigma_mix);
        for (int64_t k = 0; k < cfg.num_modes; ++k) {
            kl_m = kl_m + kl_diag_gaussian(s.mask.posterior[k], s.mask.prior[k]);
            kl_c = kl_c + kl_diag_gaussian(s.comp.posterior[k], s.comp.prior[k]);
        }
        reg = reg + s.mask.reg + s.comp.reg;
    }
    MixtureLoss loss;
    loss.nll = nll.mean();
    loss.kl_mask = kl_m.mean();
    loss.kl_comp = kl_c.mean();
    loss.residual = reg.mean();
    loss.total = loss.nll + loss.kl_mask + loss.kl_comp + loss.residual;
    return loss;
}

void save_decomposition(const std::string& path, const torch::Tensor& masks,
                        const torch::Tensor& components, const torch::Tensor& mu_mix) {
    require(masks.dim() == 4 && masks.size(1) == 1, "save_decomposition expects masks [K, 1, H, W]");
    require(components.dim() == 4 && components.size(1) == 3,
            "save_decomposition expects components [K, 3, H, W]");
    require(mu_mix.dim() == 3 && mu_mix.size(0) == 3, "save_decomposition expects mu_mix [3, H, W]");
    save_tensors(path, {{"masks", masks}, {"components", components}, {"mu_mix", mu_mix}});
}

}  // namespace gatsbi
