#include "gatsbi/keypoint.hpp"

#include <utility>
#include <vector>

#include "gatsbi/tensor_store.hpp"

namespace gatsbi {

namespace {

void push_conv_gn_celu(torch::nn::Sequential& net, int64_t in_ch, int64_t out_ch, int64_t kernel,
                       int64_t stride) {
    net->push_back(torch::nn::Conv2d(
        torch::nn::Conv2dOptions(in_ch, out_ch, kernel).stride(stride).padding(kernel / 2)));
    net->push_back(torch::nn::GroupNorm(norm_groups(out_ch), out_ch));
    net->push_back(torch::nn::CELU());
}

torch::Tensor axis_coords(int64_t grid, const torch::TensorOptions& opts) {
    if (grid == 1) return torch::zeros({1}, opts);
    return torch::linspace(-1.0, 1.0, grid, opts);
}

torch::Tensor flat_readout(const KeypointSet& kp) {
    return torch::cat({kp.coords.flatten(1), kp.intensity}, 1);  // [B, 3N]
}

}  // namespace

torch::Tensor aggregate_keypoint_map(const torch::Tensor& feature_maps, int64_t h, int64_t w) {
    require(feature_maps.dim() == 4, "aggregate_keypoint_map expects maps [B, N, G, G]");
    require(h > 0 && w > 0, "aggregate_keypoint_map needs a positive output size");
    auto g = torch::sigmoid(feature_maps.sum(1, /*keepdim=*/true));
    namespace F = torch::nn::functional;
    auto up = F::interpolate(g, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{h, w})
                                    .mode(torch::kBicubic)
                                    .align_corners(false));
    return up.clamp(0.0, 1.0);
}

std::pair<torch::Tensor, torch::Tensor> keypoint_readout(const torch::Tensor& feature_maps) {
    require(feature_maps.dim() == 4 && feature_maps.size(2) == feature_maps.size(3),
            "keypoint read-out expects square maps [B, N, G, G]");
    const auto B = feature_maps.size(0);
    const auto N = feature_maps.size(1);
    const auto G = feature_maps.size(2);
    auto heat = torch::softmax(feature_maps.reshape({B, N, G * G}), -1).reshape({B, N, G, G});
    auto axis = axis_coords(G, feature_maps.options());
    auto x = (heat.sum(2) * axis).sum(-1);
    auto y = (heat.sum(3) * axis).sum(-1);
    auto coords = torch::stack({x, y}, -1);
    auto intensity = torch::sigmoid(feature_maps).mean({2, 3});
    return {coords, intensity};
}

torch::Tensor keypoint_blob_maps(const torch::Tensor& coords, const torch::Tensor& intensity,
                                 int64_t grid) {
    require(coords.dim() == 3 && coords.size(2) == 2, "blob maps expect coords [B, N, 2]");
    require(intensity.dim() == 2 && intensity.size(0) == coords.size(0) &&
                intensity.size(1) == coords.size(1),
            "blob maps expect intensity [B, N] matching coords");
    require(grid >= 1, "blob maps need a positive grid");
    auto axis = axis_coords(grid, coords.options());
    auto gx = axis.view({1, 1, 1, grid});
    auto gy = axis.view({1, 1, grid, 1});
    auto cx = coords.select(-1, 0).unsqueeze(-1).unsqueeze(-1);
    auto cy = coords.select(-1, 1).unsqueeze(-1).unsqueeze(-1);
    auto d2 = (gx - cx).pow(2) + (gy - cy).pow(2);
    auto falloff = torch::exp(-d2 / (2.0 * kBlobSigma * kBlobSigma));
    return intensity.unsqueeze(-1).unsqueeze(-1) * falloff;
}

torch::Tensor select_agent_index(const torch::Tensor& gamma, const torch::Tensor& masks) {
    require(gamma.dim() == 4 && gamma.size(1) == 1, "select_agent_index expects γ [B, 1, H, W]");
    require(masks.dim() == 5 && masks.size(2) == 1,
            "select_agent_index expects masks [B, K, 1, H, W]");
    require(gamma.size(0) == masks.size(0) && gamma.size(2) == masks.size(3) &&
                gamma.size(3) == masks.size(4),
            "select_agent_index: γ and mask shapes differ");
    auto hot = (gamma > 0.5).unsqueeze(1) & (masks > 0.5);
    auto counts = hot.sum({2, 3, 4}).to(torch::kLong).contiguous();
    const auto B = counts.size(0);
    const auto K = counts.size(1);
    auto out = torch::empty({B}, torch::TensorOptions().dtype(torch::kLong));
    auto c = counts.accessor<int64_t, 2>();
    auto o = out.accessor<int64_t, 1>();
    for (int64_t b = 0; b < B; ++b) {
        int64_t best = 0;
        for (int64_t k = 1; k < K; ++k)
            if (c[b][k] > c[b][best]) best = k;  // strict: ties keep the smaller index
        o[b] = best;
    }
    return out;
}

AgentView agent_views(const MaskLatentStack& mask_stack, const MixtureHistories& hist,
                      const torch::Tensor& masks, int64_t k_agent) {
    require(masks.dim() == 5 && masks.size(2) == 1, "agent_views expects masks [B, K, 1, H, W]");
    const auto K = masks.size(1);
    require(k_agent >= 0 && k_agent < K, "agent index out of range");
    require(mask_stack.samples.defined() && mask_stack.samples.size(1) == K,
            "agent_views: latent stack does not match the masks");
    require(static_cast<int64_t>(hist.mask_prior.size()) == K,
            "agent_views: history bank does not match the masks");
    return {mask_stack.samples.select(1, k_agent),
            hist.mask_prior[static_cast<size_t>(k_agent)].hidden, masks.select(1, k_agent)};
}

AgentView agent_views(const MaskLatentStack& mask_stack, const MixtureHistories& hist,
                      const torch::Tensor& masks, const torch::Tensor& k_agent) {
    require(masks.dim() == 5 && masks.size(2) == 1, "agent_views expects masks [B, K, 1, H, W]");
    const auto B = masks.size(0);
    const auto K = masks.size(1);
    require(k_agent.defined() && k_agent.dim() == 1 && k_agent.size(0) == B &&
                k_agent.dtype() == torch::kInt64,
            "per-row agent selection needs indices [B] int64");
    require((k_agent >= 0).all().item<bool>() && (k_agent < K).all().item<bool>(),
            "agent index out of range");
    require(mask_stack.samples.defined() && mask_stack.samples.size(1) == K,
            "agent_views: latent stack does not match the masks");
    require(static_cast<int64_t>(hist.mask_prior.size()) == K,
            "agent_views: history bank does not match the masks");

    const auto z_dim = mask_stack.samples.size(2);
    auto z = mask_stack.samples.gather(1, k_agent.view({B, 1, 1}).expand({B, 1, z_dim})).squeeze(1);
    std::vector<torch::Tensor> hs;
    hs.reserve(static_cast<size_t>(K));
    for (const auto& state : hist.mask_prior) hs.push_back(state.hidden);
    auto bank = torch::stack(hs, 1);  // [B, K, h]
    auto h = bank.gather(1, k_agent.view({B, 1, 1}).expand({B, 1, bank.size(2)})).squeeze(1);
    auto m = masks.gather(
        1, k_agent.view({B, 1, 1, 1, 1}).expand({B, 1, 1, masks.size(3), masks.size(4)}));
    return {z, h, m.squeeze(1)};
}

KeypointModuleImpl::KeypointModuleImpl(const ModelConfig& cfg_) : cfg(cfg_) {
    cfg.validate();
    const auto grid = cfg.kp_grid();
    int64_t stages = 0;
    for (int64_t hw = cfg.image_h; hw > grid; hw /= 2) {
        require(hw % 2 == 0, "keypoint detector cannot reach the feature grid by halving");
        ++stages;
    }
    const auto ch = cfg.widths.kp_channels;

    auto det = torch::nn::Sequential();
    int64_t prev = 3;
    for (int64_t s = 0; s < stages; ++s) {
        push_conv_gn_celu(det, prev, ch, 3, 2);
        prev = ch;
    }
    det->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(prev, cfg.num_keypoints, 1)));
    detector = register_module("detector", det);

    const auto readout_dim = cfg.num_keypoints * 3;
    const auto z_flat = cfg.num_keypoints * cfg.z_kp_dim;
    post_head = register_module(
        "post_head", ModeHead(readout_dim, cfg.h_kp_dim, cfg.act_enhanced_dim,
                              cfg.widths.kp_feat_dim, z_flat));
    prior_head = register_module(
        "prior_head", ModeHead(readout_dim, cfg.h_kp_dim, cfg.act_enhanced_dim,
                               cfg.widths.kp_feat_dim, z_flat));
    rnn = register_module("rnn", SSMCell(z_flat, readout_dim, cfg.h_kp_dim));

    auto dec = torch::nn::Sequential();
    push_conv_gn_celu(dec, cfg.num_keypoints, ch, 1, 1);
    for (int64_t s = 0; s < stages; ++s) {
        dec->push_back(torch::nn::Upsample(torch::nn::UpsampleOptions()
                                               .scale_factor(std::vector<double>{2.0, 2.0})
                                               .mode(torch::kNearest)));
        push_conv_gn_celu(dec, ch, ch, 3, 1);
    }
    dec->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, 3, 3).padding(1)));
    blob_decoder = register_module("blob_decoder", dec);

    this->to(cfg.dtype);
}

RecurrentState KeypointModuleImpl::initial_state(int64_t batch) const {
    return RecurrentState::zeros(batch, cfg.h_kp_dim, cfg.dtype);
}

KeypointSet KeypointModuleImpl::detect(const torch::Tensor& frame,
                                       const torch::Tensor& first_frame, const RecurrentState& h,
                                       const torch::Tensor& a_hat_prev, RandomSource& rng) {
    require(frame.dim() == 4 && frame.size(1) == 3 && frame.size(2) == cfg.image_h &&
                frame.size(3) == cfg.image_w,
            "detect expects frames [B, 3, H, W] at the configured size");
    require(frame.sizes().equals(first_frame.sizes()), "detect: frames differ in shape");
    require(h.defined() && h.hidden.size(0) == frame.size(0) &&
                h.hidden.size(1) == cfg.h_kp_dim,
            "detect: history does not match the batch");
    require(a_hat_prev.dim() == 2 && a_hat_prev.size(1) == cfg.act_enhanced_dim,
            "detect expects enhanced actions [B, act_enhanced_dim]");

    KeypointSet ks;
    ks.history = h;
    ks.feature_maps = detector->forward(frame - first_frame);
    std::tie(ks.coords, ks.intensity) = keypoint_readout(ks.feature_maps);
    auto readout = flat_readout(ks);
    auto act = cfg.joint_action_conditioning ? a_hat_prev : torch::zeros_like(a_hat_prev);
    ks.posterior = post_head->forward(readout, h.hidden, act);
    ks.prior = prior_head->forward(torch::zeros_like(readout), h.hidden, act);
    ks.z = reparam_sample(ks.posterior, rng)
               .reshape({frame.size(0), cfg.num_keypoints, cfg.z_kp_dim});
    return ks;
}

torch::Tensor KeypointModuleImpl::keypoint_map(const KeypointSet& kp) const {
    return aggregate_keypoint_map(kp.feature_maps, cfg.image_h, cfg.image_w);
}

torch::Tensor KeypointModuleImpl::decode_difference(const KeypointSet& kp) {
    auto blobs = keypoint_blob_maps(kp.coords, kp.intensity, cfg.kp_grid());
    return blob_decoder->forward(blobs);
}

RecurrentState KeypointModuleImpl::advance_history(const KeypointSet& kp,
                                                   const RecurrentState& h) {
    require(kp.z.defined() && kp.z.dim() == 3, "advance_history needs sampled keypoint latents");
    return rnn->update(kp.z.flatten(1), flat_readout(kp), h);
}

KeypointLoss KeypointModuleImpl::loss(const torch::Tensor& frame,
                                      const torch::Tensor& first_frame, const KeypointSet& kp,
                                      const torch::Tensor& gamma,
                                      const torch::Tensor& agent_mask) {
    require(kp.posterior.defined() && kp.prior.defined(), "loss needs both keypoint latent heads");
    require(gamma.dim() == 4 && gamma.size(1) == 1, "loss expects γ [B, 1, H, W]");
    require(gamma.sizes().equals(agent_mask.sizes()), "loss: γ and agent mask shapes differ");
    require(frame.sizes().equals(first_frame.sizes()), "loss: frames differ in shape");

    KeypointLoss out;
    out.kl = kl_diag_gaussian(kp.posterior, kp.prior).mean();
    out.heatmap = (gamma - agent_mask).flatten(1).norm(2, 1).mean();

    auto gap = kp.coords.unsqueeze(2) - kp.coords.unsqueeze(1);  // [B, N, N, 2]
    auto d2 = gap.pow(2).sum(-1);
    auto off_diag = 1.0 - torch::eye(kp.coords.size(1), kp.coords.options());
    out.sep = (torch::exp(-d2 / (2.0 * kSepSigma * kSepSigma)) * off_diag).sum({1, 2}).mean();

    out.sparse = kp.intensity.mean();
    out.image = (decode_difference(kp) - (frame - first_frame)).pow(2).mean();
    out.total = cfg.kp_kl_scale * out.kl + cfg.kp_heatmap_lambda * out.heatmap +
                cfg.lambda_sep * out.sep + cfg.lambda_sparse * out.sparse + out.image;
    return out;
}

void save_keypoint_maps(const std::string& path, const torch::Tensor& gamma_sequence) {
    require(gamma_sequence.dim() == 3, "keypoint map export expects γ [T, H, W]");
    save_tensors(path, {{"kp_map", gamma_sequence}});
}

}  // namespace gatsbi
