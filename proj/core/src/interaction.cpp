#include "gatsbi/interaction.hpp"

#include <algorithm>
#include <limits>

#include "gatsbi/common.hpp"

namespace gatsbi {

namespace {

torch::Tensor pixel_axis(int64_t size, const torch::TensorOptions& opts) {
    return (torch::arange(size, opts) * 2.0 + 1.0) / static_cast<double>(size) - 1.0;
}

/// Per row: indices of the k smallest entries of dist (self and invalid
/// candidates pre-masked to +inf), ties resolved toward the smaller index by
/// the stable sort. mask flags entries whose distance stayed finite.
NeighborSet select_nearest(const torch::Tensor& dist, int64_t k, const torch::Tensor& valid_f) {
    int64_t B = dist.size(0), I = dist.size(1);
    int64_t k_eff = std::min<int64_t>(k, I - 1);
    if (k_eff <= 0) {
        NeighborSet out;
        out.index = torch::zeros({B, I, 0}, torch::kInt64);
        out.mask = torch::zeros({B, I, 0}, dist.options());
        return out;
    }
    auto [sorted, order] = torch::sort(dist, /*stable=*/true, /*dim=*/-1, /*descending=*/false);
    NeighborSet out;
    out.index = order.narrow(-1, 0, k_eff);
    out.mask = sorted.narrow(-1, 0, k_eff).isfinite().to(dist.dtype()) *
               valid_f.unsqueeze(-1);
    return out;
}

/// dist[b,i,i] and dist[b,i,j] for invalid j become +inf so neither self
/// loops nor padding slots can be selected.
torch::Tensor mask_candidates(torch::Tensor dist, const torch::Tensor& valid_f) {
    int64_t I = dist.size(1);
    const auto inf = std::numeric_limits<double>::infinity();
    auto self = torch::eye(I, torch::TensorOptions().dtype(torch::kBool)).unsqueeze(0);
    dist = dist.masked_fill(self, inf);
    return torch::where((valid_f.unsqueeze(1) > 0.5).expand_as(dist), dist,
                        torch::full_like(dist, inf));
}

torch::Tensor ones_valid(const torch::Tensor& positions) {
    return torch::ones({positions.size(0), positions.size(1)},
                       positions.options());
}

}  // namespace

torch::Tensor AgentFeature::vec() const {
    require(defined(), "agent feature needs both latent and history");
    require(z.dim() == 2 && h.dim() == 2 && z.size(0) == h.size(0),
            "agent latent/history must be [B, dim] with matching batch");
    return torch::cat({z, h}, -1);
}

NeighborSet knn_neighbors(const torch::Tensor& positions, int64_t k, const torch::Tensor& valid) {
    require(positions.defined() && positions.dim() == 3 && positions.size(1) >= 1,
            "knn_neighbors expects positions [B, I, P] with I >= 1");
    require(k >= 0, "knn_neighbors needs k >= 0");
    auto valid_f = valid.defined() ? valid.to(positions.dtype()) : ones_valid(positions);
    require(valid_f.sizes().equals({positions.size(0), positions.size(1)}),
            "validity mask must be [B, I]");
    auto diff = positions.unsqueeze(2) - positions.unsqueeze(1);
    auto dist = diff.square().sum(-1).sqrt();
    return select_nearest(mask_candidates(dist, valid_f), k, valid_f);
}

InteractionModuleImpl::InteractionModuleImpl(const ModelConfig& cfg_) : cfg(cfg_) {
    cfg.validate();
    u_dim = 1 + 4 + 1 + cfg.z_what_dim + cfg.h_obj_dim;
    u_r_dim = cfg.z_mask_dim + cfg.h_mask_dim;
    const int64_t d = cfg.widths.inter_dim;

    f_oo = register_module("f_oo", make_mlp(2 * u_dim, {d}, d));
    rel_dist = register_module("rel_dist", make_mlp(2 * u_dim, {d}, 1));
    spat_enc = register_module(
        "spat_enc",
        ConvEncoder(3,
                    std::vector<int64_t>{cfg.widths.glimpse_enc_channels,
                                         cfg.widths.glimpse_enc_channels},
                    kSpatialPatch, cfg.widths.head_hidden));
    spat_mlp = register_module("spat_mlp", make_mlp(cfg.widths.head_hidden + 2, {d}, d));
    f_loc = register_module("f_loc", make_mlp(u_r_dim + u_dim, {d}, d));
    f_w = register_module(
        "f_w", make_mlp(cfg.act_enhanced_dim + cfg.h_mask_dim + 4 + cfg.h_obj_dim, {d}, d));
    f_t_loc = register_module("f_t_loc", make_mlp(d, {d}, d));
    f_t_glob = register_module("f_t_glob", make_mlp(u_r_dim, {}, d));
    const int64_t fused_in = cfg.concat_interactions ? 3 * d : d;
    ambient = register_module("ambient",
                              make_mlp(fused_in, cfg.widths.ambient_hidden,
                                       cfg.widths.inter_out_dim));
    to(cfg.dtype);
}

torch::Tensor InteractionModuleImpl::object_features(const ObjectSet& objects) const {
    require(objects.z.pres.defined(), "object features need a populated slot set");
    return torch::cat({objects.z.pres, objects.z.where, objects.z.depth, objects.z.what,
                       objects.hidden},
                      -1);
}

InteractionGraph InteractionModuleImpl::build_graph(const ObjectSet& objects,
                                                    const AgentFeature& agent,
                                                    const torch::Tensor& mu_mix) {
    require(agent.defined(), "graph needs the agent feature");
    require(mu_mix.defined() && mu_mix.dim() == 4 && mu_mix.size(1) == 3,
            "graph needs the object-free scene as [B, 3, H, W]");
    require(mu_mix.size(0) == objects.batch(), "scene/object batch mismatch");
    require(mu_mix.size(2) == cfg.image_h && mu_mix.size(3) == cfg.image_w,
            "scene resolution must match the configured frame size");
    require(agent.z.size(0) == objects.batch(), "agent/object batch mismatch");
    require(agent.z.size(-1) == cfg.z_mask_dim && agent.h.size(-1) == cfg.h_mask_dim,
            "agent feature widths must match the configured mask latent/history");

    InteractionGraph g;
    g.features = object_features(objects);
    require(g.features.size(-1) == u_dim, "object feature width mismatch");
    g.where = objects.z.where;
    g.hidden = objects.hidden;
    g.positions = objects.z.where.narrow(-1, 2, 2);
    g.valid = (objects.ids >= 0).to(g.features.dtype());
    g.agent = agent;
    g.mu_mix = mu_mix;
    g.mode = cfg.inter_mode;
    g.requested_k = cfg.fully_connected ? std::max<int64_t>(objects.slots() - 1, 0) : cfg.knn_k;

    if (objects.slots() == 0) {
        g.neighbors.index = torch::zeros({objects.batch(), 0, 0}, torch::kInt64);
        g.neighbors.mask = torch::zeros({objects.batch(), 0, 0}, g.features.options());
        return g;
    }
    if (cfg.learned_knn_distance) {
        int64_t B = objects.batch(), I = objects.slots();
        auto ui = g.features.unsqueeze(2).expand({B, I, I, u_dim});
        auto uj = g.features.unsqueeze(1).expand({B, I, I, u_dim});
        auto w = rel_dist->forward(torch::cat({ui, uj}, -1)).squeeze(-1);
        g.neighbors = select_nearest(mask_candidates(w, g.valid), g.requested_k, g.valid);
    } else {
        g.neighbors = knn_neighbors(g.positions, g.requested_k, g.valid);
    }
    return g;
}

torch::Tensor InteractionModuleImpl::object_object(const InteractionGraph& graph) {
    int64_t B = graph.batch(), I = graph.slots(), k = graph.neighbors.k();
    auto opts = graph.features.options();
    if (I == 0 || k == 0) return torch::zeros({B, I, cfg.widths.inter_dim}, opts);
    auto gather_idx = graph.neighbors.index.unsqueeze(-1).expand({B, I, k, u_dim});
    auto u_j = graph.features.unsqueeze(1).expand({B, I, I, u_dim}).gather(2, gather_idx);
    auto u_i = graph.features.unsqueeze(2).expand({B, I, k, u_dim});
    auto msg = f_oo->forward(torch::cat({u_i, u_j}, -1));
    return (msg * graph.neighbors.mask.unsqueeze(-1)).sum(2);
}

torch::Tensor InteractionModuleImpl::spatial_constraint(const torch::Tensor& mu_mix,
                                                        const torch::Tensor& where) {
    require(mu_mix.defined() && mu_mix.dim() == 4 && mu_mix.size(1) == 3,
            "spatial constraint needs the scene as [B, 3, H, W]");
    require(where.defined() && where.dim() == 3 && where.size(-1) == 4 &&
                where.size(0) == mu_mix.size(0),
            "spatial constraint needs boxes [B, I, 4] over the same batch");
    int64_t B = where.size(0), I = where.size(1);
    if (I == 0) return torch::zeros({B, 0, cfg.widths.inter_dim}, mu_mix.options());

    // Sample a window of twice the box side; border clamping realizes the
    // clip against the frame edge.
    auto opts = mu_mix.options();
    auto axis = pixel_axis(kSpatialPatch, opts);
    auto scale = where.narrow(-1, 0, 2).reshape({B * I, 2});
    auto shift = where.narrow(-1, 2, 2).reshape({B * I, 2});
    auto gx = shift.narrow(-1, 0, 1).unsqueeze(-1) +
              2.0 * scale.narrow(-1, 0, 1).unsqueeze(-1) * axis.view({1, 1, kSpatialPatch});
    auto gy = shift.narrow(-1, 1, 1).unsqueeze(-1) +
              2.0 * scale.narrow(-1, 1, 1).unsqueeze(-1) * axis.view({1, 1, kSpatialPatch});
    auto grid = torch::stack({gx.expand({B * I, kSpatialPatch, kSpatialPatch}),
                              gy.transpose(1, 2).expand({B * I, kSpatialPatch, kSpatialPatch})},
                             -1);
    auto frames = mu_mix.repeat_interleave(I, 0);
    auto patch = torch::nn::functional::grid_sample(
        frames, grid,
        torch::nn::functional::GridSampleFuncOptions()
            .mode(torch::kBilinear)
            .padding_mode(torch::kBorder)
            .align_corners(false));
    auto code = spat_enc->forward(patch);
    auto out = spat_mlp->forward(torch::cat({code, scale}, -1));
    return out.view({B, I, cfg.widths.inter_dim});
}

torch::Tensor InteractionModuleImpl::agent_object_local(const InteractionGraph& graph) {
    require(graph.agent.defined(), "local coupling needs the agent feature");
    require(graph.agent.action.defined() &&
                graph.agent.action.size(-1) == cfg.act_enhanced_dim,
            "local coupling needs the enhanced action");
    int64_t B = graph.batch(), I = graph.slots();
    auto u_r = graph.agent.vec().unsqueeze(1).expand({B, I, u_r_dim});
    auto u_loc = f_loc->forward(torch::cat({u_r, graph.features}, -1));
    auto pos_r = torch::cat({graph.agent.action, graph.agent.h}, -1)
                     .unsqueeze(1)
                     .expand({B, I, cfg.act_enhanced_dim + cfg.h_mask_dim});
    auto pos_i = torch::cat({graph.where, graph.hidden}, -1);
    auto w = f_w->forward(torch::cat({pos_r, pos_i}, -1));
    return f_t_loc->forward(w * u_loc);
}

torch::Tensor InteractionModuleImpl::agent_object_global(const AgentFeature& agent) {
    return f_t_glob->forward(agent.vec());
}

torch::Tensor InteractionModuleImpl::total_interaction(const InteractionGraph& graph) {
    int64_t B = graph.batch(), I = graph.slots();
    const int64_t d = cfg.widths.inter_dim;
    auto opts = graph.features.options();
    if (I == 0) return torch::zeros({B, 0, cfg.widths.inter_out_dim}, opts);

    auto e_o = object_object(graph);
    auto e_s = spatial_constraint(graph.mu_mix, graph.where);
    torch::Tensor e_t;
    switch (graph.mode) {
        case InterMode::kNone:
            e_t = torch::zeros({B, I, d}, opts);
            break;
        case InterMode::kLocal:
            e_t = agent_object_local(graph);
            break;
        case InterMode::kGlobal:
            e_t = agent_object_global(graph.agent).unsqueeze(1).expand({B, I, d});
            break;
        default:
            throw Error("unknown interaction mode");
    }
    auto fused = cfg.concat_interactions ? ambient->forward(torch::cat({e_o, e_s, e_t}, -1))
                                         : ambient->forward(e_o + e_s + e_t);
    return fused * graph.valid.unsqueeze(-1);
}

}  // namespace gatsbi
