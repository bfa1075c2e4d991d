#include "gatsbi/objects.hpp"

#include <cmath>
#include <map>

#include "gatsbi/tensor_store.hpp"

namespace gatsbi {

namespace F = torch::nn::functional;

namespace {

void push_conv_gn_celu(torch::nn::Sequential& net, int64_t in_ch, int64_t out_ch, int64_t kernel,
                       int64_t stride) {
    net->push_back(torch::nn::Conv2d(
        torch::nn::Conv2dOptions(in_ch, out_ch, kernel).stride(stride).padding(kernel / 2)));
    net->push_back(torch::nn::GroupNorm(norm_groups(out_ch), out_ch));
    net->push_back(torch::nn::CELU());
}

/// Relaxed-Bernoulli draw: sigmoid((logit + logistic noise) / temperature).
torch::Tensor relaxed_bernoulli(const torch::Tensor& logit, double temperature,
                                RandomSource& rng) {
    auto u = rng.uniform(logit.sizes().vec(), logit.scalar_type()).clamp(1e-6, 1.0 - 1e-6);
    auto noise = torch::log(u) - torch::log1p(-u);
    return torch::sigmoid((logit + noise) / temperature);
}

/// Normalized centers of the out-size pixel grid (align_corners=false).
torch::Tensor pixel_axis(int64_t size, const torch::TensorOptions& opts) {
    return (torch::arange(size, opts) * 2.0 + 1.0) / static_cast<double>(size) - 1.0;
}

torch::Tensor gather_slots(const torch::Tensor& t, const torch::Tensor& order) {
    if (t.dim() == 2) return t.gather(1, order);
    auto idx = order.unsqueeze(-1).expand({order.size(0), order.size(1), t.size(2)});
    return t.gather(1, idx);
}

/// Splits a per-cell conv head output [B, 2k, G, G] into a Gaussian over
/// [B, G², k] (row-major cells, matching cell_centers).
GaussianLatent grid_gaussian(const torch::Tensor& head_out) {
    int64_t k = head_out.size(1) / 2;
    auto flat = head_out.permute({0, 2, 3, 1}).reshape({head_out.size(0), -1, 2 * k});
    return {flat.narrow(-1, 0, k), flat.narrow(-1, k, k)};
}

GaussianLatent unit_gaussian_like(const torch::Tensor& mean) {
    return {torch::zeros_like(mean), torch::zeros_like(mean)};
}

GaussianLatent reshape_gaussian(const GaussianLatent& g, int64_t batch, int64_t slots) {
    return {g.mean.view({batch, slots, -1}), g.log_std.view({batch, slots, -1})};
}

/// Inert slot box: identity window keeps the paste grid finite at zero weight.
torch::Tensor pad_box(const torch::TensorOptions& opts) {
    return torch::tensor({1.0, 1.0, 0.0, 0.0}, opts).view({1, 1, 4});
}

}  // namespace

torch::Tensor ObjectSet::alive(double threshold) const {
    return z.pres.squeeze(-1) > threshold;
}

torch::Tensor cell_centers(int64_t grid, const torch::TensorOptions& opts) {
    auto axis = (torch::arange(grid, opts) * 2.0 + 1.0) / static_cast<double>(grid) - 1.0;
    auto y = axis.view({grid, 1}).expand({grid, grid});
    auto x = axis.view({1, grid}).expand({grid, grid});
    return torch::stack({x.reshape(-1), y.reshape(-1)}, -1);
}

torch::Tensor bernoulli_kl(const torch::Tensor& q, const torch::Tensor& p) {
    require(q.sizes().equals(p.sizes()), "bernoulli_kl shape mismatch");
    auto qc = q.clamp(1e-6, 1.0 - 1e-6);
    auto pc = p.clamp(1e-6, 1.0 - 1e-6);
    return qc * (torch::log(qc) - torch::log(pc)) +
           (1.0 - qc) * (torch::log1p(-qc) - torch::log1p(-pc));
}

torch::Tensor paste_glimpses(const torch::Tensor& glimpses, const torch::Tensor& where,
                             int64_t out_h, int64_t out_w) {
    require(glimpses.dim() == 5, "paste_glimpses wants glimpses [B,I,C,g,g]");
    require(where.dim() == 3 && where.size(2) == 4 && where.size(0) == glimpses.size(0) &&
                where.size(1) == glimpses.size(1),
            "paste_glimpses where must be [B,I,4] matching the glimpses");
    int64_t B = glimpses.size(0), I = glimpses.size(1), C = glimpses.size(2);
    if (I == 0) return torch::zeros({B, 0, C, out_h, out_w}, glimpses.options());
    require(where.narrow(-1, 0, 2).min().item<double>() > 0.0,
            "paste_glimpses needs strictly positive scales");

    auto opts = glimpses.options();
    auto x = pixel_axis(out_w, opts).view({1, 1, out_w});
    auto y = pixel_axis(out_h, opts).view({1, out_h, 1});
    auto w = where.reshape({B * I, 4});
    auto gx = (x - w.select(1, 2).view({-1, 1, 1})) / w.select(1, 0).view({-1, 1, 1});
    auto gy = (y - w.select(1, 3).view({-1, 1, 1})) / w.select(1, 1).view({-1, 1, 1});
    auto grid = torch::stack({gx.expand({B * I, out_h, out_w}), gy.expand({B * I, out_h, out_w})},
                             -1);
    auto out = F::grid_sample(glimpses.reshape({B * I, C, glimpses.size(3), glimpses.size(4)}),
                              grid,
                              F::GridSampleFuncOptions()
                                  .mode(torch::kBilinear)
                                  .padding_mode(torch::kZeros)
                                  .align_corners(false));
    return out.view({B, I, C, out_h, out_w});
}

torch::Tensor crop_glimpses(const torch::Tensor& frame, const torch::Tensor& where,
                            int64_t glimpse_hw) {
    require(frame.dim() == 4, "crop_glimpses wants a frame [B,C,H,W]");
    require(where.dim() == 3 && where.size(2) == 4 && where.size(0) == frame.size(0),
            "crop_glimpses where must be [B,I,4] matching the frame batch");
    int64_t B = frame.size(0), I = where.size(1), C = frame.size(1);
    if (I == 0) return torch::zeros({B, 0, C, glimpse_hw, glimpse_hw}, frame.options());

    auto opts = frame.options();
    auto x = pixel_axis(glimpse_hw, opts).view({1, 1, glimpse_hw});
    auto y = pixel_axis(glimpse_hw, opts).view({1, glimpse_hw, 1});
    auto w = where.reshape({B * I, 4});
    auto gx = w.select(1, 2).view({-1, 1, 1}) + w.select(1, 0).view({-1, 1, 1}) * x;
    auto gy = w.select(1, 3).view({-1, 1, 1}) + w.select(1, 1).view({-1, 1, 1}) * y;
    auto grid = torch::stack(
        {gx.expand({B * I, glimpse_hw, glimpse_hw}), gy.expand({B * I, glimpse_hw, glimpse_hw})},
        -1);
    auto src = frame.repeat_interleave(I, 0);
    auto out = F::grid_sample(src, grid,
                              F::GridSampleFuncOptions()
                                  .mode(torch::kBilinear)
                                  .padding_mode(torch::kZeros)
                                  .align_corners(false));
    return out.view({B, I, C, glimpse_hw, glimpse_hw});
}

torch::Tensor compose_full(const AlphaComposite& comp, const torch::Tensor& mu_mix,
                           std::optional<double> alpha_fix) {
    require(comp.fg.sizes().equals(mu_mix.sizes()), "compose_full fg/mu_mix shape mismatch");
    require(comp.alpha.dim() == 4 && comp.alpha.size(1) == 1 &&
                comp.alpha.size(0) == mu_mix.size(0) && comp.alpha.size(2) == mu_mix.size(2) &&
                comp.alpha.size(3) == mu_mix.size(3),
            "compose_full alpha must be [B,1,H,W] matching the frames");
    torch::Tensor a = comp.alpha;
    if (alpha_fix.has_value()) {
        require(*alpha_fix >= 0.0 && *alpha_fix <= 1.0, "alpha_fix must lie in [0,1]");
        a = torch::full_like(comp.alpha, *alpha_fix);
    }
    return a * comp.fg + (1.0 - a) * mu_mix;
}

ObjectSet concat_sets(const ObjectSet& a, const ObjectSet& b) {
    require(a.batch() == b.batch(), "concat_sets batch mismatch");
    ObjectSet out;
    out.z.pres = torch::cat({a.z.pres, b.z.pres}, 1);
    out.z.where = torch::cat({a.z.where, b.z.where}, 1);
    out.z.depth = torch::cat({a.z.depth, b.z.depth}, 1);
    out.z.what = torch::cat({a.z.what, b.z.what}, 1);
    out.hidden = torch::cat({a.hidden, b.hidden}, 1);
    out.cell = torch::cat({a.cell, b.cell}, 1);
    out.ids = torch::cat({a.ids, b.ids}, 1);
    out.next_id = b.next_id;
    return out;
}

ObjectLoss object_elbo(const torch::Tensor& frames, const std::vector<ObjectsStep>& steps,
                       double sigma_obs) {
    require(frames.dim() == 5, "object_elbo wants frames [B,T,3,H,W]");
    require(frames.size(1) == static_cast<int64_t>(steps.size()),
            "object_elbo needs one step per frame");
    require(sigma_obs > 0.0, "object_elbo needs a positive sigma_obs");

    auto opts = frames.options();
    ObjectLoss loss;
    loss.nll = torch::zeros({}, opts);
    loss.kl_pres = torch::zeros({}, opts);
    loss.kl_where = torch::zeros({}, opts);
    loss.kl_depth = torch::zeros({}, opts);
    loss.kl_what = torch::zeros({}, opts);
    for (size_t t = 0; t < steps.size(); ++t) {
        const ObjectsStep& s = steps[t];
        loss.nll = loss.nll +
                   gaussian_nll_per_sample(frames.select(1, static_cast<int64_t>(t)), s.mu,
                                           sigma_obs)
                       .mean();
        for (const ObjectPosteriors* bank : {&s.discovery, &s.propagation}) {
            if (!bank->defined()) continue;
            loss.kl_pres = loss.kl_pres + bernoulli_kl(bank->pres_q, bank->pres_p).sum(1).mean();
            loss.kl_where =
                loss.kl_where + kl_diag_gaussian(bank->where_q, bank->where_p).sum(1).mean();
            loss.kl_depth =
                loss.kl_depth + kl_diag_gaussian(bank->depth_q, bank->depth_p).sum(1).mean();
            loss.kl_what =
                loss.kl_what + kl_diag_gaussian(bank->what_q, bank->what_p).sum(1).mean();
        }
    }
    loss.total = loss.nll + loss.kl_pres + loss.kl_where + loss.kl_depth + loss.kl_what;
    return loss;
}

PropagationHeadImpl::PropagationHeadImpl(int64_t code_dim, int64_t h_dim, int64_t hidden,
                                         int64_t z_what_dim) {
    feat = register_module("feat", make_mlp(code_dim + h_dim, {hidden}, hidden));
    where = register_module("where", GaussianHead(hidden, 4));
    depth = register_module("depth", GaussianHead(hidden, 1));
    what = register_module("what", GaussianHead(hidden, z_what_dim));
    pres = register_module("pres", torch::nn::Linear(hidden, 1));
}

PropagationHeadImpl::Out PropagationHeadImpl::forward(const torch::Tensor& code,
                                                      const torch::Tensor& h) {
    auto f = torch::celu(feat->forward(torch::cat({code, h}, -1)));
    return {where->forward(f), depth->forward(f), what->forward(f), pres->forward(f)};
}

ObjectsModuleImpl::ObjectsModuleImpl(const ModelConfig& cfg_) : cfg(cfg_) {
    cfg.validate();
    int64_t size = cfg.image_h;
    int64_t stages = 0;
    while (size > cfg.grid_size) {
        require(size % 2 == 0, "image size must halve down to the discovery grid");
        size /= 2;
        ++stages;
    }
    require(size == cfg.grid_size && stages >= 1,
            "discovery grid must be the image size divided by a power of two");

    torch::nn::Sequential trunk;
    int64_t prev = 6;  // frame ⊕ salient residual
    for (int64_t s = 0; s < stages; ++s) {
        push_conv_gn_celu(trunk, prev, cfg.widths.obj_enc_channels, 3, 2);
        prev = cfg.widths.obj_enc_channels;
    }
    disc_trunk = register_module("disc_trunk", trunk);
    disc_pres = register_module("disc_pres", torch::nn::Conv2d(prev, 1, 1));
    disc_where = register_module("disc_where", torch::nn::Conv2d(prev, 8, 1));
    disc_depth = register_module("disc_depth", torch::nn::Conv2d(prev, 2, 1));
    disc_what = register_module("disc_what", torch::nn::Conv2d(prev, 2 * cfg.z_what_dim, 1));

    track = register_module(
        "track", torch::nn::LSTMCell(cfg.widths.inter_out_dim, cfg.h_obj_dim));
    glimpse_enc = register_module(
        "glimpse_enc",
        ConvEncoder(3,
                    std::vector<int64_t>{cfg.widths.glimpse_enc_channels,
                                         cfg.widths.glimpse_enc_channels},
                    cfg.glimpse_size, cfg.widths.head_hidden));
    post_head = register_module("post_head",
                                PropagationHead(cfg.widths.head_hidden, cfg.h_obj_dim,
                                                cfg.widths.head_hidden, cfg.z_what_dim));
    prior_head = register_module("prior_head",
                                 PropagationHead(cfg.widths.head_hidden, cfg.h_obj_dim,
                                                 cfg.widths.head_hidden, cfg.z_what_dim));
    glimpse_dec = register_module(
        "glimpse_dec",
        SubPixelDecoder(cfg.z_what_dim,
                        std::vector<int64_t>{cfg.widths.glimpse_dec_channels,
                                             cfg.widths.glimpse_dec_channels},
                        cfg.glimpse_size, 4));
    this->to(cfg.dtype);
}

ObjectSet ObjectsModuleImpl::empty_set(int64_t batch) const {
    auto opts = torch::TensorOptions().dtype(cfg.dtype);
    ObjectSet set;
    set.z.pres = torch::zeros({batch, 0, 1}, opts);
    set.z.where = torch::zeros({batch, 0, 4}, opts);
    set.z.depth = torch::zeros({batch, 0, 1}, opts);
    set.z.what = torch::zeros({batch, 0, cfg.z_what_dim}, opts);
    set.hidden = torch::zeros({batch, 0, cfg.h_obj_dim}, opts);
    set.cell = torch::zeros({batch, 0, cfg.h_obj_dim}, opts);
    set.ids = torch::zeros({batch, 0}, torch::kInt64);
    set.next_id = torch::zeros({batch}, torch::kInt64);
    return set;
}

std::pair<ObjectSet, ObjectPosteriors> ObjectsModuleImpl::discover(const torch::Tensor& frame,
                                                                   const torch::Tensor& salient,
                                                                   const ObjectSet& existing,
                                                                   RandomSource& rng) {
    require(frame.dim() == 4 && frame.size(1) == 3 && frame.size(2) == cfg.image_h &&
                frame.size(3) == cfg.image_w,
            "discover wants frames [B,3,H,W] at the configured size");
    require(salient.sizes().equals(frame.sizes()), "salient residual must match the frame shape");
    require(existing.batch() == frame.size(0), "existing object set batch mismatch");

    int64_t B = frame.size(0);
    int64_t G = cfg.grid_size;
    int64_t G2 = G * G;
    auto opts = frame.options();

    auto f = disc_trunk->forward(torch::cat({frame, salient}, 1));
    auto pres_logit_q = disc_pres->forward(f).flatten(1);  // [B, G2]
    auto where_q = grid_gaussian(disc_where->forward(f));
    auto depth_q = grid_gaussian(disc_depth->forward(f));
    auto what_q = grid_gaussian(disc_what->forward(f));

    // Rejection prior on cells whose center an alive box already covers.
    auto centers = cell_centers(G, opts);  // [G2, 2]
    torch::Tensor covered;
    if (existing.slots() > 0) {
        auto alive = existing.alive(cfg.pres_threshold);                    // [B, I]
        auto boxes = existing.z.where;                                      // [B, I, 4]
        auto dist = (centers.view({1, 1, G2, 2}) - boxes.narrow(-1, 2, 2).unsqueeze(2)).abs();
        auto inside = (dist <= boxes.narrow(-1, 0, 2).unsqueeze(2)).all(-1);  // [B, I, G2]
        covered = (inside & alive.unsqueeze(-1)).any(1);                      // [B, G2]
    } else {
        covered = torch::zeros({B, G2}, torch::kBool);
    }
    auto pres_logit_p = torch::where(covered,
                                     torch::full({B, G2}, kCoveredPresPriorLogit, opts),
                                     torch::full({B, G2}, kDiscoverPresPriorLogit, opts));

    ObjectPosteriors bank;
    bank.pres_q = torch::sigmoid(pres_logit_q);
    bank.pres_p = torch::sigmoid(pres_logit_p);
    bank.where_q = where_q;
    bank.where_p = unit_gaussian_like(where_q.mean);
    bank.depth_q = depth_q;
    bank.depth_p = unit_gaussian_like(depth_q.mean);
    bank.what_q = what_q;
    bank.what_p = unit_gaussian_like(what_q.mean);

    // Fixed draw order: presence, where, depth, what.
    auto pres_s = relaxed_bernoulli(pres_logit_q, cfg.pres_temperature, rng);  // [B, G2]
    auto raw_where = reparam_sample(where_q, rng);                             // [B, G2, 4]
    auto depth_s = reparam_sample(depth_q, rng);
    auto what_s = reparam_sample(what_q, rng);
    auto scale = kMaxObjectScale * torch::sigmoid(raw_where.narrow(-1, 0, 2));
    auto shift = centers.unsqueeze(0) + (2.0 / G) * torch::tanh(raw_where.narrow(-1, 2, 2));
    auto where_s = torch::cat({scale, shift}, -1);

    // Alive candidates by descending presence (stable: ties keep the smaller
    // cell index), admitted up to the remaining per-row capacity.
    auto [sorted_pres, order] = torch::sort(pres_s, /*stable=*/true, 1, /*descending=*/true);
    auto capacity = existing.slots() > 0
                        ? (cfg.max_objects - existing.alive(cfg.pres_threshold).sum(1))
                              .clamp_min(0)
                        : torch::full({B}, cfg.max_objects, torch::kInt64);
    auto counts = torch::minimum((sorted_pres > cfg.pres_threshold).sum(1), capacity);
    int64_t W = counts.max().item<int64_t>();

    auto head = order.narrow(1, 0, W);
    auto valid = torch::arange(W, torch::kInt64).unsqueeze(0) < counts.unsqueeze(1);  // [B, W]
    auto valid_f = valid.unsqueeze(-1).to(opts.dtype());

    ObjectSet entries;
    entries.z.pres = gather_slots(pres_s.unsqueeze(-1), head) * valid_f;
    entries.z.where = torch::where(valid.unsqueeze(-1), gather_slots(where_s, head),
                                   pad_box(opts));
    entries.z.depth = gather_slots(depth_s, head) * valid_f;
    entries.z.what = gather_slots(what_s, head) * valid_f;
    entries.hidden = torch::zeros({B, W, cfg.h_obj_dim}, opts);
    entries.cell = torch::zeros({B, W, cfg.h_obj_dim}, opts);
    auto fresh = existing.next_id.unsqueeze(1) + torch::arange(W, torch::kInt64).unsqueeze(0);
    entries.ids = torch::where(valid, fresh, torch::full_like(fresh, -1));
    entries.next_id = existing.next_id + counts;
    return {entries, bank};
}

std::pair<ObjectSet, ObjectPosteriors> ObjectsModuleImpl::propagate(
    const torch::Tensor& frame, const ObjectSet& objects, const torch::Tensor& interactions,
    RandomSource& rng, bool use_posterior) {
    int64_t B = objects.batch();
    int64_t I = objects.slots();
    if (I == 0) return {objects, ObjectPosteriors{}};

    auto opts = objects.z.pres.options();
    torch::Tensor inter = interactions;
    if (!inter.defined()) inter = torch::zeros({B, I, cfg.widths.inter_out_dim}, opts);
    require(inter.dim() == 3 && inter.size(0) == B && inter.size(1) == I &&
                inter.size(2) == cfg.widths.inter_out_dim,
            "interaction vectors must be [B,I,inter_out]");

    auto hc = track->forward(inter.reshape({B * I, -1}),
                             std::make_tuple(objects.hidden.reshape({B * I, -1}),
                                             objects.cell.reshape({B * I, -1})));
    auto h2 = std::get<0>(hc);
    auto c2 = std::get<1>(hc);

    torch::Tensor code;
    if (use_posterior) {
        require(frame.defined(), "posterior propagation needs the current frame");
        auto glimpses = crop_glimpses(frame, objects.z.where, cfg.glimpse_size);
        code = glimpse_enc->forward(
            glimpses.reshape({B * I, 3, cfg.glimpse_size, cfg.glimpse_size}));
    } else {
        code = torch::zeros({B * I, cfg.widths.head_hidden}, opts);
    }
    auto post = post_head->forward(code, h2);
    auto prior = prior_head->forward(torch::zeros({B * I, cfg.widths.head_hidden}, opts), h2);
    const PropagationHeadImpl::Out& side = use_posterior ? post : prior;

    // Fixed draw order: presence, where, depth, what.
    auto update = relaxed_bernoulli(side.pres_logit.view({B, I}), cfg.pres_temperature, rng);
    auto raw_where = reparam_sample(side.where, rng).view({B, I, 4});
    auto depth_s = reparam_sample(side.depth, rng).view({B, I, 1});
    auto what_s = reparam_sample(side.what, rng).view({B, I, -1});

    ObjectSet out;
    out.z.pres = objects.z.pres * update.unsqueeze(-1);
    auto scale = kMaxObjectScale * torch::sigmoid(raw_where.narrow(-1, 0, 2));
    auto shift = objects.z.where.narrow(-1, 2, 2) +
                 (1.0 / cfg.grid_size) * torch::tanh(raw_where.narrow(-1, 2, 2));
    out.z.where = torch::cat({scale, shift}, -1);
    out.z.depth = depth_s;
    out.z.what = what_s;
    out.hidden = h2.view({B, I, -1});
    out.cell = c2.view({B, I, -1});
    out.ids = objects.ids;
    out.next_id = objects.next_id;

    ObjectPosteriors bank;
    bank.pres_q = torch::sigmoid(post.pres_logit.view({B, I}));
    bank.pres_p = torch::sigmoid(prior.pres_logit.view({B, I}));
    bank.where_q = reshape_gaussian(post.where, B, I);
    bank.where_p = reshape_gaussian(prior.where, B, I);
    bank.depth_q = reshape_gaussian(post.depth, B, I);
    bank.depth_p = reshape_gaussian(prior.depth, B, I);
    bank.what_q = reshape_gaussian(post.what, B, I);
    bank.what_p = reshape_gaussian(prior.what, B, I);
    return {out, bank};
}

ObjectSet ObjectsModuleImpl::prune(const ObjectSet& objects) const {
    int64_t B = objects.batch();
    int64_t I = objects.slots();
    if (I == 0) return objects;

    auto alive = objects.alive(cfg.pres_threshold);  // [B, I] bool
    auto counts = alive.sum(1);                      // [B]
    int64_t W = counts.max().item<int64_t>();
    auto [unused, order] = torch::sort(alive.to(torch::kInt64), /*stable=*/true, 1,
                                       /*descending=*/true);
    (void)unused;
    auto head = order.narrow(1, 0, W);
    auto valid = torch::arange(W, torch::kInt64).unsqueeze(0) < counts.unsqueeze(1);
    auto opts = objects.z.pres.options();
    auto valid_f = valid.unsqueeze(-1).to(opts.dtype());

    ObjectSet out;
    out.z.pres = gather_slots(objects.z.pres, head) * valid_f;
    out.z.where = torch::where(valid.unsqueeze(-1), gather_slots(objects.z.where, head),
                               pad_box(opts));
    out.z.depth = gather_slots(objects.z.depth, head) * valid_f;
    out.z.what = gather_slots(objects.z.what, head) * valid_f;
    out.hidden = gather_slots(objects.hidden, head) * valid_f;
    out.cell = gather_slots(objects.cell, head) * valid_f;
    out.ids = torch::where(valid, gather_slots(objects.ids, head),
                           torch::full({B, W}, -1, torch::kInt64));
    out.next_id = objects.next_id;
    return out;
}

AlphaComposite ObjectsModuleImpl::render_objects(const ObjectSet& objects) {
    int64_t B = objects.batch();
    int64_t I = objects.slots();
    int64_t H = cfg.image_h, W = cfg.image_w;
    auto opts = objects.z.pres.options();
    if (I == 0) return {torch::zeros({B, 3, H, W}, opts), torch::zeros({B, 1, H, W}, opts)};

    auto dec = glimpse_dec->forward(objects.z.what.reshape({B * I, -1}));
    auto patch = torch::cat({dec.narrow(1, 0, 3), torch::sigmoid(dec.narrow(1, 3, 1))}, 1);
    auto pasted = paste_glimpses(patch.view({B, I, 4, cfg.glimpse_size, cfg.glimpse_size}),
                                 objects.z.where, H, W);
    auto rgb = pasted.narrow(2, 0, 3);                                      // [B, I, 3, H, W]
    auto a = pasted.narrow(2, 3, 1) * objects.z.pres.view({B, I, 1, 1, 1});  // [B, I, 1, H, W]
    auto alpha = 1.0 - (1.0 - a).prod(1);                                    // [B, 1, H, W]

    torch::Tensor fg;
    if (cfg.hard_depth_order) {
        // Front-to-back over-compositing, nearest depth first.
        auto order = torch::argsort(objects.z.depth.squeeze(-1), 1, /*descending=*/false);
        auto color = torch::zeros({B, 3, H, W}, opts);
        auto trans = torch::ones({B, 1, H, W}, opts);
        for (int64_t r = 0; r < I; ++r) {
            auto idx = order.select(1, r);
            auto a_r = a.gather(1, idx.view({B, 1, 1, 1, 1}).expand({B, 1, 1, H, W})).squeeze(1);
            auto rgb_r =
                rgb.gather(1, idx.view({B, 1, 1, 1, 1}).expand({B, 1, 3, H, W})).squeeze(1);
            color = color + trans * a_r * rgb_r;
            trans = trans * (1.0 - a_r);
        }
        fg = color / (alpha + kComposeEps);
    } else {
        // Presence-gated depth weighting; the shift by the per-row minimum
        // keeps exp in range and cancels from the ratio.
        auto shifted = objects.z.depth - std::get<0>(objects.z.depth.min(1, true));
        auto w = a * torch::exp(-shifted).view({B, I, 1, 1, 1});
        fg = (w * rgb).sum(1) / (w.sum(1) + kComposeEps);
    }
    return {fg, alpha};
}

ObjectsStep ObjectsModuleImpl::observe_step(const torch::Tensor& frame,
                                            const torch::Tensor& salient,
                                            const torch::Tensor& mu_mix, const ObjectSet& prev,
                                            const torch::Tensor& interactions, RandomSource& rng,
                                            std::optional<double> alpha_fix) {
    auto [moved, prop_bank] = propagate(frame, prev, interactions, rng, /*use_posterior=*/true);
    auto kept = prune(moved);
    auto [fresh, disc_bank] = discover(frame, salient, kept, rng);
    ObjectsStep step;
    step.objects = concat_sets(kept, fresh);
    step.comp = render_objects(step.objects);
    step.mu = compose_full(step.comp, mu_mix, alpha_fix);
    step.discovery = disc_bank;
    step.propagation = prop_bank;
    return step;
}

ObjectsStep ObjectsModuleImpl::generate_step(const torch::Tensor& mu_mix, const ObjectSet& prev,
                                             const torch::Tensor& interactions, RandomSource& rng,
                                             std::optional<double> alpha_fix) {
    auto [moved, prop_bank] = propagate({}, prev, interactions, rng, /*use_posterior=*/false);
    ObjectsStep step;
    step.objects = prune(moved);
    step.comp = render_objects(step.objects);
    step.mu = compose_full(step.comp, mu_mix, alpha_fix);
    step.propagation = prop_bank;
    return step;
}

void save_object_debug(const std::string& path, const ObjectsStep& step, int64_t batch_index) {
    require(step.mu.defined() && step.comp.alpha.defined(), "debug export needs a rendered step");
    require(batch_index >= 0 && batch_index < step.comp.alpha.size(0),
            "debug export batch index out of range");
    std::map<std::string, torch::Tensor> entries;
    entries["alpha"] = step.comp.alpha.select(0, batch_index).detach();
    entries["fg"] = step.comp.fg.select(0, batch_index).detach();
    entries["obj_where"] = step.objects.z.where.select(0, batch_index).detach();
    entries["obj_pres"] = step.objects.z.pres.select(0, batch_index).squeeze(-1).detach();
    save_tensors(path, entries);
}

}  // namespace gatsbi
