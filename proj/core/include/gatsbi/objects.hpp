#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "gatsbi/config.hpp"
#include "gatsbi/nets.hpp"
#include "gatsbi/rng.hpp"
#include "gatsbi/types.hpp"

namespace gatsbi {

/// Glimpse boxes never exceed half the frame per side.
inline constexpr double kMaxObjectScale = 0.5;
/// Presence prior logit for a free discovery cell (~12% base rate).
inline constexpr double kDiscoverPresPriorLogit = -2.0;
/// Rejection prior for cells whose center an alive object already covers.
inline constexpr double kCoveredPresPriorLogit = -8.0;
/// Denominator guard for the depth-weighted foreground blend.
inline constexpr double kComposeEps = 1e-8;

/// Latent bundle per object slot (or per discovery cell), slot dim second.
struct CellLatents {
    torch::Tensor pres;   // [B, I, 1] in [0, 1]
    torch::Tensor where;  // [B, I, 4] = (s_x, s_y, t_x, t_y), normalized coords
    torch::Tensor depth;  // [B, I, 1]
    torch::Tensor what;   // [B, I, z_what]
};

/// Batched object slots: sampled latents plus per-slot recurrent history and
/// stable ids. A slot is alive iff pres > the presence threshold; rows with
/// fewer alive slots than the widest row carry inert pads (pres 0, id -1,
/// identity box so the paste grid stays finite).
struct ObjectSet {
    CellLatents z;
    torch::Tensor hidden;   // [B, I, h_obj]
    torch::Tensor cell;    // [B, I, h_obj]
    torch::Tensor ids;     // [B, I] int64, unique per row, -1 on pads
    torch::Tensor next_id;  // [B] int64

    int64_t batch() const { return z.pres.size(0); }
    int64_t slots() const { return z.pres.size(1); }
    torch::Tensor alive(double threshold) const;  // [B, I] bool
};

/// Posterior/prior pairs behind one step's samples (discovery covers the full
/// G×G lattice, propagation the incoming slots). Presence entries are
/// probabilities; where Gaussians live in raw (pre-transform) coordinates.
struct ObjectPosteriors {
    torch::Tensor pres_q, pres_p;      // [B, I]
    GaussianLatent where_q, where_p;   // [B, I, 4]
    GaussianLatent depth_q, depth_p;   // [B, I, 1]
    GaussianLatent what_q, what_p;     // [B, I, z_what]

    bool defined() const { return pres_q.defined(); }
};

/// Foreground color and coverage from pasting the decoded glimpses.
/// fg is the depth-resolved color blend; the rendered foreground image is
/// alpha ⊙ fg.
struct AlphaComposite {
    torch::Tensor fg;     // [B, 3, H, W]
    torch::Tensor alpha;  // [B, 1, H, W] in [0, 1]
};

/// One timestep of the object pass.
struct ObjectsStep {
    ObjectSet objects;
    AlphaComposite comp;
    torch::Tensor mu;  // [B, 3, H, W] full reconstruction against the mixture
    ObjectPosteriors discovery;    // undefined on generation steps
    ObjectPosteriors propagation;  // undefined when no slots came in
};

struct ObjectLoss {
    torch::Tensor total;
    torch::Tensor nll;
    torch::Tensor kl_pres;
    torch::Tensor kl_where;
    torch::Tensor kl_depth;
    torch::Tensor kl_what;
};

/// Warp glimpses into frame coordinates: output pixel at normalized u reads
/// the glimpse at (u - t) / s, bilinear, zeros outside, so s=1, t=0 is the
/// identity when the sizes match. Scales must be strictly positive.
torch::Tensor paste_glimpses(const torch::Tensor& glimpses,  // [B, I, C, g, g]
                             const torch::Tensor& where,     // [B, I, 4]
                             int64_t out_h, int64_t out_w);

/// Inverse warp: glimpse pixel at normalized u reads the frame at t + s·u.
torch::Tensor crop_glimpses(const torch::Tensor& frame,  // [B, C, H, W]
                            const torch::Tensor& where,  // [B, I, 4]
                            int64_t glimpse_hw);         // -> [B, I, C, g, g]

/// Centers of the G×G lattice cells in normalized (x, y), row-major: [G², 2].
torch::Tensor cell_centers(int64_t grid, const torch::TensorOptions& opts);

/// KL(Bernoulli(q) ‖ Bernoulli(p)) elementwise; exact zero when q == p.
torch::Tensor bernoulli_kl(const torch::Tensor& q, const torch::Tensor& p);

/// Full reconstruction mu = alpha ⊙ fg + (1 - alpha) ⊙ mu_mix. When alpha_fix
/// is set (the schedule's fixed-alpha window) the map is replaced by that
/// constant everywhere.
torch::Tensor compose_full(const AlphaComposite& comp, const torch::Tensor& mu_mix,
                           std::optional<double> alpha_fix = std::nullopt);

/// Concatenate two slot sets along the slot dim; b's id counter wins.
ObjectSet concat_sets(const ObjectSet& a, const ObjectSet& b);

/// Sum over timesteps of frame NLL under mu (std sigma_obs) plus presence and
/// Gaussian KLs from every defined posterior bank; each term batch-meaned.
ObjectLoss object_elbo(const torch::Tensor& frames,  // [B, T, 3, H, W]
                       const std::vector<ObjectsStep>& steps, double sigma_obs);

/// Posterior/prior head over (glimpse code ⊕ object history): Gaussians for
/// where/depth/what plus a presence-update logit. The prior instance is fed a
/// zero code so both sides share one architecture.
struct PropagationHeadImpl : torch::nn::Module {
    PropagationHeadImpl(int64_t code_dim, int64_t h_dim, int64_t hidden, int64_t z_what_dim);

    struct Out {
        GaussianLatent where;  // raw, 4 dims
        GaussianLatent depth;
        GaussianLatent what;
        torch::Tensor pres_logit;  // [N, 1]
    };
    Out forward(const torch::Tensor& code, const torch::Tensor& h);

    torch::nn::Sequential feat{nullptr};
    GaussianHead where{nullptr}, depth{nullptr}, what{nullptr};
    torch::nn::Linear pres{nullptr};
};
TORCH_MODULE(PropagationHead);

/// Grid-attention discovery and per-object tracking over the salient residual,
/// with glimpse rendering and alpha compositing against the mixture canvas.
///
/// Sampling order is fixed for reproducibility: presence noise first, then
/// where, depth, what.
struct ObjectsModuleImpl : torch::nn::Module {
    explicit ObjectsModuleImpl(const ModelConfig& cfg);

    ObjectSet empty_set(int64_t batch) const;

    /// Proposes new objects on the G×G lattice of concat(frame, salient).
    /// Cells whose center an existing alive box covers get the rejection
    /// presence prior. Returns only the accepted entries — alive candidates by
    /// descending presence (ties by cell index) up to the remaining capacity —
    /// plus the full-lattice posterior bank.
    std::pair<ObjectSet, ObjectPosteriors> discover(const torch::Tensor& frame,
                                                    const torch::Tensor& salient,
                                                    const ObjectSet& existing, RandomSource& rng);

    /// Advances every slot: h' = cell(interaction, h), then samples new
    /// latents from the posterior head (glimpse of `frame` at the previous
    /// box) or the prior head (use_posterior=false; frame may be undefined).
    /// Presence decays multiplicatively, so unsupported objects die off.
    /// Pass an undefined interactions tensor for zero coupling.
    std::pair<ObjectSet, ObjectPosteriors> propagate(const torch::Tensor& frame,
                                                     const ObjectSet& objects,
                                                     const torch::Tensor& interactions,
                                                     RandomSource& rng, bool use_posterior);

    /// Compacts alive slots to the front of each row and drops all-dead
    /// columns; freed tail slots become inert pads.
    ObjectSet prune(const ObjectSet& objects) const;

    /// Decodes every glimpse (RGB raw, alpha sigmoid), pastes by z_where and
    /// resolves overlaps by presence-gated depth weighting:
    ///   a_i = pasted_alpha_i · pres_i,  alpha = 1 - ∏(1 - a_i),
    ///   fg = Σ w_i·rgb_i / (Σ w_i + eps)  with  w_i = a_i·exp(-(depth_i - m)).
    /// With hard_depth_order the blend is replaced by front-to-back over-
    /// compositing in depth order.
    AlphaComposite render_objects(const ObjectSet& objects);

    /// propagate(posterior) → prune → discover → render → compose.
    ObjectsStep observe_step(const torch::Tensor& frame, const torch::Tensor& salient,
                             const torch::Tensor& mu_mix, const ObjectSet& prev,
                             const torch::Tensor& interactions, RandomSource& rng,
                             std::optional<double> alpha_fix = std::nullopt);

    /// Prior-only step: propagation without discovery (no frame to look at).
    ObjectsStep generate_step(const torch::Tensor& mu_mix, const ObjectSet& prev,
                              const torch::Tensor& interactions, RandomSource& rng,
                              std::optional<double> alpha_fix = std::nullopt);

    torch::nn::Sequential disc_trunk{nullptr};
    torch::nn::Conv2d disc_pres{nullptr}, disc_where{nullptr}, disc_depth{nullptr},
        disc_what{nullptr};
    torch::nn::LSTMCell track{nullptr};
    ConvEncoder glimpse_enc{nullptr};
    PropagationHead post_head{nullptr}, prior_head{nullptr};
    SubPixelDecoder glimpse_dec{nullptr};
    ModelConfig cfg;
};
TORCH_MODULE(ObjectsModule);

/// Writes one sample's per-step debug view: entries "alpha" [1,H,W],
/// "fg" [3,H,W], "obj_where" [I,4], "obj_pres" [I].
void save_object_debug(const std::string& path, const ObjectsStep& step, int64_t batch_index = 0);

}  // namespace gatsbi
