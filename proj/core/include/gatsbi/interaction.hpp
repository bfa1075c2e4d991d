#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "gatsbi/config.hpp"
#include "gatsbi/nets.hpp"
#include "gatsbi/objects.hpp"

namespace gatsbi {

/// Side length of the resampled neighborhood patch fed to the spatial
/// constraint encoder, independent of the frame resolution.
inline constexpr int64_t kSpatialPatch = 16;

/// Agent-side inputs to the interaction graph: the agent's mask latent, its
/// recurrent history (prior-side, so rollouts stay consistent), and the
/// enhanced action. The action is only consulted by the local agent-object
/// mode, where it keys the attention weights.
struct AgentFeature {
    torch::Tensor z;       // [B, z_r]
    torch::Tensor h;       // [B, h_r]
    torch::Tensor action;  // [B, act_enhanced]; may stay undefined outside kLocal

    bool defined() const { return z.defined() && h.defined(); }
    /// u^r: concatenation of latent and history.
    torch::Tensor vec() const;
};

/// Nearest-neighbor edge lists. `index` holds neighbor slot positions along
/// the object axis; `mask` flags which entries are real edges — rows with
/// fewer eligible candidates than k carry padded entries with mask 0.
struct NeighborSet {
    torch::Tensor index;  // [B, I, k] int64
    torch::Tensor mask;   // [B, I, k] float 0/1

    int64_t k() const { return index.defined() ? index.size(2) : 0; }
};

/// Immutable per-timestep view of the scene used by every interaction head.
struct InteractionGraph {
    torch::Tensor features;   // u_i = (pres, where, depth, what, h^o)  [B, I, D]
    torch::Tensor where;      // [B, I, 4]
    torch::Tensor hidden;     // [B, I, h_obj]
    torch::Tensor positions;  // box centers  [B, I, 2]
    torch::Tensor valid;      // 1 for live slots, 0 for padding  [B, I]
    NeighborSet neighbors;
    AgentFeature agent;
    torch::Tensor mu_mix;  // object-free scene reconstruction  [B, 3, H, W]
    InterMode mode = InterMode::kGlobal;
    int64_t requested_k = 0;  // before clipping to I-1

    int64_t batch() const { return features.size(0); }
    int64_t slots() const { return features.size(1); }
};

/// For each of I points, the k nearest other points by Euclidean distance,
/// ties broken toward the smaller index; k is clipped to I-1. Slots with
/// valid=0 are excluded both as queries (mask row 0) and as candidates.
/// positions: [B, I, P]; valid (optional): [B, I].
NeighborSet knn_neighbors(const torch::Tensor& positions, int64_t k,
                          const torch::Tensor& valid = {});

/// Interaction encoders: object-object messages over the kNN graph, a spatial
/// constraint read from the object-free scene around each box, and the
/// agent-object coupling in its three modes (none / local attention / global
/// broadcast). The three terms are fused by an ambient MLP into the vector
/// driving each object's recurrent update.
class InteractionModuleImpl : public torch::nn::Module {
  public:
    explicit InteractionModuleImpl(const ModelConfig& cfg);

    /// u_i = (pres, where, depth, what, h^o) per slot.
    torch::Tensor object_features(const ObjectSet& objects) const;

    /// Assembles the per-timestep graph: features, box centers, validity
    /// (padding slots carry id -1), and the neighbor lists — geometric by
    /// default, through the learned pairwise-distance head when configured.
    /// k is the configured neighbor count, or I-1 when fully connected.
    InteractionGraph build_graph(const ObjectSet& objects, const AgentFeature& agent,
                                 const torch::Tensor& mu_mix);

    /// e^o_i = sum_{j in N(i)} f_oo(u_i, u_j); zero where the neighborhood is
    /// empty, invariant to neighbor order.
    torch::Tensor object_object(const InteractionGraph& graph);

    /// e^s_i: encodes a bilinear crop of mu_mix around each box (window side
    /// twice the box, clamped at the frame border) plus the box scale. The
    /// absolute position enters only through the crop content, so a constant
    /// scene yields position-independent outputs.
    torch::Tensor spatial_constraint(const torch::Tensor& mu_mix, const torch::Tensor& where);

    /// Local agent-object coupling: u_loc = f_loc(u^r, u_i), attention
    /// W = f_w((action, h^r), (where_i, h_i)), e^t_i = f_t_loc(W * u_loc).
    torch::Tensor agent_object_local(const InteractionGraph& graph);

    /// Global coupling: one shared e^t = f_t_glob(u^r) per batch row,
    /// broadcast verbatim to every object.
    torch::Tensor agent_object_global(const AgentFeature& agent);

    /// Fuses e^o + e^s + e^t (or their concatenation) through the ambient MLP
    /// into [B, I, inter_out_dim]. The mode on the graph picks the agent term;
    /// kNone omits it. Padding slots come out exactly zero.
    torch::Tensor total_interaction(const InteractionGraph& graph);

    torch::nn::Sequential f_oo{nullptr};      // pairwise object message
    torch::nn::Sequential rel_dist{nullptr};  // learned pairwise distance (optional graph)
    ConvEncoder spat_enc{nullptr};            // crop encoder
    torch::nn::Sequential spat_mlp{nullptr};  // crop code + box scale -> e^s
    torch::nn::Sequential f_loc{nullptr};     // local pair feature
    torch::nn::Sequential f_w{nullptr};       // local attention weights
    torch::nn::Sequential f_t_loc{nullptr};   // weighted local feature -> e^t
    torch::nn::Sequential f_t_glob{nullptr};  // global agent feature -> e^t
    torch::nn::Sequential ambient{nullptr};   // fused interaction head

    ModelConfig cfg;
    int64_t u_dim = 0;    // per-object feature width
    int64_t u_r_dim = 0;  // agent feature width
};

TORCH_MODULE(InteractionModule);

}  // namespace gatsbi
