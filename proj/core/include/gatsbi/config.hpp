#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include "gatsbi/common.hpp"

namespace gatsbi {

/// How the agent influences each object's dynamics.
enum class InterMode {
    kNone = 1,    // inter1: no agent term
    kLocal = 2,   // inter2: position-aware attention between agent and object
    kGlobal = 3,  // inter3: one broadcast agent embedding (default)
};

std::string to_string(InterMode m);
InterMode inter_mode_from_string(const std::string& s);

/// Channel widths for the neural blocks. Defaults follow the full-scale
/// architecture; desk presets shrink them to stay interactive on a laptop CPU.
struct NetWidths {
    std::vector<int64_t> frame_enc_channels{64, 128, 256, 512};
    std::vector<int64_t> mask_dec_channels{256, 128, 64, 16};
    std::vector<int64_t> comp_enc_channels{32, 32, 64};
    int64_t comp_dec_channels = 32;
    int64_t comp_dec_stride = 1;   // broadcast decode at H/stride, then resize up
    int64_t hist_code_dim = 128;   // reconstruction encoding feeding the histories
    int64_t head_hidden = 128;
    int64_t act_hidden = 64;
    int64_t mode_feat_dim = 64;
    int64_t kp_channels = 64;
    int64_t kp_feat_dim = 128;
    int64_t obj_enc_channels = 32;
    int64_t glimpse_enc_channels = 16;
    int64_t glimpse_dec_channels = 32;
    int64_t inter_dim = 128;
    int64_t inter_out_dim = 32;  // fused per-object interaction vector
    std::vector<int64_t> ambient_hidden{128, 128};
};

/// Static model shape and loss scales. One instance fully determines the
/// network graph; training schedules live in StageSchedule/Curriculum.
struct ModelConfig {
    int64_t image_h = 64;
    int64_t image_w = 64;

    // mixture
    int64_t num_modes = 3;  // K entity slots (agent + background modes)
    int64_t z_mask_dim = 32;
    int64_t h_mask_dim = 128;
    int64_t z_comp_dim = 64;
    int64_t h_comp_dim = 128;
    double sigma_mix = 0.1;
    double residual_delta = 2.0;   // step size of the residual latent update
    double residual_lambda = 1.0;  // weight of the residual magnitude penalty

    // keypoints
    int64_t num_keypoints = 32;
    int64_t z_kp_dim = 16;
    int64_t h_kp_dim = 512;
    double kp_kl_scale = 0.001;
    double kp_heatmap_lambda = 0.01;
    double lambda_sep = 0.02;
    double lambda_sparse = 0.002;

    // objects
    int64_t grid_size = 4;    // discovery proposes on a grid_size^2 lattice
    int64_t max_objects = 7;  // hard cap on concurrently tracked objects
    int64_t z_what_dim = 32;
    int64_t h_obj_dim = 128;  // per-object recurrent state
    int64_t glimpse_size = 16;
    double sigma_obs = 0.1;
    double pres_threshold = 0.5;
    double pres_temperature = 1.0;
    bool hard_depth_order = false;  // false: soft depth-weighted overlap blend

    // interaction
    int64_t knn_k = 3;
    bool fully_connected = false;
    InterMode inter_mode = InterMode::kGlobal;
    bool concat_interactions = false;   // false: sum the three terms, then MLP
    bool learned_knn_distance = false;  // false: build the graph geometrically

    // actions
    int64_t action_dim = 7;
    int64_t act_enhanced_dim = 32;
    bool joint_action_conditioning = true;  // feed enhanced actions everywhere

    bool separate_prior_posterior_rnn = true;
    int64_t best_belief_samples = 50;

    NetWidths widths;
    torch::Dtype dtype = torch::kFloat32;

    int64_t kp_grid() const { return image_h / 4; }

    /// Throws InvariantError naming the first offending field.
    void validate() const;
};

/// When each module's loss is active, in optimizer steps.
/// Keypoints train alone first, the mixture joins, objects join once the
/// mixture-only window closes, and keypoint training stops when the joint
/// window ends. A window of steps pins the composite alpha to a constant.
struct StageSchedule {
    int64_t mixture_start = 80000;
    int64_t objects_start = 110000;
    int64_t keypoint_end = 300000;
    int64_t alpha_fix_start = 110000;
    int64_t alpha_fix_end = 120000;
    double alpha_fix_value = 0.45;

    void validate() const;
};

/// Episode-length curriculum: lengths[i] applies after milestones[i-1].
struct Curriculum {
    std::vector<int64_t> lengths{5, 7, 9, 11, 13, 15, 17, 19, 21, 23, 25, 27, 30};
    std::vector<int64_t> milestones{20000, 30000,  40000,  50000,  60000,  70000,
                                    80000, 90000, 100000, 110000, 120000, 130000};

    void validate() const;
};

struct OptimConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<int64_t> lr_decay_milestones{100000, 150000};
    double lr_decay = 0.8;
    int64_t batch_size = 4;

    void validate() const;
};

struct TrainConfig {
    std::string preset;
    ModelConfig model;
    StageSchedule schedule;
    Curriculum curriculum;
    OptimConfig optim;
    int64_t total_steps = 300000;
    uint64_t seed = 0;

    void validate() const;
};

// Presets carrying the published hyperparameters for the four benchmarks.
TrainConfig make_roll_config();         // single rolling-ball world
TrainConfig make_push_single_config();  // one-arm tabletop push
TrainConfig make_push_multi_config();   // two-arm tabletop push
TrainConfig make_bair_config();         // BAIR robot push

/// Laptop-scale preset for the bundled bouncing-balls world: every schedule
/// count divided by 100, two entity slots, narrow channels.
TrainConfig make_desk_balls_config();

/// Scale any preset's step schedule down by `divisor` (desk mode).
void scale_schedule(TrainConfig& cfg, int64_t divisor);

TrainConfig preset_by_name(const std::string& name);

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::string& path);
void save_train_config(const TrainConfig& cfg, const std::string& path);

}  // namespace gatsbi
