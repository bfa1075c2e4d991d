#include "gatsbi/config.hpp"

#include <fstream>

namespace gatsbi {
namespace {

void check(bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw InvariantError("config field '" + field + "' " + why);
}

void check_positive(int64_t v, const std::string& field) {
    check(v > 0, field, "must be positive, got " + std::to_string(v));
}

void check_positive(double v, const std::string& field) {
    check(v > 0.0, field, "must be positive, got " + std::to_string(v));
}

}  // namespace

std::string to_string(InterMode m) {
    switch (m) {
        case InterMode::kNone: return "inter1";
        case InterMode::kLocal: return "inter2";
        case InterMode::kGlobal: return "inter3";
    }
    throw Error("unreachable inter mode");
}

InterMode inter_mode_from_string(const std::string& s) {
    if (s == "inter1") return InterMode::kNone;
    if (s == "inter2") return InterMode::kLocal;
    if (s == "inter3") return InterMode::kGlobal;
    throw Error("unknown interaction mode '" + s + "' (expected inter1|inter2|inter3)");
}

void ModelConfig::validate() const {
    check_positive(image_h, "image_h");
    check_positive(image_w, "image_w");
    check(image_h == image_w, "image_h", "must equal image_w (square frames only)");
    check(image_h % 16 == 0, "image_h", "must be divisible by 16 for the stride-2 encoder ladder");
    check(num_modes >= 2, "num_modes", "needs at least two entity slots");
    check_positive(z_mask_dim, "z_mask_dim");
    check_positive(h_mask_dim, "h_mask_dim");
    check_positive(z_comp_dim, "z_comp_dim");
    check_positive(h_comp_dim, "h_comp_dim");
    check_positive(sigma_mix, "sigma_mix");
    check(residual_delta >= 0.0, "residual_delta", "must be non-negative");
    check(residual_lambda >= 0.0, "residual_lambda", "must be non-negative");
    check_positive(num_keypoints, "num_keypoints");
    check_positive(z_kp_dim, "z_kp_dim");
    check_positive(h_kp_dim, "h_kp_dim");
    check_positive(grid_size, "grid_size");
    check((image_h / 8) % grid_size == 0 || grid_size % (image_h / 8) == 0, "grid_size",
          "must align with the stride-2 discovery encoder on " + std::to_string(image_h) + "px frames");
    check_positive(max_objects, "max_objects");
    check_positive(z_what_dim, "z_what_dim");
    check_positive(h_obj_dim, "h_obj_dim");
    check_positive(glimpse_size, "glimpse_size");
    check(glimpse_size >= 2 && (glimpse_size & (glimpse_size - 1)) == 0, "glimpse_size",
          "must be a power of two for the sub-pixel glimpse decoder");
    check_positive(sigma_obs, "sigma_obs");
    check(pres_threshold >= 0.0 && pres_threshold < 1.0, "pres_threshold", "must lie in [0, 1)");
    check_positive(pres_temperature, "pres_temperature");
    check_positive(knn_k, "knn_k");
    check_positive(action_dim, "action_dim");
    check_positive(act_enhanced_dim, "act_enhanced_dim");
    check_positive(best_belief_samples, "best_belief_samples");
    check(widths.frame_enc_channels.size() == 4, "widths.frame_enc_channels", "needs exactly 4 stages");
    check(widths.mask_dec_channels.size() == 4, "widths.mask_dec_channels", "needs exactly 4 stages");
    check(widths.comp_enc_channels.size() == 3, "widths.comp_enc_channels", "needs exactly 3 stages");
    check_positive(widths.hist_code_dim, "widths.hist_code_dim");
    check(widths.comp_dec_stride >= 1 && image_h % widths.comp_dec_stride == 0,
          "widths.comp_dec_stride", "must divide the image size");
    check(dtype == torch::kFloat32 || dtype == torch::kFloat64, "dtype", "must be float32 or float64");
}

void StageSchedule::validate() const {
    check(mixture_start >= 0, "mixture_start", "must be non-negative");
    check(objects_start >= mixture_start, "objects_start", "cannot precede mixture_start");
    check(keypoint_end >= mixture_start, "keypoint_end", "cannot precede mixture_start");
    check(alpha_fix_end >= alpha_fix_start, "alpha_fix_end", "cannot precede alpha_fix_start");
    check(alpha_fix_value > 0.0 && alpha_fix_value < 1.0, "alpha_fix_value", "must lie in (0, 1)");
}

void Curriculum::validate() const {
    check(!lengths.empty(), "curriculum.lengths", "must not be empty");
    check(milestones.size() == lengths.size() - 1, "curriculum.milestones",
          "must have exactly one fewer entry than lengths");
    for (size_t i = 0; i < lengths.size(); ++i)
        check(lengths[i] >= 2, "curriculum.lengths", "entries must be >= 2");
    for (size_t i = 1; i < lengths.size(); ++i)
        check(lengths[i] > lengths[i - 1], "curriculum.lengths", "must increase strictly");
    for (size_t i = 1; i < milestones.size(); ++i)
        check(milestones[i] > milestones[i - 1], "curriculum.milestones", "must increase strictly");
}

void OptimConfig::validate() const {
    check_positive(lr, "optim.lr");
    check(beta1 >= 0.0 && beta1 < 1.0, "optim.beta1", "must lie in [0, 1)");
    check(beta2 >= 0.0 && beta2 < 1.0, "optim.beta2", "must lie in [0, 1)");
    check_positive(eps, "optim.eps");
    check(lr_decay > 0.0 && lr_decay <= 1.0, "optim.lr_decay", "must lie in (0, 1]");
    check_positive(batch_size, "optim.batch_size");
}

void TrainConfig::validate() const {
    model.validate();
    schedule.validate();
    curriculum.validate();
    optim.validate();
    check_positive(total_steps, "total_steps");
}

namespace {

TrainConfig make_base_config() {
    TrainConfig cfg;
    cfg.model = ModelConfig{};
    cfg.schedule = StageSchedule{};
    cfg.curriculum = Curriculum{};
    cfg.optim = OptimConfig{};
    return cfg;
}

}  // namespace

TrainConfig make_roll_config() {
    TrainConfig cfg = make_base_config();
    cfg.preset = "roll";
    cfg.optim.lr = 3e-4;
    cfg.model.num_modes = 3;
    cfg.schedule = {80000, 110000, 300000, 110000, 120000, 0.45};
    cfg.model.sigma_mix = 0.1;
    cfg.model.grid_size = 4;
    cfg.model.max_objects = 7;
    cfg.model.action_dim = 7;
    cfg.model.residual_lambda = 1.0;
    cfg.model.residual_delta = 2.0;
    cfg.total_steps = 300000;
    return cfg;
}

TrainConfig make_push_single_config() {
    TrainConfig cfg = make_base_config();
    cfg.preset = "push1";
    cfg.optim.lr = 4e-4;
    cfg.model.num_modes = 3;
    cfg.schedule = {80000, 120000, 1000000, 120000, 140000, 0.4};
    cfg.model.sigma_mix = 0.1;
    cfg.model.grid_size = 4;
    cfg.model.max_objects = 7;
    cfg.model.action_dim = 7;
    cfg.model.residual_lambda = 0.01;
    cfg.model.residual_delta = 2.0;
    cfg.total_steps = 1000000;
    return cfg;
}

TrainConfig make_push_multi_config() {
    TrainConfig cfg = make_base_config();
    cfg.preset = "push2";
    cfg.optim.lr = 4e-4;
    cfg.model.num_modes = 3;
    cfg.schedule = {80000, 100000, 900000, 100000, 110000, 0.4};
    cfg.model.sigma_mix = 0.5;
    cfg.model.grid_size = 4;
    cfg.model.max_objects = 7;
    cfg.model.action_dim = 7;
    cfg.model.residual_lambda = 0.01;
    cfg.model.residual_delta = 1.0;
    cfg.total_steps = 900000;
    return cfg;
}

TrainConfig make_bair_config() {
    TrainConfig cfg = make_base_config();
    cfg.preset = "bair";
    cfg.optim.lr = 4e-4;
    cfg.model.num_modes = 4;
    cfg.schedule = {80000, 110000, 160000, 100000, 110000, 0.4};
    cfg.model.sigma_mix = 0.5;
    cfg.model.grid_size = 8;
    cfg.model.max_objects = 12;
    cfg.model.action_dim = 3;
    cfg.model.residual_lambda = 1.0;
    cfg.model.residual_delta = 2.0;
    cfg.total_steps = 160000;
    return cfg;
}

void scale_schedule(TrainConfig& cfg, int64_t divisor) {
    require(divisor >= 1, "schedule divisor must be >= 1");
    auto scale = [divisor](int64_t v) { return std::max<int64_t>(1, v / divisor); };
    cfg.schedule.mixture_start = scale(cfg.schedule.mixture_start);
    cfg.schedule.objects_start = scale(cfg.schedule.objects_start);
    cfg.schedule.keypoint_end = scale(cfg.schedule.keypoint_end);
    cfg.schedule.alpha_fix_start = scale(cfg.schedule.alpha_fix_start);
    cfg.schedule.alpha_fix_end = scale(cfg.schedule.alpha_fix_end);
    for (auto& m : cfg.curriculum.milestones) m = scale(m);
    for (auto& m : cfg.optim.lr_decay_milestones) m = scale(m);
    cfg.total_steps = scale(cfg.total_steps);
}

TrainConfig make_desk_balls_config() {
    TrainConfig cfg = make_roll_config();
    cfg.preset = "balls-desk";
    scale_schedule(cfg, 100);

    ModelConfig& m = cfg.model;
    m.num_modes = 2;
    m.num_keypoints = 8;
    m.h_kp_dim = 128;
    m.max_objects = 4;
    m.z_what_dim = 16;
    m.h_obj_dim = 32;
    m.glimpse_size = 8;
    m.action_dim = 2;
    m.widths.frame_enc_channels = {16, 24, 32, 48};
    m.widths.mask_dec_channels = {48, 32, 24, 12};
    m.widths.comp_enc_channels = {16, 16, 32};
    m.widths.comp_dec_channels = 16;
    m.widths.comp_dec_stride = 4;
    m.widths.hist_code_dim = 64;
    m.widths.kp_channels = 24;
    m.widths.kp_feat_dim = 64;
    m.widths.obj_enc_channels = 24;
    m.widths.glimpse_enc_channels = 12;
    m.widths.glimpse_dec_channels = 16;
    m.widths.inter_dim = 64;
    m.widths.inter_out_dim = 16;
    m.widths.ambient_hidden = {64, 64};
    return cfg;
}

TrainConfig preset_by_name(const std::string& name) {
    if (name == "roll") return make_roll_config();
    if (name == "push1") return make_push_single_config();
    if (name == "push2") return make_push_multi_config();
    if (name == "bair") return make_bair_config();
    if (name == "balls-desk") return make_desk_balls_config();
    throw Error("unknown preset '" + name + "' (expected roll|push1|push2|bair|balls-desk)");
}

namespace {

nlohmann::json widths_to_json(const NetWidths& w) {
    return {
        {"frame_enc_channels", w.frame_enc_channels},
        {"mask_dec_channels", w.mask_dec_channels},
        {"comp_enc_channels", w.comp_enc_channels},
        {"comp_dec_channels", w.comp_dec_channels},
        {"comp_dec_stride", w.comp_dec_stride},
        {"hist_code_dim", w.hist_code_dim},
        {"head_hidden", w.head_hidden},
        {"act_hidden", w.act_hidden},
        {"mode_feat_dim", w.mode_feat_dim},
        {"kp_channels", w.kp_channels},
        {"kp_feat_dim", w.kp_feat_dim},
        {"obj_enc_channels", w.obj_enc_channels},
        {"glimpse_enc_channels", w.glimpse_enc_channels},
        {"glimpse_dec_channels", w.glimpse_dec_channels},
        {"inter_dim", w.inter_dim},
        {"inter_out_dim", w.inter_out_dim},
        {"ambient_hidden", w.ambient_hidden},
    };
}

void widths_from_json(const nlohmann::json& j, NetWidths& w) {
    j.at("frame_enc_channels").get_to(w.frame_enc_channels);
    j.at("mask_dec_channels").get_to(w.mask_dec_channels);
    j.at("comp_enc_channels").get_to(w.comp_enc_channels);
    j.at("comp_dec_channels").get_to(w.comp_dec_channels);
    j.at("comp_dec_stride").get_to(w.comp_dec_stride);
    j.at("hist_code_dim").get_to(w.hist_code_dim);
    j.at("head_hidden").get_to(w.head_hidden);
    j.at("act_hidden").get_to(w.act_hidden);
    j.at("mode_feat_dim").get_to(w.mode_feat_dim);
    j.at("kp_channels").get_to(w.kp_channels);
    j.at("kp_feat_dim").get_to(w.kp_feat_dim);
    j.at("obj_enc_channels").get_to(w.obj_enc_channels);
    j.at("glimpse_enc_channels").get_to(w.glimpse_enc_channels);
    j.at("glimpse_dec_channels").get_to(w.glimpse_dec_channels);
    j.at("inter_dim").get_to(w.inter_dim);
    j.at("inter_out_dim").get_to(w.inter_out_dim);
    j.at("ambient_hidden").get_to(w.ambient_hidden);
}

}  // namespace

nlohmann::json to_json(const TrainConfig& cfg) {
    const ModelConfig& m = cfg.model;
    nlohmann::json j;
    j["preset"] = cfg.preset;
    j["model"] = {
        {"image_h", m.image_h},
        {"image_w", m.image_w},
        {"num_modes", m.num_modes},
        {"z_mask_dim", m.z_mask_dim},
        {"h_mask_dim", m.h_mask_dim},
        {"z_comp_dim", m.z_comp_dim},
        {"h_comp_dim", m.h_comp_dim},
        {"sigma_mix", m.sigma_mix},
        {"residual_delta", m.residual_delta},
        {"residual_lambda", m.residual_lambda},
        {"num_keypoints", m.num_keypoints},
        {"z_kp_dim", m.z_kp_dim},
        {"h_kp_dim", m.h_kp_dim},
        {"kp_kl_scale", m.kp_kl_scale},
        {"kp_heatmap_lambda", m.kp_heatmap_lambda},
        {"lambda_sep", m.lambda_sep},
        {"lambda_sparse", m.lambda_sparse},
        {"grid_size", m.grid_size},
        {"max_objects", m.max_objects},
        {"z_what_dim", m.z_what_dim},
        {"h_obj_dim", m.h_obj_dim},
        {"glimpse_size", m.glimpse_size},
        {"sigma_obs", m.sigma_obs},
        {"pres_threshold", m.pres_threshold},
        {"pres_temperature", m.pres_temperature},
        {"hard_depth_order", m.hard_depth_order},
        {"knn_k", m.knn_k},
        {"fully_connected", m.fully_connected},
        {"inter_mode", to_string(m.inter_mode)},
        {"concat_interactions", m.concat_interactions},
        {"learned_knn_distance", m.learned_knn_distance},
        {"action_dim", m.action_dim},
        {"act_enhanced_dim", m.act_enhanced_dim},
        {"joint_action_conditioning", m.joint_action_conditioning},
        {"separate_prior_posterior_rnn", m.separate_prior_posterior_rnn},
        {"best_belief_samples", m.best_belief_samples},
        {"dtype", m.dtype == torch::kFloat64 ? "float64" : "float32"},
        {"widths", widths_to_json(m.widths)},
    };
    j["schedule"] = {
        {"mixture_start", cfg.schedule.mixture_start},
        {"objects_start", cfg.schedule.objects_start},
        {"keypoint_end", cfg.schedule.keypoint_end},
        {"alpha_fix_start", cfg.schedule.alpha_fix_start},
        {"alpha_fix_end", cfg.schedule.alpha_fix_end},
        {"alpha_fix_value", cfg.schedule.alpha_fix_value},
    };
    j["curriculum"] = {
        {"lengths", cfg.curriculum.lengths},
        {"milestones", cfg.curriculum.milestones},
    };
    j["optim"] = {
        {"lr", cfg.optim.lr},
        {"beta1", cfg.optim.beta1},
        {"beta2", cfg.optim.beta2},
        {"eps", cfg.optim.eps},
        {"lr_decay_milestones", cfg.optim.lr_decay_milestones},
        {"lr_decay", cfg.optim.lr_decay},
        {"batch_size", cfg.optim.batch_size},
    };
    j["total_steps"] = cfg.total_steps;
    j["seed"] = cfg.seed;
    return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig cfg = j.contains("preset") && !j.at("preset").get<std::string>().empty()
                          ? preset_by_name(j.at("preset").get<std::string>())
                          : TrainConfig{};
    auto get = [](const nlohmann::json& src, const char* key, auto& dst) {
        if (src.contains(key)) src.at(key).get_to(dst);
    };
    if (j.contains("model")) {
        const auto& m = j.at("model");
        ModelConfig& c = cfg.model;
        get(m, "image_h", c.image_h);
        get(m, "image_w", c.image_w);
        get(m, "num_modes", c.num_modes);
        get(m, "z_mask_dim", c.z_mask_dim);
        get(m, "h_mask_dim", c.h_mask_dim);
        get(m, "z_comp_dim", c.z_comp_dim);
        get(m, "h_comp_dim", c.h_comp_dim);
        get(m, "sigma_mix", c.sigma_mix);
        get(m, "residual_delta", c.residual_delta);
        get(m, "residual_lambda", c.residual_lambda);
        get(m, "num_keypoints", c.num_keypoints);
        get(m, "z_kp_dim", c.z_kp_dim);
        get(m, "h_kp_dim", c.h_kp_dim);
        get(m, "kp_kl_scale", c.kp_kl_scale);
        get(m, "kp_heatmap_lambda", c.kp_heatmap_lambda);
        get(m, "lambda_sep", c.lambda_sep);
        get(m, "lambda_sparse", c.lambda_sparse);
        get(m, "grid_size", c.grid_size);
        get(m, "max_objects", c.max_objects);
        get(m, "z_what_dim", c.z_what_dim);
        get(m, "h_obj_dim", c.h_obj_dim);
        get(m, "glimpse_size", c.glimpse_size);
        get(m, "sigma_obs", c.sigma_obs);
        get(m, "pres_threshold", c.pres_threshold);
        get(m, "pres_temperature", c.pres_temperature);
        get(m, "hard_depth_order", c.hard_depth_order);
        get(m, "knn_k", c.knn_k);
        get(m, "fully_connected", c.fully_connected);
        if (m.contains("inter_mode")) c.inter_mode = inter_mode_from_string(m.at("inter_mode").get<std::string>());
        get(m, "concat_interactions", c.concat_interactions);
        get(m, "learned_knn_distance", c.learned_knn_distance);
        get(m, "action_dim", c.action_dim);
        get(m, "act_enhanced_dim", c.act_enhanced_dim);
        get(m, "joint_action_conditioning", c.joint_action_conditioning);
        get(m, "separate_prior_posterior_rnn", c.separate_prior_posterior_rnn);
        get(m, "best_belief_samples", c.best_belief_samples);
        if (m.contains("dtype"))
            c.dtype = m.at("dtype").get<std::string>() == "float64" ? torch::kFloat64 : torch::kFloat32;
        if (m.contains("widths")) widths_from_json(m.at("widths"), c.widths);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        get(s, "mixture_start", cfg.schedule.mixture_start);
        get(s, "objects_start", cfg.schedule.objects_start);
        get(s, "keypoint_end", cfg.schedule.keypoint_end);
        get(s, "alpha_fix_start", cfg.schedule.alpha_fix_start);
        get(s, "alpha_fix_end", cfg.schedule.alpha_fix_end);
        get(s, "alpha_fix_value", cfg.schedule.alpha_fix_value);
    }
    if (j.contains("curriculum")) {
        const auto& c = j.at("curriculum");
        get(c, "lengths", cfg.curriculum.lengths);
        get(c, "milestones", cfg.curriculum.milestones);
    }
    if (j.contains("optim")) {
        const auto& o = j.at("optim");
        get(o, "lr", cfg.optim.lr);
        get(o, "beta1", cfg.optim.beta1);
        get(o, "beta2", cfg.optim.beta2);
        get(o, "eps", cfg.optim.eps);
        get(o, "lr_decay_milestones", cfg.optim.lr_decay_milestones);
        get(o, "lr_decay", cfg.optim.lr_decay);
        get(o, "batch_size", cfg.optim.batch_size);
    }
    get(j, "total_steps", cfg.total_steps);
    get(j, "seed", cfg.seed);
    cfg.validate();
    return cfg;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open config file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config file " + path + " is not valid JSON: " + e.what());
    }
    return train_config_from_json(j);
}

void save_train_config(const TrainConfig& cfg, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("cannot open config file for writing: " + path);
    f << to_json(cfg).dump(2) << "\n";
}

}  // namespace gatsbi
