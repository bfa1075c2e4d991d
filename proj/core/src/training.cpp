#include "gatsbi/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gatsbi/common.hpp"
#include "gatsbi/keypoint.hpp"
#include "gatsbi/mixture.hpp"
#include "gatsbi/objects.hpp"

namespace gatsbi {

ActiveLosses active_losses(const StageSchedule& s, int64_t step) {
    ActiveLosses out;
    out.keypoint = step < s.keypoint_end;
    out.mixture = step >= s.mixture_start;
    out.objects = step >= s.objects_start;
    return out;
}

int64_t sample_length(const Curriculum& c, int64_t step) {
    size_t passed = 0;
    while (passed < c.milestones.size() && c.milestones[passed] <= step) ++passed;
    return c.lengths[passed];
}

std::optional<double> effective_alpha(const StageSchedule& s, int64_t step) {
    if (step >= s.alpha_fix_start && step < s.alpha_fix_end) return s.alpha_fix_value;
    return std::nullopt;
}

double learning_rate(const OptimConfig& o, int64_t step) {
    int64_t passed = 0;
    for (int64_t m : o.lr_decay_milestones)
        if (m <= step) ++passed;
    return o.lr * std::pow(o.lr_decay, static_cast<double>(passed));
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<std::pair<std::string, torch::Tensor>> params, double beta1,
           double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0,
            "Adam needs betas in [0, 1) and a positive epsilon");
    slots_.reserve(params.size());
    for (auto& [name, p] : params) {
        require(p.defined() && p.is_floating_point(),
                "Adam can only track defined floating-point parameters");
        slots_.push_back({name, p, torch::zeros_like(p), torch::zeros_like(p)});
    }
    std::sort(slots_.begin(), slots_.end(),
              [](const Slot& a, const Slot& b) { return a.name < b.name; });
    for (size_t i = 1; i < slots_.size(); ++i)
        require(slots_[i].name != slots_[i - 1].name,
                "duplicate parameter name '" + slots_[i].name + "'");
}

void Adam::step(double lr, const std::function<bool(const std::string&)>& gate) {
    torch::NoGradGuard no_grad;
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& s : slots_) {
        if (gate && !gate(s.name)) continue;
        const auto& g = s.param.grad();
        if (!g.defined()) continue;
        s.m.mul_(beta1_).add_(g, 1.0 - beta1_);
        s.v.mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
        auto denom = (s.v / bc2).sqrt_().add_(eps_);
        s.param.addcdiv_(s.m / bc1, denom, -lr);
    }
}

void Adam::zero_grad() {
    for (auto& s : slots_) s.param.mutable_grad() = torch::Tensor();
}

void Adam::write_state(TensorMap& out) const {
    out["adam.t"] = torch::full({1}, static_cast<float>(t_));
    for (const auto& s : slots_) {
        out["adam.m." + s.name] = s.m;
        out["adam.v." + s.name] = s.v;
    }
}

void Adam::read_state(const TensorMap& in) {
    torch::NoGradGuard no_grad;
    auto fetch = [&](const std::string& key) -> const torch::Tensor& {
        auto it = in.find(key);
        require(it != in.end(), "optimizer state is missing entry '" + key + "'");
        return it->second;
    };
    t_ = std::llround(fetch("adam.t").item<double>());
    require(t_ >= 0, "optimizer timestep must be non-negative");
    for (auto& s : slots_) {
        const auto& m = fetch("adam.m." + s.name);
        const auto& v = fetch("adam.v." + s.name);
        require(m.sizes() == s.m.sizes() && v.sizes() == s.v.sizes(),
                "optimizer moments for '" + s.name + "' have the wrong shape");
        s.m.copy_(m);
        s.v.copy_(v);
    }
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

constexpr float kCheckpointVersion = 1.0f;

torch::Tensor encode_text(const std::string& text) {
    auto out = torch::empty({static_cast<int64_t>(text.size())}, torch::kFloat32);
    auto a = out.accessor<float, 1>();
    for (size_t i = 0; i < text.size(); ++i)
        a[static_cast<int64_t>(i)] = static_cast<float>(static_cast<unsigned char>(text[i]));
    return out;
}

std::string decode_text(const torch::Tensor& bytes) {
    require(bytes.defined() && bytes.dim() == 1, "text entry must be a 1-d tensor");
    auto flat = bytes.to(torch::kFloat32).contiguous();
    auto a = flat.accessor<float, 1>();
    std::string out(static_cast<size_t>(flat.size(0)), '\0');
    for (int64_t i = 0; i < flat.size(0); ++i)
        out[static_cast<size_t>(i)] = static_cast<char>(static_cast<unsigned char>(a[i]));
    return out;
}

std::vector<std::pair<std::string, torch::Tensor>> named_params(GatsbiModel& model) {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& p : model->named_parameters()) out.emplace_back(p.key(), p.value());
    return out;
}

bool has_prefix(const std::string& name, const char* prefix) {
    return name.rfind(prefix, 0) == 0;
}

}  // namespace

namespace {
const TrainConfig& validated(const TrainConfig& c) {
    c.validate();
    return c;
}
}  // namespace

Trainer::Trainer(const TrainConfig& cfg_in)
    : cfg(validated(cfg_in)),
      opt_({}, cfg_in.optim.beta1, cfg_in.optim.beta2, cfg_in.optim.eps) {
    model = GatsbiModel(cfg.model);
    opt_ = Adam(named_params(model), cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps);
}

StepScalars Trainer::train_step(const torch::Tensor& frames, const torch::Tensor& actions,
                                RandomSource& rng) {
    require(frames.defined() && frames.dim() == 5,
            "train_step wants frames as [B, T, 3, H, W]");
    require(actions.defined() && actions.dim() == 3 && actions.size(0) == frames.size(0) &&
                actions.size(1) >= frames.size(1),
            "train_step wants actions covering every frame as [B, T, A]");
    const int64_t seq = std::min(sample_length(cfg.curriculum, step_), frames.size(1));
    require(seq >= 2, "a training step needs at least two frames");
    auto f = frames.narrow(1, 0, seq).to(cfg.model.dtype);
    auto a = actions.narrow(1, 0, seq).to(cfg.model.dtype);

    const ActiveLosses act = active_losses(cfg.schedule, step_);
    const auto alpha = effective_alpha(cfg.schedule, step_);

    auto state = model->initial_state(f.size(0));
    auto steps = model->observe_sequence(f, a, state, rng, alpha);

    std::vector<MixtureOutput> mix_steps;
    std::vector<ObjectsStep> obj_steps;
    mix_steps.reserve(steps.size());
    obj_steps.reserve(steps.size());
    for (auto& s : steps) {
        mix_steps.push_back(s.mix);
        obj_steps.push_back(s.objects);
    }
    const MixtureLoss mix_loss = model->mixture->mixture_elbo(f, mix_steps);
    const ObjectLoss obj_loss = object_elbo(f, obj_steps, cfg.model.sigma_obs);

    // Keypoint terms summed over the sequence. The regression target is the
    // mask the selection picked, gathered per sample.
    const auto first = f.select(1, 0);
    const int64_t B = f.size(0), H = f.size(3), W = f.size(4);
    KeypointLoss kp_sum;
    for (int64_t t = 0; t < seq; ++t) {
        const auto& s = steps[static_cast<size_t>(t)];
        auto k = s.k_agent.view({B, 1, 1, 1, 1}).expand({B, 1, 1, H, W});
        auto agent_mask = s.mix.masks.gather(1, k).squeeze(1);
        auto l = model->keypoint->loss(f.select(1, t), first, s.kp, s.gamma, agent_mask);
        if (!kp_sum.total.defined()) {
            kp_sum = l;
        } else {
            kp_sum.total = kp_sum.total + l.total;
            kp_sum.kl = kp_sum.kl + l.kl;
            kp_sum.heatmap = kp_sum.heatmap + l.heatmap;
            kp_sum.sep = kp_sum.sep + l.sep;
            kp_sum.sparse = kp_sum.sparse + l.sparse;
            kp_sum.image = kp_sum.image + l.image;
        }
    }

    auto total = torch::zeros({}, f.options());
    if (act.keypoint) total = total + kp_sum.total;
    if (act.mixture) total = total + mix_loss.total;
    if (act.objects) total = total + obj_loss.total;

    StepScalars out;
    out.step = step_;
    out.seq_len = seq;
    out.lr = learning_rate(cfg.optim, step_);
    out.active = act;
    out.total = total.item<double>();
    out.terms = {
        {"keypoint.total", kp_sum.total.item<double>()},
        {"keypoint.kl", kp_sum.kl.item<double>()},
        {"keypoint.heatmap", kp_sum.heatmap.item<double>()},
        {"keypoint.sep", kp_sum.sep.item<double>()},
        {"keypoint.sparse", kp_sum.sparse.item<double>()},
        {"keypoint.image", kp_sum.image.item<double>()},
        {"mixture.total", mix_loss.total.item<double>()},
        {"mixture.nll", mix_loss.nll.item<double>()},
        {"mixture.kl_mask", mix_loss.kl_mask.item<double>()},
        {"mixture.kl_comp", mix_loss.kl_comp.item<double>()},
        {"mixture.residual", mix_loss.residual.item<double>()},
        {"objects.total", obj_loss.total.item<double>()},
        {"objects.nll", obj_loss.nll.item<double>()},
        {"objects.kl_pres", obj_loss.kl_pres.item<double>()},
        {"objects.kl_where", obj_loss.kl_where.item<double>()},
        {"objects.kl_depth", obj_loss.kl_depth.item<double>()},
        {"objects.kl_what", obj_loss.kl_what.item<double>()},
    };

    if (!std::isfinite(out.total)) {
        std::ostringstream dump;
        dump << "non-finite training loss at step " << step_ << " (total = " << out.total
             << ")";
        for (const auto& [name, value] : out.terms) dump << "\n  " << name << " = " << value;
        throw Error(dump.str());
    }

    opt_.zero_grad();
    total.backward();
    const auto gate = [&](const std::string& name) {
        if (has_prefix(name, "keypoint.")) return act.keypoint;
        if (has_prefix(name, "mixture.")) return act.mixture;
        if (has_prefix(name, "objects.") || has_prefix(name, "interaction."))
            return act.objects;
        if (has_prefix(name, "shared.")) return act.any();
        return false;
    };
    opt_.step(out.lr, gate);
    ++step_;
    return out;
}

void Trainer::save(const std::string& path) const {
    require(cfg.model.dtype == torch::kFloat32,
            "checkpoints hold single-precision tensors; the model must be float32");
    TensorMap map;
    map["meta.version"] = torch::full({1}, kCheckpointVersion);
    map["meta.step"] = torch::full({1}, static_cast<float>(step_));
    map["meta.config"] = encode_text(to_json(cfg).dump());
    for (const auto& p : model->named_parameters())
        map["param." + p.key()] = p.value().detach();
    opt_.write_state(map);
    save_tensors(path, map);
}

void Trainer::load(const std::string& path) {
    require(cfg.model.dtype == torch::kFloat32,
            "checkpoints hold single-precision tensors; the model must be float32");
    const TensorMap map = load_tensors(path);
    auto fetch = [&](const std::string& key) -> const torch::Tensor& {
        auto it = map.find(key);
        require(it != map.end(), "checkpoint is missing entry '" + key + "'");
        return it->second;
    };
    const float version = fetch("meta.version").item<float>();
    require(version == kCheckpointVersion,
            "checkpoint version " + std::to_string(version) + " does not match " +
                std::to_string(kCheckpointVersion));
    require(decode_text(fetch("meta.config")) == to_json(cfg).dump(),
            "checkpoint was written for a different config");
    torch::NoGradGuard no_grad;
    for (const auto& p : model->named_parameters()) {
        const auto& stored = fetch("param." + p.key());
        require(stored.sizes() == p.value().sizes(),
                "checkpoint parameter '" + p.key() + "' has the wrong shape");
        p.value().copy_(stored);
    }
    opt_.read_state(map);
    step_ = std::llround(fetch("meta.step").item<double>());
    require(step_ >= 0, "checkpoint step counter must be non-negative");
}

TrainConfig checkpoint_config(const std::string& path) {
    const TensorMap map = load_tensors(path);
    auto it = map.find("meta.config");
    require(it != map.end(), "checkpoint is missing entry 'meta.config'");
    return train_config_from_json(nlohmann::json::parse(decode_text(it->second)));
}

std::pair<torch::Tensor, torch::Tensor> sample_batch(const std::vector<Episode>& episodes,
                                                     int64_t batch_size, RandomSource& rng) {
    require(!episodes.empty(), "sample_batch needs at least one episode");
    require(batch_size >= 1, "sample_batch needs a positive batch size");
    std::vector<torch::Tensor> frames, actions;
    frames.reserve(static_cast<size_t>(batch_size));
    actions.reserve(static_cast<size_t>(batch_size));
    for (int64_t i = 0; i < batch_size; ++i) {
        const auto& ep = episodes[static_cast<size_t>(
            rng.randint(0, static_cast<int64_t>(episodes.size())))];
        require(ep.frames.sizes() == episodes.front().frames.sizes() &&
                    ep.actions.sizes() == episodes.front().actions.sizes(),
                "sample_batch needs episodes of one shared shape");
        frames.push_back(ep.frames);
        actions.push_back(ep.actions);
    }
    return {torch::stack(frames, 0), torch::stack(actions, 0)};
}

}  // namespace gatsbi
