#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "gatsbi/config.hpp"
#include "gatsbi/model.hpp"
#include "gatsbi/rng.hpp"
#include "gatsbi/tensor_store.hpp"
#include "gatsbi/types.hpp"

namespace gatsbi {

/// Which module losses contribute to the objective at a given optimizer step.
struct ActiveLosses {
    bool keypoint = false;
    bool mixture = false;
    bool objects = false;

    bool any() const { return keypoint || mixture || objects; }
};

/// Staged schedule: keypoints train alone first, the mixture joins at
/// mixture_start, objects at objects_start, and the keypoint term drops out
/// at keypoint_end.
ActiveLosses active_losses(const StageSchedule& s, int64_t step);

/// Curriculum sequence length: lengths[number of milestones at or before step].
int64_t sample_length(const Curriculum& c, int64_t step);

/// The constant that replaces the rendered coverage map inside the fix
/// window [alpha_fix_start, alpha_fix_end); empty outside it, meaning the
/// learned map passes through.
std::optional<double> effective_alpha(const StageSchedule& s, int64_t step);

/// Stepped decay: lr * decay^(number of milestones at or before step).
double learning_rate(const OptimConfig& o, int64_t step);

/// Adam whose moments live per named parameter, so the optimizer state
/// round-trips through a tensor container bit-exactly and updates can be
/// gated per module without touching the moments of frozen ones.
class Adam {
  public:
    Adam(std::vector<std::pair<std::string, torch::Tensor>> params, double beta1,
         double beta2, double eps);

    /// One update over every parameter whose name passes the gate and whose
    /// grad is defined. Gated-out parameters keep their moments untouched.
    /// The shared timestep advances once per call.
    void step(double lr, const std::function<bool(const std::string&)>& gate);

    /// Drop the grad of every tracked parameter.
    void zero_grad();

    /// Serialize moments as "adam.m.<name>" / "adam.v.<name>" plus "adam.t".
    void write_state(TensorMap& out) const;
    /// Restore from write_state output; missing or misshapen entries throw.
    void read_state(const TensorMap& in);

    int64_t t() const { return t_; }

  private:
    struct Slot {
        std::string name;
        torch::Tensor param, m, v;
    };
    std::vector<Slot> slots_;
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

/// Per-term scalars from one optimization step, for logging and for the
/// diagnostic dump when a loss goes non-finite.
struct StepScalars {
    int64_t step = 0;     // index of the step that ran
    int64_t seq_len = 0;  // frames actually consumed after curriculum truncation
    double lr = 0.0;
    double total = 0.0;  // the optimized objective (active terms only)
    ActiveLosses active;
    std::map<std::string, double> terms;  // every component, active or not
};

/// Owns the model and the optimizer, runs the staged schedule, and
/// round-trips the whole training state through one container file.
class Trainer {
  public:
    explicit Trainer(const TrainConfig& cfg);

    /// One optimization step on a batch (frames [B, T, 3, H, W], actions
    /// [B, T', A] with T' >= T). The batch is truncated to the curriculum
    /// length (clamped to T); inactive losses are reported but not optimized,
    /// and parameters of inactive modules stay bit-identical.
    StepScalars train_step(const torch::Tensor& frames, const torch::Tensor& actions,
                           RandomSource& rng);

    /// Parameters, optimizer moments, step counter and the config (as JSON)
    /// in one container. The format stores single precision only, so the
    /// model must be float32.
    void save(const std::string& path) const;
    /// Restore a checkpoint written by save() for this same config; a
    /// different config or format version is an error.
    void load(const std::string& path);

    int64_t step() const { return step_; }

    GatsbiModel model{nullptr};
    TrainConfig cfg;

  private:
    Adam opt_;
    int64_t step_ = 0;
};

/// Read back the config embedded in a checkpoint without building a model.
TrainConfig checkpoint_config(const std::string& path);

/// Stack batch_size uniformly drawn episodes into (frames, actions).
std::pair<torch::Tensor, torch::Tensor> sample_batch(const std::vector<Episode>& episodes,
                                                     int64_t batch_size, RandomSource& rng);

}  // namespace gatsbi
