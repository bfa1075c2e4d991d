#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "gatsbi/model.hpp"
#include "gatsbi/types.hpp"

namespace gatsbi {

/// Identical frames report this instead of an infinite ratio.
inline constexpr double kPsnrCap = 100.0;

/// One evaluated sequence: composed frames plus the full per-step
/// decomposition, with reconstruction steps flagged apart from predictions.
struct RolloutResult {
    std::vector<StepOutput> steps;
    torch::Tensor frames;         // [horizon, 3, H, W]
    std::vector<bool> posterior;  // true for the first n_cond steps
    int64_t n_cond = 0;
};

/// Infer the first n_cond steps from the episode, then predict to horizon
/// from the actions alone. Fixed seeds give bit-identical results.
RolloutResult conditioned_rollout(GatsbiModel& model, const Episode& episode, int64_t horizon,
                                  int64_t n_cond, uint64_t seed);

/// Mean squared error over all elements, computed in double precision.
double mse(const torch::Tensor& pred, const torch::Tensor& target);

/// 10·log10(max²/MSE) in dB, capped at kPsnrCap (the zero-MSE value).
double psnr(const torch::Tensor& pred, const torch::Tensor& target, double max_val = 1.0);

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5) and the
/// standard constants k1 = 0.01, k2 = 0.03. Inputs are [C, H, W] or
/// [B, C, H, W] with H, W >= 11; the map is averaged over the valid region.
double ssim(const torch::Tensor& pred, const torch::Tensor& target, double max_val = 1.0);

/// Cosine similarity of the flattened tensors; two zero tensors count as
/// identical (1), a single zero tensor as orthogonal (0).
double cosine_similarity(const torch::Tensor& pred, const torch::Tensor& target);

/// Minimum-cost assignment on a square cost matrix [n, n] (float64).
/// Returns the column picked for each row.
std::vector<int64_t> min_cost_assignment(const torch::Tensor& cost);

/// Pixel-coordinate centers (x, y) of the alive slots in one batch row,
/// mapped from the normalized box centers: [n, 2] float64.
torch::Tensor present_centers(const ObjectSet& objects, int64_t row, int64_t image_h,
                              int64_t image_w, double threshold);

/// Mean matched distance between two center sets [N, 2] / [M, 2] under the
/// minimum-cost assignment, with |N - M| surplus entries costing
/// surplus_cost each; the mean runs over max(N, M). Two empty sets are 0.
double center_set_error(const torch::Tensor& pred, const torch::Tensor& truth,
                        double surplus_cost);

/// Frame indices within `window` of any positive collision count, sorted
/// and deduplicated, clipped to [0, T).
std::vector<int64_t> event_frames(const torch::Tensor& collisions, int64_t window);

/// Mean center_set_error over the frames around collision events; empty when
/// the episode has no events. pred/truth hold one [N_t, 2] tensor per frame.
std::optional<double> interaction_pixel_error(const std::vector<torch::Tensor>& pred_centers,
                                              const std::vector<torch::Tensor>& true_centers,
                                              const torch::Tensor& collisions, int64_t window,
                                              double surplus_cost);

// ---------------------------------------------------------------------------
// Metric registry and CSV export

using MetricFn = std::function<double(const torch::Tensor& pred, const torch::Tensor& target)>;

/// Add or replace a named scorer; the name becomes known to metric_plugin.
void register_metric(const std::string& name, MetricFn fn);

/// The scorer for a known name, or empty when the name is recognized but no
/// implementation is installed (external metrics ship without one). Unknown
/// names throw an error listing every known name — never a silent zero.
std::optional<MetricFn> metric_plugin(const std::string& name);

/// Every known metric name, sorted.
std::vector<std::string> metric_names();

struct MetricSample {
    int64_t step_index = 0;
    std::string metric;
    std::string episode;
    double value = 0.0;
};

struct MetricSummary {
    int64_t step_index = 0;
    std::string metric;
    double mean = 0.0;
    double ci_low = 0.0;   // mean - 1.96 * sd / sqrt(n)
    double ci_high = 0.0;  // mean + 1.96 * sd / sqrt(n)
    int64_t n = 0;
};

/// Mean and normal-approximation 95% interval; a single value collapses the
/// interval onto the mean. Values must be non-empty.
MetricSummary summarize(int64_t step_index, const std::string& metric,
                        const std::vector<double>& values);

/// Group samples by (metric, step_index), sorted, one summary per group.
std::vector<MetricSummary> aggregate(const std::vector<MetricSample>& samples);

/// "step_index,metric,episode,value" with a header row; doubles round-trip.
void write_raw_csv(const std::string& path, const std::vector<MetricSample>& rows);
std::vector<MetricSample> read_raw_csv(const std::string& path);

/// "step_index,metric,mean,ci95_low,ci95_high,n" with a header row.
void write_metrics_csv(const std::string& path, const std::vector<MetricSummary>& rows);
std::vector<MetricSummary> read_metrics_csv(const std::string& path);

}  // namespace gatsbi
