#include "gatsbi/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "gatsbi/common.hpp"

namespace gatsbi {

RolloutResult conditioned_rollout(GatsbiModel& model, const Episode& episode, int64_t horizon,
                                  int64_t n_cond, uint64_t seed) {
    episode.validate();
    require(n_cond >= 1 && horizon >= n_cond, "rollout needs 1 <= n_cond <= horizon");
    require(episode.frames.size(0) >= n_cond,
            "episode holds " + std::to_string(episode.frames.size(0)) +
                " frames but conditioning needs " + std::to_string(n_cond));
    require(episode.actions.size(0) >= horizon,
            "episode carries " + std::to_string(episode.actions.size(0)) +
                " actions but the rollout needs " + std::to_string(horizon));

    RandomSource rng(seed);
    auto frames = episode.frames.unsqueeze(0).to(model->cfg.dtype);
    auto actions = episode.actions.unsqueeze(0).to(model->cfg.dtype);
    RolloutResult out;
    out.steps = model->rollout(frames, actions, n_cond, horizon, rng);
    out.n_cond = n_cond;
    std::vector<torch::Tensor> mus;
    mus.reserve(out.steps.size());
    for (const auto& s : out.steps) mus.push_back(s.mu_full);
    out.frames = torch::cat(mus, 0);
    out.posterior.assign(out.steps.size(), false);
    for (int64_t t = 0; t < n_cond; ++t) out.posterior[static_cast<size_t>(t)] = true;
    return out;
}

// ---------------------------------------------------------------------------
// Frame metrics

namespace {

void check_pair(const torch::Tensor& pred, const torch::Tensor& target) {
    require(pred.defined() && target.defined() && pred.sizes() == target.sizes(),
            "metric inputs must be defined tensors of one shape");
}

}  // namespace

double mse(const torch::Tensor& pred, const torch::Tensor& target) {
    check_pair(pred, target);
    return (pred.to(torch::kFloat64) - target.to(torch::kFloat64))
        .square()
        .mean()
        .item<double>();
}

double psnr(const torch::Tensor& pred, const torch::Tensor& target, double max_val) {
    require(max_val > 0.0, "psnr needs a positive peak value");
    const double m = mse(pred, target);
    if (m <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(max_val * max_val / m));
}

double ssim(const torch::Tensor& pred, const torch::Tensor& target, double max_val) {
    check_pair(pred, target);
    require(pred.dim() == 3 || pred.dim() == 4, "ssim wants [C, H, W] or [B, C, H, W]");
    require(max_val > 0.0, "ssim needs a positive peak value");
    auto x = pred.to(torch::kFloat64), y = target.to(torch::kFloat64);
    if (x.dim() == 3) {
        x = x.unsqueeze(0);
        y = y.unsqueeze(0);
    }
    constexpr int64_t kWindow = 11;
    constexpr double kSigma = 1.5, kK1 = 0.01, kK2 = 0.03;
    require(x.size(2) >= kWindow && x.size(3) >= kWindow,
            "ssim needs images at least 11 pixels per side");

    const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto coords = torch::arange(kWindow, opts) - (kWindow - 1) / 2.0;
    auto g = (-coords.square() / (2.0 * kSigma * kSigma)).exp();
    g = g / g.sum();
    const int64_t C = x.size(1);
    auto kernel = torch::outer(g, g).view({1, 1, kWindow, kWindow}).repeat({C, 1, 1, 1});

    namespace F = torch::nn::functional;
    const auto conv = [&](const torch::Tensor& t) {
        return F::conv2d(t, kernel, F::Conv2dFuncOptions().groups(C));
    };
    auto mu_x = conv(x), mu_y = conv(y);
    auto sigma_x = conv(x * x) - mu_x * mu_x;
    auto sigma_y = conv(y * y) - mu_y * mu_y;
    auto sigma_xy = conv(x * y) - mu_x * mu_y;

    const double c1 = (kK1 * max_val) * (kK1 * max_val);
    const double c2 = (kK2 * max_val) * (kK2 * max_val);
    auto map = ((2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2)) /
               ((mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2));
    return map.mean().item<double>();
}

double cosine_similarity(const torch::Tensor& pred, const torch::Tensor& target) {
    check_pair(pred, target);
    auto a = pred.to(torch::kFloat64).flatten();
    auto b = target.to(torch::kFloat64).flatten();
    const double na = a.norm().item<double>(), nb = b.norm().item<double>();
    if (na == 0.0 && nb == 0.0) return 1.0;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.dot(b).item<double>() / (na * nb);
}

// ---------------------------------------------------------------------------
// Center matching

std::vector<int64_t> min_cost_assignment(const torch::Tensor& cost) {
    require(cost.defined() && cost.dim() == 2 && cost.size(0) == cost.size(1) &&
                cost.size(0) >= 1,
            "assignment needs a square cost matrix");
    require(cost.isfinite().all().item<bool>(), "assignment costs must be finite");
    const int64_t n = cost.size(0);
    auto a = cost.to(torch::kFloat64).contiguous();
    auto acc = a.accessor<double, 2>();

    // Potentials-based shortest augmenting paths, one row at a time.
    const double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int64_t> match(n + 1, 0), way(n + 1, 0);
    for (int64_t i = 1; i <= n; ++i) {
        match[0] = i;
        int64_t j0 = 0;
        std::vector<double> minv(n + 1, kInf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int64_t i0 = match[j0];
            int64_t j1 = 0;
            double delta = kInf;
            for (int64_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = acc[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int64_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const int64_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int64_t> result(static_cast<size_t>(n), -1);
    for (int64_t j = 1; j <= n; ++j)
        if (match[j] >= 1) result[static_cast<size_t>(match[j] - 1)] = j - 1;
    return result;
}

torch::Tensor present_centers(const ObjectSet& objects, int64_t row, int64_t image_h,
                              int64_t image_w, double threshold) {
    require(row >= 0 && row < objects.batch(), "batch row out of range");
    require(image_h >= 1 && image_w >= 1, "present_centers needs a positive image size");
    auto alive = objects.alive(threshold)[row];                              // [I]
    auto centers = objects.z.where[row].index({alive}).narrow(1, 2, 2);      // [n, 2]
    auto scale = torch::tensor({static_cast<double>(image_w), static_cast<double>(image_h)},
                               torch::kFloat64);
    return (centers.to(torch::kFloat64) + 1.0) / 2.0 * scale - 0.5;
}

double center_set_error(const torch::Tensor& pred, const torch::Tensor& truth,
                        double surplus_cost) {
    const auto count = [](const torch::Tensor& t) {
        require(!t.defined() || t.numel() == 0 || (t.dim() == 2 && t.size(1) == 2),
                "center sets are [N, 2] tensors");
        return t.defined() ? (t.numel() == 0 ? int64_t{0} : t.size(0)) : int64_t{0};
    };
    require(std::isfinite(surplus_cost) && surplus_cost >= 0.0,
            "surplus cost must be finite and non-negative");
    const int64_t n = count(pred), m = count(truth);
    if (n == 0 && m == 0) return 0.0;
    const int64_t k = std::max(n, m);
    auto cost = torch::full({k, k}, surplus_cost, torch::kFloat64);
    if (n > 0 && m > 0) {
        auto d = torch::cdist(pred.to(torch::kFloat64), truth.to(torch::kFloat64));
        cost.slice(0, 0, n).slice(1, 0, m) = d;
    }
    const auto assignment = min_cost_assignment(cost);
    auto acc = cost.accessor<double, 2>();
    double total = 0.0;
    for (int64_t i = 0; i < k; ++i) total += acc[i][assignment[static_cast<size_t>(i)]];
    return total / static_cast<double>(k);
}

std::vector<int64_t> event_frames(const torch::Tensor& collisions, int64_t window) {
    require(collisions.defined() && collisions.dim() == 1,
            "collision counts are a [T] tensor");
    require(window >= 0, "event window must be non-negative");
    const int64_t T = collisions.size(0);
    auto c = collisions.to(torch::kFloat64).contiguous();
    auto acc = c.accessor<double, 1>();
    std::vector<char> mark(static_cast<size_t>(T), 0);
    for (int64_t t = 0; t < T; ++t) {
        if (acc[t] <= 0.0) continue;
        const int64_t lo = std::max<int64_t>(0, t - window);
        const int64_t hi = std::min<int64_t>(T - 1, t + window);
        for (int64_t j = lo; j <= hi; ++j) mark[static_cast<size_t>(j)] = 1;
    }
    std::vector<int64_t> out;
    for (int64_t t = 0; t < T; ++t)
        if (mark[static_cast<size_t>(t)]) out.push_back(t);
    return out;
}

std::optional<double> interaction_pixel_error(const std::vector<torch::Tensor>& pred_centers,
                                              const std::vector<torch::Tensor>& true_centers,
                                              const torch::Tensor& collisions, int64_t window,
                                              double surplus_cost) {
    require(collisions.defined() && collisions.dim() == 1 &&
                collisions.size(0) == static_cast<int64_t>(pred_centers.size()) &&
                pred_centers.size() == true_centers.size(),
            "per-frame center lists must match the collision track length");
    const auto frames = event_frames(collisions, window);
    if (frames.empty()) return std::nullopt;
    double total = 0.0;
    for (int64_t t : frames)
        total += center_set_error(pred_centers[static_cast<size_t>(t)],
                                  true_centers[static_cast<size_t>(t)], surplus_cost);
    return total / static_cast<double>(frames.size());
}

// ---------------------------------------------------------------------------
// Metric registry

namespace {

std::map<std::string, std::optional<MetricFn>>& registry() {
    static std::map<std::string, std::optional<MetricFn>> reg = [] {
        std::map<std::string, std::optional<MetricFn>> r;
        r["mse"] = MetricFn(
            [](const torch::Tensor& a, const torch::Tensor& b) { return mse(a, b); });
        r["psnr"] = MetricFn(
            [](const torch::Tensor& a, const torch::Tensor& b) { return psnr(a, b); });
        r["ssim"] = MetricFn(
            [](const torch::Tensor& a, const torch::Tensor& b) { return ssim(a, b); });
        r["cosine"] = MetricFn([](const torch::Tensor& a, const torch::Tensor& b) {
            return cosine_similarity(a, b);
        });
        // Recognized external metrics ship without an implementation; they
        // stay unavailable until someone registers a scorer.
        r["lpips"] = std::nullopt;
        r["fvd"] = std::nullopt;
        return r;
    }();
    return reg;
}

}  // namespace

void register_metric(const std::string& name, MetricFn fn) {
    require(!name.empty() && name.find(',') == std::string::npos,
            "metric names must be non-empty and comma-free");
    require(static_cast<bool>(fn), "register_metric needs a callable scorer");
    registry()[name] = std::move(fn);
}

std::optional<MetricFn> metric_plugin(const std::string& name) {
    auto& reg = registry();
    auto it = reg.find(name);
    if (it == reg.end()) {
        std::string known;
        for (const auto& [key, unused] : reg) {
            if (!known.empty()) known += ", ";
            known += key;
        }
        throw Error("unknown metric '" + name + "' (known: " + known + ")");
    }
    return it->second;
}

std::vector<std::string> metric_names() {
    std::vector<std::string> out;
    for (const auto& [key, unused] : registry()) out.push_back(key);
    return out;
}

// ---------------------------------------------------------------------------
// Aggregation and CSV

MetricSummary summarize(int64_t step_index, const std::string& metric,
                        const std::vector<double>& values) {
    require(!values.empty(), "summarize needs at least one value");
    MetricSummary out;
    out.step_index = step_index;
    out.metric = metric;
    out.n = static_cast<int64_t>(values.size());
    double sum = 0.0;
    for (double v : values) sum += v;
    out.mean = sum / static_cast<double>(out.n);
    double half = 0.0;
    if (out.n >= 2) {
        double ss = 0.0;
        for (double v : values) ss += (v - out.mean) * (v - out.mean);
        const double sd = std::sqrt(ss / static_cast<double>(out.n - 1));
        half = 1.96 * sd / std::sqrt(static_cast<double>(out.n));
    }
    out.ci_low = out.mean - half;
    out.ci_high = out.mean + half;
    return out;
}

std::vector<MetricSummary> aggregate(const std::vector<MetricSample>& samples) {
    std::map<std::pair<std::string, int64_t>, std::vector<double>> groups;
    for (const auto& s : samples) groups[{s.metric, s.step_index}].push_back(s.value);
    std::vector<MetricSummary> out;
    out.reserve(groups.size());
    for (const auto& [key, values] : groups)
        out.push_back(summarize(key.second, key.first, values));
    return out;
}

namespace {

constexpr const char* kRawHeader = "step_index,metric,episode,value";
constexpr const char* kSummaryHeader = "step_index,metric,mean,ci95_low,ci95_high,n";

void check_field(const std::string& value, const char* what) {
    require(value.find(',') == std::string::npos && value.find('\n') == std::string::npos,
            std::string(what) + " must not contain commas or newlines");
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    out << std::setprecision(17);
    return out;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path, const char* header,
                                               size_t fields) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read '" + path + "'");
    std::string line;
    require(static_cast<bool>(std::getline(in, line)) && line == header,
            "'" + path + "' does not start with the header '" + header + "'");
    std::vector<std::vector<std::string>> rows;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        require(cells.size() == fields, "'" + path + "' line " + std::to_string(line_no) +
                                            " has " + std::to_string(cells.size()) +
                                            " fields, expected " + std::to_string(fields));
        rows.push_back(std::move(cells));
    }
    return rows;
}

double parse_double(const std::string& s) {
    try {
        size_t used = 0;
        const double v = std::stod(s, &used);
        require(used == s.size(), "trailing characters");
        return v;
    } catch (const std::exception&) {
        throw FormatError("malformed number '" + s + "' in CSV");
    }
}

int64_t parse_int(const std::string& s) {
    try {
        size_t used = 0;
        const int64_t v = std::stoll(s, &used);
        require(used == s.size(), "trailing characters");
        return v;
    } catch (const std::exception&) {
        throw FormatError("malformed integer '" + s + "' in CSV");
    }
}

}  // namespace

void write_raw_csv(const std::string& path, const std::vector<MetricSample>& rows) {
    auto out = open_out(path);
    out << kRawHeader << "\n";
    for (const auto& r : rows) {
        check_field(r.metric, "metric name");
        check_field(r.episode, "episode id");
        out << r.step_index << "," << r.metric << "," << r.episode << "," << r.value << "\n";
    }
    require(static_cast<bool>(out), "failed writing '" + path + "'");
}

std::vector<MetricSample> read_raw_csv(const std::string& path) {
    std::vector<MetricSample> out;
    for (const auto& cells : read_csv(path, kRawHeader, 4))
        out.push_back({parse_int(cells[0]), cells[1], cells[2], parse_double(cells[3])});
    return out;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricSummary>& rows) {
    auto out = open_out(path);
    out << kSummaryHeader << "\n";
    for (const auto& r : rows) {
        check_field(r.metric, "metric name");
        out << r.step_index << "," << r.metric << "," << r.mean << "," << r.ci_low << ","
            << r.ci_high << "," << r.n << "\n";
    }
    require(static_cast<bool>(out), "failed writing '" + path + "'");
}

std::vector<MetricSummary> read_metrics_csv(const std::string& path) {
    std::vector<MetricSummary> out;
    for (const auto& cells : read_csv(path, kSummaryHeader, 6)) {
        MetricSummary s;
        s.step_index = parse_int(cells[0]);
        s.metric = cells[1];
        s.mean = parse_double(cells[2]);
        s.ci_low = parse_double(cells[3]);
        s.ci_high = parse_double(cells[4]);
        s.n = parse_int(cells[5]);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace gatsbi
