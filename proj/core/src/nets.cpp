#include "gatsbi/nets.hpp"

#include <algorithm>
#include <cmath>

namespace gatsbi {

torch::Tensor kl_diag_gaussian(const GaussianLatent& q, const GaussianLatent& p) {
    if (!q.mean.sizes().equals(p.mean.sizes()))
        throw Error("kl_diag_gaussian: q and p shapes differ");
    torch::Tensor log_sq = q.log_std, log_sp = p.log_std;
    torch::Tensor var_q = (2.0 * log_sq).exp();
    torch::Tensor var_p = (2.0 * log_sp).exp();
    torch::Tensor term = log_sp - log_sq + (var_q + (q.mean - p.mean).pow(2)) / (2.0 * var_p) - 0.5;
    return term.sum(-1);
}

torch::Tensor reparam_sample(const GaussianLatent& g, RandomSource& rng) {
    torch::Tensor eps = rng.normal(g.mean.sizes(), g.mean.scalar_type());
    return g.mean + g.std() * eps;
}

torch::Tensor gaussian_nll(const torch::Tensor& x, const torch::Tensor& mu, double sigma) {
    if (sigma <= 0.0) throw Error("gaussian_nll: sigma must be positive");
    if (!x.sizes().equals(mu.sizes())) throw Error("gaussian_nll: shape mismatch");
    const double log_norm = std::log(sigma) + 0.5 * std::log(2.0 * M_PI);
    return ((x - mu).pow(2) / (2.0 * sigma * sigma) + log_norm).sum();
}

torch::Tensor gaussian_nll_per_sample(const torch::Tensor& x, const torch::Tensor& mu, double sigma) {
    if (sigma <= 0.0) throw Error("gaussian_nll: sigma must be positive");
    if (!x.sizes().equals(mu.sizes())) throw Error("gaussian_nll: shape mismatch");
    const double log_norm = std::log(sigma) + 0.5 * std::log(2.0 * M_PI);
    torch::Tensor flat = ((x - mu).pow(2) / (2.0 * sigma * sigma) + log_norm).flatten(1);
    return flat.sum(-1);
}

torch::nn::Sequential make_mlp(int64_t in_dim, const std::vector<int64_t>& hidden, int64_t out_dim) {
    torch::nn::Sequential net;
    int64_t prev = in_dim;
    for (int64_t h : hidden) {
        net->push_back(torch::nn::Linear(prev, h));
        net->push_back(torch::nn::CELU());
        prev = h;
    }
    net->push_back(torch::nn::Linear(prev, out_dim));
    return net;
}

int64_t norm_groups(int64_t channels) {
    int64_t groups = std::max<int64_t>(1, channels / 16);
    while (channels % groups != 0) --groups;
    return groups;
}

GaussianHeadImpl::GaussianHeadImpl(int64_t in_dim, int64_t out_dim_) : out_dim(out_dim_) {
    proj = register_module("proj", torch::nn::Linear(in_dim, 2 * out_dim));
}

GaussianLatent GaussianHeadImpl::forward(const torch::Tensor& feat) {
    torch::Tensor both = proj->forward(feat);
    auto chunks = both.chunk(2, -1);
    return GaussianLatent(chunks[0], chunks[1]);
}

SSMCellImpl::SSMCellImpl(int64_t z_dim_, int64_t code_dim_, int64_t hidden_dim_)
    : z_dim(z_dim_), code_dim(code_dim_), hidden_dim(hidden_dim_) {
    cell = register_module("cell", torch::nn::LSTMCell(z_dim + code_dim, hidden_dim));
}

RecurrentState SSMCellImpl::update(const torch::Tensor& z_prev, const torch::Tensor& frame_code,
                                   const RecurrentState& prev) {
    if (z_prev.size(-1) != z_dim)
        throw Error("update_history: z_prev dim " + std::to_string(z_prev.size(-1)) +
                    " does not match cell z dim " + std::to_string(z_dim));
    if (frame_code.size(-1) != code_dim)
        throw Error("update_history: frame_code dim " + std::to_string(frame_code.size(-1)) +
                    " does not match cell code dim " + std::to_string(code_dim));
    if (prev.hidden.size(-1) != hidden_dim)
        throw Error("update_history: hidden dim " + std::to_string(prev.hidden.size(-1)) +
                    " does not match cell hidden dim " + std::to_string(hidden_dim));
    auto [h, c] = cell->forward(torch::cat({z_prev, frame_code}, -1),
                                std::make_tuple(prev.hidden, prev.cell));
    return RecurrentState{h, c};
}

ActionEnhancerImpl::ActionEnhancerImpl(int64_t action_dim_, int64_t hidden, int64_t out_dim_)
    : action_dim(action_dim_), out_dim(out_dim_) {
    net = register_module("net", make_mlp(action_dim, {hidden, hidden}, out_dim));
}

torch::Tensor ActionEnhancerImpl::forward(const torch::Tensor& action) {
    if (action.size(-1) != action_dim)
        throw Error("enhance_action: got length " + std::to_string(action.size(-1)) + ", expected " +
                    std::to_string(action_dim));
    return net->forward(action);
}

namespace {

void push_conv_gn_celu(torch::nn::Sequential& net, int64_t in_ch, int64_t out_ch, int64_t kernel,
                       int64_t stride) {
    net->push_back(torch::nn::Conv2d(
        torch::nn::Conv2dOptions(in_ch, out_ch, kernel).stride(stride).padding(kernel / 2)));
    net->push_back(torch::nn::GroupNorm(norm_groups(out_ch), out_ch));
    net->push_back(torch::nn::CELU());
}

}  // namespace

FrameEncoderImpl::FrameEncoderImpl(int64_t in_ch_, const std::vector<int64_t>& channels,
                                   int64_t image_hw, int64_t code_dim_)
    : in_ch(in_ch_), code_dim(code_dim_) {
    require(channels.size() == 4, "frame encoder needs 4 channel stages");
    require(image_hw % 16 == 0, "frame encoder needs image size divisible by 16");
    torch::nn::Sequential t;
    push_conv_gn_celu(t, in_ch, channels[0], 7, 2);
    push_conv_gn_celu(t, channels[0], channels[1], 3, 2);
    push_conv_gn_celu(t, channels[1], channels[2], 3, 2);
    push_conv_gn_celu(t, channels[2], channels[3], 3, 2);
    trunk = register_module("trunk", t);
    const int64_t spatial = image_hw / 16;
    head = register_module("head", torch::nn::Linear(channels[3] * spatial * spatial, code_dim));
}

torch::Tensor FrameEncoderImpl::forward(const torch::Tensor& img) {
    return head->forward(trunk->forward(img).flatten(1));
}

ConvEncoderImpl::ConvEncoderImpl(int64_t in_ch_, const std::vector<int64_t>& channels,
                                 int64_t image_hw, int64_t code_dim_)
    : in_ch(in_ch_), code_dim(code_dim_) {
    require(!channels.empty(), "conv encoder needs at least one channel stage");
    int64_t spatial = image_hw;
    torch::nn::Sequential t;
    int64_t prev = in_ch;
    for (int64_t ch : channels) {
        require(spatial % 2 == 0, "conv encoder image size must divide by 2 per stage");
        push_conv_gn_celu(t, prev, ch, 3, 2);
        prev = ch;
        spatial /= 2;
    }
    trunk = register_module("trunk", t);
    head = register_module("head", torch::nn::Linear(prev * spatial * spatial, code_dim));
}

torch::Tensor ConvEncoderImpl::forward(const torch::Tensor& img) {
    return head->forward(trunk->forward(img).flatten(1));
}

std::vector<int64_t> SubPixelDecoderImpl::upsample_factors(int64_t out_hw) {
    std::vector<int64_t> factors;
    int64_t remaining = out_hw;
    while (remaining > 1) {
        int64_t f = (factors.size() % 2 == 0) ? 4 : 2;
        if (remaining % f != 0 || remaining < f) f = 2;
        require(remaining % f == 0, "sub-pixel decoder target size must be a product of 2s and 4s");
        factors.push_back(f);
        remaining /= f;
    }
    return factors;
}

SubPixelDecoderImpl::SubPixelDecoderImpl(int64_t latent_dim_, const std::vector<int64_t>& channels,
                                         int64_t out_hw_, int64_t out_ch_)
    : latent_dim(latent_dim_), out_hw(out_hw_), out_ch(out_ch_) {
    require(!channels.empty(), "sub-pixel decoder needs at least one channel stage");
    auto factors = upsample_factors(out_hw);
    torch::nn::Sequential n;
    int64_t prev = latent_dim;
    // latent enters as a 1×1 feature map
    push_conv_gn_celu(n, prev, channels[0], 1, 1);
    prev = channels[0];
    for (size_t i = 0; i < factors.size(); ++i) {
        int64_t ch = channels[std::min(i, channels.size() - 1)];
        int64_t f = factors[i];
        n->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(prev, ch * f * f, 3).padding(1)));
        n->push_back(torch::nn::PixelShuffle(f));
        n->push_back(torch::nn::GroupNorm(norm_groups(ch), ch));
        n->push_back(torch::nn::CELU());
        n->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).padding(1)));
        n->push_back(torch::nn::GroupNorm(norm_groups(ch), ch));
        n->push_back(torch::nn::CELU());
        prev = ch;
    }
    n->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(prev, out_ch, 3).padding(1)));
    net = register_module("net", n);
}

torch::Tensor SubPixelDecoderImpl::forward(const torch::Tensor& z) {
    return net->forward(z.unsqueeze(-1).unsqueeze(-1));
}

BroadcastDecoderImpl::BroadcastDecoderImpl(int64_t latent_dim_, int64_t channels, int64_t out_hw_,
                                           int64_t broadcast_hw_, int64_t out_ch_)
    : latent_dim(latent_dim_), out_hw(out_hw_), broadcast_hw(broadcast_hw_), out_ch(out_ch_) {
    torch::nn::Sequential n;
    int64_t prev = latent_dim + 2;
    for (int i = 0; i < 3; ++i) {
        push_conv_gn_celu(n, prev, channels, 3, 1);
        prev = channels;
    }
    n->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(prev, out_ch, 3).padding(1)));
    net = register_module("net", n);
}

torch::Tensor BroadcastDecoderImpl::coord_grid(torch::Dtype dtype) const {
    auto opts = torch::TensorOptions().dtype(dtype);
    torch::Tensor line = torch::linspace(-1.0, 1.0, broadcast_hw, opts);
    torch::Tensor ys = line.view({broadcast_hw, 1}).expand({broadcast_hw, broadcast_hw});
    torch::Tensor xs = line.view({1, broadcast_hw}).expand({broadcast_hw, broadcast_hw});
    return torch::stack({xs, ys}, 0);
}

torch::Tensor BroadcastDecoderImpl::forward(const torch::Tensor& z) {
    const int64_t b = z.size(0);
    torch::Tensor tiled = z.view({b, latent_dim, 1, 1}).expand({b, latent_dim, broadcast_hw, broadcast_hw});
    torch::Tensor coords = coord_grid(z.scalar_type()).unsqueeze(0).expand({b, 2, broadcast_hw, broadcast_hw});
    torch::Tensor out = net->forward(torch::cat({tiled, coords}, 1));
    if (broadcast_hw != out_hw) {
        out = torch::nn::functional::interpolate(
            out, torch::nn::functional::InterpolateFuncOptions()
                     .size(std::vector<int64_t>{out_hw, out_hw})
                     .mode(torch::kBilinear)
                     .align_corners(false));
    }
    return out;
}

void reinit_parameters(torch::nn::Module& module, RandomSource& rng) {
    auto named = module.named_parameters(/*recurse=*/true);
    std::vector<std::pair<std::string, torch::Tensor>> params;
    params.reserve(named.size());
    for (const auto& p : named) params.emplace_back(p.key(), p.value());
    std::sort(params.begin(), params.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    torch::NoGradGuard ng;
    for (auto& [name, p] : params) {
        const bool is_bias = name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0;
        if (is_bias) {
            p.zero_();
        } else if (p.dim() <= 1) {
            p.fill_(1.0);  // norm-layer scales
        } else {
            const double fan_in = static_cast<double>(p.numel()) / static_cast<double>(p.size(0));
            torch::Tensor init = rng.normal(p.sizes(), p.scalar_type()) / std::sqrt(fan_in);
            p.copy_(init);
        }
    }
}

}  // namespace gatsbi
