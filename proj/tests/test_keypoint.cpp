#include "testing.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <gatsbi/keypoint.hpp>
#include <gatsbi/tensor_store.hpp>

#include "grad_check.hpp"
#include "test_util.hpp"

using namespace gatsbi;
using gatsbi::testing::max_grad_rel_err;
using torch::indexing::Slice;

namespace {

ModelConfig tiny_config(torch::Dtype dtype = torch::kFloat32) {
    ModelConfig m;
    m.image_h = m.image_w = 16;
    m.num_modes = 3;
    m.z_mask_dim = 3;
    m.h_mask_dim = 6;
    m.z_comp_dim = 4;
    m.h_comp_dim = 6;
    m.num_keypoints = 4;
    m.z_kp_dim = 3;
    m.h_kp_dim = 8;
    m.grid_size = 2;
    m.max_objects = 2;
    m.z_what_dim = 4;
    m.glimpse_size = 4;
    m.action_dim = 2;
    m.act_enhanced_dim = 3;
    m.knn_k = 1;
    m.widths.frame_enc_channels = {2, 2, 4, 4};
    m.widths.mask_dec_channels = {2, 2, 2, 2};
    m.widths.comp_enc_channels = {2, 2, 4};
    m.widths.comp_dec_channels = 4;
    m.widths.comp_dec_stride = 4;
    m.widths.hist_code_dim = 4;
    m.widths.head_hidden = 6;
    m.widths.act_hidden = 4;
    m.widths.mode_feat_dim = 4;
    m.widths.kp_channels = 4;
    m.widths.kp_feat_dim = 6;
    m.widths.obj_enc_channels = 4;
    m.widths.glimpse_enc_channels = 4;
    m.widths.glimpse_dec_channels = 4;
    m.widths.inter_dim = 6;
    m.widths.ambient_hidden = {6, 6};
    m.dtype = dtype;
    return m;
}

KeypointModule make_tiny(const ModelConfig& cfg, uint64_t seed) {
    KeypointModule mod(cfg);
    RandomSource rng(seed);
    reinit_parameters(*mod, rng);
    return mod;
}

// Keys cubic-convolution kernel at a = -0.75, the coefficient torch uses.
double cubic_near(double x) {  // 0 <= x <= 1
    constexpr double a = -0.75;
    return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
}
double cubic_far(double x) {  // 1 < x < 2
    constexpr double a = -0.75;
    return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
}

// Independent bicubic upsample: half-pixel source mapping, 4x4 taps with
// edge-replicated indices, separable Keys weights.
torch::Tensor bicubic_oracle(const torch::Tensor& in, int64_t oh, int64_t ow) {
    auto src = in.to(torch::kFloat64).contiguous();
    const int64_t B = src.size(0), C = src.size(1), ih = src.size(2), iw = src.size(3);
    auto out = torch::zeros({B, C, oh, ow}, torch::kFloat64);
    auto a = src.accessor<double, 4>();
    auto o = out.accessor<double, 4>();
    auto clamp_idx = [](int64_t v, int64_t hi) {
        return std::min(std::max<int64_t>(v, 0), hi - 1);
    };
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t oy = 0; oy < oh; ++oy) {
                const double sy = (oy + 0.5) * double(ih) / double(oh) - 0.5;
                const int64_t y0 = int64_t(std::floor(sy));
                const double ty = sy - double(y0);
                const double wy[4] = {cubic_far(ty + 1.0), cubic_near(ty), cubic_near(1.0 - ty),
                                      cubic_far(2.0 - ty)};
                for (int64_t ox = 0; ox < ow; ++ox) {
                    const double sx = (ox + 0.5) * double(iw) / double(ow) - 0.5;
                    const int64_t x0 = int64_t(std::floor(sx));
                    const double tx = sx - double(x0);
                    const double wx[4] = {cubic_far(tx + 1.0), cubic_near(tx),
                                          cubic_near(1.0 - tx), cubic_far(2.0 - tx)};
                    double acc = 0.0;
                    for (int i = 0; i < 4; ++i)
                        for (int j = 0; j < 4; ++j)
                            acc += wy[i] * wx[j] *
                                   a[b][c][clamp_idx(y0 - 1 + i, ih)][clamp_idx(x0 - 1 + j, iw)];
                    o[b][c][oy][ox] = acc;
                }
            }
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("keypoint");

TEST_CASE("zero feature maps aggregate to a one-half map") {
    auto maps = torch::zeros({2, 3, 4, 4});
    auto gamma = aggregate_keypoint_map(maps, 16, 16);
    CHECK(gamma.sizes() == torch::IntArrayRef({2, 1, 16, 16}));
    CHECK(torch::allclose(gamma, torch::full_like(gamma, 0.5), 0.0, 1e-6));
    CHECK_THROWS_AS(aggregate_keypoint_map(torch::zeros({3, 4, 4}), 16, 16), Error);
}

TEST_CASE("aggregation matches an independent cubic-convolution oracle") {
    RandomSource rng(5);
    auto maps = rng.normal({2, 3, 4, 4}, torch::kFloat64) * 2.0;
    auto gamma = aggregate_keypoint_map(maps, 16, 16);
    auto g = torch::sigmoid(maps.sum(1, /*keepdim=*/true));
    auto oracle = bicubic_oracle(g, 16, 16).clamp(0.0, 1.0);
    CHECK(torch::allclose(gamma, oracle, 1e-9, 1e-9));

    // a single strong positive cell peaks within one cell of its upsampled
    // center ((r + 0.5)·scale − 0.5 in output pixels)
    auto solo = torch::zeros({1, 2, 4, 4}, torch::kFloat64);
    solo.index_put_({0, 0, 1, 2}, 12.0);
    auto peak = aggregate_keypoint_map(solo, 16, 16).squeeze();
    const int64_t flat = peak.argmax().item<int64_t>();
    const double py = double(flat / 16), px = double(flat % 16);
    CHECK(std::abs(py - 5.5) <= 4.0);
    CHECK(std::abs(px - 9.5) <= 4.0);
}

TEST_CASE("aggregation is monotone under a single-cell bump") {
    RandomSource rng(7);
    auto maps = rng.normal({1, 2, 4, 4}, torch::kFloat64);
    auto before = aggregate_keypoint_map(maps, 16, 16);
    auto g_before = torch::sigmoid(maps.sum(1, /*keepdim=*/true));

    auto bumped = maps.clone();
    bumped.index_put_({0, 0, 1, 1}, bumped.index({0, 0, 1, 1}) + 0.9);
    auto after = aggregate_keypoint_map(bumped, 16, 16);
    auto g_after = torch::sigmoid(bumped.sum(1, /*keepdim=*/true));

    // the sigmoid-sum stage moves exactly the bumped cell, upward
    CHECK(g_after.index({0, 0, 1, 1}).item<double>() > g_before.index({0, 0, 1, 1}).item<double>());
    CHECK((g_after == g_before).sum().item<int64_t>() == 15);

    // output pixels whose source sample sits within the positive lobe of the
    // bumped cell's kernel cannot decrease (clamping preserves order)
    int64_t covered = 0;
    for (int64_t oy = 0; oy < 16; ++oy)
        for (int64_t ox = 0; ox < 16; ++ox) {
            const double sy = (oy + 0.5) * 0.25 - 0.5;
            const double sx = (ox + 0.5) * 0.25 - 0.5;
            if (std::abs(sy - 1.0) > 0.75 || std::abs(sx - 1.0) > 0.75) continue;
            ++covered;
            CHECK(after.index({0, 0, oy, ox}).item<double>() >=
                  before.index({0, 0, oy, ox}).item<double>() - 1e-12);
        }
    CHECK(covered > 0);
}

TEST_CASE("agent selection matches a brute-force overlap count") {
    RandomSource rng(11);
    const int64_t B = 200, K = 4, H = 8;
    auto gamma = rng.uniform({B, 1, H, H});
    auto masks = rng.uniform({B, K, 1, H, H});
    auto got = select_agent_index(gamma, masks);
    REQUIRE(got.sizes() == torch::IntArrayRef({B}));

    auto ga = gamma.accessor<float, 4>();
    auto ma = masks.accessor<float, 5>();
    auto go = got.accessor<int64_t, 1>();
    int64_t mismatches = 0;
    for (int64_t b = 0; b < B; ++b) {
        int64_t best = 0, best_count = -1;
        for (int64_t k = 0; k < K; ++k) {
            int64_t count = 0;
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < H; ++x)
                    if (ga[b][0][y][x] > 0.5f && ma[b][k][0][y][x] > 0.5f) ++count;
            if (count > best_count) {
                best = k;
                best_count = count;
            }
        }
        if (go[b] != best) ++mismatches;
    }
    CHECK(mismatches == 0);
}

TEST_CASE("agent selection returns the matching mask and breaks ties low") {
    auto masks = torch::full({1, 3, 1, 6, 6}, 0.1);
    masks.index_put_({0, 0, 0, Slice(0, 2)}, 0.9);
    masks.index_put_({0, 1, 0, Slice(2, 4)}, 0.9);
    masks.index_put_({0, 2, 0, Slice(4, 6)}, 0.9);
    auto gamma = (masks.index({Slice(), 1}) > 0.5).to(torch::kFloat32);
    CHECK(select_agent_index(gamma, masks)[0].item<int64_t>() == 1);

    auto cold = torch::full({1, 1, 6, 6}, 0.2);
    CHECK(select_agent_index(cold, masks)[0].item<int64_t>() == 0);

    CHECK_THROWS_AS(select_agent_index(gamma, torch::rand({1, 3, 1, 5, 6})), Error);
    CHECK_THROWS_AS(select_agent_index(gamma.squeeze(0), masks), Error);
}

TEST_CASE("agent selection permutes with the masks") {
    const int64_t K = 3, H = 4;
    auto gamma = torch::ones({1, 1, H, H});
    auto masks = torch::zeros({1, K, 1, H, H});
    for (int64_t k = 0; k < K; ++k)
        masks.index_put_({0, k, 0, 0, Slice(0, k + 1)}, 0.9);  // k+1 hot pixels
    CHECK(select_agent_index(gamma, masks)[0].item<int64_t>() == 2);

    auto perm = torch::tensor({int64_t(2), int64_t(0), int64_t(1)});
    CHECK(select_agent_index(gamma, masks.index_select(1, perm))[0].item<int64_t>() == 0);
    auto perm2 = torch::tensor({int64_t(1), int64_t(2), int64_t(0)});
    CHECK(select_agent_index(gamma, masks.index_select(1, perm2))[0].item<int64_t>() == 1);
}

TEST_CASE("detection is a pure function of the frame difference") {
    ModelConfig cfg = tiny_config();
    auto mod = make_tiny(cfg, 13);
    RandomSource data(17);
    auto x = data.uniform({2, 3, 16, 16});
    auto y = data.uniform({2, 3, 16, 16});
    auto a_hat = data.normal({2, 3});
    auto h0 = mod->initial_state(2);

    RandomSource s1(23), s2(23), s3(29);
    auto kx = mod->detect(x, x, h0, a_hat, s1);
    auto ky = mod->detect(y, y, h0, a_hat, s2);
    CHECK(torch::equal(kx.feature_maps, ky.feature_maps));
    CHECK(torch::equal(kx.z, ky.z));

    CHECK(kx.feature_maps.sizes() == torch::IntArrayRef({2, 4, 4, 4}));
    CHECK(kx.z.sizes() == torch::IntArrayRef({2, 4, 3}));
    CHECK(kx.coords.sizes() == torch::IntArrayRef({2, 4, 2}));
    CHECK(kx.intensity.sizes() == torch::IntArrayRef({2, 4}));
    CHECK((kx.intensity > 0).all().item<bool>());
    CHECK((kx.intensity < 1).all().item<bool>());
    CHECK((kx.coords.abs() <= 1.0).all().item<bool>());

    // same posterior, fresh noise: new draw, same statistics
    auto kz = mod->detect(x, x, h0, a_hat, s3);
    CHECK(torch::equal(kz.posterior.mean, kx.posterior.mean));
    CHECK(!torch::equal(kz.z, kx.z));
}

TEST_CASE("published scale: keypoint counts, dims, and loss scales") {
    ModelConfig cfg;
    CHECK(cfg.num_keypoints == 32);
    CHECK(cfg.z_kp_dim == 16);
    CHECK(cfg.h_kp_dim == 512);
    CHECK(cfg.kp_grid() == 16);
    CHECK(cfg.kp_kl_scale == 0.001);
    CHECK(cfg.kp_heatmap_lambda == 0.01);
    CHECK(cfg.lambda_sep == 0.02);
    CHECK(cfg.lambda_sparse == 0.002);

    KeypointModule mod(cfg);
    auto w = mod->post_head->named_parameters()["feat.0.weight"];
    CHECK(w.size(1) == 32 * 3 + 512 + 32);  // read-out ⊕ history ⊕ enhanced action
    CHECK(mod->rnn->cell->options.hidden_size() == 512);
    CHECK(mod->rnn->cell->options.input_size() == 32 * 16 + 32 * 3);

    auto maps = mod->detector->forward(torch::zeros({1, 3, 64, 64}));
    CHECK(maps.sizes() == torch::IntArrayRef({1, 32, 16, 16}));
}

TEST_CASE("history advance is deterministic and batch-shaped") {
    ModelConfig cfg = tiny_config();
    auto mod = make_tiny(cfg, 19);
    RandomSource data(17);
    auto frame = data.uniform({2, 3, 16, 16});
    auto first = data.uniform({2, 3, 16, 16});
    auto a_hat = data.normal({2, 3});
    auto h0 = mod->initial_state(2);
    CHECK(torch::equal(h0.hidden, torch::zeros({2, 8})));
    CHECK(torch::equal(h0.cell, torch::zeros({2, 8})));

    RandomSource s(23);
    auto kp = mod->detect(frame, first, h0, a_hat, s);
    auto h1 = mod->advance_history(kp, h0);
    auto h1b = mod->advance_history(kp, h0);
    CHECK(h1.hidden.sizes() == torch::IntArrayRef({2, 8}));
    CHECK(torch::equal(h1.hidden, h1b.hidden));
    CHECK(!torch::equal(h1.hidden, h0.hidden));

    // a different history changes the heads
    RandomSource s2(23);
    auto kp2 = mod->detect(frame, first, h1, a_hat, s2);
    CHECK(!torch::equal(kp2.posterior.mean, kp.posterior.mean));
}

TEST_CASE("latent heads collapse when the prior ties to a code-blind posterior") {
    ModelConfig cfg = tiny_config();
    auto mod = make_tiny(cfg, 37);
    const int64_t readout_dim = cfg.num_keypoints * 3;
    {
        torch::NoGradGuard ng;
        auto post = mod->post_head->named_parameters();
        post["feat.0.weight"].index({Slice(), Slice(0, readout_dim)}).zero_();
        auto prior = mod->prior_head->named_parameters();
        for (const auto& item : post) prior[item.key()].copy_(item.value());
    }
    RandomSource data(41), s(43);
    auto frame = data.uniform({1, 3, 16, 16});
    auto first = data.uniform({1, 3, 16, 16});
    auto a_hat = data.normal({1, 3});
    auto kp = mod->detect(frame, first, mod->initial_state(1), a_hat, s);
    CHECK(torch::equal(kp.posterior.mean, kp.prior.mean));
    CHECK(torch::equal(kp.posterior.log_std, kp.prior.log_std));
    CHECK(kl_diag_gaussian(kp.posterior, kp.prior).sum().item<double>() == 0.0);
}

TEST_CASE("loss vanishes where the targets agree and composes by the pinned scales") {
    ModelConfig cfg = tiny_config();
    auto mod = make_tiny(cfg, 47);
    RandomSource data(53), s(59);
    auto frame = data.uniform({2, 3, 16, 16});
    auto first = data.uniform({2, 3, 16, 16});
    auto a_hat = data.normal({2, 3});
    auto kp = mod->detect(frame, first, mod->initial_state(2), a_hat, s);

    KeypointSet tied = kp;
    tied.prior = kp.posterior;
    auto gamma = mod->keypoint_map(kp);
    CHECK(gamma.sizes() == torch::IntArrayRef({2, 1, 16, 16}));
    CHECK((gamma >= 0).all().item<bool>());
    CHECK((gamma <= 1).all().item<bool>());

    auto l = mod->loss(frame, first, tied, gamma, gamma);
    CHECK(l.kl.item<double>() == 0.0);
    CHECK(l.heatmap.item<double>() == 0.0);
    CHECK(l.sep.item<double>() >= 0.0);
    CHECK(l.image.item<double>() > 0.0);
    const double composed = 0.02 * l.sep.item<double>() + 0.002 * l.sparse.item<double>() +
                            l.image.item<double>();
    CHECK(l.total.item<double>() == doctest::Approx(composed).epsilon(1e-6));

    // with disagreeing targets every term engages
    auto l2 = mod->loss(frame, first, kp, gamma, torch::zeros_like(gamma));
    CHECK(l2.kl.item<double>() > 0.0);
    CHECK(l2.heatmap.item<double>() > 0.0);
    const double composed2 = 0.001 * l2.kl.item<double>() + 0.01 * l2.heatmap.item<double>() +
                             0.02 * l2.sep.item<double>() + 0.002 * l2.sparse.item<double>() +
                             l2.image.item<double>();
    CHECK(l2.total.item<double>() == doctest::Approx(composed2).epsilon(1e-6));
}

TEST_CASE("separation penalty tracks blob overlap and sparsity the intensity") {
    ModelConfig cfg = tiny_config();
    auto mod = make_tiny(cfg, 53);

    KeypointSet kp;
    kp.coords = torch::zeros({1, 4, 2});  // all four keypoints coincide
    kp.intensity = torch::tensor({{0.1f, 0.2f, 0.3f, 0.4f}});
    GaussianLatent stats(torch::zeros({1, 12}), torch::zeros({1, 12}));
    kp.posterior = stats;
    kp.prior = stats;
    kp.feature_maps = torch::zeros({1, 4, 4, 4});

    auto zero_img = torch::zeros({1, 3, 16, 16});
    auto zero_map = torch::zeros({1, 1, 16, 16});
    auto l = mod->loss(zero_img, zero_img, kp, zero_map, zero_map);
    CHECK(l.sep.item<double>() == doctest::Approx(12.0).epsilon(1e-6));  // 4·3 ordered pairs
    CHECK(l.sparse.item<double>() == doctest::Approx(0.25).epsilon(1e-6));

    kp.coords = torch::tensor({{{-1.f, -1.f}, {1.f, -1.f}, {-1.f, 1.f}, {1.f, 1.f}}});
    auto spread = mod->loss(zero_img, zero_img, kp, zero_map, zero_map);
    CHECK(spread.sep.item<double>() < 1e-60);
}

TEST_CASE("blob maps peak at the keypoint centers") {
    auto coords = torch::tensor({{{0.5f, -1.0f}, {0.0f, 0.0f}}});
    auto inten = torch::tensor({{0.75f, 0.0f}});
    auto maps = keypoint_blob_maps(coords, inten, 5);
    CHECK(maps.sizes() == torch::IntArrayRef({1, 2, 5, 5}));

    // x = 0.5 → column 3, y = −1 → row 0 on linspace(−1, 1, 5)
    CHECK(maps.index({0, 0, 0, 3}).item<float>() == doctest::Approx(0.75).epsilon(1e-6));
    auto flat = maps.select(1, 0).flatten();
    CHECK(flat.argmax().item<int64_t>() == 3);
    auto sorted = std::get<0>(flat.sort(-1, /*descending=*/true));
    CHECK(sorted[1].item<float>() < 0.75f);

    CHECK((maps.select(1, 1) == 0).all().item<bool>());  // zero intensity kills the blob
    CHECK_THROWS_AS(keypoint_blob_maps(coords.squeeze(0), inten, 5), Error);
}

TEST_CASE("loss gradient matches central finite differences") {
    ModelConfig cfg = tiny_config(torch::kFloat64);
    auto mod = make_tiny(cfg, 59);
    RandomSource data(61);
    auto frame = data.uniform({1, 3, 16, 16}, torch::kFloat64);
    auto first = data.uniform({1, 3, 16, 16}, torch::kFloat64);
    auto a_hat = data.normal({1, 3}, torch::kFloat64);
    auto target = data.uniform({1, 1, 16, 16}, torch::kFloat64);

    auto loss_fn = [&]() {
        RandomSource rng(67);
        auto h0 = mod->initial_state(1);
        auto kp = mod->detect(frame, first, h0, a_hat, rng);
        auto gamma = mod->keypoint_map(kp);
        auto l = mod->loss(frame, first, kp, gamma, target);
        auto h1 = mod->advance_history(kp, h0);
        return l.total + 0.1 * h1.hidden.sum();
    };
    double err = max_grad_rel_err(mod->parameters(), loss_fn, 1e-5, /*max_checks=*/150, 71);
    CHECK(err < 1e-3);
}

TEST_CASE("agent views alias the mixture stacks at the selected index") {
    ModelConfig cfg = tiny_config();
    MixtureModule mix(cfg);
    RandomSource init(73);
    reinit_parameters(*mix, init);

    auto st = mix->initial_state(2);
    RandomSource s(79);
    auto frame = s.uniform({2, 3, 16, 16});
    auto a_hat = s.normal({2, 3});
    auto out = mix->observe_step(frame, a_hat, st, s);

    auto agent = agent_views(out.mask, st.hist, out.masks, 1);
    CHECK(torch::equal(agent.z, out.mask.samples.select(1, 1)));
    CHECK(agent.z.data_ptr() == out.mask.samples.select(1, 1).data_ptr());
    CHECK(torch::equal(agent.mask, out.masks.select(1, 1)));
    CHECK(agent.mask.data_ptr() == out.masks.select(1, 1).data_ptr());

    // history comes from the prior-side bank
    CHECK(torch::equal(agent.h, st.hist.mask_prior[1].hidden));
    CHECK(agent.h.data_ptr() == st.hist.mask_prior[1].hidden.data_ptr());
    CHECK(!torch::equal(agent.h, st.hist.mask_post[1].hidden));
    CHECK(agent.h.size(1) == cfg.h_mask_dim);
    CHECK(ModelConfig{}.h_mask_dim == 128);

    auto a0 = agent_views(out.mask, st.hist, out.masks, 0);
    CHECK(torch::equal(a0.mask, out.masks.select(1, 0)));
    CHECK_THROWS_AS(agent_views(out.mask, st.hist, out.masks, 3), Error);
    CHECK_THROWS_AS(agent_views(out.mask, st.hist, out.masks, -1), Error);
}

TEST_CASE("keypoint maps export and round-trip") {
    TempDir dir("kpmap");
    auto gseq = torch::rand({5, 16, 16});
    auto path = dir.file("kp.gtsr");
    save_keypoint_maps(path, gseq);
    auto loaded = load_tensors(path);
    REQUIRE(loaded.count("kp_map") == 1);
    CHECK(torch::equal(loaded.at("kp_map"), gseq));
    CHECK_THROWS_AS(save_keypoint_maps(path, torch::rand({16, 16})), Error);
}

TEST_CASE("action conditioning is structurally removable from the latent heads") {
    ModelConfig off = tiny_config();
    off.joint_action_conditioning = false;
    auto mod_off = make_tiny(off, 83);
    RandomSource data(89);
    auto frame = data.uniform({1, 3, 16, 16});
    auto first = data.uniform({1, 3, 16, 16});
    auto h0 = mod_off->initial_state(1);

    RandomSource r1(97), r2(97);
    auto a = mod_off->detect(frame, first, h0, torch::zeros({1, 3}), r1);
    auto b = mod_off->detect(frame, first, h0, torch::ones({1, 3}), r2);
    CHECK(torch::equal(a.posterior.mean, b.posterior.mean));
    CHECK(torch::equal(a.prior.mean, b.prior.mean));
    CHECK(torch::equal(a.z, b.z));

    auto mod_on = make_tiny(tiny_config(), 83);
    RandomSource r3(97), r4(97);
    auto c = mod_on->detect(frame, first, h0, torch::zeros({1, 3}), r3);
    auto e = mod_on->detect(frame, first, h0, torch::ones({1, 3}), r4);
    CHECK(!torch::equal(c.posterior.mean, e.posterior.mean));
    CHECK(!torch::equal(c.prior.mean, e.prior.mean));
}

TEST_SUITE_END();
