#include "testing.hpp"

#include <cmath>

#include <gatsbi/mixture.hpp>
#include <gatsbi/tensor_store.hpp>

#include "grad_check.hpp"
#include "test_util.hpp"

using namespace gatsbi;
using gatsbi::testing::max_grad_rel_err;

namespace {

ModelConfig tiny_config(int64_t modes = 2, torch::Dtype dtype = torch::kFloat32) {
    ModelConfig m;
    m.image_h = m.image_w = 16;
    m.num_modes = modes;
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

MixtureModule make_tiny(const ModelConfig& cfg, uint64_t seed) {
    MixtureModule mod(cfg);
    RandomSource rng(seed);
    reinit_parameters(*mod, rng);
    return mod;
}

void zero_params(torch::nn::Module& m) {
    torch::NoGradGuard ng;
    for (auto& p : m.parameters()) p.zero_();
}

void copy_params(const torch::nn::Module& src, torch::nn::Module& dst) {
    torch::NoGradGuard ng;
    auto from = src.named_parameters();
    auto to = dst.named_parameters();
    REQUIRE(from.size() == to.size());
    for (const auto& item : from) to[item.key()].copy_(item.value());
}

}  // namespace

TEST_SUITE_BEGIN("mixture");

TEST_CASE("stick-breaking analytic values and normalization") {
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);

    // K=2, zero logit everywhere: sigma(0)=0.5 splits the scene evenly
    torch::Tensor two = stick_break(torch::zeros({1, 1, 1, 4, 4}, opts));
    CHECK(two.sizes() == torch::IntArrayRef({1, 2, 1, 4, 4}));
    CHECK((two.select(1, 0) - 0.5).abs().max().item<double>() < 1e-12);
    CHECK((two.select(1, 1) - 0.5).abs().max().item<double>() < 1e-12);

    torch::Tensor three = stick_break(torch::zeros({2, 2, 1, 3, 3}, opts));
    CHECK((three.select(1, 0) - 0.5).abs().max().item<double>() < 1e-12);
    CHECK((three.select(1, 1) - 0.25).abs().max().item<double>() < 1e-12);
    CHECK((three.select(1, 2) - 0.25).abs().max().item<double>() < 1e-12);

    RandomSource rng(3);
    torch::Tensor logits = rng.normal({2, 3, 1, 8, 8}, torch::kFloat32) * 3.0;
    torch::Tensor four = stick_break(logits);
    CHECK((four.sum(1) - 1.0).abs().max().item<double>() < 1e-6);
    CHECK(four.min().item<double>() >= 0.0);
    CHECK(four.max().item<double>() <= 1.0);

    CHECK_THROWS_AS(stick_break(torch::zeros({1, 1, 4, 4})), Error);
}

TEST_CASE("mixture composition matches the per-pixel summation oracle") {
    RandomSource rng(5);
    const int64_t B = 2, K = 3, H = 6, W = 6;
    torch::Tensor raw = rng.normal({B, K, 1, H, W}, torch::kFloat64);
    torch::Tensor masks = torch::softmax(raw, 1);
    torch::Tensor comps = rng.normal({B, K, 3, H, W}, torch::kFloat64);

    torch::Tensor mu = compose_mixture(masks, comps);
    torch::Tensor oracle = torch::zeros({B, 3, H, W}, torch::kFloat64);
    for (int64_t k = 0; k < K; ++k) oracle += masks.select(1, k) * comps.select(1, k);
    CHECK((mu - oracle).abs().max().item<double>() < 1e-6);

    // one-hot masks pick out the matching component pixel for pixel
    torch::Tensor hot = torch::zeros({1, 2, 1, 4, 4}, torch::kFloat64);
    hot.select(1, 0).fill_(1.0);
    torch::Tensor c2 = rng.normal({1, 2, 3, 4, 4}, torch::kFloat64);
    CHECK(torch::equal(compose_mixture(hot, c2), c2.select(1, 0)));

    // uniform two-mode masks average the components
    torch::Tensor half = torch::full({1, 2, 1, 4, 4}, 0.5, torch::kFloat64);
    torch::Tensor avg = compose_mixture(half, c2);
    CHECK((avg - (c2.select(1, 0) + c2.select(1, 1)) / 2.0).abs().max().item<double>() < 1e-12);

    // permuting modes jointly leaves the composite unchanged
    torch::Tensor perm = torch::tensor({2L, 0L, 1L});
    torch::Tensor mu_p = compose_mixture(masks.index_select(1, perm), comps.index_select(1, perm));
    CHECK((mu - mu_p).abs().max().item<double>() < 1e-12);

    CHECK_THROWS_AS(compose_mixture(masks * 1.1, comps), InvariantError);
}

TEST_CASE("salient residual is the plain difference") {
    RandomSource rng(7);
    torch::Tensor o = rng.normal({2, 3, 5, 5});
    torch::Tensor mu = rng.normal({2, 3, 5, 5});
    CHECK(torch::equal(salient_residual(o, mu), o - mu));
    CHECK(salient_residual(o, o).abs().max().item<double>() == 0.0);
    CHECK(torch::equal(salient_residual(o, torch::zeros_like(o)), o));
    CHECK_THROWS_AS(salient_residual(o, torch::zeros({2, 3, 4, 4})), Error);
}

TEST_CASE("residual transition is the identity at delta zero") {
    ResidualTransition res(4, 8, /*delta=*/0.0, /*lambda=*/1.0);
    RandomSource rng(11);
    reinit_parameters(*res, rng);
    torch::Tensor z_prev = rng.normal({3, 4});
    torch::Tensor z_bar = rng.normal({3, 4});
    auto [z_next, pen] = res->update(z_prev, z_bar);
    CHECK(torch::equal(z_next, z_prev));
    CHECK(pen.abs().max().item<double>() == 0.0);
}

TEST_CASE("residual transition penalty is the scaled step norm") {
    ResidualTransition res(4, 8, /*delta=*/2.0, /*lambda=*/1.0);
    RandomSource rng(13);
    reinit_parameters(*res, rng);
    torch::Tensor z_prev = rng.normal({3, 4});
    torch::Tensor z_bar = rng.normal({3, 4});

    torch::Tensor g = res->net->forward(torch::cat({z_bar, z_prev}, -1));
    auto [z_next, pen] = res->update(z_prev, z_bar);
    CHECK((z_next - (z_prev + 2.0 * g)).abs().max().item<double>() < 1e-6);
    CHECK((pen - (2.0 * g).norm(2, {-1})).abs().max().item<double>() < 1e-6);

    res->lambda = 0.25;
    auto [z_next2, pen2] = res->update(z_prev, z_bar);
    CHECK(torch::equal(z_next2, z_next));
    CHECK((pen2 - 0.25 * (2.0 * g).norm(2, {-1})).abs().max().item<double>() < 1e-6);
}

TEST_CASE("mask inference is deterministic under a fixed seed") {
    ModelConfig cfg = tiny_config(3);
    MixtureModule mod = make_tiny(cfg, 17);
    RandomSource data(23);
    torch::Tensor frame = data.uniform({2, 3, 16, 16});
    torch::Tensor a_hat = data.normal({2, 3});

    MixtureState st = mod->initial_state(2);
    RandomSource r1(41), r2(41);
    MaskLatentStack s1 = mod->infer_mask_latents(frame, a_hat, st, r1);
    MaskLatentStack s2 = mod->infer_mask_latents(frame, a_hat, st, r2);
    CHECK(torch::equal(s1.samples, s2.samples));
    CHECK(torch::equal(s1.pre_samples, s2.pre_samples));
    CHECK(torch::equal(s1.reg, s2.reg));
    REQUIRE(s1.posterior.size() == 3);
    REQUIRE(s1.prior.size() == 3);
    for (int k = 0; k < 3; ++k) {
        CHECK(torch::equal(s1.posterior[k].mean, s2.posterior[k].mean));
        CHECK(torch::equal(s1.prior[k].log_std, s2.prior[k].log_std));
    }
    CHECK(s1.samples.sizes() == torch::IntArrayRef({2, 3, cfg.z_mask_dim}));

    // a different seed moves the draws but not the posterior parameters
    RandomSource r3(42);
    MaskLatentStack s3 = mod->infer_mask_latents(frame, a_hat, st, r3);
    CHECK(torch::equal(s1.posterior[0].mean, s3.posterior[0].mean));
    CHECK(!torch::equal(s1.samples, s3.samples));
}

TEST_CASE("published scale: latent widths and history input dims") {
    TrainConfig roll = make_roll_config();
    CHECK(roll.model.num_modes == 3);
    CHECK(make_bair_config().model.num_modes == 4);

    MixtureModule mod(roll.model);
    CHECK(mod->mask_rnn_post->cell->options.input_size() == 160);   // 32-d latent + 128-d code
    CHECK(mod->comp_rnn_post->cell->options.input_size() == 192);   // 64-d latent + 128-d code
    CHECK(mod->mask_rnn_post->cell->options.hidden_size() == 128);
    CHECK(mod->comp_rnn_post->cell->options.hidden_size() == 128);

    RandomSource rng(29);
    MixtureState st = mod->initial_state(1);
    torch::Tensor frame = rng.uniform({1, 3, 64, 64});
    torch::Tensor a_hat = rng.normal({1, roll.model.act_enhanced_dim});
    MaskLatentStack masks = mod->infer_mask_latents(frame, a_hat, st, rng);
    CHECK(masks.samples.sizes() == torch::IntArrayRef({1, 3, 32}));
    MaskLatentStack gen = mod->generate_mask_latents(a_hat, st, rng);
    CHECK(gen.samples.sizes() == torch::IntArrayRef({1, 3, 32}));
    CHECK(gen.posterior.empty());
}

TEST_CASE("component encoder consumes the frame plus one mask channel") {
    ModelConfig cfg = tiny_config(2);
    MixtureModule mod = make_tiny(cfg, 31);
    CHECK(mod->comp_enc->in_ch == 4);

    RandomSource rng(37);
    torch::Tensor frame = rng.uniform({2, 3, 16, 16});
    torch::Tensor a_hat = rng.normal({2, 3});
    torch::Tensor masks = stick_break(rng.normal({2, 1, 1, 16, 16}));
    MixtureState st = mod->initial_state(2);

    RandomSource r1(43), r2(43);
    ComponentLatentStack c1 = mod->infer_component_latents(frame, masks, a_hat, st, r1);
    ComponentLatentStack c2 = mod->infer_component_latents(frame, masks, a_hat, st, r2);
    CHECK(torch::equal(c1.samples, c2.samples));
    CHECK(c1.samples.sizes() == torch::IntArrayRef({2, 2, cfg.z_comp_dim}));
    REQUIRE(c1.posterior.size() == 2);
}

TEST_CASE("zeroed decoders emit all-zero images") {
    ModelConfig cfg = tiny_config(2);
    MixtureModule mod = make_tiny(cfg, 47);
    zero_params(*mod->comp_cond);
    zero_params(*mod->comp_dec);
    RandomSource rng(53);
    torch::Tensor z = rng.normal({2, 2, cfg.z_comp_dim});
    torch::Tensor a_hat = rng.normal({2, 3});
    torch::Tensor imgs = mod->decode_components(z, a_hat);
    CHECK(imgs.sizes() == torch::IntArrayRef({2, 2, 3, 16, 16}));
    CHECK(imgs.abs().max().item<double>() == 0.0);

    torch::Tensor logits = mod->decode_mask_logits(rng.normal({2, 2, cfg.z_mask_dim}), a_hat);
    CHECK(logits.sizes() == torch::IntArrayRef({2, 1, 1, 16, 16}));
}

TEST_CASE("tied prior heads and shared histories collapse the kl") {
    ModelConfig cfg = tiny_config(2);
    cfg.separate_prior_posterior_rnn = false;  // one shared history bank per entity
    MixtureModule mod = make_tiny(cfg, 59);
    copy_params(*mod->post_mask, *mod->prior_mask);
    copy_params(*mod->post_comp, *mod->prior_comp);
    zero_params(*mod->enc_obs);   // observation code becomes exactly zero,
    zero_params(*mod->comp_enc);  // matching the prior's structural zero slot

    RandomSource data(61), rng(67);
    torch::Tensor a_hat = data.normal({1, 3});
    MixtureState st = mod->initial_state(1);
    for (int t = 0; t < 3; ++t) {
        torch::Tensor frame = data.uniform({1, 3, 16, 16});
        MixtureOutput out = mod->observe_step(frame, a_hat, st, rng);
        for (int64_t k = 0; k < cfg.num_modes; ++k) {
            CHECK(kl_diag_gaussian(out.mask.posterior[k], out.mask.prior[k]).item<double>() == 0.0);
            CHECK(kl_diag_gaussian(out.comp.posterior[k], out.comp.prior[k]).item<double>() == 0.0);
        }
    }
}

TEST_CASE("elbo closed form at perfect reconstruction and additivity") {
    ModelConfig cfg = tiny_config(2);
    cfg.separate_prior_posterior_rnn = false;
    cfg.sigma_mix = 0.1;
    MixtureModule mod = make_tiny(cfg, 71);
    copy_params(*mod->post_mask, *mod->prior_mask);
    copy_params(*mod->post_comp, *mod->prior_comp);
    zero_params(*mod->enc_obs);
    zero_params(*mod->comp_enc);
    zero_params(*mod->mask_res->net);  // residual dynamics contribute nothing
    zero_params(*mod->comp_res->net);

    RandomSource data(73), rng(79);
    torch::Tensor a_hat = data.normal({1, 3});
    MixtureState st = mod->initial_state(1);
    std::vector<MixtureOutput> steps;
    const int64_t T = 2;
    for (int64_t t = 0; t < T; ++t)
        steps.push_back(mod->observe_step(data.uniform({1, 3, 16, 16}), a_hat, st, rng));

    torch::Tensor recon = torch::stack({steps[0].mu_mix, steps[1].mu_mix}, 1);  // [1, T, 3, H, W]
    MixtureLoss loss = mod->mixture_elbo(recon, steps);
    const double hw = 16.0 * 16.0;
    const double expected =
        double(T) * 3.0 * hw * (std::log(cfg.sigma_mix) + 0.5 * std::log(2.0 * M_PI));
    CHECK(loss.kl_mask.item<double>() == 0.0);
    CHECK(loss.kl_comp.item<double>() == 0.0);
    CHECK(loss.residual.item<double>() == 0.0);
    CHECK(loss.total.item<double>() == doctest::Approx(expected).epsilon(1e-6));

    // per-timestep additivity
    MixtureLoss l0 = mod->mixture_elbo(recon.narrow(1, 0, 1), {steps[0]});
    MixtureLoss l1 = mod->mixture_elbo(recon.narrow(1, 1, 1), {steps[1]});
    CHECK(loss.total.item<double>() ==
          doctest::Approx(l0.total.item<double>() + l1.total.item<double>()).epsilon(1e-6));
}

TEST_CASE("elbo gradient matches central finite differences") {
    ModelConfig cfg = tiny_config(2, torch::kFloat64);
    MixtureModule mod = make_tiny(cfg, 83);
    RandomSource data(89);
    torch::Tensor frames = data.uniform({1, 2, 3, 16, 16}, torch::kFloat64);
    torch::Tensor a_hat = data.normal({1, 3}, torch::kFloat64);

    auto loss_fn = [&]() {
        RandomSource rng(97);
        MixtureState st = mod->initial_state(1);
        std::vector<MixtureOutput> steps;
        steps.push_back(mod->observe_step(frames.select(1, 0), a_hat, st, rng));
        steps.push_back(mod->observe_step(frames.select(1, 1), a_hat, st, rng));
        return mod->mixture_elbo(frames, steps).total;
    };
    double err = max_grad_rel_err(mod->parameters(), loss_fn, 1e-5, /*max_checks=*/150, 101);
    CHECK(err < 1e-3);
}

TEST_CASE("action conditioning enters through the first mode only") {
    ModelConfig cfg = tiny_config(3);
    MixtureModule mod = make_tiny(cfg, 103);
    mod->trace = true;
    RandomSource data(107);
    torch::Tensor frame = data.uniform({1, 3, 16, 16});
    torch::Tensor a_zero = torch::zeros({1, 3});
    torch::Tensor a_one = torch::ones({1, 3});

    MixtureState st0 = mod->initial_state(1);
    RandomSource r0(109);
    MixtureOutput out0 = mod->observe_step(frame, a_zero, st0, r0);
    auto mask0 = mod->traced_mask;
    auto comp0 = mod->traced_comp;

    MixtureState st1 = mod->initial_state(1);
    RandomSource r1(109);
    MixtureOutput out1 = mod->observe_step(frame, a_one, st1, r1);
    auto mask1 = mod->traced_mask;
    auto comp1 = mod->traced_comp;

    REQUIRE(mask0.size() == 3);
    REQUIRE(comp0.size() == 3);
    for (int k = 0; k < 3; ++k) {
        // the observation code and the (initial) histories never see the action
        CHECK(torch::equal(mask0[k].code, mask1[k].code));
        CHECK(torch::equal(mask0[k].h, mask1[k].h));
        if (k == 0) {
            CHECK(!torch::equal(mask0[k].act, mask1[k].act));
        } else {
            CHECK(mask0[k].act.abs().max().item<double>() == 0.0);
            CHECK(mask1[k].act.abs().max().item<double>() == 0.0);
            CHECK(comp0[k].act.abs().max().item<double>() == 0.0);
            CHECK(comp1[k].act.abs().max().item<double>() == 0.0);
        }
    }
    // the action's effect propagates along the chain: later modes differ only
    // through the realized latent of the mode before them
    CHECK(!torch::equal(mask0[1].z_prev_mode, mask1[1].z_prev_mode));
    CHECK(!torch::equal(out0.mu_mix, out1.mu_mix));
}

TEST_CASE("inferred and generated masks stay normalized") {
    ModelConfig cfg = tiny_config(3);
    MixtureModule mod = make_tiny(cfg, 113);
    RandomSource data(127), rng(131);
    torch::Tensor a_hat = data.normal({2, 3});
    MixtureState st = mod->initial_state(2);
    for (int t = 0; t < 2; ++t) {
        MixtureOutput out = mod->observe_step(data.uniform({2, 3, 16, 16}), a_hat, st, rng);
        CHECK((out.masks.sum(1) - 1.0).abs().max().item<double>() < 1e-5);
        CHECK(out.masks.min().item<double>() >= 0.0);
        CHECK(std::isfinite(out.mu_mix.abs().max().item<double>()));
    }
    for (int t = 0; t < 2; ++t) {
        MixtureOutput out = mod->generate_step(a_hat, st, rng);
        CHECK((out.masks.sum(1) - 1.0).abs().max().item<double>() < 1e-5);
        CHECK(out.mask.posterior.empty());
        CHECK(out.comp.posterior.empty());
        CHECK(out.salient.defined() == false);
    }
}

TEST_CASE("generation is deterministic and diverges across seeds") {
    ModelConfig cfg = tiny_config(2);
    MixtureModule mod = make_tiny(cfg, 137);
    RandomSource data(139);
    torch::Tensor a_hat = data.normal({1, 3});

    MixtureState sa = mod->initial_state(1), sb = mod->initial_state(1), sc = mod->initial_state(1);
    RandomSource ra(149), rb(149), rc(151);
    MixtureOutput oa = mod->generate_step(a_hat, sa, ra);
    MixtureOutput ob = mod->generate_step(a_hat, sb, rb);
    MixtureOutput oc = mod->generate_step(a_hat, sc, rc);
    CHECK(torch::equal(oa.mu_mix, ob.mu_mix));
    CHECK(torch::equal(oa.mask.samples, ob.mask.samples));
    CHECK(!torch::equal(oa.mask.samples, oc.mask.samples));
}

TEST_CASE("decomposition export round-trips through the container") {
    TempDir dir("mixdump");
    RandomSource rng(157);
    torch::Tensor masks = torch::softmax(rng.normal({2, 1, 4, 4}), 0);
    torch::Tensor comps = rng.normal({2, 3, 4, 4});
    torch::Tensor mu = rng.normal({3, 4, 4});
    const std::string path = dir.file("decomp.gtsr");
    save_decomposition(path, masks, comps, mu);

    auto loaded = load_tensors(path);
    REQUIRE(loaded.size() == 3);
    CHECK(torch::equal(loaded.at("masks"), masks));
    CHECK(torch::equal(loaded.at("components"), comps));
    CHECK(torch::equal(loaded.at("mu_mix"), mu));

    CHECK_THROWS_AS(save_decomposition(path, comps, comps, mu), Error);
}

TEST_SUITE_END();
