// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "hdwm/denoiser.hpp"

#include <cmath>
#include <vector>

using namespace hdwm;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig cfg;
    cfg.latent_dim = 4;
    cfg.width = 16;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.max_frames = 16;
    cfg.layout_dim = 4;
    cfg.noise_emb_dim = 8;
    cfg.action_emb_dim = 8;
    return cfg;
}

template <typename S>
void randomize_all(DenoiserParamsT<S>& p, Rng& rng, S scale) {
    for (auto& [name, t] : p.named.items)
        for (auto& v : t->data) v = static_cast<S>(rng.normal()) * scale;
}

template <typename S>
std::vector<std::array<S, 3>> make_actions(int f, Rng& rng) {
    std::vector<std::array<S, 3>> a(static_cast<std::size_t>(f));
    for (auto& x : a)
        x = {static_cast<S>(rng.normal() * 0.5), static_cast<S>(rng.normal() * 0.5),
             static_cast<S>(rng.normal() * 0.2)};
    return a;
}

}  // namespace

TEST_CASE("parameter count is reproducible from config") {
    auto cfg = tiny_config();
    Rng r1(3), r2(9);
    auto p1 = DenoiserParamsT<float>::init(cfg, r1);
    auto p2 = DenoiserParamsT<float>::init(cfg, r2);
    CHECK(p1.param_count() == p2.param_count());
    const int d = cfg.width;
    std::int64_t expect = cfg.latent_dim * d + d          // embed
                          + cfg.noise_emb_dim * d         // noise map
                          + cfg.layout_dim * d            // layout projector
                          + d * cfg.latent_dim + cfg.latent_dim;  // unembed
    expect += static_cast<std::int64_t>(cfg.layers) *
              (4 * d * d + d * 4 * d + 4 * d + 4 * d * d + d + 3 * cfg.action_emb_dim * 6 * d);
    CHECK(p1.param_count() == expect);

    Rng r3(3);
    auto p3 = DenoiserParamsT<float>::init(cfg, r3);
    CHECK(p1.named.fingerprint() == p3.named.fingerprint());
}

TEST_CASE("zero-init projectors are exactly zero") {
    Rng rng(1);
    auto p = DenoiserParamsT<float>::init(tiny_config(), rng);
    for (float v : p.layout_w->data) CHECK(v == 0.0f);
    for (const auto& layer : p.layers)
        for (float v : layer.action_w->data) CHECK(v == 0.0f);
}

TEST_CASE("zero-init neutrality of conditioning") {
    auto cfg = tiny_config();
    Rng rng(5);
    auto p = DenoiserParamsT<float>::init(cfg, rng);
    const int f = 5;
    auto z = Tensor::randn({f, cfg.latent_dim}, rng);
    std::vector<float> t_levels{0, 0, 0, 0.5f, 0.5f};
    auto layout = Tensor::randn({f, cfg.layout_dim}, rng);
    auto actions = make_actions<float>(f, rng);

    auto out = denoiser_forward(p, z, t_levels, layout, actions);
    auto out0 = denoiser_forward(p, z, t_levels, Tensor::zeros({f, cfg.layout_dim}),
                                 std::vector<std::array<float, 3>>(f, {0, 0, 0}));
    CHECK(out->data == out0->data);

    // and identical outputs for any two distinct actions at init
    auto other = make_actions<float>(f, rng);
    auto out2 = denoiser_forward(p, z, t_levels, layout, other);
    CHECK(out->data == out2->data);
}

TEST_CASE("inject_layout") {
    auto cfg = tiny_config();
    Rng rng(6);
    auto p = DenoiserParamsT<float>::init(cfg, rng);
    const int f = 4;
    auto hidden = Tensor::randn({f, cfg.width}, rng);
    auto layout = Tensor::randn({f, cfg.layout_dim}, rng);

    SUBCASE("identity at initialization") {
        auto out = inject_layout(hidden, layout, p);
        CHECK(out->data == hidden->data);
    }
    SUBCASE("zero layout is identity for any params") {
        randomize_all(p, rng, 0.3f);
        auto out = inject_layout(hidden, Tensor::zeros({f, cfg.layout_dim}), p);
        CHECK(out->data == hidden->data);
    }
    SUBCASE("frame count mismatch rejected") {
        auto bad = Tensor::randn({f + 1, cfg.layout_dim}, rng);
        CHECK_THROWS_AS(inject_layout(hidden, bad, p), ContractViolation);
    }
    SUBCASE("one optimizer step on the projector breaks identity") {
        TapeT<float> tape;
        {
            TapeScope<float> scope(tape);
            auto out = inject_layout(hidden, layout, p);
            backward(tape, sum(out));
        }
        AdamW opt;
        opt.lr = 0.05f;
        opt.step({p.layout_w});
        auto out = inject_layout(hidden, layout, p);
        bool differs = false;
        for (std::size_t i = 0; i < out->data.size(); ++i)
            differs = differs || out->data[i] != hidden->data[i];
        CHECK(differs);
    }
}

TEST_CASE("action modulation produces 6*d channels per frame") {
    auto cfg = tiny_config();
    Rng rng(7);
    auto p = DenoiserParamsT<float>::init(cfg, rng);
    const int f = 3;
    auto emb = embed_actions<float>(cfg, make_actions<float>(f, rng));
    CHECK(emb->shape == std::vector<int>{f, 3 * cfg.action_emb_dim});
    auto m = matmul(emb, p.layers[0].action_w);
    CHECK(m->shape == std::vector<int>{f, 6 * cfg.width});
    auto mod = action_modulation(p.layers[0], emb, cfg.width);
    CHECK(mod.gate_ffn->shape == std::vector<int>{f, cfg.width});
}

TEST_CASE("adaln sublayer against a straight-line reimplementation") {
    auto cfg = tiny_config();
    Rng rng(8);
    auto p = DenoiserParamsT<float>::init(cfg, rng);
    randomize_all(p, rng, 0.4f);
    const int f = 3, d = cfg.width;
    auto x = Tensor::randn({f, d}, rng);

    AdalnMod<float> mod;
    const float c = 0.37f;
    mod.shift_ffn = Tensor::full({f, d}, c);
    mod.scale_ffn = Tensor::zeros({f, d});
    mod.gate_ffn = Tensor::full({f, d}, 1.0f);
    mod.shift_attn = mod.shift_ffn;
    mod.scale_attn = mod.scale_ffn;
    mod.gate_attn = mod.gate_ffn;

    SUBCASE("gate of zero leaves the base unchanged") {
        AdalnMod<float> gz = mod;
        gz.gate_ffn = Tensor::zeros({f, d});
        auto out = ffn_sublayer(p.layers[0], x, gz);
        CHECK(out->data == x->data);
    }
    SUBCASE("gate 1 / shift c matches plain-loop reference") {
        auto out = ffn_sublayer(p.layers[0], x, mod);
        const auto& L = p.layers[0];
        const int hidden = 4 * d;
        for (int i = 0; i < f; ++i) {
            // layernorm row
            double mu = 0;
            for (int j = 0; j < d; ++j) mu += x->at(i, j);
            mu /= d;
            double var = 0;
            for (int j = 0; j < d; ++j) var += (x->at(i, j) - mu) * (x->at(i, j) - mu);
            var /= d;
            std::vector<double> u(d);
            for (int j = 0; j < d; ++j)
                u[j] = (x->at(i, j) - mu) / std::sqrt(var + 1e-5) + c;
            std::vector<double> h(hidden);
            for (int k = 0; k < hidden; ++k) {
                double acc = L.ffn_b1->data[k];
                for (int j = 0; j < d; ++j) acc += u[j] * L.ffn_w1->at(j, k);
                h[k] = acc / (1.0 + std::exp(-acc));
            }
            for (int j = 0; j < d; ++j) {
                double acc = L.ffn_b2->data[j];
                for (int k = 0; k < hidden; ++k) acc += h[k] * L.ffn_w2->at(k, j);
                const double expect = x->at(i, j) + 1.0 * acc;
                CHECK(out->at(i, j) == doctest::Approx(expect).epsilon(2e-4));
            }
        }
    }
}

TEST_CASE("forward shape, determinism, and window contract") {
    auto cfg = tiny_config();
    Rng rng(9);
    auto p = DenoiserParamsT<float>::init(cfg, rng);
    const int f = 6;
    auto z = Tensor::randn({f, cfg.latent_dim}, rng);
    std::vector<float> t_levels(f, 0.25f);
    auto layout = Tensor::randn({f, cfg.layout_dim}, rng);
    auto actions = make_actions<float>(f, rng);

    auto out = denoiser_forward(p, z, t_levels, layout, actions);
    CHECK(out->shape == z->shape);
    auto out2 = denoiser_forward(p, z, t_levels, layout, actions);
    CHECK(out->data == out2->data);

    auto too_long = Tensor::randn({cfg.max_frames + 1, cfg.latent_dim}, rng);
    std::vector<float> tl(cfg.max_frames + 1, 0.0f);
    auto lay = Tensor::zeros({cfg.max_frames + 1, cfg.layout_dim});
    std::vector<std::array<float, 3>> acts(cfg.max_frames + 1, {0, 0, 0});
    CHECK_THROWS_AS(denoiser_forward(p, too_long, tl, lay, acts), ContractViolation);
}

TEST_CASE("bidirectional attention reaches across frames") {
    auto cfg = tiny_config();
    Rng rng(10);
    auto p = DenoiserParamsT<float>::init(cfg, rng);
    randomize_all(p, rng, 0.3f);
    const int f = 5;
    auto z = Tensor::randn({f, cfg.latent_dim}, rng);
    std::vector<float> t_levels(f, 0.5f);
    auto layout = Tensor::randn({f, cfg.layout_dim}, rng);
    auto actions = make_actions<float>(f, rng);

    SUBCASE("perturbing the last frame changes the first frame's output") {
        auto base = denoiser_forward(p, z, t_levels, layout, actions);
        auto z2 = z->clone_detached();
        z2->data[(f - 1) * cfg.latent_dim] += 0.3f;
        auto out = denoiser_forward(p, z2, t_levels, layout, actions);
        bool first_changed = false;
        for (int j = 0; j < cfg.latent_dim; ++j)
            first_changed = first_changed || base->at(0, j) != out->at(0, j);
        CHECK(first_changed);
    }
    SUBCASE("gradient of first output frame w.r.t. last input frame is nonzero") {
        auto zin = z->clone_detached();
        zin->requires_grad = true;
        TapeT<float> tape;
        {
            TapeScope<float> scope(tape);
            auto out = denoiser_forward(p, zin, t_levels, layout, actions);
            backward(tape, sum(slice_rows(out, 0, 1)));
        }
        float mag = 0;
        for (int j = 0; j < cfg.latent_dim; ++j)
            mag += std::fabs(zin->grad[(f - 1) * cfg.latent_dim + j]);
        CHECK(mag > 0.0f);
    }
}

TEST_CASE("full denoiser gradients vs central finite differences") {
    auto cfg = tiny_config();
    cfg.layers = 1;

    auto run_check = [&](auto scalar_tag, double h, double tol, int coords_per_param) {
        using S = decltype(scalar_tag);
        Rng rng(77);
        auto p = DenoiserParamsT<S>::init(cfg, rng);
        randomize_all<S>(p, rng, static_cast<S>(0.3));
        const int f = 3;
        auto z = TensorT<S>::randn({f, cfg.latent_dim}, rng);
        std::vector<S> t_levels{S(0), static_cast<S>(0.4), static_cast<S>(0.7)};
        auto layout = TensorT<S>::randn({f, cfg.layout_dim}, rng);
        auto actions = make_actions<S>(f, rng);
        auto w = TensorT<S>::randn({f, cfg.latent_dim}, rng);

        auto loss_fn = [&]() {
            auto out = denoiser_forward(p, z, t_levels, layout, actions);
            return sum(mul(out, w));
        };
        TapeT<S> tape;
        {
            TapeScope<S> scope(tape);
            backward(tape, loss_fn());
        }
        Rng pick(31);
        for (auto& [name, t] : p.named.items) {
            for (int c = 0; c < coords_per_param; ++c) {
                const std::size_t j =
                    static_cast<std::size_t>(pick.uniform_int(static_cast<int>(t->data.size())));
                const S keep = t->data[j];
                t->data[j] = keep + static_cast<S>(h);
                const double fp = static_cast<double>(loss_fn()->data[0]);
                t->data[j] = keep - static_cast<S>(h);
                const double fm = static_cast<double>(loss_fn()->data[0]);
                t->data[j] = keep;
                const double fd = (fp - fm) / (2 * h);
                const double an = static_cast<double>(t->grad[j]);
                const double err =
                    std::fabs(an - fd) / std::max({1.0, std::fabs(an), std::fabs(fd)});
                INFO("param ", name, " coord ", j, " analytic=", an, " fd=", fd);
                CHECK(err <= tol);
            }
        }
    };

    run_check(float{}, 3e-3, 1e-3, 2);
    run_check(double{}, 1e-5, 1e-6, 2);
}
