// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "hdwm/srr.hpp"

#include <set>

using namespace hdwm;

namespace {

DenoiserConfig trainer_model(const WorldConfig& w) {
    DenoiserConfig cfg;
    cfg.latent_dim = w.latent_dim();
    cfg.width = 32;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.max_frames = 32;
    cfg.layout_dim = w.layout_dim();
    cfg.noise_emb_dim = 16;
    cfg.action_emb_dim = 8;
    return cfg;
}

SrrConfig toy_srr() {
    SrrConfig cfg;
    cfg.T = 6;
    cfg.K = 3;
    cfg.n_start = 4;
    cfg.n_end = 2;
    cfg.w_start = 0;
    cfg.w_end = 2;
    cfg.n_horizon = 100;
    cfg.w_horizon = 100;
    cfg.refresh_period = 50;
    return cfg;
}

// Cache whose trajectories equal the ground-truth clips.
RolloutCache gt_cache(const std::vector<Clip>& clips, int T, int K, int depth) {
    RolloutCache cache;
    for (const auto& clip : clips) {
        RolloutTrajectory t;
        t.warmup = T;
        t.chunk_size = K;
        t.depth = depth;
        t.latent_dim = clip.latent_dim;
        t.generated.assign(
            clip.latents.begin() + static_cast<std::size_t>(T) * clip.latent_dim,
            clip.latents.begin() + static_cast<std::size_t>(T + depth * K) * clip.latent_dim);
        cache.per_clip.push_back(std::move(t));
    }
    cache.populated = true;
    cache.last_refresh_step = 0;
    return cache;
}

}  // namespace

TEST_CASE("schedule anchors from the training tables") {
    // N(k): 10 -> 4 over steps 0..8000
    CHECK(schedule_int(10, 4, 8000, 0) == 10);
    CHECK(schedule_int(10, 4, 8000, 8000) == 4);
    CHECK(schedule_int(10, 4, 8000, 20000) == 4);
    CHECK(schedule_int(10, 4, 8000, 4000) == 7);
    // w: 0 -> 8 over steps 0..8000
    CHECK(schedule_int(0, 8, 8000, 0) == 0);
    CHECK(schedule_int(0, 8, 8000, 8000) == 8);
    CHECK(schedule_int(0, 8, 8000, 12000) == 8);

    // monotone and clamped
    int prev_n = 100, prev_w = -1;
    for (long s = 0; s <= 10000; s += 250) {
        const int n = schedule_int(10, 4, 8000, s);
        const int w = schedule_int(0, 8, 8000, s);
        CHECK(n <= prev_n);
        CHECK(w >= prev_w);
        prev_n = n;
        prev_w = w;
    }
    // ties round toward the end value
    CHECK(schedule_int(10, 4, 8000, 2000) == 8);  // 8.5 -> 8 (end below start)
    CHECK(schedule_int(0, 8, 8000, 500) == 1);    // 0.5 -> 1 (end above start)
    CHECK_THROWS_AS(schedule_value(1, 2, 0, 5), ContractViolation);
}

TEST_CASE("boundary sampling") {
    SUBCASE("N=4, T=11, K=10 draws from {31, 41, 51}") {
        Rng rng(3);
        std::set<int> seen;
        for (int i = 0; i < 200; ++i) seen.insert(sample_boundary(4, 11, 10, 0, rng, 10));
        CHECK(seen == std::set<int>{31, 41, 51});
    }
    SUBCASE("bounds always hold") {
        Rng rng(4);
        const int T = 11, K = 10, depth = 10;
        for (int n_now = 1; n_now <= depth; ++n_now)
            for (int w = 0; w <= 4 && n_now * K + w <= depth * K; ++w)
                for (int i = 0; i < 50; ++i) {
                    const int s = sample_boundary(n_now, T, K, w, rng, depth);
                    CHECK(s - T + 1 >= 1);
                    CHECK(s + w <= T + depth * K);
                }
    }
    SUBCASE("mean boundary decreases as N decays from 10 to 4") {
        const int T = 11, K = 10;
        double prev_mean = 1e9;
        for (int n_now = 10; n_now >= 4; --n_now) {
            Rng rng(100 + static_cast<std::uint64_t>(n_now));
            double mean = 0;
            const int draws = 10000;
            for (int i = 0; i < draws; ++i)
                mean += sample_boundary(n_now, T, K, 0, rng, 10);
            mean /= draws;
            CHECK(mean < prev_mean);
            prev_mean = mean;
        }
    }
    SUBCASE("infeasible cache depth rejected") {
        Rng rng(5);
        CHECK_THROWS_AS(sample_boundary(6, 8, 4, 3, rng, 6), ContractViolation);
    }
}

TEST_CASE("blend coefficients") {
    SUBCASE("w=2 alphas at offsets (s-1, s, s+1, s+2)") {
        auto b = make_blend(20, 2);
        REQUIRE(b.alphas.size() == 4);
        CHECK(b.alphas[0] == 0.75);
        CHECK(b.alphas[1] == 0.5);
        CHECK(b.alphas[2] == 0.25);
        CHECK(b.alphas[3] == 0.0);
    }
    SUBCASE("general shape: non-increasing in [0,1], ends pinned") {
        for (int w : {1, 2, 3, 5, 8}) {
            auto b = make_blend(50, w);
            CHECK(b.alphas.front() == doctest::Approx((2.0 * w - 1) / (2.0 * w)));
            CHECK(b.alphas.back() == 0.0);
            for (std::size_t i = 0; i < b.alphas.size(); ++i) {
                CHECK(b.alphas[i] >= 0.0);
                CHECK(b.alphas[i] <= 1.0);
                if (i) CHECK(b.alphas[i] <= b.alphas[i - 1]);
            }
        }
    }
}

TEST_CASE("blended sequence construction") {
    WorldConfig w;
    const int T = 6, K = 3, depth = 4;
    auto clip = make_clip(w, 51, T + depth * K);
    const int d = clip.latent_dim;

    // synthetic rollout distinct from GT
    RolloutTrajectory traj;
    traj.warmup = T;
    traj.chunk_size = K;
    traj.depth = depth;
    traj.latent_dim = d;
    traj.generated.assign(static_cast<std::size_t>(depth * K) * d, 0.0f);
    for (std::size_t i = 0; i < traj.generated.size(); ++i)
        traj.generated[i] = clip.latents[static_cast<std::size_t>(T) * d + i] + 2.0f;

    SUBCASE("w=0 is a hard switch") {
        const int s = T + 2 * K;
        auto z = build_blended_sequence(traj, clip, s, T, K, 0);
        for (int i = s - T + 1; i <= s + K; ++i) {
            const int row = i - (s - T + 1);
            const float* expect =
                i <= s ? sequence_row(traj, clip, i - 1)
                       : clip.latents.data() + static_cast<std::size_t>(i - 1) * d;
            for (int j = 0; j < d; ++j) CHECK(z->at(row, j) == expect[j]);
        }
    }
    SUBCASE("cache equal to GT is a fixed point") {
        auto gt = gt_cache({clip}, T, K, depth);
        const int s = T + 2 * K;
        auto z = build_blended_sequence(gt.per_clip[0], clip, s, T, K, 2);
        for (int i = s - T + 1; i <= s + K; ++i)
            for (int j = 0; j < d; ++j)
                CHECK(z->at(i - (s - T + 1), j) ==
                      clip.latents[static_cast<std::size_t>(i - 1) * d + j]);
    }
    SUBCASE("w=2 region layout matches the three cases") {
        const int s = T + 2 * K, w2 = 2;
        auto z = build_blended_sequence(traj, clip, s, T, K, w2);
        auto blend = make_blend(s, w2);
        for (int i = s - T + 1; i <= s + K; ++i) {
            const int row = i - (s - T + 1);
            const float* pred = sequence_row(traj, clip, i - 1);
            const float* gt = clip.latents.data() + static_cast<std::size_t>(i - 1) * d;
            for (int j = 0; j < d; ++j) {
                float expect;
                if (i <= s - w2) expect = pred[j];
                else if (i <= s + w2) {
                    const double a = blend.alphas[static_cast<std::size_t>(i - (s - w2 + 1))];
                    expect = static_cast<float>(gt[j] + a * (pred[j] - gt[j]));
                } else expect = gt[j];
                CHECK(z->at(row, j) == expect);
            }
        }
    }
    SUBCASE("pure-GT target flag keeps the chunk untouched") {
        const int s = T + 2 * K, w2 = 2;
        auto z = build_blended_sequence(traj, clip, s, T, K, w2, false);
        for (int i = s + 1; i <= s + K; ++i)
            for (int j = 0; j < d; ++j)
                CHECK(z->at(i - (s - T + 1), j) ==
                      clip.latents[static_cast<std::size_t>(i - 1) * d + j]);
    }
    SUBCASE("coverage shortfall rejected") {
        CHECK_THROWS_AS(build_blended_sequence(traj, clip, T + depth * K, T, K, 2),
                        ContractViolation);
    }
}

TEST_CASE("reduction: (w=0, cache=GT) SRR step equals the base step") {
    WorldConfig w;
    auto cfg = toy_srr();
    const int F = cfg.T + cfg.n_start * cfg.K;
    std::vector<Clip> clips{make_clip(w, 61, F)};
    auto mcfg = trainer_model(w);
    Rng prng(8);
    auto p_base = DenoiserParamsT<float>::init(mcfg, prng);
    Rng prng2(8);
    auto p_srr = DenoiserParamsT<float>::init(mcfg, prng2);

    auto cache = gt_cache(clips, cfg.T, cfg.K, cfg.n_start);

    // srr_train_step consumes: clip index, boundary, then the flow draws.
    // Mirror the first two draws so both paths see identical flow rng state.
    const std::uint64_t seed = 424242;
    Rng rng_srr(seed);
    AdamW opt_srr;
    opt_srr.lr = 1e-3f;
    SrrConfig cfg0 = cfg;
    cfg0.w_start = cfg0.w_end = 0;  // force w = 0 at every step
    auto cache_sampler = SamplerConfig::uniform(1);
    Rng cache_rng(1);
    const float srr_loss = srr_train_step(p_srr, cache, clips, cfg0, opt_srr, 0, cache_sampler,
                                          cache_rng, rng_srr);

    Rng rng_base(seed);
    (void)rng_base.uniform_int(1);  // clip index draw
    const int n_now = schedule_int(cfg0.n_start, cfg0.n_end, cfg0.n_horizon, 0);
    const int s = sample_boundary(n_now, cfg0.T, cfg0.K, 0, rng_base, cfg0.n_start);
    AdamW opt_base;
    opt_base.lr = 1e-3f;
    const float base_loss =
        base_train_step_at(p_base, clips[0], cfg0, s - cfg0.T, opt_base, rng_base);

    CHECK(srr_loss == base_loss);
    CHECK(p_base.named.fingerprint() == p_srr.named.fingerprint());
}

TEST_CASE("base training basics") {
    WorldConfig w;
    auto cfg = toy_srr();
    auto clip = make_clip(w, 71, cfg.T + cfg.K + 6);
    auto mcfg = trainer_model(w);
    Rng prng(9);
    auto p = DenoiserParamsT<float>::init(mcfg, prng);

    SUBCASE("loss finite and positive at initialization") {
        AdamW opt;
        opt.lr = 1e-3f;
        Rng rng(4);
        const float loss = base_train_step(p, clip, cfg, opt, rng);
        CHECK(std::isfinite(loss));
        CHECK(loss > 0.0f);
    }
    SUBCASE("short clip rejected") {
        auto tiny = make_clip(w, 72, cfg.T + cfg.K);
        tiny.frames = cfg.T + cfg.K - 1;
        AdamW opt;
        Rng rng(4);
        CHECK_THROWS_AS(base_train_step(p, tiny, cfg, opt, rng), ContractViolation);
    }
    SUBCASE("lr 0 leaves params bit-identical") {
        AdamW opt;
        opt.lr = 0.0f;
        const auto before = p.named.fingerprint();
        Rng rng(4);
        base_train_step(p, clip, cfg, opt, rng);
        CHECK(p.named.fingerprint() == before);
    }
}

TEST_CASE("base training reduces the running mean loss over 500 steps") {
    WorldConfig w;
    auto cfg = toy_srr();
    const int F = cfg.T + cfg.K + 8;
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        auto clips = make_clips(w, seed * 1000 + 5, 4, F);
        auto mcfg = trainer_model(w);
        Rng prng(seed);
        auto p = DenoiserParamsT<float>::init(mcfg, prng);
        AdamW opt;
        opt.lr = 2e-3f;
        opt.weight_decay = 1e-2f;
        Rng rng(seed * 7 + 1);
        double head = 0, total = 0;
        const int steps = 500;
        for (int i = 0; i < steps; ++i) {
            Rng step_rng = rng.fork(static_cast<std::uint64_t>(i));
            const int ci = step_rng.uniform_int(static_cast<int>(clips.size()));
            const float loss = base_train_step(p, clips[ci], cfg, opt, step_rng);
            total += loss;
            if (i < 50) head += loss;
        }
        CHECK(total / steps < head / 50);
    }
}

TEST_CASE("srr step leaves the cache untouched") {
    WorldConfig w;
    auto cfg = toy_srr();
    const int F = cfg.T + cfg.n_start * cfg.K;
    std::vector<Clip> clips{make_clip(w, 81, F)};
    auto mcfg = trainer_model(w);
    Rng prng(10);
    auto p = DenoiserParamsT<float>::init(mcfg, prng);
    auto cache = gt_cache(clips, cfg.T, cfg.K, cfg.n_start);
    // mark populated recently so refresh_cache does not regenerate
    cache.params_fingerprint = p.named.fingerprint();
    const auto before = cache.per_clip[0].generated;
    AdamW opt;
    opt.lr = 1e-3f;
    Rng rng(6), cache_rng(7);
    srr_train_step(p, cache, clips, cfg, opt, 1, SamplerConfig::uniform(1), cache_rng, rng);
    CHECK(cache.per_clip[0].generated == before);
}
