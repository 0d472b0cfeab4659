// SPDX-License-Identifier: Apache-2.0
//
// Stage-1 base conditional training and stage-2 scheduled rollout recovery:
// linear schedules for the rollout depth N(k) and blending radius w, uniform
// boundary sampling over the top half of the cached rollout (so the sampled
// boundary drifts earlier as N decays), and the three-case blended-sequence
// construction around the boundary.

#pragma once

#include <vector>

#include "hdwm/rollout.hpp"

namespace hdwm {

struct SrrConfig {
    int T = 8;
    int K = 4;
    long refresh_period = 200;  // R, optimizer steps between cache refreshes
    int n_start = 6, n_end = 3;
    long n_horizon = 800;
    int w_start = 0, w_end = 3;
    long w_horizon = 800;
    long steps = 1000;
    bool blended_targets = true;  // supervise on the blended chunk; false = pure GT targets
    float lr = 1e-4f;
    float weight_decay = 1e-5f;
    int t_grid = 32;
    int cache_sampler_steps = 16;

    int cache_depth() const { return n_start; }

    void validate() const {
        require(T >= 1 && K >= 1, "srr config: T and K must be positive");
        require(n_start >= n_end && n_end >= 1, "srr config: N schedule must decay to >= 1");
        require(w_start <= w_end && w_start >= 0, "srr config: w schedule must grow from >= 0");
        require(w_end <= K && w_end <= T, "srr config: w_max must satisfy w <= K and w <= T");
        require(n_horizon > 0 && w_horizon > 0 && steps > 0, "srr config: horizons positive");
        require(n_end * K + w_end <= n_start * K,
                "srr config: cache depth cannot cover boundary + blend radius");
    }
};

// Linear interpolation from start to end over [0, horizon], clamped after.
inline double schedule_value(double start, double end, long horizon, long step) {
    require(horizon > 0, "schedule_value: horizon must be positive");
    if (step <= 0) return start;
    if (step >= horizon) return end;
    return start + (end - start) * (static_cast<double>(step) / static_cast<double>(horizon));
}

// Integer-valued schedule: nearest rounding, ties toward the end value.
inline int schedule_int(int start, int end, long horizon, long step) {
    const double v = schedule_value(start, end, horizon, step);
    const double f = std::floor(v);
    const double frac = v - f;
    if (frac > 0.5) return static_cast<int>(f) + 1;
    if (frac < 0.5) return static_cast<int>(f);
    return end >= start ? static_cast<int>(f) + 1 : static_cast<int>(f);
}

// Boundary s drawn uniformly from the chunk-aligned set
// { T + m*K : ceil(N/2) <= m <= N }. As N(k) decays the set shifts earlier.
inline int sample_boundary(int n_now, int T, int K, int w, Rng& rng, int cache_depth_chunks) {
    require(n_now >= 1, "sample_boundary: N must be >= 1");
    require(cache_depth_chunks * K >= n_now * K + w,
            "sample_boundary: cache too shallow for N=" + std::to_string(n_now) +
                ", w=" + std::to_string(w));
    const int m_lo = (n_now + 1) / 2;
    const int m_hi = n_now;
    const int m = m_lo + rng.uniform_int(m_hi - m_lo + 1);
    return T + m * K;
}

// Blend coefficients for the 1-based frames i in [s-w+1, s+w]:
// alpha_i = (s + w - i) / (2w), linearly decreasing and hitting 0 at i = s+w.
struct BlendSpec {
    int s = 0;
    int w = 0;
    std::vector<double> alphas;
};

inline BlendSpec make_blend(int s, int w) {
    require(w >= 0, "make_blend: negative radius");
    BlendSpec b;
    b.s = s;
    b.w = w;
    for (int i = s - w + 1; i <= s + w; ++i)
        b.alphas.push_back(static_cast<double>(s + w - i) / (2.0 * w));
    return b;
}

// Blended window covering 1-based frames [s-T+1, s+K]: cached rollout up to
// s-w, the alpha-blend inside the radius, ground truth beyond. With
// blended_targets off, the chunk region [s+1, s+K] is pure ground truth.
inline TensorPtr build_blended_sequence(const RolloutTrajectory& traj, const Clip& clip, int s,
                                        int T, int K, int w, bool blended_targets = true) {
    const int d = traj.latent_dim;
    require(w >= 0 && w <= K && w <= T, "build_blended_sequence: invalid radius");
    require(s - T >= 0, "build_blended_sequence: window starts before the sequence");
    require(s + w <= traj.warmup + traj.depth * traj.chunk_size,
            "build_blended_sequence: rollout does not cover s+w");
    require(s + K <= clip.frames, "build_blended_sequence: clip does not cover s+K");

    const BlendSpec blend = make_blend(s, w);
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(T + K) * d);
    for (int i = s - T + 1; i <= s + K; ++i) {  // 1-based frame index
        const int row = i - 1;
        const float* pred =
            i <= traj.warmup + traj.depth * traj.chunk_size ? sequence_row(traj, clip, row)
                                                            : nullptr;
        const float* gt = clip.latents.data() + static_cast<std::size_t>(row) * d;
        if (i <= s - w) {
            out.insert(out.end(), pred, pred + d);
        } else if (i <= s + w && (blended_targets || i <= s)) {
            // gt + a*(pred - gt): algebraically the convex blend, and exact
            // at the pred == gt fixed point
            const double a = blend.alphas[static_cast<std::size_t>(i - (s - w + 1))];
            for (int j = 0; j < d; ++j)
                out.push_back(static_cast<float>(gt[j] + a * (pred[j] - gt[j])));
        } else {
            out.insert(out.end(), gt, gt + d);
        }
    }
    return Tensor::create({T + K, d}, std::move(out));
}

// Shared by base and SRR training: one flow-matching step on a fixed window.
inline float step_on_window(DenoiserParams& p, const TensorPtr& frames, const WindowCond& cond,
                            int cond_len, AdamW& opt, Rng& rng, int t_grid) {
    TapeT<float> tape;
    float loss_value = 0;
    {
        TapeScope<float> scope(tape);
        auto loss = flow_loss(p, frames, cond_len, cond, rng, t_grid);
        loss_value = loss->data[0];
        p.named.zero_grad();
        backward(tape, loss);
    }
    opt.step(p.named.tensors());
    return loss_value;
}

// Base conditional training on a clip window starting at a given frame.
inline float base_train_step_at(DenoiserParams& p, const Clip& clip, const SrrConfig& cfg,
                                int window_start, AdamW& opt, Rng& rng) {
    require(clip.frames >= cfg.T + cfg.K, "base_train_step: clip shorter than T+K");
    std::vector<float> flat(static_cast<std::size_t>(cfg.T + cfg.K) * clip.latent_dim);
    std::copy_n(clip.latents.begin() +
                    static_cast<std::size_t>(window_start) * clip.latent_dim,
                flat.size(), flat.begin());
    auto frames = Tensor::create({cfg.T + cfg.K, clip.latent_dim}, std::move(flat));
    auto cond = window_cond_from_clip(clip, clip.layout_dim, window_start, cfg.T + cfg.K);
    return step_on_window(p, frames, cond, cfg.T, opt, rng, cfg.t_grid);
}

inline float base_train_step(DenoiserParams& p, const Clip& clip, const SrrConfig& cfg,
                             AdamW& opt, Rng& rng) {
    const int span = clip.frames - (cfg.T + cfg.K);
    const int lo = span > 0 ? rng.uniform_int(span + 1) : 0;
    return base_train_step_at(p, clip, cfg, lo, opt, rng);
}

// One SRR step: refresh the cache if due, sample a clip and a boundary from
// the schedules, build the blended window, and take a flow-matching step
// with the blended history fed clean at t=0.
inline float srr_train_step(DenoiserParams& p, RolloutCache& cache,
                            const std::vector<Clip>& clips, const SrrConfig& cfg, AdamW& opt,
                            long step, const SamplerConfig& cache_sampler, const Rng& cache_rng,
                            Rng& rng) {
    refresh_cache(cache, p, clips, cfg.T, cfg.K, cfg.cache_depth(), cfg.refresh_period, step,
                  cache_sampler, cache_rng);
    const int clip_idx = rng.uniform_int(static_cast<int>(clips.size()));
    const Clip& clip = clips[static_cast<std::size_t>(clip_idx)];
    const RolloutTrajectory& traj = cache.per_clip[static_cast<std::size_t>(clip_idx)];

    const int n_now = schedule_int(cfg.n_start, cfg.n_end, cfg.n_horizon, step);
    const int w = schedule_int(cfg.w_start, cfg.w_end, cfg.w_horizon, step);
    const int s = sample_boundary(n_now, cfg.T, cfg.K, w, rng, cfg.cache_depth());
    auto frames = build_blended_sequence(traj, clip, s, cfg.T, cfg.K, w, cfg.blended_targets);
    auto cond = window_cond_from_clip(clip, clip.layout_dim, s - cfg.T, cfg.T + cfg.K);
    return step_on_window(p, frames, cond, cfg.T, opt, rng, cfg.t_grid);
}

}  // namespace hdwm
