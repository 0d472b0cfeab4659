// SPDX-License-Identifier: Apache-2.0
//
// Sliding-window autoregressive rollout over a fixed-capacity history
// buffer, the rollout cache used by recovery training, and the closed-loop
// harness where a scripted controller feeds self-generated conditioning
// back into the model.

#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <vector>

#include "hdwm/diffusion.hpp"
#include "hdwm/worldsim.hpp"

namespace hdwm {

class HistoryBuffer {
public:
    HistoryBuffer(int capacity, int latent_dim)
        : capacity_(capacity), d_(latent_dim) {}

    static HistoryBuffer from_clip(const Clip& clip, int latent_dim, int T) {
        require(clip.frames >= T, "history buffer: clip shorter than capacity");
        HistoryBuffer b(T, latent_dim);
        for (int i = 0; i < T; ++i) {
            b.rows_.emplace_back(clip.latents.begin() + static_cast<std::size_t>(i) * latent_dim,
                                 clip.latents.begin() +
                                     static_cast<std::size_t>(i + 1) * latent_dim);
        }
        b.newest_ = T;
        return b;
    }

    int capacity() const { return capacity_; }
    int size() const { return static_cast<int>(rows_.size()); }
    bool full() const { return size() == capacity_; }
    std::int64_t newest_index() const { return newest_; }
    const std::deque<std::vector<float>>& rows() const { return rows_; }

    // Append K frames, evicting the oldest K.
    void append_chunk(const std::vector<float>& chunk, int k) {
        require(static_cast<int>(chunk.size()) == k * d_, "history buffer: bad chunk size");
        for (int i = 0; i < k; ++i) {
            rows_.emplace_back(chunk.begin() + static_cast<std::size_t>(i) * d_,
                               chunk.begin() + static_cast<std::size_t>(i + 1) * d_);
            if (static_cast<int>(rows_.size()) > capacity_) rows_.pop_front();
        }
        newest_ += k;
    }

    TensorPtr as_tensor() const {
        std::vector<float> flat;
        flat.reserve(rows_.size() * static_cast<std::size_t>(d_));
        for (const auto& r : rows_) flat.insert(flat.end(), r.begin(), r.end());
        return Tensor::create({size(), d_}, std::move(flat));
    }

private:
    int capacity_;
    int d_;
    std::deque<std::vector<float>> rows_;
    std::int64_t newest_ = 0;
};

struct RolloutTrajectory {
    int chunk_size = 0;  // K
    int depth = 0;       // N
    int warmup = 0;      // T
    int latent_dim = 0;
    std::vector<float> generated;  // depth*K rows
    std::uint64_t seed = 0;
    std::uint64_t params_fingerprint = 0;

    // s_n = T + (n-1)K, the frame count preceding chunk n
    std::int64_t boundary(int n) const {
        return warmup + static_cast<std::int64_t>(n - 1) * chunk_size;
    }
};

// Latent row of the conceptual full sequence: GT warmup for index < T, the
// generated trajectory after.
inline const float* sequence_row(const RolloutTrajectory& traj, const Clip& clip, int index) {
    require(index >= 0 && index < traj.warmup + traj.depth * traj.chunk_size,
            "sequence_row: index " + std::to_string(index) + " out of range");
    if (index < traj.warmup)
        return clip.latents.data() + static_cast<std::size_t>(index) * traj.latent_dim;
    return traj.generated.data() +
           static_cast<std::size_t>(index - traj.warmup) * traj.latent_dim;
}

// Conditioning for window frames [lo, lo+count) of a clip. The action of a
// frame is the transform that produced it; the clip's first frame gets zeros.
inline WindowCond window_cond_from_clip(const Clip& clip, int layout_dim, int lo, int count) {
    require(lo >= 0 && lo + count <= clip.frames, "window_cond: control shortfall for frames [" +
                                                      std::to_string(lo) + "," +
                                                      std::to_string(lo + count) + ")");
    WindowCond cond;
    std::vector<float> lay(static_cast<std::size_t>(count) * layout_dim);
    std::copy_n(clip.layout.begin() + static_cast<std::size_t>(lo) * layout_dim, lay.size(),
                lay.begin());
    cond.layout = Tensor::create({count, layout_dim}, std::move(lay));
    cond.actions.resize(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const int f = lo + i;
        cond.actions[static_cast<std::size_t>(i)] =
            f >= 1 ? clip.actions[static_cast<std::size_t>(f - 1)]
                   : std::array<float, 3>{0, 0, 0};
    }
    return cond;
}

// One AR step: generate K frames conditioned on the full buffer, advance the
// buffer. No gradient is retained across the step boundary.
inline std::vector<float> ar_step(const DenoiserParams& p, HistoryBuffer& buffer,
                                  const WindowCond& cond, int K, const SamplerConfig& sampler,
                                  Rng& rng) {
    require(buffer.full(), "ar_step: history buffer underfull (" +
                               std::to_string(buffer.size()) + "/" +
                               std::to_string(buffer.capacity()) + ")");
    NoGradScope<float> no_grad;
    auto chunk = euler_sample(p, buffer.as_tensor(), cond, K, sampler, rng);
    buffer.append_chunk(chunk->data, K);
    return chunk->data;
}

// Open-loop rollout: controls and layout are teacher-forced from the clip,
// latents are self-generated after the warmup.
inline RolloutTrajectory rollout(const DenoiserParams& p, const Clip& clip, int T, int K, int N,
                                 const SamplerConfig& sampler, Rng& rng) {
    const int d = p.cfg.latent_dim;
    require(clip.frames >= T + N * K,
            "rollout: control track covers " + std::to_string(clip.frames) + " frames, need " +
                std::to_string(T + N * K));
    RolloutTrajectory traj;
    traj.chunk_size = K;
    traj.depth = N;
    traj.warmup = T;
    traj.latent_dim = d;
    traj.seed = rng.seed();
    traj.params_fingerprint = p.named.fingerprint();
    if (N == 0) return traj;
    HistoryBuffer buffer = HistoryBuffer::from_clip(clip, d, T);
    traj.generated.reserve(static_cast<std::size_t>(N) * K * d);
    for (int n = 1; n <= N; ++n) {
        const int lo = static_cast<int>(traj.boundary(n)) - T;  // window start, 0-based
        auto cond = window_cond_from_clip(clip, p.cfg.layout_dim, lo, T + K);
        Rng chunk_rng = rng.fork(static_cast<std::uint64_t>(n));
        auto chunk = ar_step(p, buffer, cond, K, sampler, chunk_rng);
        traj.generated.insert(traj.generated.end(), chunk.begin(), chunk.end());
    }
    return traj;
}

// ---------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------

using Controller =
    std::function<std::vector<std::array<float, 3>>(const EgoState&, const Scene&, int)>;

// K pure-pursuit actions from a starting pose (used by the closed-loop
// harness and tests).
inline std::vector<std::array<float, 3>> pure_pursuit_actions(const WorldConfig& cfg,
                                                              const Scene& scene,
                                                              const EgoState& start, int K) {
    EgoState e = start;
    std::vector<EgoState> mini{e};
    for (int i = 0; i < K; ++i) {
        const TrackProjection pr = project_to_track(scene, e.x, e.y);
        double remain = cfg.lookahead;
        int seg = pr.segment;
        double u = pr.u;
        Vec2 target = scene.track.back();
        while (seg < static_cast<int>(scene.track.size()) - 1) {
            const double seg_left = (1.0 - u) * cfg.track_step;
            if (remain <= seg_left) {
                const double uu = u + remain / cfg.track_step;
                const Vec2 a = scene.track[seg], b = scene.track[seg + 1];
                target = {a.x + uu * (b.x - a.x), a.y + uu * (b.y - a.y)};
                break;
            }
            remain -= seg_left;
            ++seg;
            u = 0.0;
        }
        const double bearing = std::atan2(target.y - e.y, target.x - e.x);
        const double omega = std::clamp(cfg.steer_gain * wrap_angle(bearing - e.yaw),
                                        -cfg.omega_cap, cfg.omega_cap);
        const double v_des = scene.v_max * 0.8 * (1.0 - 0.5 * std::fabs(omega) / cfg.omega_cap);
        e.speed += std::clamp(v_des - e.speed, -cfg.accel_cap, cfg.accel_cap);
        e.x += e.speed * std::cos(e.yaw);
        e.y += e.speed * std::sin(e.yaw);
        e.yaw = wrap_angle(e.yaw + omega);
        mini.push_back(e);
    }
    const auto acts = actions_from_poses(mini);
    std::vector<std::array<float, 3>> out(acts.size());
    for (std::size_t i = 0; i < acts.size(); ++i)
        out[i] = {static_cast<float>(acts[i][0]), static_cast<float>(acts[i][1]),
                  static_cast<float>(acts[i][2])};
    return out;
}

// Deterministic scripted controller: pure pursuit from the recovered pose.
inline Controller scripted_pure_pursuit(const WorldConfig& cfg, int K) {
    return [cfg, K](const EgoState& pose, const Scene& scene, int) {
        return pure_pursuit_actions(cfg, scene, pose, K);
    };
}

struct ClosedLoopResult {
    RolloutTrajectory traj;
    std::vector<std::array<float, 3>> action_log;
    std::vector<EgoState> recovered_poses;  // one per chunk, pre-controller
    int controller_calls = 0;
};

// Closed loop: each chunk's actions come from the controller applied to the
// pose recovered from the latest generated latent; layout tokens for the new
// frames are re-encoded along the controller's intended poses. Everything
// past the initial history is self-generated.
inline ClosedLoopResult closed_loop_rollout(const DenoiserParams& p, const WorldConfig& wcfg,
                                            const Scene& scene, const Clip& clip, int T, int K,
                                            int N, const Controller& controller,
                                            const SamplerConfig& sampler, Rng& rng) {
    const int d = p.cfg.latent_dim;
    const int layout_dim = p.cfg.layout_dim;
    ClosedLoopResult res;
    res.traj.chunk_size = K;
    res.traj.depth = N;
    res.traj.warmup = T;
    res.traj.latent_dim = d;
    res.traj.seed = rng.seed();
    res.traj.params_fingerprint = p.named.fingerprint();

    HistoryBuffer buffer = HistoryBuffer::from_clip(clip, d, T);
    std::deque<std::vector<float>> layout_rows;
    std::deque<std::array<float, 3>> action_rows;
    for (int i = 0; i < T; ++i) {
        layout_rows.emplace_back(
            clip.layout.begin() + static_cast<std::size_t>(i) * layout_dim,
            clip.layout.begin() + static_cast<std::size_t>(i + 1) * layout_dim);
        action_rows.push_back(i >= 1 ? clip.actions[static_cast<std::size_t>(i - 1)]
                                     : std::array<float, 3>{0, 0, 0});
    }

    for (int n = 1; n <= N; ++n) {
        EgoState pose;
        try {
            pose = recover_pose(wcfg, buffer.rows().back().data(), scene, scene.anchor_ids);
        } catch (const DegenerateGeometry& e) {
            throw DegenerateGeometry("closed_loop_rollout: pose recovery failed at chunk " +
                                     std::to_string(n) + ": " + e.what());
        }
        res.recovered_poses.push_back(pose);
        auto acts = controller(pose, scene, n);
        ++res.controller_calls;
        require(static_cast<int>(acts.size()) == K, "closed_loop: controller must emit K actions");

        // intended future poses -> layout tokens for the new frames
        std::vector<std::array<double, 3>> acts_d(acts.size());
        for (std::size_t i = 0; i < acts.size(); ++i)
            acts_d[i] = {acts[i][0], acts[i][1], acts[i][2]};
        const auto future = integrate_actions(pose, acts_d);

        std::vector<float> lay_flat;
        lay_flat.reserve(static_cast<std::size_t>(T + K) * layout_dim);
        for (const auto& r : layout_rows) lay_flat.insert(lay_flat.end(), r.begin(), r.end());
        std::vector<std::vector<float>> new_layout(static_cast<std::size_t>(K));
        for (int i = 0; i < K; ++i) {
            new_layout[static_cast<std::size_t>(i)] =
                layout_tokens(wcfg, scene, future[static_cast<std::size_t>(i + 1)]);
            lay_flat.insert(lay_flat.end(), new_layout[static_cast<std::size_t>(i)].begin(),
                            new_layout[static_cast<std::size_t>(i)].end());
        }
        WindowCond cond;
        cond.layout = Tensor::create({T + K, layout_dim}, std::move(lay_flat));
        cond.actions.assign(action_rows.begin(), action_rows.end());
        cond.actions.insert(cond.actions.end(), acts.begin(), acts.end());

        Rng chunk_rng = rng.fork(static_cast<std::uint64_t>(n));
        auto chunk = ar_step(p, buffer, cond, K, sampler, chunk_rng);
        res.traj.generated.insert(res.traj.generated.end(), chunk.begin(), chunk.end());
        res.action_log.insert(res.action_log.end(), acts.begin(), acts.end());

        for (int i = 0; i < K; ++i) {
            layout_rows.push_back(std::move(new_layout[static_cast<std::size_t>(i)]));
            action_rows.push_back(acts[static_cast<std::size_t>(i)]);
            if (static_cast<int>(layout_rows.size()) > T) layout_rows.pop_front();
            if (static_cast<int>(action_rows.size()) > T) action_rows.pop_front();
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Rollout cache for recovery training
// ---------------------------------------------------------------------------

struct RolloutCache {
    std::vector<RolloutTrajectory> per_clip;
    bool populated = false;
    long last_refresh_step = 0;
    std::uint64_t params_fingerprint = 0;

    bool stale(const DenoiserParams& p) const {
        return !populated || params_fingerprint != p.named.fingerprint();
    }
};

// Regenerate all cached trajectories when the cache is unpopulated or R
// optimizer steps have elapsed since the last refresh. Trajectory seeds
// depend only on (base rng, clip index) so refreshes with identical params
// are identical.
inline void refresh_cache(RolloutCache& cache, const DenoiserParams& p,
                          const std::vector<Clip>& clips, int T, int K, int depth, long R,
                          long step, const SamplerConfig& sampler, const Rng& base_rng) {
    if (cache.populated && step - cache.last_refresh_step < R) return;
    cache.per_clip.clear();
    cache.per_clip.reserve(clips.size());
    for (std::size_t i = 0; i < clips.size(); ++i) {
        Rng rng = base_rng.fork(i);
        cache.per_clip.push_back(rollout(p, clips[i], T, K, depth, sampler, rng));
    }
    cache.populated = true;
    cache.last_refresh_step = step;
    cache.params_fingerprint = p.named.fingerprint();
}

}  // namespace hdwm
