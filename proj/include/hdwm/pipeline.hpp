// SPDX-License-Identifier: Apache-2.0
//
// Stage drivers tying the modules into the full pipeline: data generation,
// base training, recovery training, distillation, open-loop evaluation.
// Every stage derives all randomness from the run seed through fixed
// stream tags, so identical configs reproduce bit-identical artifacts.

#pragma once

#include "hdwm/io.hpp"
#include "hdwm/metrics.hpp"
#include "hdwm/rollout.hpp"
#include "hdwm/srr.hpp"
#include "hdwm/trd.hpp"

namespace hdwm {

namespace streams {
inline constexpr std::uint64_t kData = 0xDA7A;
inline constexpr std::uint64_t kInit = 0x1217;
inline constexpr std::uint64_t kBase = 0xBA5E;
inline constexpr std::uint64_t kSrr = 0x5123;
inline constexpr std::uint64_t kSrrCache = 0xCACE;
inline constexpr std::uint64_t kTrd = 0xD157;
inline constexpr std::uint64_t kEval = 0xE7A1;
inline constexpr std::uint64_t kClosed = 0xC105;
}  // namespace streams

inline std::vector<Clip> gen_data(const RunConfig& rc) {
    return make_clips(rc.world, Rng(rc.seed).fork(streams::kData).seed(), rc.data.clips,
                      rc.data.frames);
}

inline DenoiserParams init_model(const RunConfig& rc) {
    Rng rng = Rng(rc.seed).fork(streams::kInit);
    return DenoiserParamsT<float>::init(rc.denoiser, rng);
}

using ProgressFn = std::function<void(long step, float loss)>;

inline void train_base(const RunConfig& rc, DenoiserParams& p, const std::vector<Clip>& clips,
                       long steps = -1, const ProgressFn& progress = {}) {
    if (steps < 0) steps = rc.train.steps;
    require(!clips.empty(), "train_base: empty dataset");
    AdamW opt;
    opt.lr = rc.train.lr;
    opt.weight_decay = rc.train.weight_decay;
    Rng root = Rng(rc.seed).fork(streams::kBase);
    for (long i = 0; i < steps; ++i) {
        Rng srng = root.fork(static_cast<std::uint64_t>(i));
        const int ci = srng.uniform_int(static_cast<int>(clips.size()));
        const float loss = base_train_step(p, clips[static_cast<std::size_t>(ci)], rc.srr, opt,
                                           srng);
        if (progress) progress(i, loss);
    }
}

inline void train_srr(const RunConfig& rc, DenoiserParams& p, const std::vector<Clip>& clips,
                      long steps = -1, const ProgressFn& progress = {}) {
    if (steps < 0) steps = rc.srr.steps;
    require(!clips.empty(), "train_srr: empty dataset");
    AdamW opt;
    opt.lr = rc.srr.lr;
    opt.weight_decay = rc.srr.weight_decay;
    RolloutCache cache;
    const Rng cache_rng = Rng(rc.seed).fork(streams::kSrrCache);
    const auto cache_sampler = SamplerConfig::uniform(rc.srr.cache_sampler_steps);
    Rng root = Rng(rc.seed).fork(streams::kSrr);
    for (long i = 0; i < steps; ++i) {
        Rng srng = root.fork(static_cast<std::uint64_t>(i));
        const float loss =
            srr_train_step(p, cache, clips, rc.srr, opt, i, cache_sampler, cache_rng, srng);
        if (progress) progress(i, loss);
    }
}

// TRD distillation. The rollout depth can be overridden (the depth ablation);
// depth 1 also shrinks the supervision window to a single student chunk.
inline void distill(const RunConfig& rc, DenoiserParams& student, const DenoiserParams& teacher,
                    DenoiserParams& critic, const std::vector<Clip>& clips, long steps = -1,
                    int depth = -1, const ProgressFn& progress = {}) {
    TrdConfig tcfg = rc.trd;
    if (depth > 0) {
        tcfg.rollout_depth = depth;
        if (depth < tcfg.dmd_interval) {
            tcfg.dmd_interval = depth;
            tcfg.teacher_chunk = depth * tcfg.student_chunk;
        }
    }
    tcfg.validate();
    if (steps < 0) steps = tcfg.steps;
    require(!clips.empty(), "distill: empty dataset");
    AdamW opt_s, opt_c;
    opt_s.lr = tcfg.student_lr;
    opt_s.weight_decay = tcfg.weight_decay;
    opt_c.lr = tcfg.critic_lr;
    opt_c.weight_decay = tcfg.weight_decay;
    Rng root = Rng(rc.seed).fork(streams::kTrd);
    for (long i = 0; i < steps; ++i) {
        Rng srng = root.fork(static_cast<std::uint64_t>(i));
        const int ci = srng.uniform_int(static_cast<int>(clips.size()));
        const auto res = trd_train_step(student, teacher, critic,
                                        clips[static_cast<std::size_t>(ci)], tcfg, i, opt_s,
                                        opt_c, srng);
        if (progress) progress(i, res.critic_loss);
    }
}

// Mean drift curves over the first eval clips of the dataset.
inline DriftReport evaluate_open_loop(const RunConfig& rc, const DenoiserParams& p,
                                      const std::vector<Clip>& clips, int sampler_steps,
                                      int depth = -1, int chunk = -1) {
    if (depth < 0) depth = rc.eval.rollout_depth;
    if (chunk < 0) chunk = rc.train.K;
    const int n_clips = std::min<int>(rc.eval.clips, static_cast<int>(clips.size()));
    require(n_clips >= 1, "evaluate_open_loop: no clips");
    const auto sampler = SamplerConfig::uniform(sampler_steps);
    DriftReport mean;
    for (int i = 0; i < n_clips; ++i) {
        const Clip& clip = clips[static_cast<std::size_t>(i)];
        const Scene scene = generate_scene(rc.world, clip.seed);
        Rng rng = Rng(rc.seed).fork(streams::kEval).fork(static_cast<std::uint64_t>(i));
        const auto traj = rollout(p, clip, rc.train.T, chunk, depth, sampler, rng);
        const auto rep =
            drift_report(rc.world, scene, traj.generated, clip, rc.train.T, chunk);
        if (mean.rows.empty()) {
            mean = rep;
        } else {
            require(mean.rows.size() == rep.rows.size(), "evaluate_open_loop: row mismatch");
            for (std::size_t r = 0; r < rep.rows.size(); ++r) {
                mean.rows[r].lfd += rep.rows[r].lfd;
                mean.rows[r].are_deg += rep.rows[r].are_deg;
                mean.rows[r].dtw += rep.rows[r].dtw;
            }
            mean.skipped_frames += rep.skipped_frames;
        }
    }
    for (auto& row : mean.rows) {
        row.lfd /= n_clips;
        row.are_deg /= n_clips;
        row.dtw /= n_clips;
    }
    return mean;
}

// Package a rollout as dataset records: GT warmup plus generated latents,
// poses recovered from the latents, conditioning copied from the reference.
inline Clip trajectory_as_clip(const RunConfig& rc, const Clip& ref,
                               const RolloutTrajectory& traj, const Scene& scene) {
    const int T = traj.warmup;
    const int total = T + traj.depth * traj.chunk_size;
    const int d = ref.latent_dim;
    Clip out;
    out.frames = total;
    out.latent_dim = d;
    out.layout_dim = ref.layout_dim;
    out.seed = ref.seed;
    out.anchor_ids = ref.anchor_ids;
    out.latents.assign(ref.latents.begin(),
                       ref.latents.begin() + static_cast<std::size_t>(T) * d);
    out.latents.insert(out.latents.end(), traj.generated.begin(), traj.generated.end());
    out.layout.assign(ref.layout.begin(),
                      ref.layout.begin() + static_cast<std::size_t>(total) * ref.layout_dim);
    out.actions.assign(ref.actions.begin(), ref.actions.begin() + (total - 1));
    out.poses.assign(ref.poses.begin(), ref.poses.begin() + T);
    for (int i = T; i < total; ++i) {
        const float* z = out.latents.data() + static_cast<std::size_t>(i) * d;
        out.poses.push_back(recover_pose(rc.world, z, scene, out.anchor_ids));
    }
    return out;
}

// Linear slope of the cumulative drift curve (least squares over chunks).
inline double report_slope(const DriftReport& rep) {
    const std::size_t n = rep.rows.size();
    if (n < 2) return 0.0;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& row : rep.rows) {
        sx += row.chunk;
        sy += row.lfd;
        sxx += static_cast<double>(row.chunk) * row.chunk;
        sxy += row.chunk * row.lfd;
    }
    const double dn = static_cast<double>(n);
    return (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
}

}  // namespace hdwm
