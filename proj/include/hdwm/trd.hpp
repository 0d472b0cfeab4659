// SPDX-License-Identifier: Apache-2.0
//
// Stage-3 distillation: the frozen multi-step teacher supervises a few-step
// student along the student's own AR rollout. Every D student chunks the
// latest K^T gradient-carrying frames are renoised and pulled toward the
// teacher distribution by the real/fake score difference, with CFG applied
// only at noise levels below a decaying threshold. A trainable critic tracks
// the student's output distribution.

#pragma once

#include <cstdio>
#include <deque>
#include <vector>

#include "hdwm/rollout.hpp"

namespace hdwm {

struct TrdConfig {
    int T = 8;
    int teacher_chunk = 16;  // K^T
    int student_chunk = 4;   // K^S
    int student_steps = 4;   // M^S
    int teacher_steps = 16;  // M^T
    int rollout_depth = 8;   // N student chunks per training step
    int dmd_interval = 4;    // D, student chunks between DMD applications
    float cfg_scale = 6.0f;  // alpha
    double cfg_plateau = 1000.0;
    long cfg_plateau_end = 100;
    long cfg_zero_step = 400;
    float student_lr = 1e-4f;
    float critic_lr = 3e-4f;
    float weight_decay = 0.1f;
    long steps = 200;
    int t_grid = 32;  // critic flow-loss grid

    void validate() const {
        require(T >= 1 && teacher_chunk >= 1 && student_chunk >= 1, "trd config: bad dims");
        require(dmd_interval >= 1 && rollout_depth >= 1, "trd config: bad cadence");
        require(static_cast<long>(dmd_interval) * student_chunk >= teacher_chunk,
                "trd config: window underflow, D*K_S < K_T");
        require(student_steps >= 1 && student_steps <= teacher_steps,
                "trd config: student steps must not exceed teacher steps");
        require(cfg_scale >= 1.0f, "trd config: cfg scale must be >= 1");
        require(cfg_plateau_end >= 0 && cfg_zero_step > cfg_plateau_end,
                "trd config: cfg schedule anchors out of order");
        if (teacher_chunk % student_chunk != 0)
            std::fprintf(stderr,
                         "trd config: K_T (%d) is not a multiple of K_S (%d); the supervision "
                         "window will straddle chunk boundaries\n",
                         teacher_chunk, student_chunk);
    }
};

// Noise-level threshold on the 0-1000 scale: plateau, then linear decay to 0.
inline double cfg_threshold(const TrdConfig& cfg, long step) {
    if (step <= cfg.cfg_plateau_end) return cfg.cfg_plateau;
    if (step >= cfg.cfg_zero_step) return 0.0;
    return cfg.cfg_plateau * static_cast<double>(cfg.cfg_zero_step - step) /
           static_cast<double>(cfg.cfg_zero_step - cfg.cfg_plateau_end);
}

// Predicted clean window via the x_hat0 identity from one forward pass.
// drop_conditions zeroes layout tokens and the action-embedding input while
// keeping the history latents.
inline TensorPtr score_x0(const DenoiserParams& p, const TensorPtr& z_tau, float tau,
                          const TensorPtr& history, const WindowCond& cond,
                          bool drop_conditions) {
    require(tau > 0.0f && tau <= 1.0f, "score_x0: tau outside (0, 1]");
    const int T = history->rows();
    const int K = z_tau->rows();
    auto window = concat_rows<float>({history, z_tau});
    std::vector<float> t_levels(static_cast<std::size_t>(T + K), 0.0f);
    for (int i = T; i < T + K; ++i) t_levels[static_cast<std::size_t>(i)] = tau;
    CondDrop drop{drop_conditions, drop_conditions};
    auto v = denoiser_forward(p, window, t_levels, cond.layout, cond.actions, drop);
    return predicted_clean(z_tau, slice_rows(v, T, K), tau);
}

// Per-element combination of the three scores, before normalization:
// (fake_cond - real_cond) - 1{cfg_on} * (alpha - 1) * (real_cond - real_uncond)
inline TensorPtr combine_dmd_gradient(const TensorPtr& real_cond, const TensorPtr& real_uncond,
                                      const TensorPtr& fake_cond, bool cfg_on, float alpha) {
    auto g = sub(fake_cond, real_cond);
    if (cfg_on) g = sub(g, mulc(sub(real_cond, real_uncond), alpha - 1.0f));
    return g;
}

// DMD gradient at the student window x. One shared noise draw renoises the
// window for all score evaluations, so identical teacher and critic give an
// exactly zero gradient.
inline TensorPtr trd_gradient(const DenoiserParams& teacher, const DenoiserParams& critic,
                              const TensorPtr& x, const TensorPtr& history,
                              const WindowCond& cond, float tau, double tau_th, float alpha,
                              Rng& rng) {
    NoGradScope<float> no_grad;
    auto eps = Tensor::randn(x->shape, rng);
    auto z_tau = renoise(x, eps, tau);
    const bool cfg_on = static_cast<double>(tau) * 1000.0 <= tau_th;
    auto real_cond = score_x0(teacher, z_tau, tau, history, cond, false);
    auto fake_cond = score_x0(critic, z_tau, tau, history, cond, false);
    TensorPtr real_uncond;
    if (cfg_on) real_uncond = score_x0(teacher, z_tau, tau, history, cond, true);
    auto g = combine_dmd_gradient(real_cond, real_uncond, fake_cond, cfg_on, alpha);
    return mulc(g, 1.0f / static_cast<float>(g->numel()));
}

// Fit the critic's flow loss on the (detached) student window as clean data.
inline float critic_step(DenoiserParams& critic, const TensorPtr& window_detached,
                         const TensorPtr& history, const WindowCond& cond, AdamW& opt, Rng& rng,
                         int t_grid = 32) {
    require(!window_detached->requires_grad, "critic_step: window must be detached");
    auto frames = concat_rows<float>({history, window_detached});
    TapeT<float> tape;
    float loss_value = 0;
    {
        TapeScope<float> scope(tape);
        auto loss = flow_loss(critic, frames, history->rows(), cond, rng, t_grid);
        loss_value = loss->data[0];
        critic.named.zero_grad();
        backward(tape, loss);
    }
    opt.step(critic.named.tensors());
    return loss_value;
}

struct TrdStepResult {
    float dmd_loss = 0;     // summed gradient-dot-window proxy
    float critic_loss = 0;  // mean over applications
    float grad_norm = 0;    // L2 of the last DMD gradient
    int dmd_applications = 0;
    int nfe_student_per_chunk = 0;
    int nfe_teacher_per_window = 0;
    double nfe_ratio = 0;
};

// Debug handles for tests: every generated chunk tensor, in rollout order.
struct TrdTrace {
    std::vector<TensorPtr> chunks;
};

// One TRD training step over a clip: the student rolls N chunks of K^S
// frames at M^S Euler steps with gradient-carrying chunks; every D chunks
// the latest K^T frames are renoised at a sampled tau and the DMD gradient
// is backpropagated into the student immediately, then history detaches and
// the critic fits the same window.
inline TrdStepResult trd_train_step(DenoiserParams& student, const DenoiserParams& teacher,
                                    DenoiserParams& critic, const Clip& clip,
                                    const TrdConfig& cfg, long step, AdamW& opt_student,
                                    AdamW& opt_critic, Rng& rng, TrdTrace* trace = nullptr) {
    cfg.validate();
    const int T = cfg.T, Ks = cfg.student_chunk, Kt = cfg.teacher_chunk;
    const int N = cfg.rollout_depth, D = cfg.dmd_interval;
    const int d = student.cfg.latent_dim;
    require(clip.frames >= T + N * Ks, "trd_train_step: clip shorter than T + N*K_S");

    const double tau_th = cfg_threshold(cfg, step);
    auto student_sampler = SamplerConfig::uniform(cfg.student_steps);

    // rolling log of the full generated sequence (detached data)
    std::vector<float> seq(clip.latents.begin(),
                           clip.latents.begin() + static_cast<std::size_t>(T) * d);
    auto seq_rows = [&](int lo, int count) {
        std::vector<float> flat(static_cast<std::size_t>(count) * d);
        std::copy_n(seq.begin() + static_cast<std::size_t>(lo) * d, flat.size(), flat.begin());
        return Tensor::create({count, d}, std::move(flat));
    };

    TrdStepResult res;
    res.nfe_student_per_chunk = cfg.student_steps;

    std::vector<TensorPtr> pending;  // gradient-carrying chunks of this segment
    TapeT<float> tape;
    for (int n = 1; n <= N; ++n) {
        const int s_n = T + (n - 1) * Ks;  // 0-based chunk start
        auto cond = window_cond_from_clip(clip, clip.layout_dim, s_n - T, T + Ks);
        auto history = seq_rows(s_n - T, T);
        Rng chunk_rng = rng.fork(static_cast<std::uint64_t>(1000 + n));
        TensorPtr chunk;
        {
            TapeScope<float> scope(tape);
            chunk = euler_sample(student, history, cond, Ks, student_sampler, chunk_rng);
        }
        pending.push_back(chunk);
        if (trace) trace->chunks.push_back(chunk);
        seq.insert(seq.end(), chunk->data.begin(), chunk->data.end());

        if (n % D != 0) continue;

        // supervision window: the latest K^T generated frames
        const int wstart = s_n + Ks - Kt;
        require(wstart >= T, "trd_train_step: window reaches into the GT warmup");
        TensorPtr x_window;
        {
            TapeScope<float> scope(tape);
            auto x = concat_rows<float>(pending);
            const int extra = D * Ks - Kt;
            x_window = extra > 0 ? slice_rows(x, extra, Kt) : x;
        }
        auto score_hist = seq_rows(wstart - T, T);
        auto score_cond = window_cond_from_clip(clip, clip.layout_dim, wstart - T, T + Kt);
        const float tau = static_cast<float>(rng.uniform_int(cfg.student_steps) + 1) /
                          static_cast<float>(cfg.student_steps);
        auto g = trd_gradient(teacher, critic, detach(x_window), score_hist, score_cond, tau,
                              tau_th, cfg.cfg_scale, rng);
        float gnorm = 0;
        for (float v : g->data) gnorm += v * v;
        res.grad_norm = std::sqrt(gnorm);

        {
            TapeScope<float> scope(tape);
            auto proxy = sum(mul(x_window, g));
            res.dmd_loss += proxy->data[0];
            student.named.zero_grad();
            backward(tape, proxy);
        }
        opt_student.step(student.named.tensors());
        ++res.dmd_applications;

        res.critic_loss +=
            critic_step(critic, detach(x_window), score_hist, score_cond, opt_critic, rng,
                        cfg.t_grid);

        // detach: drop the segment's graph before rolling further
        tape.nodes.clear();
        pending.clear();
    }
    if (res.dmd_applications > 0) res.critic_loss /= static_cast<float>(res.dmd_applications);

    const int scores_per_window = tau_th > 0.0 ? 3 : 2;
    res.nfe_teacher_per_window = cfg.teacher_steps * scores_per_window;
    res.nfe_ratio = static_cast<double>(res.nfe_teacher_per_window) /
                    static_cast<double>(res.nfe_student_per_chunk);
    return res;
}

// Exact copy with fresh storage; used for the critic (a teacher copy) and
// for student initialization.
template <typename S>
DenoiserParamsT<S> clone_params(const DenoiserParamsT<S>& src) {
    Rng dummy(0);
    auto p = DenoiserParamsT<S>::init(src.cfg, dummy);
    p.named.copy_from(src.named);
    return p;
}

}  // namespace hdwm
