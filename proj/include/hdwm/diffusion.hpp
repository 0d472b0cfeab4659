// SPDX-License-Identifier: Apache-2.0
//
// Linear noise schedule, renoising, the v-prediction flow loss restricted to
// chunk frames, and the Euler ODE sampler with clean-clamped condition frames.

#pragma once

#include <array>
#include <vector>

#include "hdwm/denoiser.hpp"
#include "hdwm/tensor.hpp"

namespace hdwm {

// sigma(t) = 1 - t. Makes the v target (z0 - eps) the exact constant field
// between the endpoints, so one Euler step with the oracle field recovers z0.
template <typename S>
struct NoiseScheduleT {
    static S sigma(S t) { return S(1) - t; }
};

template <typename S>
struct SamplerConfigT {
    int steps = 16;
    std::vector<S> grid;  // t descending from 1 to 0, steps+1 points

    static SamplerConfigT<S> uniform(int steps) {
        require(steps >= 1, "sampler: steps must be >= 1, got " + std::to_string(steps));
        SamplerConfigT<S> s;
        s.steps = steps;
        s.grid.resize(static_cast<std::size_t>(steps) + 1);
        for (int i = 0; i <= steps; ++i)
            s.grid[static_cast<std::size_t>(i)] =
                static_cast<S>(steps - i) / static_cast<S>(steps);
        return s;
    }

    void validate() const {
        require(steps >= 1, "sampler: steps must be >= 1");
        require(static_cast<int>(grid.size()) == steps + 1, "sampler: grid size != steps + 1");
        require(grid.front() == S(1) && grid.back() == S(0),
                "sampler: grid must run from 1 to 0");
        for (std::size_t i = 1; i < grid.size(); ++i)
            require(grid[i] < grid[i - 1], "sampler: grid must be strictly decreasing");
    }
};

using SamplerConfig = SamplerConfigT<float>;

// z_t = sigma(t) * z0 + (1 - sigma(t)) * eps
template <typename S>
TensorPtrT<S> renoise(const TensorPtrT<S>& z0, const TensorPtrT<S>& eps, S t) {
    check_same_shape(z0, eps, "renoise");
    require(t >= S(0) && t <= S(1), "renoise: t outside [0,1]");
    const S s = NoiseScheduleT<S>::sigma(t);
    return add(mulc(z0, s), mulc(eps, S(1) - s));
}

// x_hat0 = z_t + (1 - sigma(t)) * v; exact inverse of renoising when v is the
// true transport direction.
template <typename S>
TensorPtrT<S> predicted_clean(const TensorPtrT<S>& z_t, const TensorPtrT<S>& v, S t) {
    const S s = NoiseScheduleT<S>::sigma(t);
    return add(z_t, mulc(v, S(1) - s));
}

// External conditioning over one denoiser window.
template <typename S>
struct WindowCondT {
    TensorPtrT<S> layout;                     // [F, layout_dim]
    std::vector<std::array<S, 3>> actions;    // per frame
};

using WindowCond = WindowCondT<float>;

// Training noise level: uniform over {j/grid_points : j = 1..grid_points}.
template <typename S>
S sample_train_t(Rng& rng, int grid_points = 32) {
    return static_cast<S>(rng.uniform_int(grid_points) + 1) / static_cast<S>(grid_points);
}

// Mean squared v-prediction error over the chunk frames of one window.
// Frames [0, cond_len) are fed clean at t=0; the rest are renoised at one
// shared level and supervised against (z0 - eps).
template <typename S>
TensorPtrT<S> flow_loss(const DenoiserParamsT<S>& p, const TensorPtrT<S>& frames, int cond_len,
                        const WindowCondT<S>& cond, Rng& rng, int t_grid_points = 32) {
    const int f = frames->rows();
    require(cond_len >= 0 && cond_len < f,
            "flow_loss: empty chunk (cond_len " + std::to_string(cond_len) + ", window " +
                std::to_string(f) + ")");
    const int chunk_len = f - cond_len;
    const int d = frames->cols();

    const S t = sample_train_t<S>(rng, t_grid_points);
    auto z0_chunk = slice_rows(frames, cond_len, chunk_len);
    auto eps = TensorT<S>::randn({chunk_len, d}, rng);
    auto noised_chunk = renoise(z0_chunk, eps, t);

    TensorPtrT<S> window = cond_len > 0
                               ? concat_rows<S>({slice_rows(frames, 0, cond_len), noised_chunk})
                               : noised_chunk;
    std::vector<S> t_levels(static_cast<std::size_t>(f), S(0));
    for (int i = cond_len; i < f; ++i) t_levels[static_cast<std::size_t>(i)] = t;

    auto v = denoiser_forward(p, window, t_levels, cond.layout, cond.actions);
    auto v_chunk = slice_rows(v, cond_len, chunk_len);
    auto target = sub(z0_chunk, eps);
    auto diff = sub(v_chunk, target);
    return mulc(sum_sq(diff), S(1) / static_cast<S>(chunk_len * d));
}

// Euler integration of dz = v dt from t=1 down to t=0 over a generic field.
// `field(window, t)` returns one v row per window frame; condition frames are
// re-clamped to the original history every step and never modified.
template <typename S, typename Field>
TensorPtrT<S> euler_sample_field(Field&& field, const TensorPtrT<S>& history, int K,
                                 const SamplerConfigT<S>& sampler, Rng& rng, int latent_dim) {
    sampler.validate();
    require(K >= 1, "euler_sample: chunk length must be >= 1");
    const int T = history ? history->rows() : 0;

    auto chunk = TensorT<S>::randn({K, latent_dim}, rng);
    for (int i = 0; i < sampler.steps; ++i) {
        const S t_cur = sampler.grid[static_cast<std::size_t>(i)];
        const S t_next = sampler.grid[static_cast<std::size_t>(i) + 1];
        TensorPtrT<S> window = T > 0 ? concat_rows<S>({history, chunk}) : chunk;
        auto v = field(window, t_cur);
        auto v_chunk = T > 0 ? slice_rows(v, T, K) : v;
        chunk = add(chunk, mulc(v_chunk, t_cur - t_next));
    }
    return chunk;
}

// Denoiser-backed field over a fixed conditioning window.
template <typename S>
struct DenoiserFieldT {
    const DenoiserParamsT<S>* params;
    WindowCondT<S> cond;  // layout/actions for all T+K window frames
    int cond_len = 0;
    CondDrop drop{};

    TensorPtrT<S> operator()(const TensorPtrT<S>& window, S t) const {
        std::vector<S> t_levels(static_cast<std::size_t>(window->rows()), S(0));
        for (int i = cond_len; i < window->rows(); ++i) t_levels[static_cast<std::size_t>(i)] = t;
        return denoiser_forward(*params, window, t_levels, cond.layout, cond.actions, drop);
    }
};

// Generate K frames conditioned on `history` (clamped clean at t=0).
template <typename S>
TensorPtrT<S> euler_sample(const DenoiserParamsT<S>& p, const TensorPtrT<S>& history,
                           const WindowCondT<S>& cond, int K, const SamplerConfigT<S>& sampler,
                           Rng& rng) {
    const int T = history ? history->rows() : 0;
    require(T + K <= p.cfg.max_frames, "euler_sample: window exceeds max_frames");
    require(cond.layout->rows() == T + K && static_cast<int>(cond.actions.size()) == T + K,
            "euler_sample: conditioning not aligned with window");
    DenoiserFieldT<S> field{&p, cond, T, CondDrop{}};
    return euler_sample_field<S>(field, history, K, sampler, rng, p.cfg.latent_dim);
}

}  // namespace hdwm
