// SPDX-License-Identifier: Apache-2.0
//
// Tiny bidirectional-attention conditional denoiser. Per-frame noise levels
// enter as sinusoidal embeddings added to frame tokens; scene layout enters
// through a zero-initialized additive projector; per-frame actions modulate
// each block through zero-initialized AdaLN shift/scale/gate channels.

#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "hdwm/tensor.hpp"

namespace hdwm {

struct DenoiserConfig {
    int latent_dim = 8;   // d_z
    int width = 64;       // d
    int layers = 2;       // L
    int heads = 4;        // H
    int max_frames = 64;  // F_max
    int layout_dim = 6;
    int noise_emb_dim = 64;   // sinusoidal dim for the noise level
    int action_emb_dim = 16;  // sinusoidal dim per action channel

    void validate() const {
        require(latent_dim > 0 && width > 0 && layers > 0 && heads > 0 && max_frames > 0 &&
                    layout_dim > 0 && noise_emb_dim > 0 && action_emb_dim > 0,
                "denoiser config: all dims must be positive");
        require(width % heads == 0, "denoiser config: width must be divisible by heads");
        require(noise_emb_dim % 2 == 0 && action_emb_dim % 2 == 0,
                "denoiser config: embedding dims must be even");
    }
};

// Which conditioning channels to zero for an unconditional pass. History
// latents always stay.
struct CondDrop {
    bool layout = false;
    bool action = false;
};

template <typename S>
struct DenoiserLayerT {
    TensorPtrT<S> wq, wk, wv, wo;
    TensorPtrT<S> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    TensorPtrT<S> action_w;  // zero-init projector onto 6*d modulation channels
};

template <typename S>
struct DenoiserParamsT {
    DenoiserConfig cfg;
    TensorPtrT<S> embed_w, embed_b;
    TensorPtrT<S> noise_w;
    TensorPtrT<S> layout_w;  // zero-init, bias-free
    std::vector<DenoiserLayerT<S>> layers;
    TensorPtrT<S> unembed_w, unembed_b;
    NamedParamsT<S> named;

    static DenoiserParamsT<S> init(const DenoiserConfig& cfg, Rng& rng) {
        cfg.validate();
        DenoiserParamsT<S> p;
        p.cfg = cfg;
        const int d = cfg.width;
        auto w = [&rng](int in, int out) {
            return TensorT<S>::randn({in, out}, rng, static_cast<S>(1.0 / std::sqrt(in)));
        };
        p.embed_w = w(cfg.latent_dim, d);
        p.embed_b = TensorT<S>::zeros({d});
        p.noise_w = w(cfg.noise_emb_dim, d);
        p.layout_w = TensorT<S>::zeros({cfg.layout_dim, d});
        p.named.add("embed.w", p.embed_w);
        p.named.add("embed.b", p.embed_b);
        p.named.add("noise.w", p.noise_w);
        p.named.add("layout.w", p.layout_w);
        const int hidden = 4 * d;
        for (int l = 0; l < cfg.layers; ++l) {
            DenoiserLayerT<S> layer;
            layer.wq = w(d, d);
            layer.wk = w(d, d);
            layer.wv = w(d, d);
            layer.wo = w(d, d);
            layer.ffn_w1 = w(d, hidden);
            layer.ffn_b1 = TensorT<S>::zeros({hidden});
            layer.ffn_w2 = w(hidden, d);
            layer.ffn_b2 = TensorT<S>::zeros({d});
            layer.action_w = TensorT<S>::zeros({3 * cfg.action_emb_dim, 6 * d});
            const std::string pre = "layer" + std::to_string(l) + ".";
            p.named.add(pre + "attn.wq", layer.wq);
            p.named.add(pre + "attn.wk", layer.wk);
            p.named.add(pre + "attn.wv", layer.wv);
            p.named.add(pre + "attn.wo", layer.wo);
            p.named.add(pre + "ffn.w1", layer.ffn_w1);
            p.named.add(pre + "ffn.b1", layer.ffn_b1);
            p.named.add(pre + "ffn.w2", layer.ffn_w2);
            p.named.add(pre + "ffn.b2", layer.ffn_b2);
            p.named.add(pre + "action.w", layer.action_w);
            p.layers.push_back(std::move(layer));
        }
        p.unembed_w = w(d, cfg.latent_dim);
        p.unembed_b = TensorT<S>::zeros({cfg.latent_dim});
        p.named.add("unembed.w", p.unembed_w);
        p.named.add("unembed.b", p.unembed_b);
        return p;
    }

    std::int64_t param_count() const { return named.count(); }
};

using DenoiserParams = DenoiserParamsT<float>;

// Forward-call instrumentation: call count and the per-call frame watermark.
struct ForwardStats {
    long long calls = 0;
    int max_frames_in_call = 0;
    void reset() { *this = ForwardStats{}; }
};

inline ForwardStats& forward_stats() {
    static ForwardStats s;
    return s;
}

// ---------------------------------------------------------------------------

// Sinusoidal features of the per-frame action triple, concatenated per
// channel. A dropped action feeds zeros into the projector input.
template <typename S>
TensorPtrT<S> embed_actions(const DenoiserConfig& cfg,
                            const std::vector<std::array<S, 3>>& actions, bool drop = false) {
    const int f = static_cast<int>(actions.size());
    const int ae = cfg.action_emb_dim;
    if (drop) return TensorT<S>::zeros({f, 3 * ae});
    std::vector<S> ch0(f), ch1(f), ch2(f);
    for (int i = 0; i < f; ++i) {
        ch0[i] = actions[static_cast<std::size_t>(i)][0];
        ch1[i] = actions[static_cast<std::size_t>(i)][1];
        ch2[i] = actions[static_cast<std::size_t>(i)][2];
    }
    return concat_cols<S>({sinusoidal_embedding<S>(ch0, ae), sinusoidal_embedding<S>(ch1, ae),
                           sinusoidal_embedding<S>(ch2, ae)});
}

// Additive layout injection through the zero-init projector.
template <typename S>
TensorPtrT<S> inject_layout(const TensorPtrT<S>& hidden, const TensorPtrT<S>& layout,
                            const DenoiserParamsT<S>& p) {
    require(hidden->rows() == layout->rows(),
            "inject_layout: frame count mismatch, hidden " + shape_str(hidden->shape) +
                " vs layout " + shape_str(layout->shape));
    return add(hidden, matmul(layout, p.layout_w));
}

template <typename S>
struct AdalnMod {
    TensorPtrT<S> shift_attn, scale_attn, gate_attn;
    TensorPtrT<S> shift_ffn, scale_ffn, gate_ffn;
};

// Project the embedded action track onto the six per-frame modulation
// channels of one layer. All-zero at initialization.
template <typename S>
AdalnMod<S> action_modulation(const DenoiserLayerT<S>& layer, const TensorPtrT<S>& action_emb,
                              int width) {
    auto m = matmul(action_emb, layer.action_w);  // [F, 6*d]
    AdalnMod<S> mod;
    mod.shift_attn = slice_cols(m, 0 * width, width);
    mod.scale_attn = slice_cols(m, 1 * width, width);
    mod.gate_attn = slice_cols(m, 2 * width, width);
    mod.shift_ffn = slice_cols(m, 3 * width, width);
    mod.scale_ffn = slice_cols(m, 4 * width, width);
    mod.gate_ffn = slice_cols(m, 5 * width, width);
    return mod;
}

// norm(x) * (1 + scale) + shift
template <typename S>
TensorPtrT<S> modulate(const TensorPtrT<S>& normed, const TensorPtrT<S>& shift,
                       const TensorPtrT<S>& scale) {
    return add(mul(normed, addc(scale, S(1))), shift);
}

template <typename S>
TensorPtrT<S> attention(const DenoiserLayerT<S>& layer, const TensorPtrT<S>& x, int heads) {
    const int d = x->cols();
    const int dh = d / heads;
    auto q = matmul(x, layer.wq);
    auto k = matmul(x, layer.wk);
    auto v = matmul(x, layer.wv);
    const S inv_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<TensorPtrT<S>> head_out;
    head_out.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        auto qh = slice_cols(q, h * dh, dh);
        auto kh = slice_cols(k, h * dh, dh);
        auto vh = slice_cols(v, h * dh, dh);
        auto scores = mulc(matmul(qh, kh, true), inv_scale);
        head_out.push_back(matmul(softmax(scores), vh));
    }
    return matmul(concat_cols<S>(head_out), layer.wo);
}

// One block sublayer with explicit modulation: x + gate * Sub(modulate(LN(x))).
template <typename S>
TensorPtrT<S> attn_sublayer(const DenoiserLayerT<S>& layer, const TensorPtrT<S>& x,
                            const AdalnMod<S>& mod, int heads) {
    auto u = modulate(layernorm(x), mod.shift_attn, mod.scale_attn);
    return add(x, mul(mod.gate_attn, attention(layer, u, heads)));
}

template <typename S>
TensorPtrT<S> ffn_sublayer(const DenoiserLayerT<S>& layer, const TensorPtrT<S>& x,
                           const AdalnMod<S>& mod) {
    auto u = modulate(layernorm(x), mod.shift_ffn, mod.scale_ffn);
    auto h = silu(add(matmul(u, layer.ffn_w1), layer.ffn_b1));
    auto f = add(matmul(h, layer.ffn_w2), layer.ffn_b2);
    return add(x, mul(mod.gate_ffn, f));
}

// Full pass: one v vector per frame, full bidirectional attention over the
// window. Condition frames are distinguished solely by their t=0 entries in
// t_levels.
template <typename S>
TensorPtrT<S> denoiser_forward(const DenoiserParamsT<S>& p, const TensorPtrT<S>& z_seq,
                               const std::vector<S>& t_levels, const TensorPtrT<S>& layout,
                               const std::vector<std::array<S, 3>>& actions,
                               CondDrop drop = {}) {
    const int f = z_seq->rows();
    require(f <= p.cfg.max_frames, "denoiser_forward: window of " + std::to_string(f) +
                                       " frames exceeds max_frames " +
                                       std::to_string(p.cfg.max_frames));
    require(static_cast<int>(t_levels.size()) == f, "denoiser_forward: t_levels not frame-aligned");
    require(static_cast<int>(actions.size()) == f, "denoiser_forward: actions not frame-aligned");
    require(z_seq->cols() == p.cfg.latent_dim, "denoiser_forward: latent dim mismatch");

    auto& stats = forward_stats();
    ++stats.calls;
    stats.max_frames_in_call = std::max(stats.max_frames_in_call, f);

    auto tok = add(matmul(z_seq, p.embed_w), p.embed_b);
    tok = add(tok, matmul(sinusoidal_embedding<S>(t_levels, p.cfg.noise_emb_dim), p.noise_w));
    auto layout_in = drop.layout ? TensorT<S>::zeros(layout->shape) : layout;
    tok = inject_layout(tok, layout_in, p);

    auto action_emb = embed_actions<S>(p.cfg, actions, drop.action);
    for (const auto& layer : p.layers) {
        auto mod = action_modulation(layer, action_emb, p.cfg.width);
        tok = attn_sublayer(layer, tok, mod, p.cfg.heads);
        tok = ffn_sublayer(layer, tok, mod);
    }
    return add(matmul(layernorm(tok), p.unembed_w), p.unembed_b);
}

}  // namespace hdwm
