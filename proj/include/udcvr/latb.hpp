#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "udcvr/ops.hpp"
#include "udcvr/params.hpp"

namespace udcvr {

// ---------------------------------------------------------------------------
// Windows

/// x[C×H×W] -> [n×M²×C], n = HW/M². Windows are row-major over the grid, tokens row-major
/// inside a window. H and W must be multiples of M.
inline Var window_partition(const Var& x, std::size_t M) {
    detail::require_ndim("window_partition", x, 3);
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (M == 0 || H % M != 0 || W % M != 0)
        throw ShapeError("window_partition: " + to_string(x.shape()) + " is not tiled by window " + std::to_string(M));
    const std::size_t gw = W / M, n = (H / M) * gw, T = M * M;
    auto idx = std::make_shared<std::vector<std::size_t>>(x.size());
    for (std::size_t w = 0; w < n; ++w)
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t y = (w / gw) * M + t / M, xx = (w % gw) * M + t % M;
            for (std::size_t c = 0; c < C; ++c) (*idx)[(w * T + t) * C + c] = (c * H + y) * W + xx;
        }
    return gather(x, {n, T, C}, std::move(idx), "window_partition");
}

/// Inverse of window_partition: [n×M²×C] -> [C×H×W].
inline Var window_merge(const Var& windows, std::size_t H, std::size_t W, std::size_t M) {
    detail::require_ndim("window_merge", windows, 3);
    const std::size_t T = M * M, C = windows.dim(2);
    if (M == 0 || H % M != 0 || W % M != 0 || windows.dim(1) != T || windows.dim(0) != (H / M) * (W / M))
        throw ShapeError("window_merge: " + to_string(windows.shape()) + " does not tile " + std::to_string(H) + "x" +
                         std::to_string(W) + " with window " + std::to_string(M));
    const std::size_t gw = W / M;
    auto idx = std::make_shared<std::vector<std::size_t>>(windows.size());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
                const std::size_t w = (y / M) * gw + xx / M, t = (y % M) * M + xx % M;
                (*idx)[(c * H + y) * W + xx] = (w * T + t) * C + c;
            }
    return gather(windows, {C, H, W}, std::move(idx), "window_merge");
}

inline std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

// ---------------------------------------------------------------------------
// Attention

struct AttentionWeights {
    Var q, k, v, o;
};

/// Multi-head attention over token sets: queries[n×Tq×C] attend to context[n×Tk×C]
/// within each of the n groups. `key_bias` ([Tk×C], optional) is added to the projected keys.
/// When `probs` is non-null it receives the softmax weights, shape [n·heads×Tq×Tk].
inline Var multi_head_attention(const Var& queries, const Var& context, const AttentionWeights& w,
                                std::size_t heads, const Var* key_bias = nullptr, Tensor* probs = nullptr) {
    detail::require_ndim("attention queries", queries, 3);
    detail::require_ndim("attention context", context, 3);
    const std::size_t n = queries.dim(0), Tq = queries.dim(1), C = queries.dim(2), Tk = context.dim(1);
    if (context.dim(0) != n || context.dim(2) != C)
        throw ShapeError("attention: query " + to_string(queries.shape()) + " and context " +
                         to_string(context.shape()) + " disagree");
    if (heads == 0 || C % heads != 0)
        throw ConfigError("attention: channels " + std::to_string(C) + " not divisible by heads " +
                          std::to_string(heads));
    const std::size_t d = C / heads;

    auto split_heads = [&](const Var& tokens, std::size_t T) {
        // [n·T×C] -> [n·heads×T×d]
        return reshape(permute(reshape(tokens, {n, T, heads, d}), {0, 2, 1, 3}), {n * heads, T, d});
    };
    Var q = matmul(reshape(queries, {n * Tq, C}), w.q);
    Var k = reshape(matmul(reshape(context, {n * Tk, C}), w.k), {n, Tk, C});
    if (key_bias) k = add_trailing(k, *key_bias);
    Var v = matmul(reshape(context, {n * Tk, C}), w.v);

    Var logits = scale(bmm(split_heads(q, Tq), split_heads(k, Tk), true), 1.0 / std::sqrt(double(d)));
    Var attn = softmax(logits);
    if (probs) *probs = attn.value();
    Var mixed = bmm(attn, split_heads(v, Tk));  // [n·heads×Tq×d]
    Var merged = reshape(permute(reshape(mixed, {n, heads, Tq, d}), {0, 2, 1, 3}), {n * Tq, C});
    return reshape(matmul(merged, w.o), {n, Tq, C});
}

// ---------------------------------------------------------------------------
// Local-aware transformer block

struct LatbConfig {
    std::size_t channels = 32;
    std::size_t window = 8;
    std::size_t heads = 4;
    double mlp_ratio = 2.0;

    std::size_t hidden() const { return static_cast<std::size_t>(std::lround(mlp_ratio * double(channels))); }

    void validate() const {
        if (channels == 0 || window == 0) throw ConfigError("LATB: channels and window must be positive");
        if (heads == 0 || channels % heads != 0)
            throw ConfigError("LATB: channels " + std::to_string(channels) + " not divisible by heads " +
                              std::to_string(heads));
        if (hidden() == 0) throw ConfigError("LATB: mlp_ratio gives an empty hidden layer");
    }
};

struct LatbParams {
    Var pos_embed;             // [M²×C], shared by all windows
    Var ln1_gamma, ln1_beta;   // [C]
    AttentionWeights attn;     // [C×C] each
    Var ln2_gamma, ln2_beta;   // [C]
    Var ffn_w1, ffn_b1;        // [C×hidden], [hidden]
    Var ffn_w2, ffn_b2;        // [hidden×C], [C]

    template <class Rng>
    static LatbParams create(ParamStore& store, const std::string& prefix, const LatbConfig& cfg, Rng& rng) {
        cfg.validate();
        const std::size_t C = cfg.channels, T = cfg.window * cfg.window, Hd = cfg.hidden();
        LatbParams p;
        p.pos_embed = store.add(prefix + ".pos_embed", init::normal({T, C}, rng, 0.02));
        p.ln1_gamma = store.add(prefix + ".ln1_gamma", Tensor::ones({C}));
        p.ln1_beta = store.add(prefix + ".ln1_beta", Tensor::zeros({C}));
        p.attn.q = store.add(prefix + ".W_Q", init::fan_in({C, C}, C, rng));
        p.attn.k = store.add(prefix + ".W_K", init::fan_in({C, C}, C, rng));
        p.attn.v = store.add(prefix + ".W_V", init::fan_in({C, C}, C, rng));
        p.attn.o = store.add(prefix + ".W_O", init::fan_in({C, C}, C, rng));
        p.ln2_gamma = store.add(prefix + ".ln2_gamma", Tensor::ones({C}));
        p.ln2_beta = store.add(prefix + ".ln2_beta", Tensor::zeros({C}));
        p.ffn_w1 = store.add(prefix + ".ffn_w1", init::fan_in({C, Hd}, C, rng));
        p.ffn_b1 = store.add(prefix + ".ffn_b1", Tensor::zeros({Hd}));
        p.ffn_w2 = store.add(prefix + ".ffn_w2", init::fan_in({Hd, C}, Hd, rng));
        p.ffn_b2 = store.add(prefix + ".ffn_b2", Tensor::zeros({C}));
        return p;
    }
};

/// Both FC layers of the feed-forward network are followed by GELU.
inline Var feed_forward(const Var& tokens2d, const LatbParams& p) {
    Var h = gelu(add_trailing(matmul(tokens2d, p.ffn_w1), p.ffn_b1));
    return gelu(add_trailing(matmul(h, p.ffn_w2), p.ffn_b2));
}

/// Window self-attention on partitioned tokens xw[n×M²×C].
inline Var window_attention(const Var& xw, const LatbParams& p, std::size_t heads, Tensor* probs = nullptr) {
    return multi_head_attention(xw, xw, p.attn, heads, nullptr, probs);
}

/// One LATB on x[C×H×W]:
///   X'  = MHSA(LN(PE(X))) + X
///   X'' = FFN(LN(X')) + X'
/// computed per M×M window. With `shift`, features are cyclically rolled by ⌊M/2⌋ before
/// partitioning and rolled back after merging. Sizes that are not multiples of M are
/// reflect-padded and cropped back.
inline Var latb_forward(const Var& x, const LatbParams& p, const LatbConfig& cfg, bool shift) {
    detail::require_ndim("latb", x, 3);
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), M = cfg.window;
    if (C != cfg.channels)
        throw ShapeError("latb: input has " + std::to_string(C) + " channels, block expects " +
                         std::to_string(cfg.channels));
    const std::size_t Hp = round_up(H, M), Wp = round_up(W, M);
    Var padded = reflect_pad2d(x, Hp - H, Wp - W);
    const auto s = static_cast<std::ptrdiff_t>(M / 2);
    if (shift && s > 0) padded = roll2d(padded, -s, -s);

    Var tokens = window_partition(padded, M);  // [n×T×C]
    const std::size_t n = tokens.dim(0), T = tokens.dim(1);
    Var normed = layer_norm(add_trailing(tokens, p.pos_embed), p.ln1_gamma, p.ln1_beta);
    Var x1 = add(tokens, window_attention(normed, p, cfg.heads));
    Var flat = reshape(x1, {n * T, C});
    Var x2 = add(flat, feed_forward(layer_norm(flat, p.ln2_gamma, p.ln2_beta), p));

    Var merged = window_merge(reshape(x2, {n, T, C}), Hp, Wp, M);
    if (shift && s > 0) merged = roll2d(merged, s, s);
    return crop2d(merged, H, W);
}

/// Stack of LATBs with shift off on even indices and on for odd ones.
inline Var latb_stack(Var x, const std::vector<LatbParams>& blocks, const LatbConfig& cfg) {
    for (std::size_t i = 0; i < blocks.size(); ++i) x = latb_forward(x, blocks[i], cfg, i % 2 == 1);
    return x;
}

}  // namespace udcvr
