#pragma once

#include <memory>
#include <string>
#include <vector>

#include "udcvr/latb.hpp"

namespace udcvr {

/// Which frames supply queries and keys/values in the temporal transformer.
enum class TemporalQkvMode {
    neighbors_kv,      // Q: reference; K,V: the 2N neighbours
    ref_in_kv,         // Q: reference; K,V: all K frames
    neighbors_only_q,  // Q,K,V: neighbours; outputs averaged over the neighbours
};

inline std::string to_string(TemporalQkvMode m) {
    switch (m) {
        case TemporalQkvMode::neighbors_kv: return "neighbors";
        case TemporalQkvMode::ref_in_kv: return "with-ref";
        case TemporalQkvMode::neighbors_only_q: return "neighbors-only";
    }
    return "?";
}

inline TemporalQkvMode parse_temporal_qkv(const std::string& s) {
    if (s == "neighbors" || s == "neighbors_kv") return TemporalQkvMode::neighbors_kv;
    if (s == "with-ref" || s == "ref_in_kv") return TemporalQkvMode::ref_in_kv;
    if (s == "neighbors-only" || s == "neighbors_only_q") return TemporalQkvMode::neighbors_only_q;
    throw ConfigError("unknown temporal qkv mode '" + s + "' (expected neighbors, with-ref or neighbors-only)");
}

struct TemporalConfig {
    std::size_t frames = 5;  // K = 2N + 1
    std::size_t window = 4;  // M_t
    std::size_t channels = 32;
    std::size_t heads = 4;
    std::size_t tfe_blocks = 1;
    std::size_t tfe_window = 8;
    double mlp_ratio = 2.0;
    std::size_t downsample = 2;
    bool frame_embedding = true;
    TemporalQkvMode mode = TemporalQkvMode::neighbors_kv;

    std::size_t reference() const { return frames / 2; }
    LatbConfig latb() const { return {channels, tfe_window, heads, mlp_ratio}; }

    void validate() const {
        if (frames == 0 || frames % 2 == 0) throw ConfigError("temporal frame count must be odd");
        if (window == 0) throw ConfigError("temporal window must be positive");
        if (heads == 0 || channels % heads != 0) throw ConfigError("temporal channels not divisible by heads");
        if (downsample != 1 && downsample != 2) throw ConfigError("downsample must be 1 or 2");
        latb().validate();
    }
};

struct TemporalParams {
    Var conv_in_w, conv_in_b;    // [C×3×3×3], stride r
    std::vector<LatbParams> blocks;
    Var conv_out_w, conv_out_b;  // [C×C×3×3]
    AttentionWeights attn;
    Var frame_embed;             // [K×C], added to projected keys

    template <class Rng>
    static TemporalParams create(ParamStore& store, const TemporalConfig& cfg, Rng& rng) {
        cfg.validate();
        const std::size_t C = cfg.channels;
        TemporalParams p;
        p.conv_in_w = store.add("temporal.tfe.conv_in.weight", init::fan_in({C, 3, 3, 3}, 27, rng));
        p.conv_in_b = store.add("temporal.tfe.conv_in.bias", Tensor::zeros({C}));
        for (std::size_t i = 0; i < cfg.tfe_blocks; ++i)
            p.blocks.push_back(LatbParams::create(store, "temporal.tfe.latb" + std::to_string(i), cfg.latb(), rng));
        p.conv_out_w = store.add("temporal.tfe.conv_out.weight", init::fan_in({C, C, 3, 3}, 9 * C, rng));
        p.conv_out_b = store.add("temporal.tfe.conv_out.bias", Tensor::zeros({C}));
        p.attn.q = store.add("temporal.attn.W_Q", init::fan_in({C, C}, C, rng));
        p.attn.k = store.add("temporal.attn.W_K", init::fan_in({C, C}, C, rng));
        p.attn.v = store.add("temporal.attn.W_V", init::fan_in({C, C}, C, rng));
        p.attn.o = store.add("temporal.attn.W_O", init::fan_in({C, C}, C, rng));
        if (cfg.frame_embedding) p.frame_embed = store.add("temporal.attn.frame_embed", init::normal({cfg.frames, C}, rng, 0.02));
        return p;
    }
};

/// Shared-weight feature extractor applied to each frame: stride-r conv, LATB(s), conv.
/// Returns T[K×C×H'×W'].
inline Var tfe_forward(const std::vector<Var>& frames, const TemporalParams& p, const TemporalConfig& cfg) {
    if (frames.empty()) throw ContractError("tfe_forward: no frames");
    std::vector<Var> features;
    features.reserve(frames.size());
    for (const auto& f : frames) {
        if (f.shape() != frames.front().shape())
            throw ContractError("tfe_forward: frame shapes differ (" + to_string(f.shape()) + " vs " +
                                to_string(frames.front().shape()) + ")");
        Var h = conv2d(f, p.conv_in_w, p.conv_in_b, {.stride = cfg.downsample, .padding = 1});
        h = latb_stack(h, p.blocks, cfg.latb());
        h = conv2d(h, p.conv_out_w, p.conv_out_b, {.stride = 1, .padding = 1});
        Shape s = h.shape();
        features.push_back(reshape(h, {1, s[0], s[1], s[2]}));
    }
    return concat0(features);
}

namespace detail {

// [F·n×T×C] grouped by frame -> [n×F·T×C] grouped by window.
inline Var group_by_window(const Var& stacked, std::size_t frames) {
    const std::size_t n = stacked.dim(0) / frames, T = stacked.dim(1), C = stacked.dim(2);
    return reshape(permute(reshape(stacked, {frames, n, T, C}), {1, 0, 2, 3}), {n, frames * T, C});
}

// Frame embedding rows for `frames`, expanded to [F·T×C] in token order.
inline Var expand_frame_embedding(const Var& embed, const std::vector<std::size_t>& frames, std::size_t T) {
    const std::size_t C = embed.dim(1);
    auto idx = std::make_shared<std::vector<std::size_t>>(frames.size() * T * C);
    for (std::size_t f = 0; f < frames.size(); ++f)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < C; ++c) (*idx)[(f * T + t) * C + c] = frames[f] * C + c;
    return gather(embed, {frames.size() * T, C}, std::move(idx), "frame_embedding");
}

}  // namespace detail

/// Window-wise cross-frame attention. Every frame is split into M_t×M_t windows; for each
/// window position the query tokens attend to the same window position of the key/value
/// frames selected by the mode. Returns T'[C×H'×W'].
inline Var temporal_attention(const Var& T, const TemporalParams& p, const TemporalConfig& cfg,
                              Tensor* probs = nullptr) {
    detail::require_ndim("temporal_attention", T, 4);
    const std::size_t K = T.dim(0), C = T.dim(1), H = T.dim(2), W = T.dim(3), M = cfg.window;
    if (K != cfg.frames)
        throw ContractError("temporal_attention: got " + std::to_string(K) + " frames, configured for " +
                            std::to_string(cfg.frames));
    const std::size_t ref = K / 2;
    std::vector<std::size_t> neighbors;
    for (std::size_t i = 0; i < K; ++i)
        if (i != ref) neighbors.push_back(i);
    if (neighbors.empty() && cfg.mode != TemporalQkvMode::ref_in_kv)
        throw ContractError("temporal_attention: a single frame has no neighbours to attend to");

    const std::size_t Hp = round_up(H, M), Wp = round_up(W, M);
    auto windows_of = [&](std::size_t frame) {
        return window_partition(reflect_pad2d(reshape(slice0(T, frame, frame + 1), {C, H, W}), Hp - H, Wp - W), M);
    };
    auto stack_frames = [&](const std::vector<std::size_t>& ids) {
        std::vector<Var> parts;
        for (auto i : ids) parts.push_back(windows_of(i));
        return detail::group_by_window(concat0(parts), ids.size());
    };
    const std::size_t Tw = M * M;

    std::vector<std::size_t> kv_frames = neighbors;
    if (cfg.mode == TemporalQkvMode::ref_in_kv) {
        kv_frames.clear();
        for (std::size_t i = 0; i < K; ++i) kv_frames.push_back(i);
    }
    Var context = stack_frames(kv_frames);
    Var key_bias;
    if (p.frame_embed.defined()) key_bias = detail::expand_frame_embedding(p.frame_embed, kv_frames, Tw);
    const Var* bias = key_bias.defined() ? &key_bias : nullptr;

    Var out;
    if (cfg.mode == TemporalQkvMode::neighbors_only_q) {
        const std::size_t F = neighbors.size();
        Var mixed = multi_head_attention(context, context, p.attn, cfg.heads, bias, probs);  // [n×F·T×C]
        const std::size_t n = mixed.dim(0);
        Var per_frame = reshape(permute(reshape(mixed, {n, F, Tw, C}), {1, 0, 2, 3}), {F, n * Tw * C});
        Var averaging(Tensor({1, F}, 1.0 / double(F)));
        out = reshape(matmul(averaging, per_frame), {n, Tw, C});
    } else {
        out = multi_head_attention(windows_of(ref), context, p.attn, cfg.heads, bias, probs);
    }
    return crop2d(window_merge(out, Hp, Wp, M), H, W);
}

}  // namespace udcvr
