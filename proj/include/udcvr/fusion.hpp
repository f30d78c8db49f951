#pragma once

#include <string>
#include <vector>

#include "udcvr/spatial.hpp"

namespace udcvr {

enum class FusionMode { stfm, concat, add };

inline std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::stfm: return "stfm";
        case FusionMode::concat: return "concat";
        case FusionMode::add: return "add";
    }
    return "?";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "stfm") return FusionMode::stfm;
    if (s == "concat") return FusionMode::concat;
    if (s == "add") return FusionMode::add;
    throw ConfigError("unknown fusion mode '" + s + "' (expected stfm, concat or add)");
}

struct FusionParams {
    Var fc_w, fc_b;          // [2C×2C], [2C]   (stfm only)
    Var reduce_w, reduce_b;  // [C×2C×1×1], [C] (stfm and concat)
};

struct HeadParams {
    std::vector<LatbParams> blocks;
    Var head_w, head_b;  // [3r²×C×3×3], [3r²]
};

template <class Rng>
FusionParams create_fusion(ParamStore& store, std::size_t C, FusionMode mode, Rng& rng) {
    FusionParams p;
    if (mode == FusionMode::stfm) {
        p.fc_w = store.add("fusion.stfm.fc_w", init::fan_in({2 * C, 2 * C}, 2 * C, rng));
        p.fc_b = store.add("fusion.stfm.fc_b", Tensor::zeros({2 * C}));
    }
    if (mode != FusionMode::add) {
        const std::string prefix = mode == FusionMode::stfm ? "fusion.stfm" : "fusion.concat";
        p.reduce_w = store.add(prefix + ".reduce_w", init::fan_in({C, 2 * C, 1, 1}, 2 * C, rng));
        p.reduce_b = store.add(prefix + ".reduce_b", Tensor::zeros({C}));
    }
    return p;
}

/// `zero_head` starts the network at the identity restoration.
template <class Rng>
HeadParams create_head(ParamStore& store, const LatbConfig& latb, std::size_t blocks, std::size_t r, bool zero_head,
                       Rng& rng) {
    HeadParams p;
    const std::size_t C = latb.channels, out = 3 * r * r;
    for (std::size_t i = 0; i < blocks; ++i)
        p.blocks.push_back(LatbParams::create(store, "fusion.latb" + std::to_string(i), latb, rng));
    p.head_w = store.add("fusion.head.weight",
                         zero_head ? Tensor::zeros({out, C, 3, 3}) : init::fan_in({out, C, 3, 3}, 9 * C, rng));
    p.head_b = store.add("fusion.head.bias", Tensor::zeros({out}));
    return p;
}

/// Channel gate of the fusion module: sigmoid(FC(GAP(concat(S', T')))), shape [2C].
inline Var stfm_gate(const Var& F, const FusionParams& p) {
    const std::size_t C2 = F.dim(0);
    Var pooled = reshape(global_avg_pool(F), {1, C2});
    return sigmoid(reshape(add_trailing(matmul(pooled, p.fc_w), p.fc_b), {C2}));
}

/// F = concat(S', T'); G = gate ⊙ F + F; F' = 1×1 conv reducing G from 2C to C channels.
inline Var stfm(const Var& S, const Var& T, const FusionParams& p) {
    if (S.shape() != T.shape())
        throw ContractError("stfm: branch shapes differ (" + to_string(S.shape()) + " vs " + to_string(T.shape()) +
                            ")");
    Var F = concat0({S, T});
    Var G = add(channel_scale(F, stfm_gate(F, p)), F);
    return conv2d(G, p.reduce_w, p.reduce_b);
}

inline Var fuse(const Var& S, const Var& T, const FusionParams& p, FusionMode mode) {
    if (S.shape() != T.shape())
        throw ContractError("fusion: branch shapes differ (" + to_string(S.shape()) + " vs " + to_string(T.shape()) +
                            ")");
    switch (mode) {
        case FusionMode::stfm: return stfm(S, T, p);
        case FusionMode::concat: return conv2d(concat0({S, T}), p.reduce_w, p.reduce_b);
        case FusionMode::add: return add(S, T);
    }
    throw ConfigError("unhandled fusion mode");
}

/// Enhances F' with LATBs, projects to 3·r² channels, pixel-shuffles to 3×rH'×rW' and adds
/// the reference frame. No clamping; callers clamp at inference.
inline Var reconstruct(const Var& fused, const Var& ref_frame, const HeadParams& p, const LatbConfig& latb,
                       std::size_t r) {
    detail::require_ndim("reconstruct", fused, 3);
    if (ref_frame.value().ndim() != 3 || ref_frame.dim(0) != 3 || ref_frame.dim(1) != r * fused.dim(1) ||
        ref_frame.dim(2) != r * fused.dim(2))
        throw ContractError("reconstruct: reference frame " + to_string(ref_frame.shape()) + " is not " +
                            std::to_string(r) + "x the feature size " + to_string(fused.shape()));
    Var h = latb_stack(fused, p.blocks, latb);
    h = conv2d(h, p.head_w, p.head_b, {.stride = 1, .padding = 1});
    return add(pixel_shuffle(h, r), ref_frame);
}

}  // namespace udcvr
