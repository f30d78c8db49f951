#pragma once

#include <string>
#include <vector>

#include "udcvr/latb.hpp"

namespace udcvr {

struct SpatialConfig {
    std::size_t channels = 32;
    std::size_t window = 8;
    std::size_t heads = 4;
    std::size_t blocks_pre = 2;
    double mlp_ratio = 2.0;
    std::size_t downsample = 2;

    LatbConfig latb() const { return {channels, window, heads, mlp_ratio}; }

    void validate() const {
        latb().validate();
        if (downsample != 1 && downsample != 2) throw ConfigError("downsample must be 1 or 2");
    }
};

struct SpatialParams {
    Var sfe_w, sfe_b;  // [C×3×3×3], [C]
    std::vector<LatbParams> blocks;

    template <class Rng>
    static SpatialParams create(ParamStore& store, const SpatialConfig& cfg, Rng& rng) {
        cfg.validate();
        SpatialParams p;
        p.sfe_w = store.add("spatial.sfe.weight", init::fan_in({cfg.channels, 3, 3, 3}, 27, rng));
        p.sfe_b = store.add("spatial.sfe.bias", Tensor::zeros({cfg.channels}));
        for (std::size_t i = 0; i < cfg.blocks_pre; ++i)
            p.blocks.push_back(LatbParams::create(store, "spatial.latb" + std::to_string(i), cfg.latb(), rng));
        return p;
    }
};

/// Shallow feature S = 3×3 conv with stride r (3 -> C channels), then blocks_pre LATBs give S'.
/// The frame's sides must be multiples of r.
inline Var spatial_forward(const Var& ref_frame, const SpatialParams& p, const SpatialConfig& cfg) {
    detail::require_ndim("spatial_forward", ref_frame, 3);
    if (ref_frame.dim(0) != 3) throw ShapeError("spatial_forward: expected a 3-channel frame");
    if (ref_frame.dim(1) % cfg.downsample || ref_frame.dim(2) % cfg.downsample)
        throw ShapeError("spatial_forward: frame " + to_string(ref_frame.shape()) + " not divisible by " +
                         std::to_string(cfg.downsample));
    Var s = conv2d(ref_frame, p.sfe_w, p.sfe_b, {.stride = cfg.downsample, .padding = 1});
    return latb_stack(s, p.blocks, cfg.latb());
}

}  // namespace udcvr
