#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "udcvr/degradation.hpp"
#include "udcvr/fusion.hpp"
#include "udcvr/kv.hpp"
#include "udcvr/spatial.hpp"
#include "udcvr/temporal.hpp"

namespace udcvr {

enum class Branches { both, spatial_only, temporal_only };

inline std::string to_string(Branches b) {
    switch (b) {
        case Branches::both: return "both";
        case Branches::spatial_only: return "spatial";
        case Branches::temporal_only: return "temporal";
    }
    return "?";
}

inline Branches parse_branches(const std::string& s) {
    if (s == "both") return Branches::both;
    if (s == "spatial") return Branches::spatial_only;
    if (s == "temporal") return Branches::temporal_only;
    throw ConfigError("unknown branch selection '" + s + "' (expected both, spatial or temporal)");
}

struct ModelConfig {
    std::size_t channels = 32;
    std::size_t heads = 4;
    std::size_t window = 8;           // M, spatial and extractor LATBs
    std::size_t temporal_window = 4;  // M_t
    std::size_t frames = 5;           // K
    std::size_t blocks_pre = 2;
    std::size_t blocks_post = 2;
    std::size_t tfe_blocks = 1;
    double mlp_ratio = 2.0;
    std::size_t downsample = 2;
    FusionMode fusion = FusionMode::stfm;
    TemporalQkvMode temporal_qkv = TemporalQkvMode::neighbors_kv;
    bool frame_embedding = true;
    Branches branches = Branches::both;

    SpatialConfig spatial() const { return {channels, window, heads, blocks_pre, mlp_ratio, downsample}; }
    TemporalConfig temporal() const {
        return {frames, temporal_window, channels, heads, tfe_blocks, window, mlp_ratio, downsample, frame_embedding,
                temporal_qkv};
    }
    LatbConfig latb() const { return {channels, window, heads, mlp_ratio}; }

    void validate() const {
        spatial().validate();
        temporal().validate();
    }

    void write(KeyValues& kv) const {
        kv.set("channels", std::uint64_t(channels));
        kv.set("heads", std::uint64_t(heads));
        kv.set("window", std::uint64_t(window));
        kv.set("temporal_window", std::uint64_t(temporal_window));
        kv.set("frames", std::uint64_t(frames));
        kv.set("blocks_pre", std::uint64_t(blocks_pre));
        kv.set("blocks_post", std::uint64_t(blocks_post));
        kv.set("tfe_blocks", std::uint64_t(tfe_blocks));
        kv.set("mlp_ratio", mlp_ratio);
        kv.set("downsample", std::uint64_t(downsample));
        kv.set("fusion", to_string(fusion));
        kv.set("temporal_qkv", to_string(temporal_qkv));
        kv.set("frame_embedding", frame_embedding);
        kv.set("branches", to_string(branches));
    }

    static ModelConfig read(const KeyValues& kv) {
        ModelConfig c;
        c.channels = kv.get_u64("channels", c.channels);
        c.heads = kv.get_u64("heads", c.heads);
        c.window = kv.get_u64("window", c.window);
        c.temporal_window = kv.get_u64("temporal_window", c.temporal_window);
        c.frames = kv.get_u64("frames", c.frames);
        c.blocks_pre = kv.get_u64("blocks_pre", c.blocks_pre);
        c.blocks_post = kv.get_u64("blocks_post", c.blocks_post);
        c.tfe_blocks = kv.get_u64("tfe_blocks", c.tfe_blocks);
        c.mlp_ratio = kv.get_double("mlp_ratio", c.mlp_ratio);
        c.downsample = kv.get_u64("downsample", c.downsample);
        c.fusion = parse_fusion_mode(kv.get_string("fusion", to_string(c.fusion)));
        c.temporal_qkv = parse_temporal_qkv(kv.get_string("temporal_qkv", to_string(c.temporal_qkv)));
        c.frame_embedding = kv.get_bool("frame_embedding", c.frame_embedding);
        c.branches = parse_branches(kv.get_string("branches", to_string(c.branches)));
        c.validate();
        return c;
    }
};

struct InitOptions {
    std::uint64_t seed = 0;
    bool zero_head = true;
};

/// Two-branch video restoration transformer: the spatial branch encodes the reference frame,
/// the temporal branch gathers evidence from neighbouring frames, the fusion module merges
/// both and the head predicts a residual added to the reference frame.
class Vtudc {
public:
    explicit Vtudc(ModelConfig cfg, InitOptions init = {}) : cfg_(cfg) {
        cfg_.validate();
        std::mt19937_64 rng(init.seed);
        if (cfg_.branches != Branches::temporal_only) spatial_ = SpatialParams::create(params_, cfg_.spatial(), rng);
        if (cfg_.branches != Branches::spatial_only) temporal_ = TemporalParams::create(params_, cfg_.temporal(), rng);
        if (cfg_.branches == Branches::both) fusion_ = create_fusion(params_, cfg_.channels, cfg_.fusion, rng);
        head_ = create_head(params_, cfg_.latb(), cfg_.blocks_post, cfg_.downsample, init.zero_head, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const SpatialParams& spatial_params() const { return spatial_; }
    const TemporalParams& temporal_params() const { return temporal_; }
    const FusionParams& fusion_params() const { return fusion_; }
    const HeadParams& head_params() const { return head_; }

    /// Restored reference frame (unclamped) for K frames of shape 3×H×W. Sides that are not
    /// multiples of the downsampling factor are reflect-padded and the output is cropped back.
    Var forward(const std::vector<Var>& frames) const {
        if (frames.size() != cfg_.frames)
            throw ContractError("model expects " + std::to_string(cfg_.frames) + " frames, got " +
                                std::to_string(frames.size()));
        for (const auto& f : frames)
            if (f.value().ndim() != 3 || f.dim(0) != 3 || f.shape() != frames.front().shape())
                throw ContractError("model frames must share one 3×H×W shape");
        const std::size_t H = frames.front().dim(1), W = frames.front().dim(2), r = cfg_.downsample;
        const std::size_t Hp = round_up(H, r), Wp = round_up(W, r);
        std::vector<Var> padded;
        for (const auto& f : frames) padded.push_back(reflect_pad2d(f, Hp - H, Wp - W));
        const Var& ref = padded[cfg_.frames / 2];

        Var fused;
        if (cfg_.branches == Branches::temporal_only) {
            fused = temporal_branch(padded);
        } else if (cfg_.branches == Branches::spatial_only) {
            fused = spatial_forward(ref, spatial_, cfg_.spatial());
        } else {
            Var s = spatial_forward(ref, spatial_, cfg_.spatial());
            fused = fuse(s, temporal_branch(padded), fusion_, cfg_.fusion);
        }
        return crop2d(reconstruct(fused, ref, head_, cfg_.latb(), r), H, W);
    }

    Var forward(const FrameSequence& frames) const {
        std::vector<Var> vars;
        for (const auto& f : frames) vars.emplace_back(f);
        return forward(vars);
    }

    /// Inference: no tape, output clamped to [0,1].
    Tensor restore(const FrameSequence& frames) const {
        NoGradScope no_grad;
        Tensor out = forward(frames).value();
        for (auto& v : out.vec()) v = std::clamp(v, 0.0, 1.0);
        return out;
    }

private:
    Var temporal_branch(const std::vector<Var>& frames) const {
        const auto tcfg = cfg_.temporal();
        return temporal_attention(tfe_forward(frames, temporal_, tcfg), temporal_, tcfg);
    }

    ModelConfig cfg_;
    ParamStore params_;
    SpatialParams spatial_;
    TemporalParams temporal_;
    FusionParams fusion_;
    HeadParams head_;
};

/// K-frame window centred on `center`; out-of-range neighbours replicate the first/last frame.
inline FrameSequence temporal_window(const FrameSequence& seq, std::size_t center, std::size_t K) {
    if (seq.empty()) throw ContractError("temporal_window: empty sequence");
    FrameSequence out;
    const auto half = static_cast<std::ptrdiff_t>(K / 2);
    for (std::ptrdiff_t o = -half; o <= half; ++o) {
        const auto i = std::clamp<std::ptrdiff_t>(std::ptrdiff_t(center) + o, 0, std::ptrdiff_t(seq.size()) - 1);
        out.push_back(seq[std::size_t(i)]);
    }
    return out;
}

/// Restores every frame of a sequence, using replicate-padded neighbours at the ends.
inline FrameSequence restore_sequence(const Vtudc& model, const FrameSequence& seq) {
    FrameSequence out;
    for (std::size_t i = 0; i < seq.size(); ++i) out.push_back(model.restore(temporal_window(seq, i, model.config().frames)));
    return out;
}

}  // namespace udcvr
