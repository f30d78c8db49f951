#pragma once

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "udcvr/gradcheck.hpp"
#include "udcvr/model.hpp"

namespace udcvr {

struct GradSuiteOptions {
    std::uint64_t seed = 0;
    std::size_t size = 6;        // spatial side of the per-op probes
    std::string corrupt;         // op whose backward rule is deliberately broken; empty for none
    bool include_model = true;
    GradCheckOptions check;
};

namespace detail {

// Weighted sum with fixed random weights, so every output entry reaches the loss.
inline Var probe_loss(const Var& out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sum(mul(out, Var(Tensor::randn(out.shape(), rng))));
}

}  // namespace detail

/// Finite-difference verification of every differentiable op and a tiny end-to-end model
/// (C=8, K=3, M=M_t=2, 12×12 frames, random head).
inline std::vector<GradCheckResult> run_gradcheck_suite(const GradSuiteOptions& o,
                                                        const std::function<void(const GradCheckResult&)>& on_result = {}) {
    std::optional<testing::CorruptBackward> corruption;
    if (!o.corrupt.empty()) corruption.emplace(o.corrupt);
    std::mt19937_64 rng(o.seed);
    const std::size_t n = std::max<std::size_t>(o.size, 4), half = n / 2;
    const std::uint64_t ps = o.seed * 7919 + 1;
    auto r = [&](Shape s, double sd = 1.0) { return Var(Tensor::randn(std::move(s), rng, sd)); };
    using In = const std::vector<Var>&;
    std::vector<GradCheckResult> out;
    auto run = [&](const std::string& name, std::vector<Var> inputs, std::function<Var(In)> f,
                   std::optional<GradCheckOptions> opt = std::nullopt) {
        out.push_back(check_gradients(name, std::move(inputs), f, opt.value_or(o.check)));
        if (on_result) on_result(out.back());
    };
    auto probe = [&](auto f) { return [f, ps](In in) { return detail::probe_loss(f(in), ps); }; };

    run("add", {r({3, n}), r({3, n})}, probe([](In in) { return add(in[0], in[1]); }));
    run("sub", {r({3, n}), r({3, n})}, probe([](In in) { return sub(in[0], in[1]); }));
    run("mul", {r({3, n}), r({3, n})}, probe([](In in) { return mul(in[0], in[1]); }));
    run("scale", {r({3, n})}, probe([](In in) { return scale(in[0], -1.7); }));
    run("add_trailing", {r({2, 3, n}), r({3, n})}, probe([](In in) { return add_trailing(in[0], in[1]); }));
    run("gelu", {r({4, n}, 2.0)}, probe([](In in) { return gelu(in[0]); }));
    run("sigmoid", {r({4, n}, 2.0)}, probe([](In in) { return sigmoid(in[0]); }));
    run("matmul", {r({3, n}), r({n, 5})}, probe([](In in) { return matmul(in[0], in[1]); }));
    run("bmm", {r({2, 3, n}), r({2, n, 4})}, probe([](In in) { return bmm(in[0], in[1]); }));
    run("bmm_transposed", {r({2, 3, n}), r({2, 5, n})}, probe([](In in) { return bmm(in[0], in[1], true); }));
    run("softmax", {r({3, n}, 2.0)}, probe([](In in) { return softmax(in[0]); }));
    run("layer_norm", {r({3, n}, 2.0), r({n}), r({n})},
        probe([](In in) { return layer_norm(in[0], in[1], in[2]); }));
    run("conv2d", {r({3, n, n}), r({4, 3, 3, 3}), r({4})},
        probe([](In in) { return conv2d(in[0], in[1], in[2], {.stride = 1, .padding = 1}); }));
    run("conv2d_stride2", {r({3, n, n}), r({4, 3, 3, 3}), r({4})},
        probe([](In in) { return conv2d(in[0], in[1], in[2], {.stride = 2, .padding = 1}); }));
    run("sum", {r({3, n})}, [](In in) { return scale(sum(in[0]), 0.5); });
    run("mean", {r({3, n})}, [](In in) { return scale(mean(in[0]), 3.0); });
    run("global_avg_pool", {r({4, n, n})}, probe([](In in) { return global_avg_pool(in[0]); }));
    run("channel_scale", {r({4, n, n}), r({4})}, probe([](In in) { return channel_scale(in[0], in[1]); }));
    {
        Tensor target = Tensor::randn({3, n, n}, rng, 0.05);
        run("charbonnier", {r({3, n, n}, 0.05)}, [target](In in) { return charbonnier(in[0], target, 1e-3); });
    }
    run("reshape", {r({3, n})}, probe([n](In in) { return reshape(in[0], {n, 3}); }));
    run("permute", {r({2, 3, n})}, probe([](In in) { return permute(in[0], {2, 0, 1}); }));
    run("slice0", {r({4, n})}, probe([](In in) { return slice0(in[0], 1, 3); }));
    run("concat0", {r({2, n}), r({3, n})}, probe([](In in) { return concat0({in[0], in[1]}); }));
    run("roll2d", {r({2, n, n})}, probe([](In in) { return roll2d(in[0], -1, 2); }));
    run("reflect_pad2d", {r({2, n, n})}, probe([](In in) { return reflect_pad2d(in[0], 2, 3); }));
    run("crop2d", {r({2, n, n})}, probe([half](In in) { return crop2d(in[0], half, half + 1); }));
    run("pixel_shuffle", {r({8, half, half})}, probe([](In in) { return pixel_shuffle(in[0], 2); }));
    run("pixel_unshuffle", {r({2, 2 * half, 2 * half})}, probe([](In in) { return pixel_unshuffle(in[0], 2); }));
    run("window_partition", {r({2, 2 * half, 2 * half})}, probe([](In in) { return window_partition(in[0], 2); }));
    run("window_merge", {r({half * half, 4, 2})},
        probe([half](In in) { return window_merge(in[0], 2 * half, 2 * half, 2); }));

    {
        ParamStore store;
        LatbConfig cfg{4, 2, 2, 2.0};
        auto p = LatbParams::create(store, "latb", cfg, rng);
        run("multi_head_attention", {r({3, 4, 4}), r({3, 6, 4}), p.attn.q, p.attn.k, p.attn.v, p.attn.o, r({6, 4})},
            probe([](In in) {
                AttentionWeights w{in[2], in[3], in[4], in[5]};
                return multi_head_attention(in[0], in[1], w, 2, &in[6]);
            }));
        std::vector<Var> inputs{r({4, n - 1, n})};
        for (const auto& path : store.paths()) inputs.push_back(store.get(path));
        run("latb_shifted", inputs, probe([p, cfg](In in) { return latb_forward(in[0], p, cfg, true); }));
    }
    {
        ParamStore store;
        TemporalConfig cfg;
        cfg.frames = 3;
        cfg.window = 2;
        cfg.channels = 4;
        cfg.heads = 2;
        cfg.tfe_window = 2;
        auto p = TemporalParams::create(store, cfg, rng);
        for (auto mode : {TemporalQkvMode::neighbors_kv, TemporalQkvMode::ref_in_kv, TemporalQkvMode::neighbors_only_q}) {
            auto c = cfg;
            c.mode = mode;
            run("temporal_attention_" + to_string(mode), {r({3, 4, half, half}), p.attn.k, p.frame_embed},
                probe([p, c](In in) {
                    TemporalParams q = p;
                    q.attn.k = in[1];
                    q.frame_embed = in[2];
                    return temporal_attention(in[0], q, c);
                }));
        }
    }
    {
        ParamStore store;
        auto p = create_fusion(store, 4, FusionMode::stfm, rng);
        run("stfm", {r({4, half, half}), r({4, half, half}), p.fc_w, p.fc_b, p.reduce_w, p.reduce_b},
            probe([](In in) { return stfm(in[0], in[1], FusionParams{in[2], in[3], in[4], in[5]}); }));
    }
    if (o.include_model) {
        ModelConfig cfg;
        cfg.channels = 8;
        cfg.heads = 2;
        cfg.window = 2;
        cfg.temporal_window = 2;
        cfg.frames = 3;
        Vtudc model(cfg, {o.seed, false});
        FrameSequence frames;
        for (int k = 0; k < 3; ++k) frames.push_back(Tensor::uniform({3, 12, 12}, rng, 0.0, 1.0));
        Tensor target = Tensor::uniform({3, 12, 12}, rng, 0.0, 1.0);
        std::vector<Var> inputs;
        for (const auto& path : model.params().paths()) inputs.push_back(model.params().get(path));
        for (const auto& f : frames) inputs.emplace_back(f);
        std::vector<Var> frame_vars(inputs.end() - 3, inputs.end());
        auto opt = o.check;
        opt.max_entries_per_input = std::min<std::size_t>(opt.max_entries_per_input, 12);
        run("vtudc_tiny", inputs,
            [&model, frame_vars, target](In) { return charbonnier(model.forward(frame_vars), target, 1e-3); }, opt);
    }
    return out;
}

inline bool all_passed(const std::vector<GradCheckResult>& results) {
    return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
}

}  // namespace udcvr
