#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "udcvr/gradcheck.hpp"
#include "udcvr/temporal.hpp"

using namespace udcvr;

namespace {

struct Branch {
    ParamStore store;
    TemporalConfig cfg;
    TemporalParams p;

    Branch(TemporalConfig c, std::uint64_t seed) : cfg(c) {
        std::mt19937_64 rng(seed);
        p = TemporalParams::create(store, cfg, rng);
    }

    void set(const std::string& path, const Tensor& t) { store.assign(path, t); }
};

TemporalConfig small(std::size_t K, std::size_t C, std::size_t heads, std::size_t Mt, bool embed,
                     TemporalQkvMode mode = TemporalQkvMode::neighbors_kv) {
    TemporalConfig c;
    c.frames = K;
    c.window = Mt;
    c.channels = C;
    c.heads = heads;
    c.tfe_window = 2;
    c.frame_embedding = embed;
    c.mode = mode;
    return c;
}

Tensor randn(Shape s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return Tensor::randn(std::move(s), rng);
}

// Writes the C×H×W feature `f` into slice k of T[K×C×H×W].
void put_slice(Tensor& T, std::size_t k, const Tensor& f) {
    std::copy(f.vec().begin(), f.vec().end(), T.vec().begin() + std::ptrdiff_t(k * f.size()));
}

}  // namespace

TEST(TfeForward, IdenticalFramesGiveIdenticalSlices) {
    Branch b(small(5, 4, 2, 2, true), 1);
    Var frame(randn({3, 8, 8}, 2));
    auto T = tfe_forward(std::vector<Var>(5, frame), b.p, b.cfg).value();
    ASSERT_EQ(T.shape(), (Shape{5, 4, 4, 4}));
    const std::size_t n = 4 * 4 * 4;
    for (std::size_t k = 1; k < 5; ++k)
        for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(T[k * n + i], T[i]);
}

TEST(TfeForward, OutputShapeFollowsDownsampling) {
    for (std::size_t r : {1, 2}) {
        auto cfg = small(3, 4, 2, 2, true);
        cfg.downsample = r;
        Branch b(cfg, 3);
        std::vector<Var> frames;
        for (int k = 0; k < 3; ++k) frames.emplace_back(randn({3, 12, 8}, 4 + k));
        EXPECT_EQ(tfe_forward(frames, b.p, b.cfg).shape(), (Shape{3, 4, 12 / r, 8 / r}));
    }
}

TEST(TfeForward, PermutingFramesPermutesSlices) {
    Branch b(small(5, 4, 2, 2, true), 5);
    std::vector<Var> frames;
    for (int k = 0; k < 5; ++k) frames.emplace_back(randn({3, 8, 8}, 10 + k));
    auto base = tfe_forward(frames, b.p, b.cfg).value();
    std::swap(frames[0], frames[4]);
    auto swapped = tfe_forward(frames, b.p, b.cfg).value();
    const std::size_t n = 4 * 4 * 4;
    const std::size_t perm[5] = {4, 1, 2, 3, 0};
    for (std::size_t k = 0; k < 5; ++k)
        for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(swapped[k * n + i], base[perm[k] * n + i]);
}

TEST(TfeForward, InconsistentShapesAreContractError) {
    Branch b(small(3, 4, 2, 2, true), 6);
    std::vector<Var> frames{Var(randn({3, 8, 8}, 1)), Var(randn({3, 8, 10}, 2)), Var(randn({3, 8, 8}, 3))};
    EXPECT_THROW(tfe_forward(frames, b.p, b.cfg), ContractError);
}

TEST(TemporalAttention, ConstantNeighboursPassThroughValueProjection) {
    for (auto mode : {TemporalQkvMode::neighbors_kv, TemporalQkvMode::neighbors_only_q}) {
        Branch b(small(5, 4, 2, 2, true, mode), 7);
        b.set("temporal.attn.W_V", Tensor::identity(4));
        b.set("temporal.attn.W_O", Tensor::identity(4));
        const double c[4] = {0.3, -1.2, 2.5, 0.0};
        Tensor T = randn({5, 4, 6, 6}, 8);  // reference slice stays random
        for (std::size_t k : {0, 1, 3, 4})
            for (std::size_t ch = 0; ch < 4; ++ch)
                for (std::size_t i = 0; i < 36; ++i) T[((k * 4) + ch) * 36 + i] = c[ch];
        auto out = temporal_attention(Var(T), b.p, b.cfg).value();
        ASSERT_EQ(out.shape(), (Shape{4, 6, 6}));
        for (std::size_t ch = 0; ch < 4; ++ch)
            for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(out[ch * 36 + i], c[ch], 1e-12);
    }
}

TEST(TemporalAttention, DuplicatedReferenceKeysMatchNeighbourKeys) {
    auto cfg = small(3, 4, 2, 2, false);
    Branch b(cfg, 9);
    Tensor f = randn({4, 4, 4}, 10);
    Tensor T({3, 4, 4, 4});
    for (std::size_t k = 0; k < 3; ++k) put_slice(T, k, f);
    auto neighbors = temporal_attention(Var(T), b.p, b.cfg).value();
    b.cfg.mode = TemporalQkvMode::ref_in_kv;
    auto with_ref = temporal_attention(Var(T), b.p, b.cfg).value();
    EXPECT_LT(max_abs_diff(neighbors, with_ref), 1e-12);
}

TEST(TemporalAttention, UnitWindowMatchesScalarHandComputation) {
    Branch b(small(3, 1, 1, 1, false), 11);
    const double wq = 0.8, wk = -1.3, wv = 0.6, wo = 1.7;
    b.set("temporal.attn.W_Q", Tensor({1, 1}, wq));
    b.set("temporal.attn.W_K", Tensor({1, 1}, wk));
    b.set("temporal.attn.W_V", Tensor({1, 1}, wv));
    b.set("temporal.attn.W_O", Tensor({1, 1}, wo));
    Tensor T = randn({3, 1, 3, 5}, 12);
    auto out = temporal_attention(Var(T), b.p, b.cfg).value();
    for (std::size_t i = 0; i < 15; ++i) {
        const double r = T[15 + i], n0 = T[i], n1 = T[30 + i];
        const double q = wq * r;
        const double l0 = q * wk * n0, l1 = q * wk * n1;
        const double m = std::max(l0, l1);
        const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
        const double expected = wo * (e0 * wv * n0 + e1 * wv * n1) / (e0 + e1);
        EXPECT_NEAR(out[i], expected, 1e-12) << "pixel " << i;
    }
}

TEST(TemporalAttention, OutputShapeIndependentOfFrameCount) {
    for (std::size_t K : {1, 3, 5, 7}) {
        Branch b(small(K, 4, 2, 4, true, TemporalQkvMode::ref_in_kv), 13);
        auto out = temporal_attention(Var(randn({K, 4, 6, 10}, 14)), b.p, b.cfg);
        EXPECT_EQ(out.shape(), (Shape{4, 6, 10}));
    }
}

TEST(TemporalAttention, OutputInConvexHullOfNeighbourValues) {
    Branch b(small(5, 4, 2, 2, true), 15);
    b.set("temporal.attn.W_V", Tensor::identity(4));
    b.set("temporal.attn.W_O", Tensor::identity(4));
    Tensor T = randn({5, 4, 4, 4}, 16);
    auto out = temporal_attention(Var(T), b.p, b.cfg).value();
    for (std::size_t wy = 0; wy < 2; ++wy)
        for (std::size_t wx = 0; wx < 2; ++wx)
            for (std::size_t c = 0; c < 4; ++c) {
                double lo = 1e300, hi = -1e300;
                for (std::size_t k : {0, 1, 3, 4})
                    for (std::size_t y = 2 * wy; y < 2 * wy + 2; ++y)
                        for (std::size_t x = 2 * wx; x < 2 * wx + 2; ++x) {
                            const double v = T[((k * 4 + c) * 4 + y) * 4 + x];
                            lo = std::min(lo, v);
                            hi = std::max(hi, v);
                        }
                for (std::size_t y = 2 * wy; y < 2 * wy + 2; ++y)
                    for (std::size_t x = 2 * wx; x < 2 * wx + 2; ++x) {
                        const double v = out.at(c, y, x);
                        EXPECT_GE(v, lo - 1e-12);
                        EXPECT_LE(v, hi + 1e-12);
                    }
            }
}

TEST(TemporalAttention, NeighbourChangeStaysInItsWindow) {
    for (auto mode : {TemporalQkvMode::neighbors_kv, TemporalQkvMode::ref_in_kv, TemporalQkvMode::neighbors_only_q}) {
        Branch b(small(5, 4, 2, 4, true, mode), 17);
        Tensor T = randn({5, 4, 8, 8}, 18);
        auto base = temporal_attention(Var(T), b.p, b.cfg).value();
        T[((1 * 4 + 2) * 8 + 5) * 8 + 6] += 1.0;  // neighbour 1, window (1,1)
        auto changed = temporal_attention(Var(T), b.p, b.cfg).value();
        bool moved_inside = false;
        for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t y = 0; y < 8; ++y)
                for (std::size_t x = 0; x < 8; ++x) {
                    const double d = std::abs(changed.at(c, y, x) - base.at(c, y, x));
                    if (y >= 4 && x >= 4)
                        moved_inside = moved_inside || d > 0.0;
                    else
                        EXPECT_EQ(d, 0.0);
                }
        EXPECT_TRUE(moved_inside) << to_string(mode);
    }
}

TEST(TemporalAttention, ModesProduceDifferentOutputs) {
    Tensor T = randn({5, 4, 8, 8}, 19);
    std::vector<Tensor> outs;
    for (auto mode : {TemporalQkvMode::neighbors_kv, TemporalQkvMode::ref_in_kv, TemporalQkvMode::neighbors_only_q}) {
        Branch b(small(5, 4, 2, 4, true, mode), 20);
        outs.push_back(temporal_attention(Var(T), b.p, b.cfg).value());
    }
    EXPECT_GT(max_abs_diff(outs[0], outs[1]), 1e-6);
    EXPECT_GT(max_abs_diff(outs[0], outs[2]), 1e-6);
    EXPECT_GT(max_abs_diff(outs[1], outs[2]), 1e-6);
}

TEST(TemporalAttention, FrameEmbeddingDistinguishesNeighbours) {
    Branch b(small(5, 4, 2, 2, true), 21);
    b.set("temporal.attn.frame_embed", randn({5, 4}, 22));
    Tensor T = randn({5, 4, 4, 4}, 23);
    auto base = temporal_attention(Var(T), b.p, b.cfg).value();
    Tensor swapped = T;
    const std::size_t n = 4 * 16;
    for (std::size_t i = 0; i < n; ++i) std::swap(swapped[i], swapped[4 * n + i]);
    auto out = temporal_attention(Var(swapped), b.p, b.cfg).value();
    EXPECT_GT(max_abs_diff(base, out), 1e-9);

    Branch plain(small(5, 4, 2, 2, false), 21);
    auto a = temporal_attention(Var(T), plain.p, plain.cfg).value();
    auto c = temporal_attention(Var(swapped), plain.p, plain.cfg).value();
    EXPECT_LT(max_abs_diff(a, c), 1e-12);  // without it neighbours are an unordered set
}

TEST(TemporalAttention, SingleFrameWithoutNeighboursIsContractError) {
    for (auto mode : {TemporalQkvMode::neighbors_kv, TemporalQkvMode::neighbors_only_q}) {
        Branch b(small(1, 4, 2, 2, true, mode), 24);
        EXPECT_THROW(temporal_attention(Var(randn({1, 4, 4, 4}, 25)), b.p, b.cfg), ContractError);
    }
}

TEST(TemporalAttention, GradientsMatchFiniteDifferences) {
    for (auto mode : {TemporalQkvMode::neighbors_kv, TemporalQkvMode::ref_in_kv, TemporalQkvMode::neighbors_only_q}) {
        Branch b(small(3, 4, 2, 2, true, mode), 26);
        Var T(randn({3, 4, 4, 4}, 27));
        auto res = check_gradients(to_string(mode), {T, b.p.attn.q, b.p.frame_embed}, [&](const std::vector<Var>& in) {
            TemporalParams q = b.p;
            q.attn.q = in[1];
            q.frame_embed = in[2];
            Var out = temporal_attention(in[0], q, b.cfg);
            return sum(mul(out, out));
        });
        EXPECT_TRUE(res.passed) << to_string(mode) << " max rel err " << res.max_rel_error;
    }
}
