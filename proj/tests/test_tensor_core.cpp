#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "udcvr/gradcheck.hpp"
#include "udcvr/ops.hpp"
#include "udcvr/serialize.hpp"

using namespace udcvr;

namespace {

Var constant(Shape s, std::vector<double> d) { return Var(Tensor(std::move(s), std::move(d))); }

Var random_var(Shape s, std::mt19937_64& rng, double stddev = 1.0) { return Var(Tensor::randn(std::move(s), rng, stddev)); }

// Weighted sum with fixed random weights keeps every output entry in the loss.
Var probe_loss(const Var& out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Var w(Tensor::randn(out.shape(), rng));
    return sum(mul(out, w));
}

}  // namespace

TEST(Matmul, IdentityAndHandComputed) {
    auto c = matmul(Var(Tensor::identity(2)), constant({2, 2}, {3, 4, 5, 6}));
    EXPECT_EQ(c.value().vec(), (std::vector<double>{3, 4, 5, 6}));
    auto d = matmul(constant({1, 2}, {1, 2}), constant({2, 1}, {3, 4}));
    EXPECT_EQ(d.value().vec(), std::vector<double>{11});
}

TEST(Matmul, MatchesTripleLoop) {
    std::mt19937_64 rng(7);
    auto a = Tensor::randn({3, 4}, rng), b = Tensor::randn({4, 2}, rng);
    auto c = matmul(Var(a), Var(b));
    EXPECT_LT(max_abs_diff(c.value(), oracle::triple_loop_matmul(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    try {
        matmul(Var(Tensor({2, 3})), Var(Tensor({4, 5})));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
        EXPECT_NE(msg.find("[4x5]"), std::string::npos);
    }
}

TEST(Softmax, Examples) {
    auto u = softmax(constant({3}, {0, 0, 0}));
    for (double v : u.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    EXPECT_EQ(softmax(constant({1}, {5})).value()[0], 1.0);

    // Extended-precision oracle: softmax([1000, 0]) = [1/(1+e^-1000), e^-1000/(1+e^-1000)].
    auto big = softmax(constant({2}, {1000, 0}));
    const long double tail = std::exp(-1000.0L);
    EXPECT_NEAR(big.value()[0], double(1.0L / (1.0L + tail)), 1e-15);
    EXPECT_NEAR(big.value()[1], double(tail / (1.0L + tail)), 1e-15);
}

TEST(Softmax, RowsAreStochastic) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto y = softmax(random_var({6, 9}, rng, 5.0));
        for (std::size_t r = 0; r < 6; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < 9; ++j) {
                const double v = y.value()[r * 9 + j];
                EXPECT_GE(v, 0.0);
                EXPECT_LE(v, 1.0);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(LayerNorm, Examples) {
    Var ones_g(Tensor::ones({4})), zeros_b(Tensor::zeros({4}));
    auto flat = layer_norm(constant({1, 4}, {2, 2, 2, 2}), ones_g, zeros_b);
    for (double v : flat.value().data()) EXPECT_EQ(v, 0.0);

    auto collapsed = layer_norm(constant({1, 4}, {1, -3, 8, 0.5}), Var(Tensor::zeros({4})), constant({4}, {7, 7, 7, 7}));
    for (double v : collapsed.value().data()) EXPECT_EQ(v, 7.0);

    std::mt19937_64 rng(11);
    // Output variance is var/(var + eps); a wide row keeps that within 1e-6 of 1.
    auto y = layer_norm(random_var({1, 64}, rng, 10.0), Var(Tensor::ones({64})), Var(Tensor::zeros({64})));
    const double mu = y.value().mean();
    double var = 0.0;
    for (double v : y.value().data()) var += (v - mu) * (v - mu);
    var /= 64.0;
    EXPECT_LT(std::abs(mu), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-6);
}

TEST(Gelu, Examples) {
    EXPECT_EQ(gelu(constant({1}, {0})).value()[0], 0.0);
    EXPECT_NEAR(gelu(constant({1}, {30})).value()[0], 30.0, 1e-12);
    EXPECT_NEAR(gelu(constant({1}, {-30})).value()[0], 0.0, 1e-12);
    // x·Φ(x) with Φ from quadrature of the normal density.
    const double expected = 1.0 * oracle::normal_cdf_quadrature(1.0);
    EXPECT_NEAR(expected, 0.841345, 1e-5);
    EXPECT_NEAR(gelu(constant({1}, {1})).value()[0], expected, 1e-10);
}

TEST(Conv2d, IdentityKernel) {
    std::mt19937_64 rng(5);
    auto x = random_var({1, 5, 6}, rng);
    auto y = conv2d(x, Var(Tensor::ones({1, 1, 1, 1})), Var(Tensor::zeros({1})));
    EXPECT_EQ(y.value(), x.value());
}

TEST(Conv2d, AllOnesCountsOverlap) {
    auto y = conv2d(Var(Tensor::ones({1, 5, 5})), Var(Tensor::ones({1, 1, 3, 3})), Var(Tensor::zeros({1})),
                    {.stride = 1, .padding = 1});
    EXPECT_EQ(y.value().at(0, 2, 2), 9.0);
    EXPECT_EQ(y.value().at(0, 0, 0), 4.0);
    EXPECT_EQ(y.value().at(0, 4, 4), 4.0);
    EXPECT_EQ(y.value().at(0, 0, 2), 6.0);
}

TEST(Conv2d, MatchesNaiveLoopOracle) {
    std::mt19937_64 rng(9);
    auto x = Tensor::randn({2, 8, 8}, rng), w = Tensor::randn({3, 2, 3, 3}, rng), b = Tensor::randn({3}, rng);
    auto y = conv2d(Var(x), Var(w), Var(b), {.stride = 1, .padding = 1});
    EXPECT_LT(max_abs_diff(y.value(), oracle::naive_conv2d(x, w, b, 1, 1)), 1e-12);
}

TEST(Conv2d, MatchesOracleAcrossShapes) {
    std::mt19937_64 rng(13);
    for (std::size_t ci : {1, 2, 4})
        for (std::size_t co : {1, 3, 4})
            for (std::size_t hw : {3, 7, 16})
                for (std::size_t k : {1, 3})
                    for (std::size_t stride : {1, 2})
                        for (std::size_t pad : {0, 1}) {
                            if (hw + 2 * pad < k) continue;
                            auto x = Tensor::randn({ci, hw, hw}, rng), w = Tensor::randn({co, ci, k, k}, rng),
                                 b = Tensor::randn({co}, rng);
                            auto y = conv2d(Var(x), Var(w), Var(b), {.stride = stride, .padding = pad});
                            EXPECT_LT(max_abs_diff(y.value(), oracle::naive_conv2d(x, w, b, stride, pad)), 1e-12);
                        }
}

TEST(Conv2d, KernelLargerThanInputIsConfigError) {
    EXPECT_THROW(conv2d(Var(Tensor({1, 2, 2})), Var(Tensor({1, 1, 5, 5})), Var(Tensor({1}))), ConfigError);
    EXPECT_THROW(conv2d(Var(Tensor({2, 4, 4})), Var(Tensor({1, 1, 3, 3})), Var(Tensor({1}))), ShapeError);
}

TEST(PixelShuffle, Examples) {
    std::mt19937_64 rng(2);
    auto x = random_var({4, 3, 3}, rng);
    EXPECT_EQ(pixel_shuffle(x, 1).value(), x.value());

    auto y = pixel_shuffle(constant({4, 1, 1}, {1, 2, 3, 4}), 2);
    EXPECT_EQ(y.shape(), (Shape{1, 2, 2}));
    EXPECT_EQ(y.value().vec(), (std::vector<double>{1, 2, 3, 4}));
    EXPECT_THROW(pixel_shuffle(random_var({6, 2, 2}, rng), 2), ShapeError);
}

TEST(PixelShuffle, RoundTripAndPermutation) {
    std::mt19937_64 rng(4);
    for (std::size_t r : {1, 2, 3}) {
        auto x = random_var({2 * r * r, 5, 4}, rng);
        auto y = pixel_shuffle(x, r);
        EXPECT_EQ(y.shape(), (Shape{2, 5 * r, 4 * r}));
        EXPECT_EQ(pixel_unshuffle(y, r).value(), x.value());
        auto a = x.value().vec(), b = y.value().vec();
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        EXPECT_EQ(a, b);
    }
}

TEST(Backward, AnalyticCases) {
    std::mt19937_64 rng(1);
    Var x(Tensor::randn({3, 4}, rng), true);
    {
        Tape tape;
        TapeScope scope(tape);
        tape.backward(sum(x));
    }
    for (double g : x.grad().data()) EXPECT_EQ(g, 1.0);

    x.zero_grad();
    {
        Tape tape;
        TapeScope scope(tape);
        tape.backward(scale(sum(mul(x, x)), 0.5));
    }
    EXPECT_LT(max_abs_diff(x.grad(), x.value()), 1e-15);
}

TEST(Backward, ContractErrors) {
    Var x(Tensor::ones({2, 2}), true);
    Tape tape;
    TapeScope scope(tape);
    auto y = scale(x, 2.0);
    EXPECT_THROW(tape.backward(y), ContractError);
    Tape other;
    auto s = sum(y);
    EXPECT_THROW(other.backward(s), ContractError);
}

TEST(Backward, AccumulatesAcrossConsumersInReverseOrder) {
    Var x(Tensor({2}, {1.5, -2.0}), true);
    Tape tape;
    TapeScope scope(tape);
    // x feeds three ops: 2x, 3x, x·x.
    auto a = scale(x, 2.0), b = scale(x, 3.0), c = mul(x, x);
    auto loss = sum(add(add(a, b), c));
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 5.0 + 2 * 1.5);
    EXPECT_DOUBLE_EQ(x.grad()[1], 5.0 - 2 * 2.0);
    const auto& order = tape.last_backward_order();
    ASSERT_EQ(order.size(), tape.size());
    for (std::size_t i = 0; i < order.size(); ++i) EXPECT_EQ(order[i], tape.size() - 1 - i);
}

TEST(Backward, NonFiniteResultIsError) {
    EXPECT_THROW(scale(Var(Tensor::ones({2})) , 1e308 * 10), NumericError);
    EXPECT_THROW(scale(scale(Var(Tensor({1}, 1e200)), 1e200), 1.0), NumericError);
}

TEST(Backward, NoRecordingWithoutTape) {
    Var x(Tensor::ones({2}), true);
    auto y = scale(x, 2.0);
    EXPECT_FALSE(y.requires_grad());
}

// Finite-difference checks of every differentiable op over ten seeds.
class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, MatchFiniteDifferences) {
    const auto seed = static_cast<std::uint64_t>(GetParam());
    std::mt19937_64 rng(seed);
    auto r = [&](Shape s, double sd = 1.0) { return random_var(std::move(s), rng, sd); };
    std::vector<GradCheckResult> results;
    results.push_back(check_gradients("matmul", {r({3, 4}), r({4, 2})},
                                      [&](auto& in) { return probe_loss(matmul(in[0], in[1]), seed); }));
    results.push_back(check_gradients("bmm", {r({2, 3, 4}), r({2, 4, 5})},
                                      [&](auto& in) { return probe_loss(bmm(in[0], in[1]), seed); }));
    results.push_back(check_gradients("bmm_t", {r({2, 3, 4}), r({2, 5, 4})},
                                      [&](auto& in) { return probe_loss(bmm(in[0], in[1], true), seed); }));
    results.push_back(check_gradients("softmax", {r({3, 5}, 2.0)},
                                      [&](auto& in) { return probe_loss(softmax(in[0]), seed); }));
    results.push_back(check_gradients("layer_norm", {r({4, 6}, 2.0), r({6}), r({6})}, [&](auto& in) {
        return probe_loss(layer_norm(in[0], in[1], in[2]), seed);
    }));
    results.push_back(check_gradients("gelu", {r({10}, 2.0)}, [&](auto& in) { return probe_loss(gelu(in[0]), seed); }));
    results.push_back(
        check_gradients("sigmoid", {r({10}, 2.0)}, [&](auto& in) { return probe_loss(sigmoid(in[0]), seed); }));
    results.push_back(check_gradients("conv2d", {r({2, 6, 5}), r({3, 2, 3, 3}), r({3})}, [&](auto& in) {
        return probe_loss(conv2d(in[0], in[1], in[2], {.stride = 2, .padding = 1}), seed);
    }));
    results.push_back(check_gradients("pixel_shuffle", {r({8, 2, 3})},
                                      [&](auto& in) { return probe_loss(pixel_shuffle(in[0], 2), seed); }));
    results.push_back(check_gradients("add_trailing", {r({2, 3, 4}), r({3, 4})},
                                      [&](auto& in) { return probe_loss(add_trailing(in[0], in[1]), seed); }));
    results.push_back(check_gradients("elementwise", {r({5}), r({5})}, [&](auto& in) {
        return probe_loss(sub(mul(in[0], in[1]), add(in[0], scale(in[1], 0.3))), seed);
    }));
    results.push_back(check_gradients("channel_ops", {r({3, 4, 4}), r({3})}, [&](auto& in) {
        return probe_loss(channel_scale(in[0], sigmoid(global_avg_pool(in[0]))), seed);
    }));
    results.push_back(check_gradients("rearrange", {r({2, 5, 5})}, [&](auto& in) {
        auto p = reflect_pad2d(roll2d(in[0], 1, -2), 2, 3);
        return probe_loss(concat0({crop2d(permute(p, {0, 2, 1}), 4, 3), crop2d(slice0(in[0], 1, 2), 4, 3)}), seed);
    }));
    results.push_back(check_gradients("charbonnier", {r({3, 4})}, [&](auto& in) {
        std::mt19937_64 trng(seed + 1);
        return charbonnier(in[0], Tensor::randn({3, 4}, trng), 1e-3);
    }));
    for (const auto& res : results) {
        EXPECT_TRUE(res.passed) << res.name << " max rel err " << res.max_rel_error;
        EXPECT_GT(res.entries_checked, 0u);
    }
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, OpGradients, ::testing::Range(1, 11));

TEST(TensorFormat, HeaderLayoutAndRoundTrip) {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, -0.25});
    auto bytes = io::encode_tensor(t);
    ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 8 + 6 * 8);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "UDCT");
    EXPECT_EQ(bytes[4], 1);  // version, little-endian
    EXPECT_EQ(bytes[8], 2);  // ndim
    EXPECT_EQ(bytes[12], 2);
    EXPECT_EQ(bytes[16], 3);
    // 1.0 = 0x3FF0000000000000, little-endian
    EXPECT_EQ(bytes[20 + 7], 0x3F);
    EXPECT_EQ(bytes[20 + 6], 0xF0);
    EXPECT_EQ(io::decode_tensor(bytes), t);

    std::mt19937_64 rng(21);
    auto r = Tensor::randn({3, 1, 4, 2}, rng);
    EXPECT_EQ(io::decode_tensor(io::encode_tensor(r)), r);
}

TEST(TensorFormat, RejectsCorruptInput) {
    auto bytes = io::encode_tensor(Tensor({2}, {1, 2}));
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(io::decode_tensor(bad), DataError);
    bad = bytes;
    bad.pop_back();
    EXPECT_THROW(io::decode_tensor(bad), DataError);
    bad = bytes;
    bad.push_back(0);
    EXPECT_THROW(io::decode_tensor(bad), DataError);
}
