#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "udcvr/metrics.hpp"

using namespace udcvr;
using namespace udcvr::metrics;

namespace {

Tensor uniform(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    return Tensor::uniform(std::move(s), rng, lo, hi);
}

// Direct 2-D evaluation of mean SSIM with an explicit 11×11 Gaussian kernel, in long double.
double brute_ssim(const Tensor& a, const Tensor& b) {
    const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2), n = 11;
    long double w[11][11], total = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const long double di = (long double)i - 5, dj = (long double)j - 5;
            total += w[i][j] = std::exp(-(di * di + dj * dj) / (2 * 1.5L * 1.5L));
        }
    const long double c1 = 1e-4L, c2 = 9e-4L;
    long double sum = 0;
    for (std::size_t c = 0; c < C; ++c) {
        long double ch = 0;
        for (std::size_t y = 0; y + n <= H; ++y)
            for (std::size_t x = 0; x + n <= W; ++x) {
                long double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const long double k = w[i][j] / total;
                        const long double va = a.at(c, y + i, x + j), vb = b.at(c, y + i, x + j);
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                ch += ((2 * ma * mb + c1) * (2 * (sab - ma * mb) + c2)) /
                      ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
            }
        sum += ch / (long double)((H - n + 1) * (W - n + 1));
    }
    return double(sum / C);
}

}  // namespace

TEST(Psnr, UniformTenthDifferenceIsTwentyDecibels) {
    Tensor a = uniform({3, 8, 8}, 1, 0.0, 0.9);
    Tensor b = a;
    for (auto& v : b.vec()) v += 0.1;
    EXPECT_NEAR(psnr(a, b), 20.0, 1e-6);
    EXPECT_NEAR(psnr(b, a), 20.0, 1e-6);
}

TEST(Psnr, IdenticalImagesGiveCappedSentinel) {
    Tensor a = uniform({3, 4, 4}, 2);
    EXPECT_TRUE(std::isinf(psnr(a, a)));
    EXPECT_EQ(capped(psnr(a, a)), kPsnrCap);
}

TEST(Psnr, MatchesLoopMseOracle) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Tensor a = uniform({3, 17, 23}, 10 + seed), b = uniform({3, 17, 23}, 20 + seed);
        const double expected = -10.0 * std::log10(oracle::loop_mse(a, b));
        EXPECT_NEAR(psnr(a, b), expected, 1e-10);
        EXPECT_EQ(psnr(a, b), psnr(b, a));
    }
}

TEST(Psnr, DecreasesWithNoiseAmplitude) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Tensor a = uniform({3, 16, 16}, 30 + seed, 0.3, 0.7);
        std::mt19937_64 rng(40 + seed);
        Tensor n = Tensor::randn({3, 16, 16}, rng);
        double last = std::numeric_limits<double>::infinity();
        for (double sigma : {0.005, 0.01, 0.02, 0.04, 0.08}) {
            Tensor b = a;
            for (std::size_t i = 0; i < b.size(); ++i) b[i] += sigma * n[i];
            const double p = psnr(a, b);
            EXPECT_LT(p, last);
            last = p;
        }
    }
}

TEST(Psnr, InvariantToCommonShift) {
    Tensor a = uniform({3, 9, 9}, 50, 0.1, 0.8), b = uniform({3, 9, 9}, 51, 0.1, 0.8);
    Tensor as = a, bs = b;
    for (auto& v : as.vec()) v += 0.15;
    for (auto& v : bs.vec()) v += 0.15;
    EXPECT_NEAR(psnr(a, b), psnr(as, bs), 1e-9);
}

TEST(Psnr, ShapeMismatchIsContractError) {
    EXPECT_THROW(psnr(Tensor::zeros({3, 4, 4}), Tensor::zeros({3, 4, 5})), ContractError);
}

TEST(Ssim, IdenticalImagesGiveExactlyOne) {
    Tensor a = uniform({3, 20, 15}, 60);
    EXPECT_EQ(ssim(a, a), 1.0);
}

TEST(Ssim, ConstantBlackVersusWhiteMatchesClosedForm) {
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    // μa = 0, μb = 1, both variances and the covariance are 0.
    const double expected = (c1 * c2) / ((1.0 + c1) * c2);
    EXPECT_NEAR(ssim(Tensor::zeros({3, 12, 12}), Tensor::ones({3, 12, 12})), expected, 1e-15);
}

TEST(Ssim, SymmetricOnRandomPairs) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Tensor a = uniform({3, 16, 13}, 70 + seed), b = uniform({3, 16, 13}, 80 + seed);
        EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
    }
}

TEST(Ssim, MatchesDirectWindowEvaluation) {
    Tensor a = uniform({3, 14, 16}, 90);
    Tensor b = a;
    std::mt19937_64 rng(91);
    std::normal_distribution<double> nd(0.0, 0.05);
    for (auto& v : b.vec()) v += nd(rng);
    const double s = ssim(a, b);
    EXPECT_NEAR(s, brute_ssim(a, b), 1e-10);
    EXPECT_GT(s, -1.0);
    EXPECT_LT(s, 1.0);
}

TEST(Ssim, ImageSmallerThanWindowIsContractError) {
    EXPECT_THROW(ssim(Tensor::zeros({3, 10, 20}), Tensor::zeros({3, 10, 20})), ContractError);
}

TEST(Report, MeansAreArithmeticOverFrames) {
    std::vector<Tensor> gt{uniform({3, 12, 12}, 100, 0.0, 0.9), uniform({3, 12, 12}, 101, 0.0, 0.9)};
    std::vector<Tensor> pred = gt;
    for (auto& v : pred[1].vec()) v += 0.1;
    auto r = evaluate(pred, gt);
    ASSERT_EQ(r.per_frame.size(), 2u);
    EXPECT_EQ(r.per_frame[0].psnr_db, kPsnrCap);
    EXPECT_EQ(r.per_frame[0].ssim, 1.0);
    EXPECT_NEAR(r.per_frame[1].psnr_db, 20.0, 1e-6);
    EXPECT_NEAR(r.mean_psnr, (kPsnrCap + r.per_frame[1].psnr_db) / 2, 1e-12);
    EXPECT_NEAR(r.mean_ssim, (1.0 + r.per_frame[1].ssim) / 2, 1e-12);
    EXPECT_NE(r.csv().find("frame,psnr_db,ssim"), std::string::npos);
    EXPECT_NE(r.table().find("mean"), std::string::npos);
    EXPECT_THROW(evaluate({gt[0]}, gt), ContractError);
}
