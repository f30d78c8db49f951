#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "udcvr/tensor.hpp"

namespace udcvr::metrics {

/// PSNR values at or above this are reported as this value (identical images give +inf).
inline constexpr double kPsnrCap = 99.0;

inline void require_same_shape(const char* what, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ContractError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                            to_string(b.shape()));
}

inline double mse(const Tensor& a, const Tensor& b) {
    require_same_shape("mse", a, b);
    if (a.size() == 0) throw ContractError("mse: empty images");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s / double(a.size());
}

/// 10·log10(1/MSE) for images in [0,1]; +inf when the images are identical.
inline double psnr(const Tensor& a, const Tensor& b) {
    const double m = mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return -10.0 * std::log10(m);
}

inline double capped(double psnr_db) { return std::min(psnr_db, kPsnrCap); }

struct SsimOptions {
    std::size_t window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double range = 1.0;
};

namespace detail {

inline std::vector<double> gaussian_window(std::size_t n, double sigma) {
    std::vector<double> g(n);
    const double c = double(n - 1) / 2.0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += g[i] = std::exp(-(double(i) - c) * (double(i) - c) / (2 * sigma * sigma));
    for (auto& v : g) v /= total;
    return g;
}

// Separable "valid" filtering of one H×W plane.
inline std::vector<double> filter_valid(const double* x, std::size_t H, std::size_t W, const std::vector<double>& g) {
    const std::size_t n = g.size(), Ho = H - n + 1, Wo = W - n + 1;
    std::vector<double> rows(H * Wo, 0.0), out(Ho * Wo, 0.0);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xo = 0; xo < Wo; ++xo) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += g[k] * x[y * W + xo + k];
            rows[y * Wo + xo] = s;
        }
    for (std::size_t yo = 0; yo < Ho; ++yo)
        for (std::size_t xo = 0; xo < Wo; ++xo) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += g[k] * rows[(yo + k) * Wo + xo];
            out[yo * Wo + xo] = s;
        }
    return out;
}

}  // namespace detail

/// Mean SSIM over C×H×W images: Gaussian-weighted local statistics over valid window
/// positions, averaged per channel, then over channels.
inline double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opt = {}) {
    require_same_shape("ssim", a, b);
    if (a.ndim() != 3) throw ContractError("ssim: expected C×H×W images, got " + to_string(a.shape()));
    const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2), n = opt.window;
    if (H < n || W < n)
        throw ContractError("ssim: image " + std::to_string(H) + "x" + std::to_string(W) + " is smaller than the " +
                            std::to_string(n) + "x" + std::to_string(n) + " window");
    const auto g = detail::gaussian_window(n, opt.sigma);
    const double c1 = (opt.k1 * opt.range) * (opt.k1 * opt.range);
    const double c2 = (opt.k2 * opt.range) * (opt.k2 * opt.range);
    const std::size_t P = H * W;
    std::vector<double> aa(P), bb(P), ab(P);
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
        const double* pa = a.vec().data() + c * P;
        const double* pb = b.vec().data() + c * P;
        for (std::size_t i = 0; i < P; ++i) {
            aa[i] = pa[i] * pa[i];
            bb[i] = pb[i] * pb[i];
            ab[i] = pa[i] * pb[i];
        }
        const auto mu_a = detail::filter_valid(pa, H, W, g), mu_b = detail::filter_valid(pb, H, W, g);
        const auto e_aa = detail::filter_valid(aa.data(), H, W, g), e_bb = detail::filter_valid(bb.data(), H, W, g);
        const auto e_ab = detail::filter_valid(ab.data(), H, W, g);
        double s = 0.0;
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            const double ma = mu_a[i], mb = mu_b[i];
            const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
            s += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += s / double(mu_a.size());
    }
    return total / double(C);
}

struct FrameMetrics {
    std::size_t frame = 0;
    double psnr_db = 0.0;  // capped
    double ssim = 0.0;
};

struct MetricReport {
    std::vector<FrameMetrics> per_frame;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;

    std::string csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "frame,psnr_db,ssim\n";
        for (const auto& f : per_frame) os << f.frame << ',' << f.psnr_db << ',' << f.ssim << '\n';
        os << "mean," << mean_psnr << ',' << mean_ssim << '\n';
        return os.str();
    }

    std::string table() const {
        std::string out = "frame   PSNR (dB)     SSIM\n";
        char line[96];
        for (const auto& f : per_frame) {
            std::snprintf(line, sizeof line, "%5zu  %10.4f  %7.5f\n", f.frame, f.psnr_db, f.ssim);
            out += line;
        }
        std::snprintf(line, sizeof line, " mean  %10.4f  %7.5f\n", mean_psnr, mean_ssim);
        return out + line;
    }
};

/// Per-frame PSNR/SSIM of `pred` against `gt`, with arithmetic means over frames.
inline MetricReport evaluate(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt) {
    if (pred.size() != gt.size())
        throw ContractError("evaluate: " + std::to_string(pred.size()) + " predicted frames vs " +
                            std::to_string(gt.size()) + " ground-truth frames");
    if (pred.empty()) throw ContractError("evaluate: no frames");
    MetricReport r;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        FrameMetrics f{i, capped(psnr(pred[i], gt[i])), ssim(pred[i], gt[i])};
        r.mean_psnr += f.psnr_db;
        r.mean_ssim += f.ssim;
        r.per_frame.push_back(f);
    }
    r.mean_psnr /= double(pred.size());
    r.mean_ssim /= double(pred.size());
    return r;
}

}  // namespace udcvr::metrics
