#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "udcvr/kv.hpp"
#include "udcvr/tensor.hpp"

namespace udcvr {

/// Ordered frames, each 3×H×W in [0,1]. The reference frame is the centre one.
using FrameSequence = std::vector<Tensor>;

// ---------------------------------------------------------------------------
// Point spread functions

enum class PsfKind { gaussian, toled_banded, poled_haze };

inline std::string to_string(PsfKind k) {
    switch (k) {
        case PsfKind::gaussian: return "gaussian";
        case PsfKind::toled_banded: return "toled_banded";
        case PsfKind::poled_haze: return "poled_haze";
    }
    return "?";
}

inline PsfKind parse_psf_kind(const std::string& s) {
    if (s == "gaussian") return PsfKind::gaussian;
    if (s == "toled" || s == "toled_banded") return PsfKind::toled_banded;
    if (s == "poled" || s == "poled_haze") return PsfKind::poled_haze;
    throw ConfigError("unknown PSF kind '" + s + "' (expected gaussian, toled or poled)");
}

struct PsfSpec {
    PsfKind kind = PsfKind::gaussian;
    std::size_t size = 5;
    double sigma = 1.0;
    std::size_t band_period = 3;   // toled only
    double band_amplitude = 0.5;   // toled only, in [0,1]
    double haze_weight = 0.3;      // poled only, in [0,1]

    // Kernels that reproduce the two display families at desk scale.
    static PsfSpec toled() { return {PsfKind::toled_banded, 9, 2.0, 3, 0.6, 0.0}; }
    static PsfSpec poled() { return {PsfKind::poled_haze, 11, 0.8, 3, 0.0, 0.3}; }
    static PsfSpec delta() { return {PsfKind::gaussian, 1, 1.0, 3, 0.0, 0.0}; }

    void validate() const {
        if (size % 2 == 0) throw ConfigError("PSF size must be odd, got " + std::to_string(size));
        if (!(sigma > 0.0)) throw ConfigError("PSF sigma must be positive");
        if (kind == PsfKind::toled_banded) {
            if (band_period == 0) throw ConfigError("toled band period must be positive");
            if (band_amplitude < 0.0 || band_amplitude > 1.0) throw ConfigError("toled band amplitude must be in [0,1]");
        }
        if (kind == PsfKind::poled_haze && (haze_weight < 0.0 || haze_weight > 1.0))
            throw ConfigError("poled haze weight must be in [0,1]");
    }
};

namespace detail {

inline Tensor normalized(Tensor k) {
    const double s = k.sum();
    if (!(s > 0.0)) throw ConfigError("PSF has no positive mass");
    for (auto& v : k.vec()) v /= s;
    return k;
}

inline Tensor gaussian_kernel(std::size_t size, double sigma) {
    Tensor k({size, size});
    const auto c = static_cast<double>(size / 2);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double dy = double(y) - c, dx = double(x) - c;
            k.at(y, x) = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
    return normalized(std::move(k));
}

}  // namespace detail

/// Builds a nonnegative kernel that sums to one.
///  gaussian:     isotropic Gaussian.
///  toled_banded: Gaussian × (1 + a·cos(2πx/period)) along the horizontal axis, clipped at 0.
///  poled_haze:   (1 − h)·narrow Gaussian + h·uniform disk filling the support.
inline Tensor make_psf(const PsfSpec& spec) {
    spec.validate();
    const std::size_t n = spec.size;
    const auto c = static_cast<double>(n / 2);
    switch (spec.kind) {
        case PsfKind::gaussian: return detail::gaussian_kernel(n, spec.sigma);
        case PsfKind::toled_banded: {
            Tensor k = detail::gaussian_kernel(n, spec.sigma);
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x) {
                    const double phase = 2.0 * std::numbers::pi * (double(x) - c) / double(spec.band_period);
                    k.at(y, x) = std::max(0.0, k.at(y, x) * (1.0 + spec.band_amplitude * std::cos(phase)));
                }
            return detail::normalized(std::move(k));
        }
        case PsfKind::poled_haze: {
            Tensor narrow = detail::gaussian_kernel(n, spec.sigma);
            Tensor disk({n, n});
            const double radius = c + 0.5;
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x) {
                    const double dy = double(y) - c, dx = double(x) - c;
                    disk.at(y, x) = (dx * dx + dy * dy <= radius * radius) ? 1.0 : 0.0;
                }
            disk = detail::normalized(std::move(disk));
            Tensor k({n, n});
            for (std::size_t i = 0; i < k.size(); ++i)
                k[i] = (1.0 - spec.haze_weight) * narrow[i] + spec.haze_weight * disk[i];
            return detail::normalized(std::move(k));
        }
    }
    throw ConfigError("unhandled PSF kind");
}

// ---------------------------------------------------------------------------
// Degradation parameters

inline constexpr double kDefaultLambdaRead = 1e-4;
inline constexpr double kDefaultLambdaShot = 2e-4;

struct DegradationParams {
    Tensor psf = Tensor::ones({1, 1});
    double gamma = 1.0;
    double lambda_read = kDefaultLambdaRead;
    double lambda_shot = kDefaultLambdaShot;
    std::uint64_t seed = 0;

    void validate() const {
        if (psf.ndim() != 2 || psf.dim(0) % 2 == 0 || psf.dim(1) % 2 == 0)
            throw ConfigError("PSF must be a 2-D kernel with odd sides, got " + to_string(psf.shape()));
        for (double v : psf.data())
            if (v < 0.0 || !std::isfinite(v)) throw ConfigError("PSF entries must be finite and nonnegative");
        if (std::abs(psf.sum() - 1.0) > 1e-9) throw ConfigError("PSF must sum to 1");
        if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
        if (lambda_read < 0.0 || lambda_shot < 0.0) throw ConfigError("noise parameters must be nonnegative");
    }

    KeyValues to_kv() const {
        KeyValues kv;
        kv.set("gamma", gamma);
        kv.set("lambda_read", lambda_read);
        kv.set("lambda_shot", lambda_shot);
        kv.set("seed", seed);
        kv.set("psf_rows", std::uint64_t(psf.dim(0)));
        kv.set("psf_cols", std::uint64_t(psf.dim(1)));
        std::string values;
        for (std::size_t i = 0; i < psf.size(); ++i) values += (i ? "," : "") + KeyValues::format(psf[i]);
        kv.set("psf", values);
        return kv;
    }

    static DegradationParams from_kv(const KeyValues& kv) {
        DegradationParams p;
        p.gamma = kv.get_double("gamma");
        p.lambda_read = kv.get_double("lambda_read");
        p.lambda_shot = kv.get_double("lambda_shot");
        p.seed = kv.get_u64("seed");
        const std::size_t rows = kv.get_u64("psf_rows"), cols = kv.get_u64("psf_cols");
        p.psf = Tensor({rows, cols}, kv.get_doubles("psf"));
        p.validate();
        return p;
    }
};

// ---------------------------------------------------------------------------
// Noise and degradation

/// Heteroscedastic read-shot noise: one draw from N(0, λ_read + λ_shot·x).
template <class Rng>
double sample_noise(double x, double lambda_read, double lambda_shot, Rng& rng) {
    if (lambda_read < 0.0 || lambda_shot < 0.0) throw ConfigError("noise parameters must be nonnegative");
    const double variance = lambda_read + lambda_shot * x;
    if (variance <= 0.0) return 0.0;
    std::normal_distribution<double> dist(0.0, std::sqrt(variance));
    return dist(rng);
}

/// True convolution of each channel of x[C×H×W] with `kernel` (kernel flipped relative to
/// conv2d's cross-correlation), replicate padding at the borders.
inline Tensor convolve_replicate(const Tensor& x, const Tensor& kernel) {
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
    const auto cy = static_cast<std::ptrdiff_t>(kh / 2), cx = static_cast<std::ptrdiff_t>(kw / 2);
    auto clampi = [](std::ptrdiff_t v, std::size_t n) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, std::ptrdiff_t(n) - 1));
    };
    Tensor out(x.shape());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
                double s = 0.0;
                for (std::size_t u = 0; u < kh; ++u) {
                    const std::size_t sy = clampi(std::ptrdiff_t(y) - (std::ptrdiff_t(u) - cy), H);
                    for (std::size_t v = 0; v < kw; ++v) {
                        const std::size_t sx = clampi(std::ptrdiff_t(xx) - (std::ptrdiff_t(v) - cx), W);
                        s += kernel.at(u, v) * x.at(c, sy, sx);
                    }
                }
                out.at(c, y, xx) = s;
            }
    return out;
}

/// y = clamp((γ·x) ⊛ k + n, 0, 1), with n drawn per pixel and channel from the read-shot model
/// evaluated at the noiseless degraded value.
template <class Rng>
Tensor degrade_frame(const Tensor& x, const DegradationParams& p, Rng& rng) {
    p.validate();
    if (x.ndim() != 3) throw ShapeError("degrade_frame: expected C×H×W frame, got " + to_string(x.shape()));
    if (p.psf.dim(0) > x.dim(1) || p.psf.dim(1) > x.dim(2))
        throw ConfigError("PSF " + to_string(p.psf.shape()) + " is larger than frame " + to_string(x.shape()));
    for (double v : x.data())
        if (!(v >= 0.0 && v <= 1.0)) throw ContractError("degrade_frame: input values must lie in [0,1]");

    Tensor attenuated = x;
    for (auto& v : attenuated.vec()) v *= p.gamma;
    Tensor y = convolve_replicate(attenuated, p.psf);
    const bool noisy = p.lambda_read > 0.0 || p.lambda_shot > 0.0;
    for (auto& v : y.vec()) {
        if (noisy) v += sample_noise(std::clamp(v, 0.0, 1.0), p.lambda_read, p.lambda_shot, rng);
        v = std::clamp(v, 0.0, 1.0);
    }
    return y;
}

/// Per-frame noise stream: seeded with seed XOR frame index.
inline std::mt19937_64 frame_rng(std::uint64_t seed, std::size_t frame_index) {
    return std::mt19937_64(seed ^ static_cast<std::uint64_t>(frame_index));
}

/// Degrades every frame with the same γ and PSF; noise is resampled per frame.
inline FrameSequence degrade_sequence(const FrameSequence& frames, const DegradationParams& p) {
    if (frames.empty()) throw ContractError("degrade_sequence: empty sequence");
    for (const auto& f : frames)
        if (f.shape() != frames.front().shape())
            throw ContractError("degrade_sequence: frames differ in shape (" + to_string(f.shape()) + " vs " +
                                to_string(frames.front().shape()) + ")");
    FrameSequence out;
    out.reserve(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) {
        auto rng = frame_rng(p.seed, i);
        out.push_back(degrade_frame(frames[i], p, rng));
    }
    return out;
}

}  // namespace udcvr
