#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "udcvr/degradation.hpp"

namespace udcvr {

struct SyntheticOptions {
    std::size_t frames = 5;
    std::size_t height = 64;
    std::size_t width = 64;
    int dx = 1;  // pixels of camera motion per frame
    int dy = 1;
    std::uint64_t seed = 0;
};

/// Clean RGB sequence of a textured scene under constant translation: a colour gradient,
/// a few oriented gratings and random rectangles, kept inside [0.05, 0.95].
inline FrameSequence synthetic_sequence(const SyntheticOptions& o) {
    if (o.frames == 0 || o.height == 0 || o.width == 0) throw ConfigError("synthetic sequence must be non-empty");
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t span = o.frames - 1;
    const std::size_t CH = o.height + span * std::size_t(std::abs(o.dy));
    const std::size_t CW = o.width + span * std::size_t(std::abs(o.dx));

    Tensor canvas({3, CH, CW});
    double base[3], grad_y[3], grad_x[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = 0.3 + 0.4 * u(rng);
        grad_y[c] = 0.3 * (u(rng) - 0.5);
        grad_x[c] = 0.3 * (u(rng) - 0.5);
    }
    struct Grating {
        double fy, fx, phase, amp[3];
    };
    std::vector<Grating> gratings(3);
    for (auto& g : gratings) {
        const double angle = std::numbers::pi * u(rng), freq = 0.15 + 0.5 * u(rng);
        g = {freq * std::sin(angle), freq * std::cos(angle), 2 * std::numbers::pi * u(rng), {}};
        for (double& a : g.amp) a = 0.12 * u(rng);
    }
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < CH; ++y)
            for (std::size_t x = 0; x < CW; ++x) {
                double v = base[c] + grad_y[c] * double(y) / double(CH) + grad_x[c] * double(x) / double(CW);
                for (const auto& g : gratings) v += g.amp[c] * std::sin(g.fy * double(y) + g.fx * double(x) + g.phase);
                canvas.at(c, y, x) = v;
            }
    for (int r = 0; r < 6; ++r) {
        const auto h = std::size_t(3 + u(rng) * double(CH) / 4), w = std::size_t(3 + u(rng) * double(CW) / 4);
        const auto top = std::size_t(u(rng) * double(CH - std::min(h, CH))), left = std::size_t(u(rng) * double(CW - std::min(w, CW)));
        double colour[3];
        for (double& col : colour) col = u(rng);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = top; y < std::min(CH, top + h); ++y)
                for (std::size_t x = left; x < std::min(CW, left + w); ++x) canvas.at(c, y, x) = 0.5 * canvas.at(c, y, x) + 0.5 * colour[c];
    }
    for (auto& v : canvas.vec()) v = std::clamp(v, 0.05, 0.95);

    FrameSequence out;
    for (std::size_t k = 0; k < o.frames; ++k) {
        const std::size_t oy = o.dy >= 0 ? k * std::size_t(o.dy) : (span - k) * std::size_t(-o.dy);
        const std::size_t ox = o.dx >= 0 ? k * std::size_t(o.dx) : (span - k) * std::size_t(-o.dx);
        Tensor f({3, o.height, o.width});
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < o.height; ++y)
                for (std::size_t x = 0; x < o.width; ++x) f.at(c, y, x) = canvas.at(c, oy + y, ox + x);
        out.push_back(std::move(f));
    }
    return out;
}

/// Degradation used by the overfit and ablation experiments: banded TOLED-like PSF,
/// attenuation 0.7 and the default read/shot noise.
inline DegradationParams toled_like(std::uint64_t seed) {
    DegradationParams p;
    p.psf = make_psf(PsfSpec::toled());
    p.gamma = 0.7;
    p.seed = seed;
    return p;
}

}  // namespace udcvr
