#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "udcvr/autograd.hpp"
#include "udcvr/tensor.hpp"

namespace udcvr {

namespace detail {

// Row-major C(MxN) = op(A) * op(B), optionally accumulating into C.
// op(A) is MxK; A is stored KxM when trans_a. op(B) is KxN; B is stored NxK when trans_b.
inline void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K, const double* A,
                 const double* B, double* C, bool accumulate) {
    if (!accumulate) std::fill(C, C + M * N, 0.0);
    if (!trans_a && !trans_b) {
        for (std::size_t i = 0; i < M; ++i) {
            double* c = C + i * N;
            for (std::size_t k = 0; k < K; ++k) {
                const double a = A[i * K + k];
                if (a == 0.0) continue;
                const double* b = B + k * N;
                for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
            }
        }
    } else if (!trans_a && trans_b) {
        for (std::size_t i = 0; i < M; ++i) {
            const double* a = A + i * K;
            for (std::size_t j = 0; j < N; ++j) {
                const double* b = B + j * K;
                double s = 0.0;
                for (std::size_t k = 0; k < K; ++k) s += a[k] * b[k];
                C[i * N + j] += s;
            }
        }
    } else if (trans_a && !trans_b) {
        for (std::size_t k = 0; k < K; ++k) {
            const double* b = B + k * N;
            for (std::size_t i = 0; i < M; ++i) {
                const double a = A[k * M + i];
                if (a == 0.0) continue;
                double* c = C + i * N;
                for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
            }
        }
    } else {
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = 0; j < N; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < K; ++k) s += A[k * M + i] * B[j * K + k];
                C[i * N + j] += s;
            }
    }
}

inline bool any_requires_grad(std::initializer_list<const Var*> inputs) {
    for (const Var* v : inputs)
        if (v->requires_grad()) return true;
    return false;
}

template <class Backward>
Var make_result(const char* op, Tensor out, bool needs_grad, Backward&& bw) {
    if (!out.all_finite()) throw NumericError(std::string(op) + " produced a non-finite value");
    Tape* tape = active_tape();
    if (!tape || !needs_grad) return Var(std::move(out), false);
    Var result(std::move(out), true);
    tape->record(op, result, std::forward<Backward>(bw));
    return result;
}

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

inline void require_ndim(const char* op, const Var& a, std::size_t n) {
    if (a.value().ndim() != n)
        throw ShapeError(std::string(op) + ": expected " + std::to_string(n) + "-d input, got " +
                         to_string(a.shape()));
}

using IndexMap = std::shared_ptr<const std::vector<std::size_t>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
    detail::require_same_shape("add", a, b);
    Tensor out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result("add", std::move(out), detail::any_requires_grad({&a, &b}),
                               [an, bn](const Tensor& g) {
                                   if (an->requires_grad) an->accumulate(g);
                                   if (bn->requires_grad) bn->accumulate(g);
                               });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_shape("sub", a, b);
    Tensor out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result("sub", std::move(out), detail::any_requires_grad({&a, &b}),
                               [an, bn](const Tensor& g) {
                                   if (an->requires_grad) an->accumulate(g);
                                   if (bn->requires_grad) {
                                       Tensor n = g;
                                       for (auto& v : n.vec()) v = -v;
                                       bn->accumulate(n);
                                   }
                               });
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same_shape("mul", a, b);
    Tensor out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result("mul", std::move(out), detail::any_requires_grad({&a, &b}),
                               [an, bn](const Tensor& g) {
                                   if (an->requires_grad) {
                                       Tensor ga = g;
                                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bn->value[i];
                                       an->accumulate(ga);
                                   }
                                   if (bn->requires_grad) {
                                       Tensor gb = g;
                                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= an->value[i];
                                       bn->accumulate(gb);
                                   }
                               });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.vec()) v *= s;
    auto an = a.node();
    return detail::make_result("scale", std::move(out), a.requires_grad(), [an, s](const Tensor& g) {
        Tensor ga = g;
        for (auto& v : ga.vec()) v *= s;
        an->accumulate(ga);
    });
}

/// x + b where b's shape is a suffix of x's shape (bias broadcast over leading axes).
inline Var add_trailing(const Var& x, const Var& b) {
    const Shape& xs = x.shape();
    const Shape& bs = b.shape();
    if (bs.size() > xs.size() || !std::equal(bs.rbegin(), bs.rend(), xs.rbegin()))
        throw ShapeError("add_trailing: bias shape " + to_string(bs) + " is not a suffix of " + to_string(xs));
    const std::size_t inner = b.size();
    const std::size_t outer = x.size() / inner;
    Tensor out = x.value();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += b.value()[i];
    auto xn = x.node(), bn = b.node();
    return detail::make_result("add_trailing", std::move(out), detail::any_requires_grad({&x, &b}),
                               [xn, bn, inner, outer](const Tensor& g) {
                                   if (xn->requires_grad) xn->accumulate(g);
                                   if (bn->requires_grad) {
                                       Tensor gb(bn->value.shape());
                                       for (std::size_t o = 0; o < outer; ++o)
                                           for (std::size_t i = 0; i < inner; ++i) gb[i] += g[o * inner + i];
                                       bn->accumulate(gb);
                                   }
                               });
}

inline Var gelu(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.vec()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
    auto xn = x.node();
    return detail::make_result("gelu", std::move(out), x.requires_grad(), [xn](const Tensor& g) {
        Tensor gx = g;
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const double v = xn->value[i];
            const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            gx[i] *= cdf + v * pdf;
        }
        xn->accumulate(gx);
    });
}

inline Var sigmoid(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.vec()) v = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    auto xn = x.node();
    auto y = std::make_shared<Tensor>(out);
    return detail::make_result("sigmoid", std::move(out), x.requires_grad(), [xn, y](const Tensor& g) {
        Tensor gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= (*y)[i] * (1.0 - (*y)[i]);
        xn->accumulate(gx);
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
    if (a.value().ndim() != 2 || b.value().ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    detail::gemm(false, false, m, n, k, a.value().data().data(), b.value().data().data(), out.data().data(), false);
    auto an = a.node(), bn = b.node();
    return detail::make_result("matmul", std::move(out), detail::any_requires_grad({&a, &b}),
                               [an, bn, m, k, n](const Tensor& g) {
                                   if (an->requires_grad) {
                                       Tensor ga({m, k});
                                       detail::gemm(false, true, m, k, n, g.data().data(),
                                                    bn->value.data().data(), ga.data().data(), false);
                                       an->accumulate(ga);
                                   }
                                   if (bn->requires_grad) {
                                       Tensor gb({k, n});
                                       detail::gemm(true, false, k, n, m, an->value.data().data(), g.data().data(),
                                                    gb.data().data(), false);
                                       bn->accumulate(gb);
                                   }
                               });
}

/// Batched product: a[B×m×k] · b[B×k×n], or a · bᵀ with b[B×n×k] when transpose_b.
inline Var bmm(const Var& a, const Var& b, bool transpose_b = false) {
    if (a.value().ndim() != 3 || b.value().ndim() != 3 || a.dim(0) != b.dim(0))
        throw ShapeError("bmm: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
    const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    if ((transpose_b ? b.dim(2) : b.dim(1)) != k)
        throw ShapeError("bmm: inner dimensions differ for " + to_string(a.shape()) + " and " + to_string(b.shape()));
    Tensor out({B, m, n});
    const double* A = a.value().data().data();
    const double* Bv = b.value().data().data();
    for (std::size_t i = 0; i < B; ++i)
        detail::gemm(false, transpose_b, m, n, k, A + i * m * k, Bv + i * k * n, out.data().data() + i * m * n,
                     false);
    auto an = a.node(), bn = b.node();
    return detail::make_result(
        "bmm", std::move(out), detail::any_requires_grad({&a, &b}), [an, bn, B, m, k, n, transpose_b](const Tensor& g) {
            const double* G = g.data().data();
            if (an->requires_grad) {
                Tensor ga({B, m, k});
                // dA = dC · op(B)ᵀ
                for (std::size_t i = 0; i < B; ++i)
                    detail::gemm(false, !transpose_b, m, k, n, G + i * m * n, bn->value.data().data() + i * k * n,
                                 ga.data().data() + i * m * k, false);
                an->accumulate(ga);
            }
            if (bn->requires_grad) {
                Tensor gb(bn->value.shape());
                for (std::size_t i = 0; i < B; ++i) {
                    if (transpose_b)  // dB[n×k] = dCᵀ · A
                        detail::gemm(true, false, n, k, m, G + i * m * n, an->value.data().data() + i * m * k,
                                     gb.data().data() + i * k * n, false);
                    else  // dB[k×n] = Aᵀ · dC
                        detail::gemm(true, false, k, n, m, an->value.data().data() + i * m * k, G + i * m * n,
                                     gb.data().data() + i * k * n, false);
                }
                bn->accumulate(gb);
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax over the last axis with max subtraction.
inline Var softmax(const Var& x) {
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.size() / n;
    Tensor out = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = out.data().data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += (row[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < n; ++j) row[j] /= s;
    }
    auto xn = x.node();
    auto y = std::make_shared<Tensor>(out);
    return detail::make_result("softmax", std::move(out), x.requires_grad(), [xn, y, n, rows](const Tensor& g) {
        Tensor gx(g.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = y->data().data() + r * n;
            const double* gr = g.data().data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] = yr[j] * (gr[j] - dot);
        }
        xn->accumulate(gx);
    });
}

inline constexpr double kLayerNormEps = 1e-5;

/// LayerNorm over the last axis followed by the per-channel affine map.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = kLayerNormEps) {
    const std::size_t C = x.shape().back();
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
        throw ShapeError("layer_norm: affine parameters must have shape [" + std::to_string(C) + "]");
    const std::size_t rows = x.size() / C;
    Tensor out(x.shape());
    auto xhat = std::make_shared<Tensor>(x.shape());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    const auto& xv = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data().data() + r * C;
        double mu = 0.0;
        for (std::size_t c = 0; c < C; ++c) mu += xr[c];
        mu /= double(C);
        double var = 0.0;
        for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= double(C);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t c = 0; c < C; ++c) {
            const double h = (xr[c] - mu) * rs;
            (*xhat)[r * C + c] = h;
            out[r * C + c] = h * gamma.value()[c] + beta.value()[c];
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_result(
        "layer_norm", std::move(out), detail::any_requires_grad({&x, &gamma, &beta}),
        [xn, gn, bn, xhat, rstd, C, rows](const Tensor& g) {
            if (gn->requires_grad || bn->requires_grad) {
                Tensor gg({C}), gb({C});
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < C; ++c) {
                        gg[c] += g[r * C + c] * (*xhat)[r * C + c];
                        gb[c] += g[r * C + c];
                    }
                if (gn->requires_grad) gn->accumulate(gg);
                if (bn->requires_grad) bn->accumulate(gb);
            }
            if (xn->requires_grad) {
                Tensor gx(xn->value.shape());
                std::vector<double> dh(C);
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t c = 0; c < C; ++c) {
                        dh[c] = g[r * C + c] * gn->value[c];
                        mean_dh += dh[c];
                        mean_dh_h += dh[c] * (*xhat)[r * C + c];
                    }
                    mean_dh /= double(C);
                    mean_dh_h /= double(C);
                    for (std::size_t c = 0; c < C; ++c)
                        gx[r * C + c] = (*rstd)[r] * (dh[c] - mean_dh - (*xhat)[r * C + c] * mean_dh_h);
                }
                xn->accumulate(gx);
            }
        });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

inline std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    if (in + 2 * padding < kernel)
        throw ConfigError("conv2d: kernel " + std::to_string(kernel) + " does not fit padded input " +
                          std::to_string(in + 2 * padding));
    return (in + 2 * padding - kernel) / stride + 1;
}

namespace detail {

// cols[(ci*kh + ky)*kw + kx][oy*Wo + ox]; zero padding.
inline void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
                   std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, double* cols) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
                double* row = cols + ((c * kh + ky) * kw + kx) * Ho * Wo;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        row[oy * Wo + ox] = (iy >= 0 && ix >= 0 && iy < std::ptrdiff_t(H) && ix < std::ptrdiff_t(W))
                                                ? x[(c * H + std::size_t(iy)) * W + std::size_t(ix)]
                                                : 0.0;
                    }
                }
            }
}

inline void col2im(const double* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
                   std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, double* x) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
                const double* row = cols + ((c * kh + ky) * kw + kx) * Ho * Wo;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                        x[(c * H + std::size_t(iy)) * W + std::size_t(ix)] += row[oy * Wo + ox];
                    }
                }
            }
}

}  // namespace detail

/// 2-D cross-correlation of one image x[C_in×H×W] with w[C_out×C_in×kh×kw] plus bias b[C_out].
/// Zero padding; output size floor((H + 2p − kh)/stride) + 1.
inline Var conv2d(const Var& x, const Var& w, const Var& b, Conv2dOptions opt = {}) {
    detail::require_ndim("conv2d input", x, 3);
    detail::require_ndim("conv2d weight", w, 4);
    const std::size_t Ci = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != Ci)
        throw ShapeError("conv2d: weight " + to_string(w.shape()) + " expects " + std::to_string(w.dim(1)) +
                         " input channels, input is " + to_string(x.shape()));
    if (b.shape() != Shape{Co}) throw ShapeError("conv2d: bias must have shape [" + std::to_string(Co) + "]");
    const std::size_t Ho = conv_output_size(H, kh, opt.stride, opt.padding);
    const std::size_t Wo = conv_output_size(W, kw, opt.stride, opt.padding);
    const std::size_t K = Ci * kh * kw, P = Ho * Wo;

    auto cols = std::make_shared<std::vector<double>>(K * P);
    detail::im2col(x.value().data().data(), Ci, H, W, kh, kw, opt.stride, opt.padding, Ho, Wo, cols->data());
    Tensor out({Co, Ho, Wo});
    detail::gemm(false, false, Co, P, K, w.value().data().data(), cols->data(), out.data().data(), false);
    for (std::size_t co = 0; co < Co; ++co)
        for (std::size_t p = 0; p < P; ++p) out[co * P + p] += b.value()[co];

    auto xn = x.node(), wn = w.node(), bn = b.node();
    return detail::make_result(
        "conv2d", std::move(out), detail::any_requires_grad({&x, &w, &b}),
        [=](const Tensor& g) {
            const double* G = g.data().data();
            if (wn->requires_grad) {
                Tensor gw(wn->value.shape());
                detail::gemm(false, true, Co, K, P, G, cols->data(), gw.data().data(), false);
                wn->accumulate(gw);
            }
            if (bn->requires_grad) {
                Tensor gb({Co});
                for (std::size_t co = 0; co < Co; ++co)
                    for (std::size_t p = 0; p < P; ++p) gb[co] += G[co * P + p];
                bn->accumulate(gb);
            }
            if (xn->requires_grad) {
                std::vector<double> gcols(K * P);
                detail::gemm(true, false, K, P, Co, wn->value.data().data(), G, gcols.data(), false);
                Tensor gx(xn->value.shape());
                detail::col2im(gcols.data(), Ci, H, W, kh, kw, opt.stride, opt.padding, Ho, Wo, gx.data().data());
                xn->accumulate(gx);
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions and channel operations

inline Var sum(const Var& x) {
    auto xn = x.node();
    return detail::make_result("sum", Tensor::scalar(x.value().sum()), x.requires_grad(), [xn](const Tensor& g) {
        xn->accumulate(Tensor(xn->value.shape(), g[0]));
    });
}

inline Var mean(const Var& x) {
    auto xn = x.node();
    const double n = double(x.size());
    return detail::make_result("mean", Tensor::scalar(x.value().sum() / n), x.requires_grad(),
                               [xn, n](const Tensor& g) { xn->accumulate(Tensor(xn->value.shape(), g[0] / n)); });
}

/// Global average pooling: x[C×H×W] -> [C].
inline Var global_avg_pool(const Var& x) {
    detail::require_ndim("global_avg_pool", x, 3);
    const std::size_t C = x.dim(0), P = x.dim(1) * x.dim(2);
    Tensor out({C});
    for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t p = 0; p < P; ++p) s += x.value()[c * P + p];
        out[c] = s / double(P);
    }
    auto xn = x.node();
    return detail::make_result("global_avg_pool", std::move(out), x.requires_grad(), [xn, C, P](const Tensor& g) {
        Tensor gx(xn->value.shape());
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p) gx[c * P + p] = g[c] / double(P);
        xn->accumulate(gx);
    });
}

/// Scales each channel of x[C×H×W] by w[c].
inline Var channel_scale(const Var& x, const Var& w) {
    detail::require_ndim("channel_scale", x, 3);
    const std::size_t C = x.dim(0), P = x.dim(1) * x.dim(2);
    if (w.shape() != Shape{C}) throw ShapeError("channel_scale: weights must have shape [" + std::to_string(C) + "]");
    Tensor out = x.value();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) out[c * P + p] *= w.value()[c];
    auto xn = x.node(), wn = w.node();
    return detail::make_result("channel_scale", std::move(out), detail::any_requires_grad({&x, &w}),
                               [xn, wn, C, P](const Tensor& g) {
                                   if (xn->requires_grad) {
                                       Tensor gx = g;
                                       for (std::size_t c = 0; c < C; ++c)
                                           for (std::size_t p = 0; p < P; ++p) gx[c * P + p] *= wn->value[c];
                                       xn->accumulate(gx);
                                   }
                                   if (wn->requires_grad) {
                                       Tensor gw({C});
                                       for (std::size_t c = 0; c < C; ++c)
                                           for (std::size_t p = 0; p < P; ++p)
                                               gw[c] += g[c * P + p] * xn->value[c * P + p];
                                       wn->accumulate(gw);
                                   }
                               });
}

/// mean(sqrt((pred − target)² + eps²)); target is treated as a constant.
inline Var charbonnier(const Var& pred, const Tensor& target, double eps) {
    if (pred.shape() != target.shape())
        throw ContractError("charbonnier: shape mismatch " + to_string(pred.shape()) + " vs " +
                            to_string(target.shape()));
    const std::size_t n = pred.size();
    auto root = std::make_shared<std::vector<double>>(n);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pred.value()[i] - target[i];
        s += ((*root)[i] = std::sqrt(d * d + eps * eps));
    }
    auto pn = pred.node();
    auto tgt = std::make_shared<Tensor>(target);
    return detail::make_result("charbonnier", Tensor::scalar(s / double(n)), pred.requires_grad(),
                               [pn, tgt, root, n](const Tensor& g) {
                                   Tensor gp(pn->value.shape());
                                   for (std::size_t i = 0; i < n; ++i)
                                       gp[i] = g[0] * (pn->value[i] - (*tgt)[i]) / (*root)[i] / double(n);
                                   pn->accumulate(gp);
                               });
}

// ---------------------------------------------------------------------------
// Data movement. Every rearrangement is a gather with a precomputed index map;
// the backward rule scatters (adds) gradients through the same map.

inline Var gather(const Var& x, Shape out_shape, detail::IndexMap index, const char* op = "gather") {
    if (index->size() != numel(out_shape))
        throw ShapeError(std::string(op) + ": index map length does not match output shape " + to_string(out_shape));
    Tensor out(std::move(out_shape));
    const auto& xv = x.value();
    for (std::size_t i = 0; i < index->size(); ++i) out[i] = xv[(*index)[i]];
    auto xn = x.node();
    return detail::make_result(op, std::move(out), x.requires_grad(), [xn, index](const Tensor& g) {
        Tensor gx(xn->value.shape());
        for (std::size_t i = 0; i < index->size(); ++i) gx[(*index)[i]] += g[i];
        xn->accumulate(gx);
    });
}

inline Var reshape(const Var& x, Shape shape) {
    if (numel(shape) != x.size())
        throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    auto xn = x.node();
    return detail::make_result("reshape", x.value().reshaped(std::move(shape)), x.requires_grad(),
                               [xn](const Tensor& g) { xn->accumulate(g.reshaped(xn->value.shape())); });
}

/// General axis permutation: out.shape[i] = x.shape[perm[i]].
inline Var permute(const Var& x, const std::vector<std::size_t>& perm) {
    const Shape& s = x.shape();
    if (perm.size() != s.size()) throw ShapeError("permute: permutation rank mismatch for " + to_string(s));
    const std::size_t nd = s.size();
    Shape os(nd);
    for (std::size_t i = 0; i < nd; ++i) os[i] = s.at(perm[i]);
    std::vector<std::size_t> in_stride(nd, 1);
    for (std::size_t i = nd - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * s[i + 1];
    auto idx = std::make_shared<std::vector<std::size_t>>(x.size());
    std::vector<std::size_t> counter(nd, 0);
    for (std::size_t o = 0; o < idx->size(); ++o) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < nd; ++i) src += counter[i] * in_stride[perm[i]];
        (*idx)[o] = src;
        for (std::size_t i = nd; i-- > 0;) {
            if (++counter[i] < os[i]) break;
            counter[i] = 0;
        }
    }
    return gather(x, std::move(os), std::move(idx), "permute");
}

/// Rows [begin, end) along axis 0.
inline Var slice0(const Var& x, std::size_t begin, std::size_t end) {
    if (begin >= end || end > x.dim(0))
        throw ShapeError("slice0: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                         to_string(x.shape()));
    Shape os = x.shape();
    os[0] = end - begin;
    const std::size_t inner = x.size() / x.dim(0);
    auto idx = std::make_shared<std::vector<std::size_t>>(numel(os));
    for (std::size_t i = 0; i < idx->size(); ++i) (*idx)[i] = begin * inner + i;
    return gather(x, std::move(os), std::move(idx), "slice0");
}

/// Concatenation along axis 0; trailing shapes must agree.
inline Var concat0(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat0: no inputs");
    Shape os = parts.front().shape();
    os[0] = 0;
    for (const auto& p : parts) {
        if (p.value().ndim() != os.size() || !std::equal(os.begin() + 1, os.end(), p.shape().begin() + 1))
            throw ShapeError("concat0: trailing shape mismatch " + to_string(p.shape()) + " vs " +
                             to_string(parts.front().shape()));
        os[0] += p.dim(0);
    }
    Tensor out(os);
    std::size_t offset = 0;
    bool needs_grad = false;
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const auto& p : parts) {
        std::copy(p.value().vec().begin(), p.value().vec().end(), out.vec().begin() + std::ptrdiff_t(offset));
        offset += p.size();
        needs_grad = needs_grad || p.requires_grad();
        nodes.push_back(p.node());
    }
    return detail::make_result("concat0", std::move(out), needs_grad, [nodes](const Tensor& g) {
        std::size_t off = 0;
        for (const auto& n : nodes) {
            const std::size_t len = n->value.size();
            if (n->requires_grad) {
                Tensor gn(n->value.shape());
                std::copy(g.vec().begin() + std::ptrdiff_t(off), g.vec().begin() + std::ptrdiff_t(off + len),
                          gn.vec().begin());
                n->accumulate(gn);
            }
            off += len;
        }
    });
}

/// Cyclic shift of x[C×H×W]: out[c, y, x] = in[c, (y − dy) mod H, (x − dx) mod W].
inline Var roll2d(const Var& x, std::ptrdiff_t dy, std::ptrdiff_t dx) {
    detail::require_ndim("roll2d", x, 3);
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    auto wrap = [](std::ptrdiff_t v, std::size_t n) {
        const auto m = static_cast<std::ptrdiff_t>(n);
        return static_cast<std::size_t>(((v % m) + m) % m);
    };
    auto idx = std::make_shared<std::vector<std::size_t>>(x.size());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx)
                (*idx)[(c * H + y) * W + xx] =
                    (c * H + wrap(std::ptrdiff_t(y) - dy, H)) * W + wrap(std::ptrdiff_t(xx) - dx, W);
    return gather(x, x.shape(), std::move(idx), "roll2d");
}

inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    if (n == 1) return 0;
    const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
    i = ((i % period) + period) % period;
    return static_cast<std::size_t>(i < std::ptrdiff_t(n) ? i : period - i);
}

/// Reflect-pads x[C×H×W] on the bottom and right edges (mirror without repeating the edge).
inline Var reflect_pad2d(const Var& x, std::size_t pad_bottom, std::size_t pad_right) {
    detail::require_ndim("reflect_pad2d", x, 3);
    if (pad_bottom == 0 && pad_right == 0) return x;
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::size_t Ho = H + pad_bottom, Wo = W + pad_right;
    auto idx = std::make_shared<std::vector<std::size_t>>(C * Ho * Wo);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t xx = 0; xx < Wo; ++xx)
                (*idx)[(c * Ho + y) * Wo + xx] =
                    (c * H + reflect_index(std::ptrdiff_t(y), H)) * W + reflect_index(std::ptrdiff_t(xx), W);
    return gather(x, {C, Ho, Wo}, std::move(idx), "reflect_pad2d");
}

/// Top-left crop of x[C×H×W] to [C×h×w].
inline Var crop2d(const Var& x, std::size_t h, std::size_t w) {
    detail::require_ndim("crop2d", x, 3);
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (h > H || w > W) throw ShapeError("crop2d: target larger than input " + to_string(x.shape()));
    if (h == H && w == W) return x;
    auto idx = std::make_shared<std::vector<std::size_t>>(C * h * w);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) (*idx)[(c * h + y) * w + xx] = (c * H + y) * W + xx;
    return gather(x, {C, h, w}, std::move(idx), "crop2d");
}

/// Sub-pixel rearrangement [C·r²×H×W] -> [C×rH×rW]:
/// out[c, y·r + i, x·r + j] = in[c·r² + i·r + j, y, x].
inline Var pixel_shuffle(const Var& x, std::size_t r) {
    detail::require_ndim("pixel_shuffle", x, 3);
    if (r == 0 || x.dim(0) % (r * r) != 0)
        throw ShapeError("pixel_shuffle: channel count " + std::to_string(x.dim(0)) + " not divisible by r^2 = " +
                         std::to_string(r * r));
    if (r == 1) return x;
    const std::size_t C = x.dim(0) / (r * r), H = x.dim(1), W = x.dim(2);
    const std::size_t Ho = H * r, Wo = W * r;
    auto idx = std::make_shared<std::vector<std::size_t>>(x.size());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                const std::size_t src_c = c * r * r + (oy % r) * r + (ox % r);
                (*idx)[(c * Ho + oy) * Wo + ox] = (src_c * H + oy / r) * W + ox / r;
            }
    return gather(x, {C, Ho, Wo}, std::move(idx), "pixel_shuffle");
}

/// Inverse of pixel_shuffle: [C×rH×rW] -> [C·r²×H×W].
inline Var pixel_unshuffle(const Var& x, std::size_t r) {
    detail::require_ndim("pixel_unshuffle", x, 3);
    if (r == 0 || x.dim(1) % r != 0 || x.dim(2) % r != 0)
        throw ShapeError("pixel_unshuffle: spatial size not divisible by " + std::to_string(r));
    if (r == 1) return x;
    const std::size_t C = x.dim(0), H = x.dim(1) / r, W = x.dim(2) / r;
    const std::size_t Hi = x.dim(1), Wi = x.dim(2);
    auto idx = std::make_shared<std::vector<std::size_t>>(x.size());
    for (std::size_t oc = 0; oc < C * r * r; ++oc)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
                const std::size_t c = oc / (r * r), i = (oc % (r * r)) / r, j = oc % r;
                (*idx)[(oc * H + y) * W + xx] = (c * Hi + y * r + i) * Wi + xx * r + j;
            }
    return gather(x, {C * r * r, H, W}, std::move(idx), "pixel_unshuffle");
}

}  // namespace udcvr
