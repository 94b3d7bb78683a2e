#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lssf/autodiff.hpp"
#include "lssf/tensor.hpp"

namespace lssf {

enum class Mode { Train, Infer };
enum class Padding { Same, Valid };

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline std::vector<int64_t> strides_of(const std::vector<int>& shape) {
    std::vector<int64_t> st(shape.size());
    int64_t s = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = s;
        s *= shape[static_cast<size_t>(i)];
    }
    return st;
}

}  // namespace detail

// ---- elementwise binary (equal shapes) --------------------------------------

template <typename T, typename FwdF, typename BwdF>
Var binary_op(Tape<T>& tape, Var a, Var b, FwdF fwd, BwdF bwd, const char* name) {
    const auto& av = tape.val(a);
    const auto& bv = tape.val(b);
    detail::require(av.shape == bv.shape,
                    std::string(name) + ": shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor<T> out(av.shape);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    bool rg = tape.requires_grad(a) || tape.requires_grad(b);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [a, b, y, bwd](Tape<T>& t) {
            const auto& g = t.grad(y);
            const auto& xa = t.val(a);
            const auto& xb = t.val(b);
            Tensor<T>* ga = t.requires_grad(a) ? &t.grad(a) : nullptr;
            Tensor<T>* gb = t.requires_grad(b) ? &t.grad(b) : nullptr;
            for (int64_t i = 0; i < g.size(); ++i) {
                T da, db;
                bwd(xa[i], xb[i], da, db);
                if (ga) (*ga)[i] += g[i] * da;
                if (gb) (*gb)[i] += g[i] * db;
            }
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    return binary_op(
        tape, a, b, [](T x, T y) { return x + y; },
        [](T, T, T& da, T& db) { da = T(1); db = T(1); }, "add");
}

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
    return binary_op(
        tape, a, b, [](T x, T y) { return x - y; },
        [](T, T, T& da, T& db) { da = T(1); db = T(-1); }, "sub");
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
    return binary_op(
        tape, a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T& da, T& db) { da = y; db = x; }, "mul");
}

template <typename T>
Var div(Tape<T>& tape, Var a, Var b) {
    return binary_op(
        tape, a, b, [](T x, T y) { return x / y; },
        [](T x, T y, T& da, T& db) { da = T(1) / y; db = -x / (y * y); }, "div");
}

// ---- elementwise unary ------------------------------------------------------

template <typename T, typename FwdF, typename BwdF>
Var unary_op(Tape<T>& tape, Var a, FwdF fwd, BwdF bwd) {
    const auto& av = tape.val(a);
    Tensor<T> out(av.shape);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
    bool rg = tape.requires_grad(a);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [a, y, bwd](Tape<T>& t) {
            const auto& g = t.grad(y);
            const auto& xa = t.val(a);
            auto& ga = t.grad(a);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bwd(xa[i]);
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

template <typename T>
Var relu(Tape<T>& tape, Var a) {
    return unary_op(
        tape, a, [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var a) {
    return unary_op(
        tape, a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
        [](T x) {
            T s = T(1) / (T(1) + std::exp(-x));
            return s * (T(1) - s);
        });
}

template <typename T>
Var gelu(Tape<T>& tape, Var a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return unary_op(
        tape, a,
        [=](T x) { return static_cast<T>(0.5 * static_cast<double>(x) * (1.0 + std::erf(static_cast<double>(x) * inv_sqrt2))); },
        [=](T x) {
            double xd = static_cast<double>(x);
            double cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
            return static_cast<T>(cdf + xd * pdf);
        });
}

template <typename T>
Var log_op(Tape<T>& tape, Var a) {
    return unary_op(
        tape, a, [](T x) { return std::log(x); }, [](T x) { return T(1) / x; });
}

template <typename T>
Var neg(Tape<T>& tape, Var a) {
    return unary_op(
        tape, a, [](T x) { return -x; }, [](T) { return T(-1); });
}

// Gradient passes only through the interior of [lo, hi].
template <typename T>
Var clamp(Tape<T>& tape, Var a, T lo, T hi) {
    return unary_op(
        tape, a, [=](T x) { return x < lo ? lo : (x > hi ? hi : x); },
        [=](T x) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <typename T>
Var add_const(Tape<T>& tape, Var a, T c) {
    return unary_op(
        tape, a, [=](T x) { return x + c; }, [](T) { return T(1); });
}

template <typename T>
Var mul_const(Tape<T>& tape, Var a, T c) {
    return unary_op(
        tape, a, [=](T x) { return x * c; }, [=](T) { return c; });
}

// ---- reductions -------------------------------------------------------------

template <typename T>
Var sum_all(Tape<T>& tape, Var a) {
    const auto& av = tape.val(a);
    T s = T(0);
    for (int64_t i = 0; i < av.size(); ++i) s += av[i];
    bool rg = tape.requires_grad(a);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [a, y](Tape<T>& t) {
            T g = t.grad(y)[0];
            auto& ga = t.grad(a);
            for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
        };
    }
    return tape.push(Tensor<T>::scalar(s), rg, std::move(fn));
}

template <typename T>
Var mean_all(Tape<T>& tape, Var a) {
    int64_t n = tape.val(a).size();
    detail::require(n > 0, "mean_all: empty tensor");
    return mul_const(tape, sum_all(tape, a), T(1) / static_cast<T>(n));
}

// ---- shape ops --------------------------------------------------------------

template <typename T>
Var reshape(Tape<T>& tape, Var a, std::vector<int> new_shape) {
    const auto& av = tape.val(a);
    detail::require(Tensor<T>::count(new_shape) == av.size(), "reshape: element count mismatch");
    Tensor<T> out(std::move(new_shape), av.data);
    bool rg = tape.requires_grad(a);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [a, y](Tape<T>& t) {
            const auto& g = t.grad(y);
            auto& ga = t.grad(a);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

template <typename T>
Var permute(Tape<T>& tape, Var a, std::vector<int> perm) {
    const auto& av = tape.val(a);
    int nd = av.ndim();
    detail::require(static_cast<int>(perm.size()) == nd, "permute: rank mismatch");
    std::vector<int> new_shape(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) new_shape[static_cast<size_t>(i)] = av.dim(perm[static_cast<size_t>(i)]);
    auto in_st = detail::strides_of(av.shape);
    auto out_st = detail::strides_of(new_shape);
    Tensor<T> out(new_shape);
    std::vector<int> idx(static_cast<size_t>(nd), 0);
    for (int64_t o = 0; o < out.size(); ++o) {
        int64_t rem = o, src = 0;
        for (int i = 0; i < nd; ++i) {
            int64_t c = rem / out_st[static_cast<size_t>(i)];
            rem %= out_st[static_cast<size_t>(i)];
            src += c * in_st[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        }
        out[o] = av[src];
    }
    bool rg = tape.requires_grad(a);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [a, y, perm, in_st, out_st, nd](Tape<T>& t) {
            const auto& g = t.grad(y);
            auto& ga = t.grad(a);
            for (int64_t o = 0; o < g.size(); ++o) {
                int64_t rem = o, src = 0;
                for (int i = 0; i < nd; ++i) {
                    int64_t c = rem / out_st[static_cast<size_t>(i)];
                    rem %= out_st[static_cast<size_t>(i)];
                    src += c * in_st[static_cast<size_t>(perm[static_cast<size_t>(i)])];
                }
                ga[src] += g[o];
            }
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

template <typename T>
Var concat(Tape<T>& tape, const std::vector<Var>& parts, int axis) {
    detail::require(!parts.empty(), "concat: no inputs");
    const auto& first = tape.val(parts[0]);
    int nd = first.ndim();
    if (axis < 0) axis += nd;
    detail::require(axis >= 0 && axis < nd, "concat: bad axis");
    std::vector<int> out_shape = first.shape;
    int axis_total = 0;
    bool rg = false;
    for (Var p : parts) {
        const auto& v = tape.val(p);
        detail::require(v.ndim() == nd, "concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != axis) detail::require(v.dim(i) == first.dim(i), "concat: shape mismatch off-axis");
        axis_total += v.dim(axis);
        rg = rg || tape.requires_grad(p);
    }
    out_shape[static_cast<size_t>(axis)] = axis_total;

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= first.dim(i);
    for (int i = axis + 1; i < nd; ++i) inner *= first.dim(i);

    Tensor<T> out(out_shape);
    std::vector<int> axis_sizes;
    for (Var p : parts) axis_sizes.push_back(tape.val(p).dim(axis));
    for (int64_t o = 0; o < outer; ++o) {
        int64_t off = o * axis_total * inner;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            const auto& v = tape.val(parts[pi]);
            int64_t chunk = static_cast<int64_t>(axis_sizes[pi]) * inner;
            for (int64_t j = 0; j < chunk; ++j) out[off + j] = v[o * chunk + j];
            off += chunk;
        }
    }
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        auto parts_copy = parts;
        fn = [parts_copy, axis_sizes, y, outer, inner, axis_total](Tape<T>& t) {
            const auto& g = t.grad(y);
            for (int64_t o = 0; o < outer; ++o) {
                int64_t off = o * axis_total * inner;
                for (size_t pi = 0; pi < parts_copy.size(); ++pi) {
                    int64_t chunk = static_cast<int64_t>(axis_sizes[pi]) * inner;
                    if (t.requires_grad(parts_copy[pi])) {
                        auto& gp = t.grad(parts_copy[pi]);
                        for (int64_t j = 0; j < chunk; ++j) gp[o * chunk + j] += g[off + j];
                    }
                    off += chunk;
                }
            }
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// Slice along the last (channel) axis: [..., C] -> [..., c1-c0].
template <typename T>
Var slice_channels(Tape<T>& tape, Var a, int c0, int c1) {
    const auto& av = tape.val(a);
    int nd = av.ndim();
    detail::require(nd >= 1, "slice_channels: rank 0");
    int c = av.dim(nd - 1);
    detail::require(0 <= c0 && c0 < c1 && c1 <= c, "slice_channels: bad range");
    std::vector<int> out_shape = av.shape;
    out_shape.back() = c1 - c0;
    int64_t outer = av.size() / c;
    int span = c1 - c0;
    Tensor<T> out(out_shape);
    for (int64_t o = 0; o < outer; ++o)
        for (int j = 0; j < span; ++j) out[o * span + j] = av[o * c + c0 + j];
    bool rg = tape.requires_grad(a);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [a, y, outer, span, c, c0](Tape<T>& t) {
            const auto& g = t.grad(y);
            auto& ga = t.grad(a);
            for (int64_t o = 0; o < outer; ++o)
                for (int j = 0; j < span; ++j) ga[o * c + c0 + j] += g[o * span + j];
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// ---- convolution ------------------------------------------------------------

namespace detail {

inline int conv_out_dim(int in, int k, int stride, Padding pad) {
    if (pad == Padding::Same) return (in + stride - 1) / stride;
    return (in - k) / stride + 1;
}

inline int pad_begin(int in, int out, int k, int stride, Padding pad) {
    if (pad == Padding::Valid) return 0;
    int total = std::max(0, (out - 1) * stride + k - in);
    return total / 2;
}

}  // namespace detail

// Cross-correlation, NHWC x [kh,kw,Cin,Cout]. bias may be an invalid Var.
template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var kernel, Var bias, int stride = 1, Padding pad = Padding::Same) {
    const auto& xv = tape.val(x);
    const auto& kv = tape.val(kernel);
    detail::require(xv.ndim() == 4, "conv2d: input must be [N,H,W,C]");
    detail::require(kv.ndim() == 4, "conv2d: kernel must be [kh,kw,Cin,Cout]");
    detail::require(stride >= 1, "conv2d: stride < 1");
    int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), Cin = xv.dim(3);
    int kh = kv.dim(0), kw = kv.dim(1), Cout = kv.dim(3);
    detail::require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel size must be odd");
    detail::require(kv.dim(2) == Cin, "conv2d: channel mismatch");
    bool has_bias = bias.valid();
    if (has_bias) {
        const auto& bv = tape.val(bias);
        detail::require(bv.size() == Cout, "conv2d: bias length mismatch");
    }
    int Ho = detail::conv_out_dim(H, kh, stride, pad);
    int Wo = detail::conv_out_dim(W, kw, stride, pad);
    detail::require(Ho > 0 && Wo > 0, "conv2d: empty output");
    int ph = detail::pad_begin(H, Ho, kh, stride, pad);
    int pw = detail::pad_begin(W, Wo, kw, stride, pad);

    Tensor<T> out({N, Ho, Wo, Cout});
    const T* xd = xv.data.data();
    const T* kd = kv.data.data();
    const T* bd = has_bias ? tape.val(bias).data.data() : nullptr;
    T* od = out.data.data();
    for (int n = 0; n < N; ++n)
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                T* orow = od + (((static_cast<int64_t>(n) * Ho + oy) * Wo + ox) * Cout);
                for (int co = 0; co < Cout; ++co) orow[co] = bd ? bd[co] : T(0);
                for (int ky = 0; ky < kh; ++ky) {
                    int iy = oy * stride - ph + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        int ix = ox * stride - pw + kx;
                        if (ix < 0 || ix >= W) continue;
                        const T* xrow = xd + (((static_cast<int64_t>(n) * H + iy) * W + ix) * Cin);
                        const T* krow = kd + ((static_cast<int64_t>(ky) * kw + kx) * Cin * Cout);
                        for (int ci = 0; ci < Cin; ++ci) {
                            T xv_ = xrow[ci];
                            const T* kc = krow + static_cast<int64_t>(ci) * Cout;
                            for (int co = 0; co < Cout; ++co) orow[co] += xv_ * kc[co];
                        }
                    }
                }
            }

    bool rg = tape.requires_grad(x) || tape.requires_grad(kernel) || (has_bias && tape.requires_grad(bias));
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [x, kernel, bias, y, N, H, W, Cin, kh, kw, Cout, Ho, Wo, ph, pw, stride, has_bias](Tape<T>& t) {
            const auto& g = t.grad(y);
            const auto& xv2 = t.val(x);
            const auto& kv2 = t.val(kernel);
            Tensor<T>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
            Tensor<T>* gk = t.requires_grad(kernel) ? &t.grad(kernel) : nullptr;
            Tensor<T>* gb = (has_bias && t.requires_grad(bias)) ? &t.grad(bias) : nullptr;
            const T* gd = g.data.data();
            const T* xd2 = xv2.data.data();
            const T* kd2 = kv2.data.data();
            for (int n = 0; n < N; ++n)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        const T* grow = gd + (((static_cast<int64_t>(n) * Ho + oy) * Wo + ox) * Cout);
                        if (gb)
                            for (int co = 0; co < Cout; ++co) (*gb)[co] += grow[co];
                        for (int ky = 0; ky < kh; ++ky) {
                            int iy = oy * stride - ph + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                int ix = ox * stride - pw + kx;
                                if (ix < 0 || ix >= W) continue;
                                int64_t xoff = ((static_cast<int64_t>(n) * H + iy) * W + ix) * Cin;
                                int64_t koff = (static_cast<int64_t>(ky) * kw + kx) * Cin * Cout;
                                for (int ci = 0; ci < Cin; ++ci) {
                                    const T* kc = kd2 + koff + static_cast<int64_t>(ci) * Cout;
                                    T xval = xd2[xoff + ci];
                                    T acc = T(0);
                                    for (int co = 0; co < Cout; ++co) {
                                        T gv = grow[co];
                                        acc += gv * kc[co];
                                        if (gk) (*gk)[koff + static_cast<int64_t>(ci) * Cout + co] += gv * xval;
                                    }
                                    if (gx) (*gx)[xoff + ci] += acc;
                                }
                            }
                        }
                    }
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// Per-channel convolution, kernel [kh,kw,C], stride 1, same padding, no bias.
template <typename T>
Var depthwise_conv2d(Tape<T>& tape, Var x, Var kernel) {
    const auto& xv = tape.val(x);
    const auto& kv = tape.val(kernel);
    detail::require(xv.ndim() == 4, "depthwise_conv2d: input must be [N,H,W,C]");
    detail::require(kv.ndim() == 3, "depthwise_conv2d: kernel must be [kh,kw,C]");
    int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    int kh = kv.dim(0), kw = kv.dim(1);
    detail::require(kv.dim(2) == C, "depthwise_conv2d: channel mismatch");
    detail::require(kh % 2 == 1 && kw % 2 == 1, "depthwise_conv2d: kernel size must be odd");
    int ph = kh / 2, pw = kw / 2;
    Tensor<T> out({N, H, W, C});
    for (int n = 0; n < N; ++n)
        for (int oy = 0; oy < H; ++oy)
            for (int ox = 0; ox < W; ++ox)
                for (int ky = 0; ky < kh; ++ky) {
                    int iy = oy - ph + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        int ix = ox - pw + kx;
                        if (ix < 0 || ix >= W) continue;
                        int64_t xoff = ((static_cast<int64_t>(n) * H + iy) * W + ix) * C;
                        int64_t ooff = ((static_cast<int64_t>(n) * H + oy) * W + ox) * C;
                        int64_t koff = (static_cast<int64_t>(ky) * kw + kx) * C;
                        for (int c = 0; c < C; ++c) out[ooff + c] += xv[xoff + c] * kv[koff + c];
                    }
                }
    bool rg = tape.requires_grad(x) || tape.requires_grad(kernel);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [x, kernel, y, N, H, W, C, kh, kw, ph, pw](Tape<T>& t) {
            const auto& g = t.grad(y);
            const auto& xv2 = t.val(x);
            const auto& kv2 = t.val(kernel);
            Tensor<T>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
            Tensor<T>* gk = t.requires_grad(kernel) ? &t.grad(kernel) : nullptr;
            for (int n = 0; n < N; ++n)
                for (int oy = 0; oy < H; ++oy)
                    for (int ox = 0; ox < W; ++ox)
                        for (int ky = 0; ky < kh; ++ky) {
                            int iy = oy - ph + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                int ix = ox - pw + kx;
                                if (ix < 0 || ix >= W) continue;
                                int64_t xoff = ((static_cast<int64_t>(n) * H + iy) * W + ix) * C;
                                int64_t ooff = ((static_cast<int64_t>(n) * H + oy) * W + ox) * C;
                                int64_t koff = (static_cast<int64_t>(ky) * kw + kx) * C;
                                for (int c = 0; c < C; ++c) {
                                    T gv = g[ooff + c];
                                    if (gx) (*gx)[xoff + c] += gv * kv2[koff + c];
                                    if (gk) (*gk)[koff + c] += gv * xv2[xoff + c];
                                }
                            }
                        }
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// ---- pooling / upsampling ---------------------------------------------------

// 2x2 max pool, stride 2. Ties route the gradient to the first window entry
// in row-major order.
template <typename T>
Var maxpool2(Tape<T>& tape, Var x) {
    const auto& xv = tape.val(x);
    detail::require(xv.ndim() == 4, "maxpool2: input must be [N,H,W,C]");
    int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    detail::require(H % 2 == 0 && W % 2 == 0, "maxpool2: spatial dims must be even");
    int Ho = H / 2, Wo = W / 2;
    Tensor<T> out({N, Ho, Wo, C});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.size()));
    for (int n = 0; n < N; ++n)
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox)
                for (int c = 0; c < C; ++c) {
                    T best = T(0);
                    int64_t best_idx = -1;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            int64_t idx = ((static_cast<int64_t>(n) * H + 2 * oy + dy) * W + 2 * ox + dx) * C + c;
                            if (best_idx < 0 || xv[idx] > best) {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    int64_t oidx = ((static_cast<int64_t>(n) * Ho + oy) * Wo + ox) * C + c;
                    out[oidx] = best;
                    (*argmax)[static_cast<size_t>(oidx)] = best_idx;
                }
    bool rg = tape.requires_grad(x);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [x, y, argmax](Tape<T>& t) {
            const auto& g = t.grad(y);
            auto& gx = t.grad(x);
            for (int64_t i = 0; i < g.size(); ++i) gx[(*argmax)[static_cast<size_t>(i)]] += g[i];
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// Nearest-neighbor 2x upsampling.
template <typename T>
Var upsample2(Tape<T>& tape, Var x) {
    const auto& xv = tape.val(x);
    detail::require(xv.ndim() == 4, "upsample2: input must be [N,H,W,C]");
    int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    Tensor<T> out({N, 2 * H, 2 * W, C});
    for (int n = 0; n < N; ++n)
        for (int oy = 0; oy < 2 * H; ++oy)
            for (int ox = 0; ox < 2 * W; ++ox) {
                int64_t src = ((static_cast<int64_t>(n) * H + oy / 2) * W + ox / 2) * C;
                int64_t dst = ((static_cast<int64_t>(n) * 2 * H + oy) * 2 * W + ox) * C;
                for (int c = 0; c < C; ++c) out[dst + c] = xv[src + c];
            }
    bool rg = tape.requires_grad(x);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [x, y, N, H, W, C](Tape<T>& t) {
            const auto& g = t.grad(y);
            auto& gx = t.grad(x);
            for (int n = 0; n < N; ++n)
                for (int oy = 0; oy < 2 * H; ++oy)
                    for (int ox = 0; ox < 2 * W; ++ox) {
                        int64_t src = ((static_cast<int64_t>(n) * H + oy / 2) * W + ox / 2) * C;
                        int64_t dst = ((static_cast<int64_t>(n) * 2 * H + oy) * 2 * W + ox) * C;
                        for (int c = 0; c < C; ++c) gx[src + c] += g[dst + c];
                    }
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// ---- normalization ----------------------------------------------------------

template <typename T>
struct RunningStats {
    Tensor<T> mean;
    Tensor<T> var;
};

// Per-channel batch norm over N,H,W. Train mode uses batch statistics and
// updates the running stats in place with the given momentum; infer mode
// reads them.
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, Tensor<T>* running_mean, Tensor<T>* running_var,
               Mode mode, T momentum = T(0.9), T eps = T(1e-5)) {
    const auto& xv = tape.val(x);
    detail::require(xv.ndim() == 4, "batch_norm: input must be [N,H,W,C]");
    detail::require(eps > T(0), "batch_norm: eps must be > 0");
    int C = xv.dim(3);
    detail::require(tape.val(gamma).size() == C && tape.val(beta).size() == C,
                    "batch_norm: gamma/beta length mismatch");
    detail::require(running_mean != nullptr && running_var != nullptr && running_mean->size() == C &&
                        running_var->size() == C,
                    "batch_norm: running stats missing");
    int64_t M = xv.size() / C;

    auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(C), T(0));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(C), T(0));
    if (mode == Mode::Train) {
        std::vector<T> var(static_cast<size_t>(C), T(0));
        for (int64_t i = 0; i < xv.size(); ++i) (*mean)[static_cast<size_t>(i % C)] += xv[i];
        for (int c = 0; c < C; ++c) (*mean)[static_cast<size_t>(c)] /= static_cast<T>(M);
        for (int64_t i = 0; i < xv.size(); ++i) {
            T d = xv[i] - (*mean)[static_cast<size_t>(i % C)];
            var[static_cast<size_t>(i % C)] += d * d;
        }
        for (int c = 0; c < C; ++c) var[static_cast<size_t>(c)] /= static_cast<T>(M);
        for (int c = 0; c < C; ++c) {
            (*running_mean)[c] = momentum * (*running_mean)[c] + (T(1) - momentum) * (*mean)[static_cast<size_t>(c)];
            (*running_var)[c] = momentum * (*running_var)[c] + (T(1) - momentum) * var[static_cast<size_t>(c)];
            (*inv_std)[static_cast<size_t>(c)] = T(1) / std::sqrt(var[static_cast<size_t>(c)] + eps);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            (*mean)[static_cast<size_t>(c)] = (*running_mean)[c];
            (*inv_std)[static_cast<size_t>(c)] = T(1) / std::sqrt((*running_var)[c] + eps);
        }
    }

    const auto& gv = tape.val(gamma);
    const auto& bv = tape.val(beta);
    Tensor<T> out(xv.shape);
    for (int64_t i = 0; i < xv.size(); ++i) {
        int c = static_cast<int>(i % C);
        out[i] = gv[c] * (xv[i] - (*mean)[static_cast<size_t>(c)]) * (*inv_std)[static_cast<size_t>(c)] + bv[c];
    }
    bool rg = tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        bool train = (mode == Mode::Train);
        fn = [x, gamma, beta, y, mean, inv_std, C, M, train](Tape<T>& t) {
            const auto& g = t.grad(y);
            const auto& xv2 = t.val(x);
            const auto& gv2 = t.val(gamma);
            std::vector<T> sum_g(static_cast<size_t>(C), T(0));
            std::vector<T> sum_gx(static_cast<size_t>(C), T(0));
            for (int64_t i = 0; i < g.size(); ++i) {
                int c = static_cast<int>(i % C);
                T xh = (xv2[i] - (*mean)[static_cast<size_t>(c)]) * (*inv_std)[static_cast<size_t>(c)];
                sum_g[static_cast<size_t>(c)] += g[i];
                sum_gx[static_cast<size_t>(c)] += g[i] * xh;
            }
            if (t.requires_grad(beta)) {
                auto& gb = t.grad(beta);
                for (int c = 0; c < C; ++c) gb[c] += sum_g[static_cast<size_t>(c)];
            }
            if (t.requires_grad(gamma)) {
                auto& gg = t.grad(gamma);
                for (int c = 0; c < C; ++c) gg[c] += sum_gx[static_cast<size_t>(c)];
            }
            if (t.requires_grad(x)) {
                auto& gx = t.grad(x);
                for (int64_t i = 0; i < g.size(); ++i) {
                    int c = static_cast<int>(i % C);
                    T is = (*inv_std)[static_cast<size_t>(c)];
                    if (train) {
                        T xh = (xv2[i] - (*mean)[static_cast<size_t>(c)]) * is;
                        gx[i] += gv2[c] * is *
                                 (g[i] - sum_g[static_cast<size_t>(c)] / static_cast<T>(M) -
                                  xh * sum_gx[static_cast<size_t>(c)] / static_cast<T>(M));
                    } else {
                        gx[i] += gv2[c] * is * g[i];
                    }
                }
            }
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// Layer norm over the channel (last) axis.
template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta, T eps = T(1e-6)) {
    const auto& xv = tape.val(x);
    detail::require(xv.ndim() >= 1, "layer_norm: rank 0");
    detail::require(eps > T(0), "layer_norm: eps must be > 0");
    int C = xv.dim(xv.ndim() - 1);
    detail::require(tape.val(gamma).size() == C && tape.val(beta).size() == C,
                    "layer_norm: gamma/beta length mismatch");
    int64_t rows = xv.size() / C;
    const auto& gv = tape.val(gamma);
    const auto& bv = tape.val(beta);
    auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    Tensor<T> out(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        T m = T(0);
        for (int c = 0; c < C; ++c) m += xv[r * C + c];
        m /= static_cast<T>(C);
        T v = T(0);
        for (int c = 0; c < C; ++c) {
            T d = xv[r * C + c] - m;
            v += d * d;
        }
        v /= static_cast<T>(C);
        T is = T(1) / std::sqrt(v + eps);
        (*mean)[static_cast<size_t>(r)] = m;
        (*inv_std)[static_cast<size_t>(r)] = is;
        for (int c = 0; c < C; ++c) out[r * C + c] = gv[c] * (xv[r * C + c] - m) * is + bv[c];
    }
    bool rg = tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [x, gamma, beta, y, mean, inv_std, C, rows](Tape<T>& t) {
            const auto& g = t.grad(y);
            const auto& xv2 = t.val(x);
            const auto& gv2 = t.val(gamma);
            Tensor<T>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
            Tensor<T>* gg = t.requires_grad(gamma) ? &t.grad(gamma) : nullptr;
            Tensor<T>* gb = t.requires_grad(beta) ? &t.grad(beta) : nullptr;
            for (int64_t r = 0; r < rows; ++r) {
                T m = (*mean)[static_cast<size_t>(r)];
                T is = (*inv_std)[static_cast<size_t>(r)];
                T sum_g = T(0), sum_gx = T(0);
                for (int c = 0; c < C; ++c) {
                    T xh = (xv2[r * C + c] - m) * is;
                    T gw = g[r * C + c] * gv2[c];
                    sum_g += gw;
                    sum_gx += gw * xh;
                    if (gg) (*gg)[c] += g[r * C + c] * xh;
                    if (gb) (*gb)[c] += g[r * C + c];
                }
                if (gx)
                    for (int c = 0; c < C; ++c) {
                        T xh = (xv2[r * C + c] - m) * is;
                        T gw = g[r * C + c] * gv2[c];
                        (*gx)[r * C + c] += is * (gw - sum_g / static_cast<T>(C) - xh * sum_gx / static_cast<T>(C));
                    }
            }
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// ---- matmul / softmax -------------------------------------------------------

// [m,k]x[k,n], [B,m,k]x[B,k,n], or [B,m,k]x[k,n] (shared right operand).
template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.val(a);
    const auto& bv = tape.val(b);
    detail::require((av.ndim() == 2 || av.ndim() == 3) && (bv.ndim() == 2 || bv.ndim() == 3),
                    "matmul: operands must be rank 2 or 3");
    int B = av.ndim() == 3 ? av.dim(0) : 1;
    int m = av.dim(av.ndim() - 2), k = av.dim(av.ndim() - 1);
    bool b_batched = bv.ndim() == 3;
    detail::require(!(av.ndim() == 2 && b_batched), "matmul: batched right with 2-D left unsupported");
    if (b_batched) detail::require(bv.dim(0) == B, "matmul: batch mismatch");
    int bk = bv.dim(bv.ndim() - 2), n = bv.dim(bv.ndim() - 1);
    detail::require(bk == k, "matmul: inner dim mismatch " + av.shape_str() + " x " + bv.shape_str());

    std::vector<int> out_shape = av.ndim() == 3 ? std::vector<int>{B, m, n} : std::vector<int>{m, n};
    Tensor<T> out(out_shape);
    for (int bi = 0; bi < B; ++bi) {
        const T* ad = av.data.data() + static_cast<int64_t>(bi) * m * k;
        const T* bd = bv.data.data() + (b_batched ? static_cast<int64_t>(bi) * k * n : 0);
        T* od = out.data.data() + static_cast<int64_t>(bi) * m * n;
        for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
                T aval = ad[static_cast<int64_t>(i) * k + kk];
                const T* brow = bd + static_cast<int64_t>(kk) * n;
                T* orow = od + static_cast<int64_t>(i) * n;
                for (int j = 0; j < n; ++j) orow[j] += aval * brow[j];
            }
    }
    bool rg = tape.requires_grad(a) || tape.requires_grad(b);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [a, b, y, B, m, k, n, b_batched](Tape<T>& t) {
            const auto& g = t.grad(y);
            const auto& av2 = t.val(a);
            const auto& bv2 = t.val(b);
            Tensor<T>* ga = t.requires_grad(a) ? &t.grad(a) : nullptr;
            Tensor<T>* gb = t.requires_grad(b) ? &t.grad(b) : nullptr;
            for (int bi = 0; bi < B; ++bi) {
                const T* gd = g.data.data() + static_cast<int64_t>(bi) * m * n;
                const T* ad = av2.data.data() + static_cast<int64_t>(bi) * m * k;
                const T* bd = bv2.data.data() + (b_batched ? static_cast<int64_t>(bi) * k * n : 0);
                T* gad = ga ? ga->data.data() + static_cast<int64_t>(bi) * m * k : nullptr;
                T* gbd = gb ? gb->data.data() + (b_batched ? static_cast<int64_t>(bi) * k * n : 0) : nullptr;
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        const T* grow = gd + static_cast<int64_t>(i) * n;
                        const T* brow = bd + static_cast<int64_t>(kk) * n;
                        if (gad) {
                            T acc = T(0);
                            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            gad[static_cast<int64_t>(i) * k + kk] += acc;
                        }
                        if (gbd) {
                            T aval = ad[static_cast<int64_t>(i) * k + kk];
                            T* gbrow = gbd + static_cast<int64_t>(kk) * n;
                            for (int j = 0; j < n; ++j) gbrow[j] += aval * grow[j];
                        }
                    }
            }
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

template <typename T>
Var softmax(Tape<T>& tape, Var x, int axis = -1) {
    const auto& xv = tape.val(x);
    int nd = xv.ndim();
    detail::require(nd >= 1, "softmax: rank 0");
    if (axis < 0) axis += nd;
    detail::require(axis >= 0 && axis < nd, "softmax: bad axis");
    int L = xv.dim(axis);
    int64_t inner = 1, outer = 1;
    for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
    for (int i = axis + 1; i < nd; ++i) inner *= xv.dim(i);
    Tensor<T> out(xv.shape);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            int64_t base = o * L * inner + in;
            T mx = xv[base];
            for (int l = 1; l < L; ++l) mx = std::max(mx, xv[base + l * inner]);
            T sum = T(0);
            for (int l = 0; l < L; ++l) {
                T e = std::exp(xv[base + l * inner] - mx);
                out[base + l * inner] = e;
                sum += e;
            }
            for (int l = 0; l < L; ++l) out[base + l * inner] /= sum;
        }
    bool rg = tape.requires_grad(x);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [x, y, L, inner, outer](Tape<T>& t) {
            const auto& g = t.grad(y);
            const auto& s = t.val(y);
            auto& gx = t.grad(x);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t base = o * L * inner + in;
                    T dot = T(0);
                    for (int l = 0; l < L; ++l) dot += g[base + l * inner] * s[base + l * inner];
                    for (int l = 0; l < L; ++l)
                        gx[base + l * inner] += s[base + l * inner] * (g[base + l * inner] - dot);
                }
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// ---- dropout ----------------------------------------------------------------

// Inverted dropout; identity in infer mode.
template <typename T>
Var dropout(Tape<T>& tape, Var x, double rate, Mode mode, std::mt19937_64* rng) {
    detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
    if (mode == Mode::Infer || rate == 0.0) return x;
    detail::require(rng != nullptr, "dropout: rng required in train mode");
    const auto& xv = tape.val(x);
    auto mask = std::make_shared<std::vector<T>>(static_cast<size_t>(xv.size()));
    std::bernoulli_distribution keep(1.0 - rate);
    T scale = static_cast<T>(1.0 / (1.0 - rate));
    Tensor<T> out(xv.shape);
    for (int64_t i = 0; i < xv.size(); ++i) {
        (*mask)[static_cast<size_t>(i)] = keep(*rng) ? scale : T(0);
        out[i] = xv[i] * (*mask)[static_cast<size_t>(i)];
    }
    bool rg = tape.requires_grad(x);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [x, y, mask](Tape<T>& t) {
            const auto& g = t.grad(y);
            auto& gx = t.grad(x);
            for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[static_cast<size_t>(i)];
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// ---- global pooling / broadcasting ------------------------------------------

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x) {
    const auto& xv = tape.val(x);
    detail::require(xv.ndim() == 4, "global_avg_pool: input must be [N,H,W,C]");
    int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    int64_t M = static_cast<int64_t>(H) * W;
    Tensor<T> out({N, 1, 1, C});
    for (int n = 0; n < N; ++n)
        for (int64_t p = 0; p < M; ++p)
            for (int c = 0; c < C; ++c) out[static_cast<int64_t>(n) * C + c] += xv[(n * M + p) * C + c];
    for (auto& v : out.data) v /= static_cast<T>(M);
    bool rg = tape.requires_grad(x);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [x, y, N, M, C](Tape<T>& t) {
            const auto& g = t.grad(y);
            auto& gx = t.grad(x);
            for (int n = 0; n < N; ++n)
                for (int64_t p = 0; p < M; ++p)
                    for (int c = 0; c < C; ++c)
                        gx[(n * M + p) * C + c] += g[static_cast<int64_t>(n) * C + c] / static_cast<T>(M);
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// [N,1,1,C] -> [N,H,W,C]
template <typename T>
Var broadcast_spatial(Tape<T>& tape, Var x, int H, int W) {
    const auto& xv = tape.val(x);
    detail::require(xv.ndim() == 4 && xv.dim(1) == 1 && xv.dim(2) == 1, "broadcast_spatial: input must be [N,1,1,C]");
    int N = xv.dim(0), C = xv.dim(3);
    int64_t M = static_cast<int64_t>(H) * W;
    Tensor<T> out({N, H, W, C});
    for (int n = 0; n < N; ++n)
        for (int64_t p = 0; p < M; ++p)
            for (int c = 0; c < C; ++c) out[(n * M + p) * C + c] = xv[static_cast<int64_t>(n) * C + c];
    bool rg = tape.requires_grad(x);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [x, y, N, M, C](Tape<T>& t) {
            const auto& g = t.grad(y);
            auto& gx = t.grad(x);
            for (int n = 0; n < N; ++n)
                for (int64_t p = 0; p < M; ++p)
                    for (int c = 0; c < C; ++c) gx[static_cast<int64_t>(n) * C + c] += g[(n * M + p) * C + c];
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// gate [N,H,W,1] * x [N,H,W,C]
template <typename T>
Var mul_gate(Tape<T>& tape, Var gate, Var x) {
    const auto& gv = tape.val(gate);
    const auto& xv = tape.val(x);
    detail::require(gv.ndim() == 4 && xv.ndim() == 4 && gv.dim(3) == 1, "mul_gate: gate must be [N,H,W,1]");
    detail::require(gv.dim(0) == xv.dim(0) && gv.dim(1) == xv.dim(1) && gv.dim(2) == xv.dim(2),
                    "mul_gate: spatial mismatch");
    int C = xv.dim(3);
    int64_t P = xv.size() / C;
    Tensor<T> out(xv.shape);
    for (int64_t p = 0; p < P; ++p)
        for (int c = 0; c < C; ++c) out[p * C + c] = gv[p] * xv[p * C + c];
    bool rg = tape.requires_grad(gate) || tape.requires_grad(x);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [gate, x, y, P, C](Tape<T>& t) {
            const auto& g = t.grad(y);
            const auto& gv2 = t.val(gate);
            const auto& xv2 = t.val(x);
            Tensor<T>* gg = t.requires_grad(gate) ? &t.grad(gate) : nullptr;
            Tensor<T>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
            for (int64_t p = 0; p < P; ++p)
                for (int c = 0; c < C; ++c) {
                    if (gg) (*gg)[p] += g[p * C + c] * xv2[p * C + c];
                    if (gx) (*gx)[p * C + c] += g[p * C + c] * gv2[p];
                }
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

// ---- channel shuffle --------------------------------------------------------

// reshape(g, n/g) -> transpose -> flatten permutation on the channel axis.
inline std::vector<int> shuffle_permutation(int channels, int groups) {
    detail::require(groups >= 1 && channels % groups == 0, "channel_shuffle: groups must divide channels");
    std::vector<int> perm(static_cast<size_t>(channels));
    int per = channels / groups;
    for (int j = 0; j < channels; ++j) perm[static_cast<size_t>(j)] = (j % groups) * per + j / groups;
    return perm;
}

template <typename T>
Var channel_shuffle(Tape<T>& tape, Var x, int groups) {
    const auto& xv = tape.val(x);
    int nd = xv.ndim();
    detail::require(nd >= 1, "channel_shuffle: rank 0");
    int C = xv.dim(nd - 1);
    auto perm = shuffle_permutation(C, groups);
    int64_t P = xv.size() / C;
    Tensor<T> out(xv.shape);
    for (int64_t p = 0; p < P; ++p)
        for (int j = 0; j < C; ++j) out[p * C + j] = xv[p * C + perm[static_cast<size_t>(j)]];
    bool rg = tape.requires_grad(x);
    Var y{static_cast<int>(tape.size())};
    typename Tape<T>::BackwardFn fn = nullptr;
    if (rg) {
        fn = [x, y, perm, P, C](Tape<T>& t) {
            const auto& g = t.grad(y);
            auto& gx = t.grad(x);
            for (int64_t p = 0; p < P; ++p)
                for (int j = 0; j < C; ++j) gx[p * C + perm[static_cast<size_t>(j)]] += g[p * C + j];
        };
    }
    return tape.push(std::move(out), rg, std::move(fn));
}

}  // namespace lssf
