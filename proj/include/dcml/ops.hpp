#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

#include "dcml/tensor.hpp"

namespace dcml {

// Primitive vocabulary of the engine. Everything the pipeline differentiates
// is composed from these kinds; each has a forward kernel and a backward rule
// validated against central finite differences.
enum class OpKind {
    kMatmul,
    kConv2d,
    kGlobalAvgPool,
    kMaxPool,
    kRelu,
    kSigmoid,
    kSoftmax,
    kConcat,
    kChannelScale,
    kAdd,
    kSub,
    kMul,
    kMean,
    kVariance,
    kSqrt,
    kLog,
    kExp,
    kL2Normalize,
};

inline constexpr std::array<OpKind, 18> all_op_kinds() {
    return {OpKind::kMatmul,       OpKind::kConv2d,   OpKind::kGlobalAvgPool,
            OpKind::kMaxPool,      OpKind::kRelu,     OpKind::kSigmoid,
            OpKind::kSoftmax,      OpKind::kConcat,   OpKind::kChannelScale,
            OpKind::kAdd,          OpKind::kSub,      OpKind::kMul,
            OpKind::kMean,         OpKind::kVariance, OpKind::kSqrt,
            OpKind::kLog,          OpKind::kExp,      OpKind::kL2Normalize};
}

inline const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::kMatmul: return "matmul";
        case OpKind::kConv2d: return "conv2d";
        case OpKind::kGlobalAvgPool: return "global_avg_pool";
        case OpKind::kMaxPool: return "max_pool";
        case OpKind::kRelu: return "relu";
        case OpKind::kSigmoid: return "sigmoid";
        case OpKind::kSoftmax: return "softmax";
        case OpKind::kConcat: return "concat";
        case OpKind::kChannelScale: return "channel_scale";
        case OpKind::kAdd: return "add";
        case OpKind::kSub: return "sub";
        case OpKind::kMul: return "mul";
        case OpKind::kMean: return "mean";
        case OpKind::kVariance: return "variance";
        case OpKind::kSqrt: return "sqrt";
        case OpKind::kLog: return "log";
        case OpKind::kExp: return "exp";
        case OpKind::kL2Normalize: return "l2_normalize";
    }
    return "?";
}

struct OpAttrs {
    int stride = 1;
    int pad = 0;
    int kernel = 2;  // pooling window
    int axis = 0;    // concat axis
};

namespace detail {

template <typename T>
void check_finite_input(const Tensor<T>& t, const char* kind) {
    if (!all_finite(t.values()))
        throw ValueError(std::string(kind) + ": non-finite input rejected");
}

template <typename T>
Tensor<T> make_output(const char* kind, Shape shape, std::vector<T> values) {
    if (!all_finite(values))
        throw ValueError(std::string(kind) + ": produced non-finite values");
    return Tensor<T>::from_data(std::move(shape), std::move(values));
}

template <typename T>
void maybe_record(const char* kind, std::vector<Tensor<T>> inputs, const Tensor<T>& out,
                  std::function<void()> backward) {
    auto* tape = GradTape<T>::active();
    if (!tape) return;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (!any) return;
    tape->record(kind, std::move(inputs), out, std::move(backward));
}

// Broadcast forms accepted by add/sub/mul. The left operand carries the
// output shape; the right may be a scalar, a row vector matching the columns
// of a 2-D left, or a column (rows x 1).
enum class Bcast { kSame, kScalar, kRow, kCol };

template <typename T>
Bcast bcast_kind(const char* kind, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) return Bcast::kSame;
    if (b.numel() == 1) return Bcast::kScalar;
    if (a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.shape()[1]) return Bcast::kRow;
    if (a.rank() == 2 && b.rank() == 2 && b.shape()[0] == a.shape()[0] && b.shape()[1] == 1)
        return Bcast::kCol;
    throw ShapeError(std::string(kind) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not align");
}

template <typename T>
inline int64_t bcast_index(Bcast m, int64_t flat, int cols) {
    switch (m) {
        case Bcast::kSame: return flat;
        case Bcast::kScalar: return 0;
        case Bcast::kRow: return flat % cols;
        case Bcast::kCol: return flat / cols;
    }
    return 0;
}

}  // namespace detail

// ---- elementwise binaries -------------------------------------------------

template <typename T, typename Fwd, typename BwdA, typename BwdB>
Tensor<T> binary_op(const char* kind, const Tensor<T>& a, const Tensor<T>& b, Fwd f, BwdA dfa,
                    BwdB dfb) {
    detail::check_finite_input(a, kind);
    detail::check_finite_input(b, kind);
    auto mode = detail::bcast_kind(kind, a, b);
    int cols = a.rank() == 2 ? a.shape()[1] : 1;
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> out(av.size());
    for (int64_t i = 0; i < int64_t(av.size()); ++i)
        out[size_t(i)] = f(av[size_t(i)], bv[size_t(detail::bcast_index<T>(mode, i, cols))]);
    Tensor<T> y = detail::make_output(kind, a.shape(), std::move(out));

    auto backward = [a = a, b = b, y, mode, cols, dfa, dfb]() mutable {
        const auto& g = y.grad();
        const auto& av2 = a.values();
        const auto& bv2 = b.values();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (int64_t i = 0; i < int64_t(g.size()); ++i) {
                int64_t j = detail::bcast_index<T>(mode, i, cols);
                ga[size_t(i)] += g[size_t(i)] * dfa(av2[size_t(i)], bv2[size_t(j)]);
            }
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (int64_t i = 0; i < int64_t(g.size()); ++i) {
                int64_t j = detail::bcast_index<T>(mode, i, cols);
                gb[size_t(j)] += g[size_t(i)] * dfb(av2[size_t(i)], bv2[size_t(j)]);
            }
        }
    };
    detail::maybe_record(kind, {a, b}, y, std::move(backward));
    return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

// ---- elementwise unaries --------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const char* kind, const Tensor<T>& x, Fwd f, Bwd df) {
    detail::check_finite_input(x, kind);
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    Tensor<T> y = detail::make_output(kind, x.shape(), std::move(out));
    auto backward = [x = x, y, df]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = y.grad();
        const auto& xv2 = x.values();
        const auto& yv = y.values();
        auto& gx = x.grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv2[i], yv[i]);
    };
    detail::maybe_record(kind, {x}, y, std::move(backward));
    return y;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary_op(
        "relu", x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary_op(
        "sigmoid", x,
        [](T v) {
            // split on sign so exp never overflows
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return unary_op(
        "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    detail::check_finite_input(x, "log");
    for (T v : x.values())
        if (v <= T(0)) throw ValueError("log: non-positive input");
    return unary_op(
        "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    detail::check_finite_input(x, "sqrt");
    for (T v : x.values())
        if (v < T(0)) throw ValueError("sqrt: negative input");
    return unary_op(
        "sqrt", x, [](T v) { return std::sqrt(v); },
        [](T, T y) { return T(0.5) / y; });
}

// ---- reductions -----------------------------------------------------------

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    detail::check_finite_input(x, "mean");
    T acc = 0;
    for (T v : x.values()) acc += v;
    T n = T(x.numel());
    Tensor<T> y = detail::make_output("mean", {1}, std::vector<T>{acc / n});
    auto backward = [x = x, y, n]() mutable {
        if (!x.requires_grad()) return;
        T g = y.grad()[0] / n;
        auto& gx = x.grad();
        for (auto& v : gx) v += g;
    };
    detail::maybe_record("mean", {x}, y, std::move(backward));
    return y;
}

// Population variance over all elements.
template <typename T>
Tensor<T> variance(const Tensor<T>& x) {
    detail::check_finite_input(x, "variance");
    const auto& xv = x.values();
    T n = T(xv.size());
    T mu = 0;
    for (T v : xv) mu += v;
    mu /= n;
    T acc = 0;
    for (T v : xv) acc += (v - mu) * (v - mu);
    Tensor<T> y = detail::make_output("variance", {1}, std::vector<T>{acc / n});
    auto backward = [x = x, y, mu, n]() mutable {
        if (!x.requires_grad()) return;
        T g = y.grad()[0];
        const auto& xv2 = x.values();
        auto& gx = x.grad();
        for (size_t i = 0; i < xv2.size(); ++i) gx[i] += g * T(2) * (xv2[i] - mu) / n;
    };
    detail::maybe_record("variance", {x}, y, std::move(backward));
    return y;
}

// ---- matmul ---------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_finite_input(a, "matmul");
    detail::check_finite_input(b, "matmul");
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<T> out(size_t(m) * size_t(n), T(0));
    {
        const T* A = a.values().data();
        const T* B = b.values().data();
        T* C = out.data();
        for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
                T av = A[i * k + kk];
                const T* Brow = B + size_t(kk) * n;
                T* Crow = C + size_t(i) * n;
                for (int j = 0; j < n; ++j) Crow[j] += av * Brow[j];
            }
    }
    Tensor<T> y = detail::make_output("matmul", {m, n}, std::move(out));
    auto backward = [a = a, b = b, y, m, k, n]() mutable {
        const auto& g = y.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            const T* B = b.values().data();
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    T acc = 0;
                    const T* Brow = B + size_t(kk) * n;
                    const T* Grow = g.data() + size_t(i) * n;
                    for (int j = 0; j < n; ++j) acc += Grow[j] * Brow[j];
                    ga[size_t(i) * k + kk] += acc;
                }
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            const T* A = a.values().data();
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    T av = A[size_t(i) * k + kk];
                    const T* Grow = g.data() + size_t(i) * n;
                    T* GBrow = gb.data() + size_t(kk) * n;
                    for (int j = 0; j < n; ++j) GBrow[j] += av * Grow[j];
                }
        }
    };
    detail::maybe_record("matmul", {a, b}, y, std::move(backward));
    return y;
}

// ---- convolution ----------------------------------------------------------

// Input H x W x Cin (channel innermost), weights Kh x Kw x Cin x Cout,
// optional bias Cout. Output (H + 2p - Kh)/s + 1 square analogue per axis.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                 int stride, int pad) {
    detail::check_finite_input(input, "conv2d");
    detail::check_finite_input(weights, "conv2d");
    if (input.rank() != 3)
        throw ShapeError("conv2d input must be HxWxC, got " + shape_str(input.shape()));
    if (weights.rank() != 4)
        throw ShapeError("conv2d weights must be KhxKwxCinxCout, got " +
                         shape_str(weights.shape()));
    int H = input.shape()[0], W = input.shape()[1], Ci = input.shape()[2];
    int Kh = weights.shape()[0], Kw = weights.shape()[1];
    int Cw = weights.shape()[2], Co = weights.shape()[3];
    if (Cw != Ci)
        throw ShapeError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                         " vs weights " + shape_str(weights.shape()));
    if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride/pad");
    bool has_bias = bias.defined();
    if (has_bias) {
        detail::check_finite_input(bias, "conv2d");
        if (bias.rank() != 1 || bias.shape()[0] != Co)
            throw ShapeError("conv2d bias must be (Cout)");
    }
    int Ho = (H + 2 * pad - Kh) / stride + 1;
    int Wo = (W + 2 * pad - Kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: kernel larger than padded input");

    std::vector<T> out(size_t(Ho) * Wo * Co, T(0));
    {
        const T* in = input.values().data();
        const T* w = weights.values().data();
        T* o = out.data();
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                T* orow = o + (size_t(oy) * Wo + ox) * Co;
                if (has_bias) std::memcpy(orow, bias.values().data(), sizeof(T) * size_t(Co));
                for (int ky = 0; ky < Kh; ++ky) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < Kw; ++kx) {
                        int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        const T* irow = in + (size_t(iy) * W + ix) * Ci;
                        const T* wrow = w + (size_t(ky) * Kw + kx) * Ci * Co;
                        for (int ci = 0; ci < Ci; ++ci) {
                            T v = irow[ci];
                            const T* wc = wrow + size_t(ci) * Co;
                            for (int co = 0; co < Co; ++co) orow[co] += v * wc[co];
                        }
                    }
                }
            }
    }
    Tensor<T> y = detail::make_output("conv2d", {Ho, Wo, Co}, std::move(out));

    auto backward = [input = input, weights = weights, bias = bias, y, H, W, Ci, Kh, Kw, Co,
                     Ho, Wo, stride, pad, has_bias]() mutable {
        const auto& g = y.grad();
        if (input.requires_grad()) {
            auto& gi = input.grad();
            const T* w = weights.values().data();
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const T* grow = g.data() + (size_t(oy) * Wo + ox) * Co;
                    for (int ky = 0; ky < Kh; ++ky) {
                        int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < Kw; ++kx) {
                            int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            T* girow = gi.data() + (size_t(iy) * W + ix) * Ci;
                            const T* wrow = w + (size_t(ky) * Kw + kx) * Ci * Co;
                            for (int ci = 0; ci < Ci; ++ci) {
                                T acc = 0;
                                const T* wc = wrow + size_t(ci) * Co;
                                for (int co = 0; co < Co; ++co) acc += grow[co] * wc[co];
                                girow[ci] += acc;
                            }
                        }
                    }
                }
        }
        if (weights.requires_grad()) {
            auto& gw = weights.grad();
            const T* in = input.values().data();
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const T* grow = g.data() + (size_t(oy) * Wo + ox) * Co;
                    for (int ky = 0; ky < Kh; ++ky) {
                        int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < Kw; ++kx) {
                            int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            const T* irow = in + (size_t(iy) * W + ix) * Ci;
                            T* gwrow = gw.data() + (size_t(ky) * Kw + kx) * Ci * Co;
                            for (int ci = 0; ci < Ci; ++ci) {
                                T v = irow[ci];
                                T* gwc = gwrow + size_t(ci) * Co;
                                for (int co = 0; co < Co; ++co) gwc[co] += v * grow[co];
                            }
                        }
                    }
                }
        }
        if (has_bias && bias.requires_grad()) {
            auto& gb = bias.grad();
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const T* grow = g.data() + (size_t(oy) * Wo + ox) * Co;
                    for (int co = 0; co < Co; ++co) gb[size_t(co)] += grow[co];
                }
        }
    };
    std::vector<Tensor<T>> ins = {input, weights};
    if (has_bias) ins.push_back(bias);
    detail::maybe_record("conv2d", std::move(ins), y, std::move(backward));
    return y;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, int stride, int pad) {
    return conv2d(input, weights, Tensor<T>(), stride, pad);
}

// ---- pooling --------------------------------------------------------------

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
    detail::check_finite_input(input, "global_avg_pool");
    if (input.rank() != 3)
        throw ShapeError("global_avg_pool input must be HxWxC, got " + shape_str(input.shape()));
    int H = input.shape()[0], W = input.shape()[1], C = input.shape()[2];
    std::vector<T> out(size_t(C), T(0));
    const T* in = input.values().data();
    for (int i = 0; i < H * W; ++i)
        for (int c = 0; c < C; ++c) out[size_t(c)] += in[size_t(i) * C + c];
    T inv = T(1) / T(H * W);
    for (auto& v : out) v *= inv;
    Tensor<T> y = detail::make_output("global_avg_pool", {C}, std::move(out));
    auto backward = [input = input, y, H, W, C, inv]() mutable {
        if (!input.requires_grad()) return;
        const auto& g = y.grad();
        auto& gi = input.grad();
        for (int i = 0; i < H * W; ++i)
            for (int c = 0; c < C; ++c) gi[size_t(i) * C + c] += g[size_t(c)] * inv;
    };
    detail::maybe_record("global_avg_pool", {input}, y, std::move(backward));
    return y;
}

template <typename T>
Tensor<T> max_pool(const Tensor<T>& input, int kernel, int stride, int pad) {
    detail::check_finite_input(input, "max_pool");
    if (input.rank() != 3)
        throw ShapeError("max_pool input must be HxWxC, got " + shape_str(input.shape()));
    int H = input.shape()[0], W = input.shape()[1], C = input.shape()[2];
    if (kernel < 1 || stride < 1 || pad < 0) throw ShapeError("max_pool: invalid attributes");
    int Ho = (H + 2 * pad - kernel) / stride + 1;
    int Wo = (W + 2 * pad - kernel) / stride + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("max_pool: window larger than padded input");
    std::vector<T> out(size_t(Ho) * Wo * C);
    // source index of each max, for the backward scatter; ties resolve to the
    // first hit in scan order, keeping backward deterministic
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
    const T* in = input.values().data();
    for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox)
            for (int c = 0; c < C; ++c) {
                T best = -std::numeric_limits<T>::infinity();
                int64_t best_idx = -1;
                for (int ky = 0; ky < kernel; ++ky) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < kernel; ++kx) {
                        int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        int64_t idx = (int64_t(iy) * W + ix) * C + c;
                        if (in[idx] > best) {
                            best = in[idx];
                            best_idx = idx;
                        }
                    }
                }
                size_t o = (size_t(oy) * Wo + ox) * C + size_t(c);
                out[o] = best_idx >= 0 ? best : T(0);
                (*argmax)[o] = best_idx;
            }
    Tensor<T> y = detail::make_output("max_pool", {Ho, Wo, C}, std::move(out));
    auto backward = [input = input, y, argmax]() mutable {
        if (!input.requires_grad()) return;
        const auto& g = y.grad();
        auto& gi = input.grad();
        for (size_t o = 0; o < g.size(); ++o) {
            int64_t idx = (*argmax)[o];
            if (idx >= 0) gi[size_t(idx)] += g[o];
        }
    };
    detail::maybe_record("max_pool", {input}, y, std::move(backward));
    return y;
}

// ---- softmax --------------------------------------------------------------

// Row-wise softmax with max subtraction. 1-D input is a single row.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    detail::check_finite_input(x, "softmax");
    if (x.rank() > 2) throw ShapeError("softmax expects rank 1 or 2");
    int rows = x.rank() == 2 ? x.shape()[0] : 1;
    int cols = x.rank() == 2 ? x.shape()[1] : x.shape()[0];
    std::vector<T> out(x.values().size());
    const T* in = x.values().data();
    for (int r = 0; r < rows; ++r) {
        const T* row = in + size_t(r) * cols;
        T* orow = out.data() + size_t(r) * cols;
        T mx = row[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        T denom = 0;
        for (int j = 0; j < cols; ++j) {
            orow[j] = std::exp(row[j] - mx);
            denom += orow[j];
        }
        for (int j = 0; j < cols; ++j) orow[j] /= denom;
    }
    Tensor<T> y = detail::make_output("softmax", x.shape(), std::move(out));
    auto backward = [x = x, y, rows, cols]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = y.grad();
        const auto& yv = y.values();
        auto& gx = x.grad();
        for (int r = 0; r < rows; ++r) {
            const T* grow = g.data() + size_t(r) * cols;
            const T* yrow = yv.data() + size_t(r) * cols;
            T dot = 0;
            for (int j = 0; j < cols; ++j) dot += grow[j] * yrow[j];
            for (int j = 0; j < cols; ++j)
                gx[size_t(r) * cols + size_t(j)] += yrow[j] * (grow[j] - dot);
        }
    };
    detail::maybe_record("softmax", {x}, y, std::move(backward));
    return y;
}

// ---- concat ---------------------------------------------------------------

// 1-D parts concatenate end to end (axis ignored); 2-D parts stack rows
// (axis 0) or widen columns (axis 1).
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis = 0) {
    if (parts.empty()) throw ShapeError("concat: empty input list");
    for (const auto& p : parts) detail::check_finite_input(p, "concat");
    int rk = parts[0].rank();
    for (const auto& p : parts)
        if (p.rank() != rk) throw ShapeError("concat: mixed ranks");
    if (rk != 1 && rk != 2) throw ShapeError("concat expects rank 1 or 2 parts");
    if (rk == 1) axis = 0;
    if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");

    Shape out_shape;
    std::vector<T> out;
    if (rk == 1) {
        int total = 0;
        for (const auto& p : parts) total += p.shape()[0];
        out.reserve(size_t(total));
        for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
        out_shape = {total};
    } else if (axis == 0) {
        int cols = parts[0].shape()[1], total_rows = 0;
        for (const auto& p : parts) {
            if (p.shape()[1] != cols) throw ShapeError("concat axis 0: column counts differ");
            total_rows += p.shape()[0];
        }
        out.reserve(size_t(total_rows) * cols);
        for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
        out_shape = {total_rows, cols};
    } else {
        int rows = parts[0].shape()[0], total_cols = 0;
        for (const auto& p : parts) {
            if (p.shape()[0] != rows) throw ShapeError("concat axis 1: row counts differ");
            total_cols += p.shape()[1];
        }
        out.resize(size_t(rows) * total_cols);
        int col0 = 0;
        for (const auto& p : parts) {
            int pc = p.shape()[1];
            for (int r = 0; r < rows; ++r)
                std::memcpy(out.data() + size_t(r) * total_cols + col0,
                            p.values().data() + size_t(r) * pc, sizeof(T) * size_t(pc));
            col0 += pc;
        }
        out_shape = {rows, total_cols};
    }
    Tensor<T> y = detail::make_output("concat", std::move(out_shape), std::move(out));
    auto parts_copy = parts;
    auto backward = [parts_copy, y, rk, axis]() mutable {
        const auto& g = y.grad();
        if (rk == 1 || axis == 0) {
            size_t off = 0;
            for (auto& p : parts_copy) {
                size_t n = p.values().size();
                if (p.requires_grad()) {
                    auto& gp = p.grad();
                    for (size_t i = 0; i < n; ++i) gp[i] += g[off + i];
                }
                off += n;
            }
        } else {
            int rows = y.shape()[0], total_cols = y.shape()[1];
            int col0 = 0;
            for (auto& p : parts_copy) {
                int pc = p.shape()[1];
                if (p.requires_grad()) {
                    auto& gp = p.grad();
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < pc; ++c)
                            gp[size_t(r) * pc + size_t(c)] +=
                                g[size_t(r) * total_cols + size_t(col0 + c)];
                }
                col0 += pc;
            }
        }
    };
    detail::maybe_record("concat", parts, y, std::move(backward));
    return y;
}

// ---- channel scale ----------------------------------------------------------

// Multiply each channel of `x` by scale[c]. x may be HxWxC, BxC, or C.
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& scale) {
    detail::check_finite_input(x, "channel_scale");
    detail::check_finite_input(scale, "channel_scale");
    if (scale.rank() != 1) throw ShapeError("channel_scale: scale must be rank 1");
    int C = scale.shape()[0];
    if (x.shape().back() != C)
        throw ShapeError("channel_scale: innermost dim of " + shape_str(x.shape()) +
                         " must equal scale length " + std::to_string(C));
    int64_t outer = x.numel() / C;
    std::vector<T> out(x.values().size());
    const T* in = x.values().data();
    const T* s = scale.values().data();
    for (int64_t i = 0; i < outer; ++i)
        for (int c = 0; c < C; ++c) out[size_t(i) * C + size_t(c)] = in[size_t(i) * C + size_t(c)] * s[c];
    Tensor<T> y = detail::make_output("channel_scale", x.shape(), std::move(out));
    auto backward = [x = x, scale = scale, y, outer, C]() mutable {
        const auto& g = y.grad();
        if (x.requires_grad()) {
            auto& gx = x.grad();
            const T* s = scale.values().data();
            for (int64_t i = 0; i < outer; ++i)
                for (int c = 0; c < C; ++c)
                    gx[size_t(i) * C + size_t(c)] += g[size_t(i) * C + size_t(c)] * s[c];
        }
        if (scale.requires_grad()) {
            auto& gs = scale.grad();
            const T* in = x.values().data();
            for (int64_t i = 0; i < outer; ++i)
                for (int c = 0; c < C; ++c)
                    gs[size_t(c)] += g[size_t(i) * C + size_t(c)] * in[size_t(i) * C + size_t(c)];
        }
    };
    detail::maybe_record("channel_scale", {x, scale}, y, std::move(backward));
    return y;
}

// ---- l2 normalize -----------------------------------------------------------

// Normalize a vector (rank 1) or each row (rank 2) to unit norm. A zero
// vector stays zero and flags a warning instead of producing NaN.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
    detail::check_finite_input(x, "l2_normalize");
    if (x.rank() > 2) throw ShapeError("l2_normalize expects rank 1 or 2");
    int rows = x.rank() == 2 ? x.shape()[0] : 1;
    int cols = x.rank() == 2 ? x.shape()[1] : x.shape()[0];
    std::vector<T> out(x.values().size());
    auto norms = std::make_shared<std::vector<T>>(size_t(rows));
    const T* in = x.values().data();
    for (int r = 0; r < rows; ++r) {
        const T* row = in + size_t(r) * cols;
        T sq = 0;
        for (int j = 0; j < cols; ++j) sq += row[j] * row[j];
        T n = std::sqrt(sq);
        (*norms)[size_t(r)] = n;
        if (n == T(0)) {
            push_warning("l2_normalize: zero vector left unnormalized");
            std::fill_n(out.data() + size_t(r) * cols, cols, T(0));
        } else {
            for (int j = 0; j < cols; ++j) out[size_t(r) * cols + size_t(j)] = row[j] / n;
        }
    }
    Tensor<T> y = detail::make_output("l2_normalize", x.shape(), std::move(out));
    auto backward = [x = x, y, norms, rows, cols]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = y.grad();
        const auto& yv = y.values();
        auto& gx = x.grad();
        for (int r = 0; r < rows; ++r) {
            T n = (*norms)[size_t(r)];
            if (n == T(0)) continue;
            const T* grow = g.data() + size_t(r) * cols;
            const T* yrow = yv.data() + size_t(r) * cols;
            T dot = 0;
            for (int j = 0; j < cols; ++j) dot += grow[j] * yrow[j];
            for (int j = 0; j < cols; ++j)
                gx[size_t(r) * cols + size_t(j)] += (grow[j] - yrow[j] * dot) / n;
        }
    };
    detail::maybe_record("l2_normalize", {x}, y, std::move(backward));
    return y;
}

// ---- shape utilities (plumbing, not part of the primitive contract) --------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
    Tensor<T> y = Tensor<T>::from_data(std::move(shape), x.values());
    auto backward = [x = x, y]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = y.grad();
        auto& gx = x.grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
    detail::maybe_record("reshape", {x}, y, std::move(backward));
    return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return mul(x, Tensor<T>::scalar(c));
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return scale(x, T(-1));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    return scale(mean(x), T(x.numel()));
}

// Row sums of a 2-D tensor as a (rows x 1) column, via ones matmul.
template <typename T>
Tensor<T> row_sums(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("row_sums expects rank 2");
    return matmul(x, Tensor<T>::full({x.shape()[1], 1}, T(1)));
}

// ---- uniform dispatcher -----------------------------------------------------

// Single entry point over the primitive vocabulary; the gradcheck suite and
// the shape/error tests drive the engine through this surface.
template <typename T>
Tensor<T> apply_primitive(OpKind kind, const std::vector<Tensor<T>>& inputs,
                          const OpAttrs& attrs = {}) {
    auto want = [&](size_t n) {
        if (inputs.size() != n)
            throw ShapeError(std::string(op_kind_name(kind)) + ": expected " + std::to_string(n) +
                             " inputs, got " + std::to_string(inputs.size()));
    };
    switch (kind) {
        case OpKind::kMatmul: want(2); return matmul(inputs[0], inputs[1]);
        case OpKind::kConv2d:
            if (inputs.size() == 3)
                return conv2d(inputs[0], inputs[1], inputs[2], attrs.stride, attrs.pad);
            want(2);
            return conv2d(inputs[0], inputs[1], attrs.stride, attrs.pad);
        case OpKind::kGlobalAvgPool: want(1); return global_avg_pool(inputs[0]);
        case OpKind::kMaxPool: want(1); return max_pool(inputs[0], attrs.kernel, attrs.stride, attrs.pad);
        case OpKind::kRelu: want(1); return relu(inputs[0]);
        case OpKind::kSigmoid: want(1); return sigmoid(inputs[0]);
        case OpKind::kSoftmax: want(1); return softmax(inputs[0]);
        case OpKind::kConcat: return concat(inputs, attrs.axis);
        case OpKind::kChannelScale: want(2); return channel_scale(inputs[0], inputs[1]);
        case OpKind::kAdd: want(2); return add(inputs[0], inputs[1]);
        case OpKind::kSub: want(2); return sub(inputs[0], inputs[1]);
        case OpKind::kMul: want(2); return mul(inputs[0], inputs[1]);
        case OpKind::kMean: want(1); return mean(inputs[0]);
        case OpKind::kVariance: want(1); return variance(inputs[0]);
        case OpKind::kSqrt: want(1); return sqrt(inputs[0]);
        case OpKind::kLog: want(1); return log(inputs[0]);
        case OpKind::kExp: want(1); return exp(inputs[0]);
        case OpKind::kL2Normalize: want(1); return l2_normalize(inputs[0]);
    }
    throw ConfigError("unknown primitive kind");
}

}  // namespace dcml
