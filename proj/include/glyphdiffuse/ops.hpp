#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "glyphdiffuse/gemm.hpp"
#include "glyphdiffuse/tape.hpp"
#include "glyphdiffuse/tensor.hpp"

// Differentiable ops. Every op validates shapes, builds its output, checks it
// for non-finite values, and (when recording and any input sits on the tape)
// emits one node whose closure scatters grad(self) into the parents' buffers.
// Backward loops are fixed-order, so identical tapes give identical gradients.

namespace gdf::ops {

template <class S>
bool want_grad(const TapeT<S>& tape, const TensorT<S>& a) {
    return tape.recording && a.node >= 0;
}

template <class S>
bool want_grad(const TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    return tape.recording && (a.node >= 0 || b.node >= 0);
}

// ------------------------------------------------------------ elementwise --

template <class S>
TensorT<S> add(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    if (!a.same_shape(b))
        throw shape_error("add: shape mismatch " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape));
    TensorT<S> out(a.shape);
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.mutable_data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    check_finite(out, "add");
    if (want_grad(tape, a, b)) {
        int ia = a.node, ib = b.node;
        out.node = tape.emit(out.shape, {ia, ib}, "add", [ia, ib, n](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            if (ia >= 0) {
                auto& ga = tp.grad(ia);
                for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (ib >= 0) {
                auto& gb = tp.grad(ib);
                for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
        out.requires_grad = true;
    }
    return out;
}

template <class S>
TensorT<S> sub(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    if (!a.same_shape(b))
        throw shape_error("sub: shape mismatch " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape));
    TensorT<S> out(a.shape);
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.mutable_data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    check_finite(out, "sub");
    if (want_grad(tape, a, b)) {
        int ia = a.node, ib = b.node;
        out.node = tape.emit(out.shape, {ia, ib}, "sub", [ia, ib, n](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            if (ia >= 0) {
                auto& ga = tp.grad(ia);
                for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (ib >= 0) {
                auto& gb = tp.grad(ib);
                for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
            }
        });
        out.requires_grad = true;
    }
    return out;
}

template <class S>
TensorT<S> mul(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    if (!a.same_shape(b))
        throw shape_error("mul: shape mismatch " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape));
    TensorT<S> out(a.shape);
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.mutable_data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    check_finite(out, "mul");
    if (want_grad(tape, a, b)) {
        int ia = a.node, ib = b.node;
        TensorT<S> sa = a, sb = b;
        out.node = tape.emit(out.shape, {ia, ib}, "mul", [=](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            if (ia >= 0) {
                auto& ga = tp.grad(ia);
                const S* vb = sb.data();
                for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
            }
            if (ib >= 0) {
                auto& gb = tp.grad(ib);
                const S* va = sa.data();
                for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
            }
        });
        out.requires_grad = true;
    }
    return out;
}

template <class S>
TensorT<S> scale(TapeT<S>& tape, const TensorT<S>& a, S c) {
    TensorT<S> out(a.shape);
    const S* pa = a.data();
    S* po = out.mutable_data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    check_finite(out, "scale");
    if (want_grad(tape, a)) {
        int ia = a.node;
        out.node = tape.emit(out.shape, {ia}, "scale", [ia, c, n](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            auto& ga = tp.grad(ia);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
        });
        out.requires_grad = true;
    }
    return out;
}

template <class S>
TensorT<S> add_scalar(TapeT<S>& tape, const TensorT<S>& a, S c) {
    TensorT<S> out(a.shape);
    const S* pa = a.data();
    S* po = out.mutable_data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + c;
    check_finite(out, "add_scalar");
    if (want_grad(tape, a)) {
        int ia = a.node;
        out.node = tape.emit(out.shape, {ia}, "add_scalar", [ia, n](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            auto& ga = tp.grad(ia);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
        });
        out.requires_grad = true;
    }
    return out;
}

template <class S>
TensorT<S> silu(TapeT<S>& tape, const TensorT<S>& a) {
    TensorT<S> out(a.shape);
    const S* pa = a.data();
    S* po = out.mutable_data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        S s = S(1) / (S(1) + std::exp(-pa[i]));
        po[i] = pa[i] * s;
    }
    check_finite(out, "silu");
    if (want_grad(tape, a)) {
        int ia = a.node;
        TensorT<S> sa = a;
        out.node = tape.emit(out.shape, {ia}, "silu", [=](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            auto& ga = tp.grad(ia);
            const S* x = sa.data();
            for (std::int64_t i = 0; i < n; ++i) {
                S s = S(1) / (S(1) + std::exp(-x[i]));
                ga[i] += g[i] * s * (S(1) + x[i] * (S(1) - s));
            }
        });
        out.requires_grad = true;
    }
    return out;
}

template <class S>
TensorT<S> log_ew(TapeT<S>& tape, const TensorT<S>& a) {
    TensorT<S> out(a.shape);
    const S* pa = a.data();
    S* po = out.mutable_data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = std::log(pa[i]);
    check_finite(out, "log");
    if (want_grad(tape, a)) {
        int ia = a.node;
        TensorT<S> sa = a;
        out.node = tape.emit(out.shape, {ia}, "log", [=](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            auto& ga = tp.grad(ia);
            const S* x = sa.data();
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] / x[i];
        });
        out.requires_grad = true;
    }
    return out;
}

// ------------------------------------------------------- broadcast biases --

// a[..., N] + b[N]
template <class S>
TensorT<S> add_rowwise(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    if (b.ndim() != 1 || a.ndim() < 1 || a.shape.back() != b.dim(0))
        throw shape_error("add_rowwise: " + shape_str(a.shape) + " + " + shape_str(b.shape));
    const std::int64_t cols = b.dim(0);
    const std::int64_t rows = a.numel() / cols;
    TensorT<S> out(a.shape);
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.mutable_data();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < cols; ++j) po[r * cols + j] = pa[r * cols + j] + pb[j];
    check_finite(out, "add_rowwise");
    if (want_grad(tape, a, b)) {
        int ia = a.node, ib = b.node;
        out.node =
            tape.emit(out.shape, {ia, ib}, "add_rowwise", [=](TapeT<S>& tp, int self) {
                const auto& g = tp.grad(self);
                if (ia >= 0) {
                    auto& ga = tp.grad(ia);
                    for (std::int64_t i = 0; i < rows * cols; ++i) ga[i] += g[i];
                }
                if (ib >= 0) {
                    auto& gb = tp.grad(ib);
                    for (std::int64_t r = 0; r < rows; ++r)
                        for (std::int64_t j = 0; j < cols; ++j) gb[j] += g[r * cols + j];
                }
            });
        out.requires_grad = true;
    }
    return out;
}

// x[B,C,H,W] + b[C]
template <class S>
TensorT<S> add_channelwise(TapeT<S>& tape, const TensorT<S>& x, const TensorT<S>& b) {
    if (x.ndim() != 4 || b.ndim() != 1 || x.dim(1) != b.dim(0))
        throw shape_error("add_channelwise: " + shape_str(x.shape) + " + " + shape_str(b.shape));
    const std::int64_t B = x.dim(0), C = x.dim(1), HW = std::int64_t(x.dim(2)) * x.dim(3);
    TensorT<S> out(x.shape);
    const S* px = x.data();
    const S* pb = b.data();
    S* po = out.mutable_data();
    for (std::int64_t i = 0; i < B * C; ++i) {
        const S bias = pb[i % C];
        for (std::int64_t j = 0; j < HW; ++j) po[i * HW + j] = px[i * HW + j] + bias;
    }
    check_finite(out, "add_channelwise");
    if (want_grad(tape, x, b)) {
        int ix = x.node, ib = b.node;
        out.node =
            tape.emit(out.shape, {ix, ib}, "add_channelwise", [=](TapeT<S>& tp, int self) {
                const auto& g = tp.grad(self);
                if (ix >= 0) {
                    auto& gx = tp.grad(ix);
                    for (std::int64_t i = 0; i < B * C * HW; ++i) gx[i] += g[i];
                }
                if (ib >= 0) {
                    auto& gb = tp.grad(ib);
                    for (std::int64_t i = 0; i < B * C; ++i) {
                        S acc = S(0);
                        for (std::int64_t j = 0; j < HW; ++j) acc += g[i * HW + j];
                        gb[i % C] += acc;
                    }
                }
            });
        out.requires_grad = true;
    }
    return out;
}

// Per-sample vector broadcast over the spatial grid: x[B,C,H,W] + v[B,C].
// This is how the (timestep + style) projection enters a ResNet block.
template <class S>
TensorT<S> add_sample_channel(TapeT<S>& tape, const TensorT<S>& x, const TensorT<S>& v) {
    if (x.ndim() != 4 || v.ndim() != 2 || x.dim(0) != v.dim(0) || x.dim(1) != v.dim(1))
        throw shape_error("add_sample_channel: " + shape_str(x.shape) + " + " +
                          shape_str(v.shape));
    const std::int64_t BC = std::int64_t(x.dim(0)) * x.dim(1);
    const std::int64_t HW = std::int64_t(x.dim(2)) * x.dim(3);
    TensorT<S> out(x.shape);
    const S* px = x.data();
    const S* pv = v.data();
    S* po = out.mutable_data();
    for (std::int64_t i = 0; i < BC; ++i) {
        const S bias = pv[i];
        for (std::int64_t j = 0; j < HW; ++j) po[i * HW + j] = px[i * HW + j] + bias;
    }
    check_finite(out, "add_sample_channel");
    if (want_grad(tape, x, v)) {
        int ix = x.node, iv = v.node;
        out.node =
            tape.emit(out.shape, {ix, iv}, "add_sample_channel", [=](TapeT<S>& tp, int self) {
                const auto& g = tp.grad(self);
                if (ix >= 0) {
                    auto& gx = tp.grad(ix);
                    for (std::int64_t i = 0; i < BC * HW; ++i) gx[i] += g[i];
                }
                if (iv >= 0) {
                    auto& gv = tp.grad(iv);
                    for (std::int64_t i = 0; i < BC; ++i) {
                        S acc = S(0);
                        for (std::int64_t j = 0; j < HW; ++j) acc += g[i * HW + j];
                        gv[i] += acc;
                    }
                }
            });
        out.requires_grad = true;
    }
    return out;
}

// -------------------------------------------------------------- reductions --

template <class S>
TensorT<S> sum_all(TapeT<S>& tape, const TensorT<S>& a) {
    const std::int64_t n = a.numel();
    const S* pa = a.data();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += double(pa[i]);
    TensorT<S> out({1}, std::vector<S>{S(acc)});
    check_finite(out, "sum_all");
    if (want_grad(tape, a)) {
        int ia = a.node;
        out.node = tape.emit(out.shape, {ia}, "sum_all", [ia, n](TapeT<S>& tp, int self) {
            const S g = tp.grad(self)[0];
            auto& ga = tp.grad(ia);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
        });
        out.requires_grad = true;
    }
    return out;
}

template <class S>
TensorT<S> mean_all(TapeT<S>& tape, const TensorT<S>& a) {
    return scale(tape, sum_all(tape, a), S(1) / S(a.numel()));
}

// mean((a - b)^2), accumulated in double.
template <class S>
TensorT<S> mse(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    if (!a.same_shape(b))
        throw shape_error("mse: shape mismatch " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape));
    const std::int64_t n = a.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double d = double(pa[i]) - double(pb[i]);
        acc += d * d;
    }
    TensorT<S> out({1}, std::vector<S>{S(acc / double(n))});
    check_finite(out, "mse");
    if (want_grad(tape, a, b)) {
        int ia = a.node, ib = b.node;
        TensorT<S> sa = a, sb = b;
        out.node = tape.emit(out.shape, {ia, ib}, "mse", [=](TapeT<S>& tp, int self) {
            const S g = tp.grad(self)[0];
            const S* va = sa.data();
            const S* vb = sb.data();
            const S k = S(2) * g / S(n);
            if (ia >= 0) {
                auto& ga = tp.grad(ia);
                for (std::int64_t i = 0; i < n; ++i) ga[i] += k * (va[i] - vb[i]);
            }
            if (ib >= 0) {
                auto& gb = tp.grad(ib);
                for (std::int64_t i = 0; i < n; ++i) gb[i] -= k * (va[i] - vb[i]);
            }
        });
        out.requires_grad = true;
    }
    return out;
}

// ------------------------------------------------------------------ shape --

template <class S>
TensorT<S> reshape(TapeT<S>& tape, const TensorT<S>& a, std::vector<int> shp) {
    TensorT<S> out = a.reshaped(shp);
    out.node = -1;
    out.requires_grad = false;
    if (want_grad(tape, a)) {
        int ia = a.node;
        const std::int64_t n = a.numel();
        out.node = tape.emit(out.shape, {ia}, "reshape", [ia, n](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            auto& ga = tp.grad(ia);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
        });
        out.requires_grad = true;
    }
    return out;
}

template <class S>
TensorT<S> concat(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b, int axis) {
    if (a.ndim() != b.ndim() || axis < 0 || axis >= a.ndim())
        throw shape_error("concat: rank/axis mismatch " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape) + " axis " + std::to_string(axis));
    for (int i = 0; i < a.ndim(); ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            throw shape_error("concat: shape mismatch off axis: " + shape_str(a.shape) +
                              " vs " + shape_str(b.shape));
    std::vector<int> oshape = a.shape;
    oshape[size_t(axis)] += b.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
    const std::int64_t wa = a.dim(axis) * inner, wb = b.dim(axis) * inner;
    TensorT<S> out(oshape);
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.mutable_data();
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy(pa + o * wa, pa + (o + 1) * wa, po + o * (wa + wb));
        std::copy(pb + o * wb, pb + (o + 1) * wb, po + o * (wa + wb) + wa);
    }
    check_finite(out, "concat");
    if (want_grad(tape, a, b)) {
        int ia = a.node, ib = b.node;
        out.node = tape.emit(out.shape, {ia, ib}, "concat",
                             [ia, ib, outer, wa, wb](TapeT<S>& tp, int self) {
                                 const auto& g = tp.grad(self);
                                 if (ia >= 0) {
                                     auto& ga = tp.grad(ia);
                                     for (std::int64_t o = 0; o < outer; ++o)
                                         for (std::int64_t i = 0; i < wa; ++i)
                                             ga[o * wa + i] += g[o * (wa + wb) + i];
                                 }
                                 if (ib >= 0) {
                                     auto& gb = tp.grad(ib);
                                     for (std::int64_t o = 0; o < outer; ++o)
                                         for (std::int64_t i = 0; i < wb; ++i)
                                             gb[o * wb + i] += g[o * (wa + wb) + wa + i];
                                 }
                             });
        out.requires_grad = true;
    }
    return out;
}

namespace detail {
inline void permute4_strides(const std::vector<int>& shape, const int perm[4],
                             std::vector<int>& oshape, std::int64_t src_stride[4]) {
    std::int64_t s[4];
    s[3] = 1;
    for (int i = 2; i >= 0; --i) s[i] = s[i + 1] * shape[size_t(i + 1)];
    oshape.resize(4);
    for (int i = 0; i < 4; ++i) {
        oshape[size_t(i)] = shape[size_t(perm[i])];
        src_stride[i] = s[perm[i]];
    }
}
}  // namespace detail

// 4-D axis permutation, y[i0,i1,i2,i3] = x[i_perm...].
template <class S>
TensorT<S> permute4(TapeT<S>& tape, const TensorT<S>& a, int p0, int p1, int p2, int p3) {
    if (a.ndim() != 4) throw shape_error("permute4 needs a 4-D tensor, got " + shape_str(a.shape));
    const int perm[4] = {p0, p1, p2, p3};
    std::vector<int> oshape;
    std::int64_t st[4];
    detail::permute4_strides(a.shape, perm, oshape, st);
    TensorT<S> out(oshape);
    const S* pa = a.data();
    S* po = out.mutable_data();
    std::int64_t idx = 0;
    for (std::int64_t i0 = 0; i0 < oshape[0]; ++i0)
        for (std::int64_t i1 = 0; i1 < oshape[1]; ++i1)
            for (std::int64_t i2 = 0; i2 < oshape[2]; ++i2) {
                const S* row = pa + i0 * st[0] + i1 * st[1] + i2 * st[2];
                for (std::int64_t i3 = 0; i3 < oshape[3]; ++i3)
                    po[idx++] = row[i3 * st[3]];
            }
    check_finite(out, "permute4");
    if (want_grad(tape, a)) {
        int ia = a.node;
        std::vector<int> osh = oshape;
        std::int64_t s0 = st[0], s1 = st[1], s2 = st[2], s3 = st[3];
        out.node = tape.emit(out.shape, {ia}, "permute4", [=](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            auto& ga = tp.grad(ia);
            std::int64_t k = 0;
            for (std::int64_t i0 = 0; i0 < osh[0]; ++i0)
                for (std::int64_t i1 = 0; i1 < osh[1]; ++i1)
                    for (std::int64_t i2 = 0; i2 < osh[2]; ++i2) {
                        S* row = ga.data() + i0 * s0 + i1 * s1 + i2 * s2;
                        for (std::int64_t i3 = 0; i3 < osh[3]; ++i3)
                            row[i3 * s3] += g[k++];
                    }
        });
        out.requires_grad = true;
    }
    return out;
}

// Swap the last two axes of a 2-D or 3-D tensor.
template <class S>
TensorT<S> transpose_last2(TapeT<S>& tape, const TensorT<S>& a) {
    if (a.ndim() == 2) {
        TensorT<S> a3 = reshape(tape, a, {1, a.dim(0), a.dim(1)});
        TensorT<S> t = transpose_last2(tape, a3);
        return reshape(tape, t, {a.dim(1), a.dim(0)});
    }
    if (a.ndim() != 3)
        throw shape_error("transpose_last2 needs 2-D or 3-D, got " + shape_str(a.shape));
    TensorT<S> a4 = reshape(tape, a, {a.dim(0), a.dim(1), a.dim(2), 1});
    TensorT<S> t = permute4(tape, a4, 0, 2, 1, 3);
    return reshape(tape, t, {a.dim(0), a.dim(2), a.dim(1)});
}

// ----------------------------------------------------------------- matmul --

template <class S>
TensorT<S> matmul(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw shape_error("matmul: incompatible shapes " + shape_str(a.shape) + " x " +
                          shape_str(b.shape));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<S> out({int(m), int(n)});
    gemm(a.data(), b.data(), out.mutable_data(), m, k, n);
    check_finite(out, "matmul");
    if (want_grad(tape, a, b)) {
        int ia = a.node, ib = b.node;
        TensorT<S> sa = a, sb = b;
        out.node = tape.emit(out.shape, {ia, ib}, "matmul", [=](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            if (ia >= 0) {
                // dA += g * B^T
                gemm_bt_acc(g.data(), sb.data(), tp.grad(ia).data(), m, n, k);
            }
            if (ib >= 0) {
                // dB += A^T * g  (A stored [m x k])
                auto& gb = tp.grad(ib);
                std::vector<S> tmp(size_t(k * n));
                gemm_at(sa.data(), g.data(), tmp.data(), k, m, n);
                for (std::int64_t i = 0; i < k * n; ++i) gb[i] += tmp[i];
            }
        });
        out.requires_grad = true;
    }
    return out;
}

// x[M,K] * w^T[K,N] + b[N], weights stored [N,K].
template <class S>
TensorT<S> linear(TapeT<S>& tape, const TensorT<S>& x, const TensorT<S>& w,
                  const TensorT<S>& b) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1))
        throw shape_error("linear: incompatible shapes " + shape_str(x.shape) + " x w " +
                          shape_str(w.shape));
    if (b.ndim() != 1 || b.dim(0) != w.dim(0))
        throw shape_error("linear: bias " + shape_str(b.shape) + " vs w " + shape_str(w.shape));
    const std::int64_t m = x.dim(0), k = x.dim(1), n = w.dim(0);
    TensorT<S> out({int(m), int(n)});
    gemm_bt(x.data(), w.data(), out.mutable_data(), m, k, n);
    {
        S* po = out.mutable_data();
        const S* pb = b.data();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) po[i * n + j] += pb[j];
    }
    check_finite(out, "linear");
    if (tape.recording && (x.node >= 0 || w.node >= 0 || b.node >= 0)) {
        int ix = x.node, iw = w.node, ibias = b.node;
        TensorT<S> sx = x, sw = w;
        out.node =
            tape.emit(out.shape, {ix, iw, ibias}, "linear", [=](TapeT<S>& tp, int self) {
                const auto& g = tp.grad(self);
                if (ix >= 0) {
                    // dX += g[M,N] * W[N,K]
                    gemm_acc(g.data(), sw.data(), tp.grad(ix).data(), m, n, k);
                }
                if (iw >= 0) {
                    // dW += g^T[N,M] * X[M,K]
                    auto& gw = tp.grad(iw);
                    std::vector<S> tmp(size_t(n * k));
                    gemm_at(g.data(), sx.data(), tmp.data(), n, m, k);
                    for (std::int64_t i = 0; i < n * k; ++i) gw[i] += tmp[i];
                }
                if (ibias >= 0) {
                    auto& gb = tp.grad(ibias);
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                }
            });
        out.requires_grad = true;
    }
    return out;
}

// Batched matmul: a[B,m,k] * b[B,k,n] -> [B,m,n].
template <class S>
TensorT<S> bmm(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw shape_error("bmm: incompatible shapes " + shape_str(a.shape) + " x " +
                          shape_str(b.shape));
    const std::int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    TensorT<S> out({int(B), int(m), int(n)});
    {
        S* po = out.mutable_data();
        const S* pa = a.data();
        const S* pb = b.data();
        for (std::int64_t bi = 0; bi < B; ++bi)
            gemm(pa + bi * m * k, pb + bi * k * n, po + bi * m * n, m, k, n);
    }
    check_finite(out, "bmm");
    if (want_grad(tape, a, b)) {
        int ia = a.node, ib = b.node;
        TensorT<S> sa = a, sb = b;
        out.node = tape.emit(out.shape, {ia, ib}, "bmm", [=](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            if (ia >= 0) {
                auto& ga = tp.grad(ia);
                for (std::int64_t bi = 0; bi < B; ++bi)
                    gemm_bt_acc(g.data() + bi * m * n, sb.data() + bi * k * n,
                                ga.data() + bi * m * k, m, n, k);
            }
            if (ib >= 0) {
                auto& gb = tp.grad(ib);
                std::vector<S> tmp(size_t(k * n));
                for (std::int64_t bi = 0; bi < B; ++bi) {
                    gemm_at(sa.data() + bi * m * k, g.data() + bi * m * n, tmp.data(), k, m, n);
                    for (std::int64_t i = 0; i < k * n; ++i) gb[bi * k * n + i] += tmp[i];
                }
            }
        });
        out.requires_grad = true;
    }
    return out;
}

// ---------------------------------------------------------------- softmax --

// Max-subtracted softmax along `axis`.
template <class S>
TensorT<S> softmax(TapeT<S>& tape, const TensorT<S>& x, int axis) {
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim())
        throw shape_error("softmax: axis " + std::to_string(axis) + " out of range for " +
                          shape_str(x.shape));
    const std::int64_t len = x.dim(axis);
    if (len <= 0) throw shape_error("softmax: empty axis");
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
    TensorT<S> out(x.shape);
    const S* px = x.data();
    S* po = out.mutable_data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const S* src = px + o * len * inner + in;
            S* dst = po + o * len * inner + in;
            S mx = src[0];
            for (std::int64_t i = 1; i < len; ++i) mx = std::max(mx, src[i * inner]);
            double denom = 0.0;
            for (std::int64_t i = 0; i < len; ++i) {
                S e = std::exp(src[i * inner] - mx);
                dst[i * inner] = e;
                denom += double(e);
            }
            const S inv = S(1.0 / denom);
            for (std::int64_t i = 0; i < len; ++i) dst[i * inner] *= inv;
        }
    check_finite(out, "softmax");
    if (want_grad(tape, x)) {
        int ix = x.node;
        TensorT<S> sy = out;
        out.node = tape.emit(out.shape, {ix}, "softmax",
                             [ix, sy, outer, len, inner](TapeT<S>& tp, int self) {
                                 const auto& g = tp.grad(self);
                                 auto& gx = tp.grad(ix);
                                 const S* y = sy.data();
                                 for (std::int64_t o = 0; o < outer; ++o)
                                     for (std::int64_t in = 0; in < inner; ++in) {
                                         const std::int64_t base = o * len * inner + in;
                                         double dot = 0.0;
                                         for (std::int64_t i = 0; i < len; ++i)
                                             dot += double(g[base + i * inner]) *
                                                    double(y[base + i * inner]);
                                         for (std::int64_t i = 0; i < len; ++i)
                                             gx[base + i * inner] +=
                                                 y[base + i * inner] *
                                                 (g[base + i * inner] - S(dot));
                                     }
                             });
        out.requires_grad = true;
    }
    return out;
}

// -------------------------------------------------------------- embedding --

// Row gather: table[V,D], idx[N] -> [N,D]. Backward scatter-adds rows.
template <class S>
TensorT<S> embedding(TapeT<S>& tape, const TensorT<S>& table, const std::vector<int>& idx) {
    if (table.ndim() != 2)
        throw shape_error("embedding: table must be 2-D, got " + shape_str(table.shape));
    const std::int64_t V = table.dim(0), D = table.dim(1);
    for (int i : idx)
        if (i < 0 || i >= V)
            throw index_error("embedding: index " + std::to_string(i) +
                              " out of range for table of " + std::to_string(V) + " rows");
    const std::int64_t N = std::int64_t(idx.size());
    TensorT<S> out({int(N), int(D)});
    const S* pt = table.data();
    S* po = out.mutable_data();
    for (std::int64_t i = 0; i < N; ++i)
        std::copy(pt + idx[size_t(i)] * D, pt + (idx[size_t(i)] + 1) * D, po + i * D);
    check_finite(out, "embedding");
    if (want_grad(tape, table)) {
        int it = table.node;
        std::vector<int> si = idx;
        out.node = tape.emit(out.shape, {it}, "embedding", [it, si, D](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            auto& gt = tp.grad(it);
            for (std::int64_t i = 0; i < std::int64_t(si.size()); ++i)
                for (std::int64_t d = 0; d < D; ++d)
                    gt[si[size_t(i)] * D + d] += g[i * D + d];
        });
        out.requires_grad = true;
    }
    return out;
}

// ----------------------------------------------------------------- conv2d --

namespace detail {

// col[(C*kh*kw) x (Ho*Wo)] for one image, zero-padded borders.
template <class S>
void im2col(const S* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t Ho, std::int64_t Wo, S* col) {
    const std::int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t ki = 0; ki < kh; ++ki)
            for (std::int64_t kj = 0; kj < kw; ++kj, ++row) {
                S* dst = col + row * Ho * Wo;
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    const std::int64_t iy = oy * stride - ph + ki;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst + oy * Wo, dst + (oy + 1) * Wo, S(0));
                        continue;
                    }
                    const S* src = x + (c * H + iy) * W;
                    for (std::int64_t ox = 0; ox < Wo; ++ox) {
                        const std::int64_t ix = ox * stride - pw + kj;
                        dst[oy * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : S(0);
                    }
                }
            }
}

template <class S>
void col2im_acc(const S* col, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
                std::int64_t kw, std::int64_t stride, std::int64_t Ho, std::int64_t Wo, S* x) {
    const std::int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t ki = 0; ki < kh; ++ki)
            for (std::int64_t kj = 0; kj < kw; ++kj, ++row) {
                const S* src = col + row * Ho * Wo;
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    const std::int64_t iy = oy * stride - ph + ki;
                    if (iy < 0 || iy >= H) continue;
                    S* dst = x + (c * H + iy) * W;
                    for (std::int64_t ox = 0; ox < Wo; ++ox) {
                        const std::int64_t ix = ox * stride - pw + kj;
                        if (ix >= 0 && ix < W) dst[ix] += src[oy * Wo + ox];
                    }
                }
            }
}

}  // namespace detail

// x[B,C,H,W] conv w[O,C,kh,kw] + b[O], zero same-padding, odd kernels.
// stride 1 preserves H,W; stride 2 halves them (H, W even).
template <class S>
TensorT<S> conv2d(TapeT<S>& tape, const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b,
                  int stride = 1) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw shape_error("conv2d: need 4-D input and kernel, got " + shape_str(x.shape) +
                          " and " + shape_str(w.shape));
    if (x.dim(1) != w.dim(1))
        throw shape_error("conv2d: channel mismatch, input " + shape_str(x.shape) +
                          " vs kernel " + shape_str(w.shape));
    if (w.dim(2) % 2 == 0 || w.dim(3) % 2 == 0)
        throw shape_error("conv2d: kernel extents must be odd, got " + shape_str(w.shape));
    if (b.ndim() != 1 || b.dim(0) != w.dim(0))
        throw shape_error("conv2d: bias " + shape_str(b.shape) + " vs kernel " +
                          shape_str(w.shape));
    if (stride != 1 && stride != 2)
        throw validation_error("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::int64_t Ho = (H + 2 * ((kh - 1) / 2) - kh) / stride + 1;
    const std::int64_t Wo = (W + 2 * ((kw - 1) / 2) - kw) / stride + 1;
    const std::int64_t K = C * kh * kw, P = Ho * Wo;

    TensorT<S> out({int(B), int(O), int(Ho), int(Wo)});
    {
        S* po = out.mutable_data();
        const S* px = x.data();
        const S* pw = w.data();
        const S* pb = b.data();
        parallel_for(B, [&](std::int64_t lo, std::int64_t hi) {
            std::vector<S> col(size_t(K * P));
            for (std::int64_t bi = lo; bi < hi; ++bi) {
                detail::im2col(px + bi * C * H * W, C, H, W, kh, kw, stride, Ho, Wo, col.data());
                S* y = po + bi * O * P;
                gemm(pw, col.data(), y, O, K, P);
                for (std::int64_t o = 0; o < O; ++o) {
                    const S bias = pb[o];
                    for (std::int64_t p = 0; p < P; ++p) y[o * P + p] += bias;
                }
            }
        });
    }
    check_finite(out, "conv2d");
    if (tape.recording && (x.node >= 0 || w.node >= 0 || b.node >= 0)) {
        int ix = x.node, iw = w.node, ibias = b.node;
        TensorT<S> sx = x, sw = w;
        std::int64_t st = stride;
        out.node = tape.emit(out.shape, {ix, iw, ibias}, "conv2d", [=](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            std::vector<S> col(size_t(K * P));
            std::vector<S> dcol(size_t(K * P));
            S* gx = ix >= 0 ? tp.grad(ix).data() : nullptr;
            S* gw = iw >= 0 ? tp.grad(iw).data() : nullptr;
            S* gb = ibias >= 0 ? tp.grad(ibias).data() : nullptr;
            for (std::int64_t bi = 0; bi < B; ++bi) {
                const S* gy = g.data() + bi * O * P;
                if (iw >= 0) {
                    detail::im2col(sx.data() + bi * C * H * W, C, H, W, kh, kw, st, Ho, Wo,
                                   col.data());
                    // dW += gy[O,P] * col^T[P,K]
                    gemm_bt_acc(gy, col.data(), gw, O, P, K);
                }
                if (ix >= 0) {
                    // dcol = W^T[K,O] * gy[O,P]
                    gemm_at(sw.data(), gy, dcol.data(), K, O, P);
                    detail::col2im_acc(dcol.data(), C, H, W, kh, kw, st, Ho, Wo,
                                       gx + bi * C * H * W);
                }
                if (ibias >= 0)
                    for (std::int64_t o = 0; o < O; ++o) {
                        S acc = S(0);
                        for (std::int64_t p = 0; p < P; ++p) acc += gy[o * P + p];
                        gb[o] += acc;
                    }
            }
        });
        out.requires_grad = true;
    }
    return out;
}

// ------------------------------------------------------------- group norm --

// Largest divisor of c not exceeding min(8, c); the default grouping rule.
inline int norm_groups_for(int channels) {
    int cap = std::min(8, channels);
    for (int g = cap; g >= 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

template <class S>
TensorT<S> group_norm(TapeT<S>& tape, const TensorT<S>& x, const TensorT<S>& gamma,
                      const TensorT<S>& beta, int groups, S eps = S(1e-5)) {
    if (x.ndim() != 4) throw shape_error("group_norm: need 4-D input, got " + shape_str(x.shape));
    const std::int64_t B = x.dim(0), C = x.dim(1), HW = std::int64_t(x.dim(2)) * x.dim(3);
    if (groups < 1 || C % groups != 0)
        throw shape_error("group_norm: " + std::to_string(groups) +
                          " groups do not divide " + std::to_string(C) + " channels");
    if (gamma.ndim() != 1 || gamma.dim(0) != C || beta.ndim() != 1 || beta.dim(0) != C)
        throw shape_error("group_norm: affine params must be [C]");
    const std::int64_t cg = C / groups, m = cg * HW;

    TensorT<S> out(x.shape);
    std::vector<S> mean(size_t(B * groups)), inv_std(size_t(B * groups));
    {
        const S* px = x.data();
        S* po = out.mutable_data();
        const S* pg = gamma.data();
        const S* pb = beta.data();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t g = 0; g < groups; ++g) {
                const S* src = px + (b * C + g * cg) * HW;
                double mu = 0.0;
                for (std::int64_t i = 0; i < m; ++i) mu += double(src[i]);
                mu /= double(m);
                double var = 0.0;
                for (std::int64_t i = 0; i < m; ++i) {
                    double d = double(src[i]) - mu;
                    var += d * d;
                }
                var /= double(m);
                const S is = S(1.0 / std::sqrt(var + double(eps)));
                mean[size_t(b * groups + g)] = S(mu);
                inv_std[size_t(b * groups + g)] = is;
                S* dst = po + (b * C + g * cg) * HW;
                for (std::int64_t c = 0; c < cg; ++c) {
                    const S ga = pg[g * cg + c], be = pb[g * cg + c];
                    for (std::int64_t i = 0; i < HW; ++i) {
                        S xh = (src[c * HW + i] - S(mu)) * is;
                        dst[c * HW + i] = ga * xh + be;
                    }
                }
            }
    }
    check_finite(out, "group_norm");
    if (tape.recording && (x.node >= 0 || gamma.node >= 0 || beta.node >= 0)) {
        int ix = x.node, ig = gamma.node, ib = beta.node;
        TensorT<S> sx = x, sgamma = gamma;
        std::int64_t G = groups;
        out.node = tape.emit(out.shape, {ix, ig, ib}, "group_norm", [=](TapeT<S>& tp, int self) {
            const auto& g = tp.grad(self);
            const S* px = sx.data();
            const S* pg = sgamma.data();
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t gr = 0; gr < G; ++gr) {
                    const std::int64_t base = (b * C + gr * cg) * HW;
                    const S mu = mean[size_t(b * G + gr)];
                    const S is = inv_std[size_t(b * G + gr)];
                    if (ig >= 0 || ib >= 0) {
                        for (std::int64_t c = 0; c < cg; ++c) {
                            double dga = 0.0, dbe = 0.0;
                            for (std::int64_t i = 0; i < HW; ++i) {
                                const S go = g[base + c * HW + i];
                                const S xh = (px[base + c * HW + i] - mu) * is;
                                dga += double(go) * double(xh);
                                dbe += double(go);
                            }
                            if (ig >= 0) tp.grad(ig)[gr * cg + c] += S(dga);
                            if (ib >= 0) tp.grad(ib)[gr * cg + c] += S(dbe);
                        }
                    }
                    if (ix >= 0) {
                        // dL/dx = is * (ghat - mean(ghat) - xhat * mean(ghat*xhat))
                        double sum_gh = 0.0, sum_ghxh = 0.0;
                        for (std::int64_t c = 0; c < cg; ++c) {
                            const S ga = pg[gr * cg + c];
                            for (std::int64_t i = 0; i < HW; ++i) {
                                const S gh = g[base + c * HW + i] * ga;
                                const S xh = (px[base + c * HW + i] - mu) * is;
                                sum_gh += double(gh);
                                sum_ghxh += double(gh) * double(xh);
                            }
                        }
                        const S m_gh = S(sum_gh / double(m));
                        const S m_ghxh = S(sum_ghxh / double(m));
                        auto& gx = tp.grad(ix);
                        for (std::int64_t c = 0; c < cg; ++c) {
                            const S ga = pg[gr * cg + c];
                            for (std::int64_t i = 0; i < HW; ++i) {
                                const S gh = g[base + c * HW + i] * ga;
                                const S xh = (px[base + c * HW + i] - mu) * is;
                                gx[base + c * HW + i] += is * (gh - m_gh - xh * m_ghxh);
                            }
                        }
                    }
                }
        });
        out.requires_grad = true;
    }
    return out;
}

// -------------------------------------------------------- pool / upsample --

template <class S>
TensorT<S> avg_pool2(TapeT<S>& tape, const TensorT<S>& x, int factor) {
    if (x.ndim() != 4) throw shape_error("avg_pool2: need 4-D input, got " + shape_str(x.shape));
    if (factor < 1 || x.dim(2) % factor != 0 || x.dim(3) % factor != 0)
        throw shape_error("avg_pool2: spatial extents " + shape_str(x.shape) +
                          " not divisible by factor " + std::to_string(factor));
    const std::int64_t BC = std::int64_t(x.dim(0)) * x.dim(1);
    const std::int64_t H = x.dim(2), W = x.dim(3), f = factor;
    const std::int64_t Ho = H / f, Wo = W / f;
    TensorT<S> out({x.dim(0), x.dim(1), int(Ho), int(Wo)});
    const S* px = x.data();
    S* po = out.mutable_data();
    const S inv = S(1) / S(f * f);
    for (std::int64_t bc = 0; bc < BC; ++bc)
        for (std::int64_t oy = 0; oy < Ho; ++oy)
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
                S acc = S(0);
                for (std::int64_t dy = 0; dy < f; ++dy)
                    for (std::int64_t dx = 0; dx < f; ++dx)
                        acc += px[(bc * H + oy * f + dy) * W + ox * f + dx];
                po[(bc * Ho + oy) * Wo + ox] = acc * inv;
            }
    check_finite(out, "avg_pool2");
    if (want_grad(tape, x)) {
        int ix = x.node;
        out.node = tape.emit(out.shape, {ix}, "avg_pool2",
                             [ix, BC, H, W, Ho, Wo, f, inv](TapeT<S>& tp, int self) {
                                 const auto& g = tp.grad(self);
                                 auto& gx = tp.grad(ix);
                                 for (std::int64_t bc = 0; bc < BC; ++bc)
                                     for (std::int64_t oy = 0; oy < Ho; ++oy)
                                         for (std::int64_t ox = 0; ox < Wo; ++ox) {
                                             const S go = g[(bc * Ho + oy) * Wo + ox] * inv;
                                             for (std::int64_t dy = 0; dy < f; ++dy)
                                                 for (std::int64_t dx = 0; dx < f; ++dx)
                                                     gx[(bc * H + oy * f + dy) * W + ox * f +
                                                        dx] += go;
                                         }
                             });
        out.requires_grad = true;
    }
    return out;
}

// x[B,C,H,W] -> [B,C], mean over the spatial grid.
template <class S>
TensorT<S> global_avg_pool(TapeT<S>& tape, const TensorT<S>& x) {
    if (x.ndim() != 4)
        throw shape_error("global_avg_pool: need 4-D input, got " + shape_str(x.shape));
    const std::int64_t BC = std::int64_t(x.dim(0)) * x.dim(1);
    const std::int64_t HW = std::int64_t(x.dim(2)) * x.dim(3);
    TensorT<S> out({x.dim(0), x.dim(1)});
    const S* px = x.data();
    S* po = out.mutable_data();
    for (std::int64_t i = 0; i < BC; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < HW; ++j) acc += double(px[i * HW + j]);
        po[i] = S(acc / double(HW));
    }
    check_finite(out, "global_avg_pool");
    if (want_grad(tape, x)) {
        int ix = x.node;
        out.node = tape.emit(out.shape, {ix}, "global_avg_pool",
                             [ix, BC, HW](TapeT<S>& tp, int self) {
                                 const auto& g = tp.grad(self);
                                 auto& gx = tp.grad(ix);
                                 for (std::int64_t i = 0; i < BC; ++i) {
                                     const S go = g[i] / S(HW);
                                     for (std::int64_t j = 0; j < HW; ++j) gx[i * HW + j] += go;
                                 }
                             });
        out.requires_grad = true;
    }
    return out;
}

template <class S>
TensorT<S> upsample_nearest2(TapeT<S>& tape, const TensorT<S>& x, int factor) {
    if (x.ndim() != 4)
        throw shape_error("upsample_nearest2: need 4-D input, got " + shape_str(x.shape));
    if (factor < 1) throw validation_error("upsample_nearest2: bad factor");
    const std::int64_t BC = std::int64_t(x.dim(0)) * x.dim(1);
    const std::int64_t H = x.dim(2), W = x.dim(3), f = factor;
    const std::int64_t Ho = H * f, Wo = W * f;
    TensorT<S> out({x.dim(0), x.dim(1), int(Ho), int(Wo)});
    const S* px = x.data();
    S* po = out.mutable_data();
    for (std::int64_t bc = 0; bc < BC; ++bc)
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
            const S* src = px + (bc * H + oy / f) * W;
            S* dst = po + (bc * Ho + oy) * Wo;
            for (std::int64_t ox = 0; ox < Wo; ++ox) dst[ox] = src[ox / f];
        }
    check_finite(out, "upsample_nearest2");
    if (want_grad(tape, x)) {
        int ix = x.node;
        out.node = tape.emit(out.shape, {ix}, "upsample_nearest2",
                             [ix, BC, H, W, Ho, Wo, f](TapeT<S>& tp, int self) {
                                 const auto& g = tp.grad(self);
                                 auto& gx = tp.grad(ix);
                                 for (std::int64_t bc = 0; bc < BC; ++bc)
                                     for (std::int64_t oy = 0; oy < Ho; ++oy) {
                                         const S* go = g.data() + (bc * Ho + oy) * Wo;
                                         S* dst = gx.data() + (bc * H + oy / f) * W;
                                         for (std::int64_t ox = 0; ox < Wo; ++ox)
                                             dst[ox / f] += go[ox];
                                     }
                             });
        out.requires_grad = true;
    }
    return out;
}

// Mean cross-entropy between logits [B,K] and integer class labels, computed
// through log-sum-exp so large logits stay stable. Gradient on the logits is
// (softmax - onehot) / B.
template <class S>
TensorT<S> cross_entropy(TapeT<S>& tape, const TensorT<S>& logits,
                         const std::vector<int>& labels) {
    if (logits.ndim() != 2)
        throw shape_error("cross_entropy: logits must be [B,K], got " + shape_str(logits.shape));
    const int B = logits.dim(0), K = logits.dim(1);
    if (int(labels.size()) != B)
        throw shape_error("cross_entropy: need one label per row, got " +
                          std::to_string(labels.size()) + " for " + std::to_string(B));
    for (int l : labels)
        if (l < 0 || l >= K)
            throw index_error("cross_entropy: label " + std::to_string(l) + " outside [0, " +
                              std::to_string(K) + ")");
    const S* px = logits.data();
    TensorT<S> soft({B, K});  // kept for the backward pass
    S* ps = soft.mutable_data();
    double acc = 0.0;
    for (int b = 0; b < B; ++b) {
        const S* row = px + std::int64_t(b) * K;
        double mx = double(row[0]);
        for (int k = 1; k < K; ++k) mx = std::max(mx, double(row[k]));
        double z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(double(row[k]) - mx);
        acc += std::log(z) + mx - double(row[labels[size_t(b)]]);
        for (int k = 0; k < K; ++k)
            ps[std::int64_t(b) * K + k] = S(std::exp(double(row[k]) - mx) / z);
    }
    TensorT<S> out({1}, std::vector<S>{S(acc / double(B))});
    check_finite(out, "cross_entropy");
    if (want_grad(tape, logits)) {
        const int ia = logits.node;
        const std::vector<int> lab = labels;
        out.node = tape.emit(out.shape, {ia}, "cross_entropy", [=](TapeT<S>& tp, int self) {
            const S g = tp.grad(self)[0];
            auto& ga = tp.grad(ia);
            const S inv = g / S(B);
            const S* sp = soft.data();
            for (int b = 0; b < B; ++b)
                for (int k = 0; k < K; ++k) {
                    const S onehot = (k == lab[size_t(b)]) ? S(1) : S(0);
                    ga[std::int64_t(b) * K + k] += inv * (sp[std::int64_t(b) * K + k] - onehot);
                }
        });
        out.requires_grad = true;
    }
    return out;
}

}  // namespace gdf::ops
