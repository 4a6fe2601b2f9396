#pragma once

#include <algorithm>
#include <cmath>
#include <utility>

#include "nfuse/tensor.hpp"

namespace nfuse {

namespace detail {

template <typename T>
Tensor<T> finish(const char* op, Tape<T>* tape, Shape shape, std::vector<T> vals,
                 std::function<void(Tape<T>&, const std::vector<T>&)> back) {
    check_finite(op, vals);
    Tensor<T> out(std::move(shape), std::move(vals));
    if (tape) {
        out.tape = tape;
        out.node = tape->record(out.shape, op, std::move(back));
    }
    return out;
}

inline void check_axis(const char* op, const Shape& s, std::size_t axis) {
    if (axis >= s.size())
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(s));
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

// outer * extent * inner decomposition around one axis
inline void axis_strides(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& extent,
                         std::size_t& inner) {
    outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    extent = s[axis];
    inner = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("add", a, b);
    Tape<T>* tape = detail::joined_tape<T>({&a, &b}, "add");
    std::vector<T> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (*a.data)[i] + (*b.data)[i];
    int na = a.node, nb = b.node;
    return detail::finish<T>("add", tape, a.shape, std::move(v),
                             [na, nb](Tape<T>& t, const std::vector<T>& g) {
                                 t.accumulate(na, g);
                                 t.accumulate(nb, g);
                             });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("sub", a, b);
    Tape<T>* tape = detail::joined_tape<T>({&a, &b}, "sub");
    std::vector<T> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (*a.data)[i] - (*b.data)[i];
    int na = a.node, nb = b.node;
    return detail::finish<T>("sub", tape, a.shape, std::move(v),
                             [na, nb](Tape<T>& t, const std::vector<T>& g) {
                                 t.accumulate(na, g);
                                 if (nb >= 0) {
                                     std::vector<T> gb(g.size());
                                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
                                     t.accumulate(nb, gb);
                                 }
                             });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("mul", a, b);
    Tape<T>* tape = detail::joined_tape<T>({&a, &b}, "mul");
    std::vector<T> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (*a.data)[i] * (*b.data)[i];
    int na = a.node, nb = b.node;
    auto da = a.data, db = b.data;
    return detail::finish<T>("mul", tape, a.shape, std::move(v),
                             [na, nb, da, db](Tape<T>& t, const std::vector<T>& g) {
                                 if (na >= 0) {
                                     std::vector<T> ga(g.size());
                                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (*db)[i];
                                     t.accumulate(na, ga);
                                 }
                                 if (nb >= 0) {
                                     std::vector<T> gb(g.size());
                                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * (*da)[i];
                                     t.accumulate(nb, gb);
                                 }
                             });
}

// scalar scale is the one sanctioned broadcast
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (*a.data)[i] * s;
    int na = a.node;
    return detail::finish<T>("scale", a.tape, a.shape, std::move(v),
                             [na, s](Tape<T>& t, const std::vector<T>& g) {
                                 if (na < 0) return;
                                 std::vector<T> ga(g.size());
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * s;
                                 t.accumulate(na, ga);
                             });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp((*a.data)[i]);
    Tensor<T> out = detail::finish<T>("exp", nullptr, a.shape, std::move(v), nullptr);
    if (a.tape) {
        int na = a.node;
        auto dout = out.data;
        out.tape = a.tape;
        out.node = a.tape->record(out.shape, "exp", [na, dout](Tape<T>& t, const std::vector<T>& g) {
            if (na < 0) return;
            std::vector<T> ga(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (*dout)[i];
            t.accumulate(na, ga);
        });
    }
    return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    std::vector<T> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log((*a.data)[i]);
    int na = a.node;
    auto da = a.data;
    return detail::finish<T>("log", a.tape, a.shape, std::move(v),
                             [na, da](Tape<T>& t, const std::vector<T>& g) {
                                 if (na < 0) return;
                                 std::vector<T> ga(g.size());
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / (*da)[i];
                                 t.accumulate(na, ga);
                             });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (*a.data)[i] > T(0) ? (*a.data)[i] : T(0);
    int na = a.node;
    auto da = a.data;
    return detail::finish<T>("relu", a.tape, a.shape, std::move(v),
                             [na, da](Tape<T>& t, const std::vector<T>& g) {
                                 if (na < 0) return;
                                 std::vector<T> ga(g.size());
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                     ga[i] = (*da)[i] > T(0) ? g[i] : T(0);
                                 t.accumulate(na, ga);
                             });
}

// exact GELU: 0.5 x (1 + erf(x / sqrt(2)))
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<T> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double x = static_cast<double>((*a.data)[i]);
        v[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    int na = a.node;
    auto da = a.data;
    return detail::finish<T>(
        "gelu", a.tape, a.shape, std::move(v), [na, da](Tape<T>& t, const std::vector<T>& g) {
            if (na < 0) return;
            std::vector<T> ga(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                double x = static_cast<double>((*da)[i]);
                double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
                           x * inv_sqrt2pi * std::exp(-0.5 * x * x);
                ga[i] = g[i] * static_cast<T>(d);
            }
            t.accumulate(na, ga);
        });
}

// elementwise max of two tensors; ties route the gradient to a
template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("maximum", a, b);
    Tape<T>* tape = detail::joined_tape<T>({&a, &b}, "maximum");
    std::vector<T> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = (*a.data)[i] >= (*b.data)[i] ? (*a.data)[i] : (*b.data)[i];
    int na = a.node, nb = b.node;
    auto da = a.data, db = b.data;
    return detail::finish<T>("maximum", tape, a.shape, std::move(v),
                             [na, nb, da, db](Tape<T>& t, const std::vector<T>& g) {
                                 if (na >= 0) {
                                     std::vector<T> ga(g.size(), T(0));
                                     for (std::size_t i = 0; i < g.size(); ++i)
                                         if ((*da)[i] >= (*db)[i]) ga[i] = g[i];
                                     t.accumulate(na, ga);
                                 }
                                 if (nb >= 0) {
                                     std::vector<T> gb(g.size(), T(0));
                                     for (std::size_t i = 0; i < g.size(); ++i)
                                         if ((*da)[i] < (*db)[i]) gb[i] = g[i];
                                     t.accumulate(nb, gb);
                                 }
                             });
}

// ---------------------------------------------------------------------------
// reductions over one axis (axis is removed from the result shape)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis) {
    detail::check_axis("sum_axis", a.shape, axis);
    std::size_t outer, extent, inner;
    detail::axis_strides(a.shape, axis, outer, extent, inner);
    Shape os = a.shape;
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<T> v(outer * inner, T(0));
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < extent; ++j)
            for (std::size_t i = 0; i < inner; ++i)
                v[o * inner + i] += (*a.data)[(o * extent + j) * inner + i];
    int na = a.node;
    std::size_t n = a.size();
    return detail::finish<T>("sum_axis", a.tape, std::move(os), std::move(v),
                             [na, outer, extent, inner, n](Tape<T>& t, const std::vector<T>& g) {
                                 if (na < 0) return;
                                 std::vector<T> ga(n);
                                 for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t j = 0; j < extent; ++j)
                                         for (std::size_t i = 0; i < inner; ++i)
                                             ga[(o * extent + j) * inner + i] = g[o * inner + i];
                                 t.accumulate(na, ga);
                             });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
    detail::check_axis("mean_axis", a.shape, axis);
    return scale(sum_axis(a, axis), T(1) / static_cast<T>(a.shape[axis]));
}

// gradient routes to the argmax element; ties broken by lowest index
template <typename T>
Tensor<T> max_axis(const Tensor<T>& a, std::size_t axis) {
    detail::check_axis("max_axis", a.shape, axis);
    std::size_t outer, extent, inner;
    detail::axis_strides(a.shape, axis, outer, extent, inner);
    Shape os = a.shape;
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<T> v(outer * inner);
    auto arg = std::make_shared<std::vector<std::size_t>>(outer * inner, 0);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            T best = (*a.data)[o * extent * inner + i];
            std::size_t bj = 0;
            for (std::size_t j = 1; j < extent; ++j) {
                T x = (*a.data)[(o * extent + j) * inner + i];
                if (x > best) {
                    best = x;
                    bj = j;
                }
            }
            v[o * inner + i] = best;
            (*arg)[o * inner + i] = bj;
        }
    int na = a.node;
    std::size_t n = a.size();
    return detail::finish<T>("max_axis", a.tape, std::move(os), std::move(v),
                             [na, arg, outer, extent, inner, n](Tape<T>& t, const std::vector<T>& g) {
                                 if (na < 0) return;
                                 std::vector<T> ga(n, T(0));
                                 for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t i = 0; i < inner; ++i)
                                         ga[(o * extent + (*arg)[o * inner + i]) * inner + i] =
                                             g[o * inner + i];
                                 t.accumulate(na, ga);
                             });
}

// sum of all elements, as a rank-0 scalar
template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    std::vector<T> v{T(0)};
    for (T x : *a.data) v[0] += x;
    int na = a.node;
    std::size_t n = a.size();
    return detail::finish<T>("sum_all", a.tape, Shape{}, std::move(v),
                             [na, n](Tape<T>& t, const std::vector<T>& g) {
                                 if (na < 0) return;
                                 t.accumulate(na, std::vector<T>(n, g[0]));
                             });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape) + " as " +
                         shape_str(new_shape));
    Tensor<T> out;
    out.shape = std::move(new_shape);
    out.data = a.data;  // row-major order preserved, no copy
    if (a.tape) {
        int na = a.node;
        out.tape = a.tape;
        out.node = a.tape->record(out.shape, "reshape",
                                  [na](Tape<T>& t, const std::vector<T>& g) { t.accumulate(na, g); });
    }
    return out;
}

template <typename T>
Tensor<T> transpose_last_two(const Tensor<T>& a) {
    if (a.rank() < 2)
        throw ShapeError("transpose_last_two: rank >= 2 required, got " + shape_str(a.shape));
    std::size_t m = a.shape[a.rank() - 2], n = a.shape[a.rank() - 1];
    std::size_t outer = a.size() / (m * n);
    Shape os = a.shape;
    std::swap(os[os.size() - 2], os[os.size() - 1]);
    std::vector<T> v(a.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                v[o * m * n + j * m + i] = (*a.data)[o * m * n + i * n + j];
    int na = a.node;
    return detail::finish<T>("transpose_last_two", a.tape, std::move(os), std::move(v),
                             [na, outer, m, n](Tape<T>& t, const std::vector<T>& g) {
                                 if (na < 0) return;
                                 std::vector<T> ga(g.size());
                                 for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t i = 0; i < m; ++i)
                                         for (std::size_t j = 0; j < n; ++j)
                                             ga[o * m * n + i * n + j] = g[o * m * n + j * m + i];
                                 t.accumulate(na, ga);
                             });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: empty input list");
    const Shape& s0 = parts[0].shape;
    detail::check_axis("concat", s0, axis);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != s0.size())
            throw ShapeError("concat: rank mismatch " + shape_str(p.shape) + " vs " + shape_str(s0));
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (i != axis && p.shape[i] != s0[i])
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape) + " vs " +
                                 shape_str(s0) + " outside axis " + std::to_string(axis));
        total += p.shape[axis];
    }
    Shape os = s0;
    os[axis] = total;
    std::size_t outer, extent, inner;
    detail::axis_strides(os, axis, outer, extent, inner);
    std::vector<T> v(shape_numel(os));
    Tape<T>* tape = nullptr;
    std::vector<int> ids(parts.size());
    std::vector<std::size_t> exts(parts.size());
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& p = parts[pi];
        ids[pi] = p.node;
        exts[pi] = p.shape[axis];
        if (p.tape) {
            if (tape && tape != p.tape) throw TensorError("concat: operands on different tapes");
            tape = p.tape;
        }
        std::size_t pe = p.shape[axis];
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < pe; ++j)
                for (std::size_t i = 0; i < inner; ++i)
                    v[(o * extent + off + j) * inner + i] = (*p.data)[(o * pe + j) * inner + i];
        off += pe;
    }
    return detail::finish<T>("concat", tape, std::move(os), std::move(v),
                             [ids, exts, outer, extent, inner](Tape<T>& t, const std::vector<T>& g) {
                                 std::size_t off = 0;
                                 for (std::size_t pi = 0; pi < ids.size(); ++pi) {
                                     std::size_t pe = exts[pi];
                                     if (ids[pi] >= 0) {
                                         std::vector<T> gp(outer * pe * inner);
                                         for (std::size_t o = 0; o < outer; ++o)
                                             for (std::size_t j = 0; j < pe; ++j)
                                                 for (std::size_t i = 0; i < inner; ++i)
                                                     gp[(o * pe + j) * inner + i] =
                                                         g[(o * extent + off + j) * inner + i];
                                         t.accumulate(ids[pi], gp);
                                     }
                                     off += pe;
                                 }
                             });
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& a, std::size_t axis, const std::vector<std::size_t>& sizes) {
    detail::check_axis("split", a.shape, axis);
    std::size_t total = 0;
    for (std::size_t s : sizes) total += s;
    if (total != a.shape[axis])
        throw ShapeError("split: sizes sum to " + std::to_string(total) + ", axis extent is " +
                         std::to_string(a.shape[axis]) + " in " + shape_str(a.shape));
    std::size_t outer, extent, inner;
    detail::axis_strides(a.shape, axis, outer, extent, inner);
    std::vector<Tensor<T>> outs;
    outs.reserve(sizes.size());
    std::size_t off = 0;
    int na = a.node;
    std::size_t n = a.size();
    for (std::size_t pe : sizes) {
        Shape os = a.shape;
        os[axis] = pe;
        std::vector<T> v(outer * pe * inner);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < pe; ++j)
                for (std::size_t i = 0; i < inner; ++i)
                    v[(o * pe + j) * inner + i] = (*a.data)[(o * extent + off + j) * inner + i];
        std::size_t piece_off = off;
        outs.push_back(detail::finish<T>(
            "split", a.tape, std::move(os), std::move(v),
            [na, n, piece_off, pe, outer, extent, inner](Tape<T>& t, const std::vector<T>& g) {
                if (na < 0) return;
                std::vector<T> ga(n, T(0));
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t j = 0; j < pe; ++j)
                        for (std::size_t i = 0; i < inner; ++i)
                            ga[(o * extent + piece_off + j) * inner + i] = g[(o * pe + j) * inner + i];
                t.accumulate(na, ga);
            }));
        off += pe;
    }
    return outs;
}

// ---------------------------------------------------------------------------
// matmul (batched; leading dims must match exactly, no broadcasting)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank())
        throw ShapeError("matmul: ranks must match and be >= 2, got " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
    std::size_t r = a.rank();
    for (std::size_t i = 0; i + 2 < r; ++i)
        if (a.shape[i] != b.shape[i])
            throw ShapeError("matmul: batch dims differ " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
    std::size_t M = a.shape[r - 2], K = a.shape[r - 1];
    std::size_t Kb = b.shape[r - 2], N = b.shape[r - 1];
    if (K != Kb)
        throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
    std::size_t batch = a.size() / (M * K);
    Shape os = a.shape;
    os[r - 1] = N;
    std::vector<T> v(batch * M * N, T(0));
    const auto& av = *a.data;
    const auto& bv = *b.data;
    for (std::size_t q = 0; q < batch; ++q) {
        const T* ap = av.data() + q * M * K;
        const T* bp = bv.data() + q * K * N;
        T* cp = v.data() + q * M * N;
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t k = 0; k < K; ++k) {
                T x = ap[i * K + k];
                const T* br = bp + k * N;
                T* cr = cp + i * N;
                for (std::size_t j = 0; j < N; ++j) cr[j] += x * br[j];
            }
    }
    int na = a.node, nb = b.node;
    auto da = a.data, db = b.data;
    Tape<T>* tape = detail::joined_tape<T>({&a, &b}, "matmul");
    return detail::finish<T>(
        "matmul", tape, std::move(os), std::move(v),
        [na, nb, da, db, batch, M, K, N](Tape<T>& t, const std::vector<T>& g) {
            if (na >= 0) {
                // dA = g . B^T
                std::vector<T> ga(batch * M * K, T(0));
                for (std::size_t q = 0; q < batch; ++q) {
                    const T* gp = g.data() + q * M * N;
                    const T* bp = db->data() + q * K * N;
                    T* ap = ga.data() + q * M * K;
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t j = 0; j < N; ++j) {
                            T x = gp[i * N + j];
                            for (std::size_t k = 0; k < K; ++k) ap[i * K + k] += x * bp[k * N + j];
                        }
                }
                t.accumulate(na, ga);
            }
            if (nb >= 0) {
                // dB = A^T . g
                std::vector<T> gb(batch * K * N, T(0));
                for (std::size_t q = 0; q < batch; ++q) {
                    const T* gp = g.data() + q * M * N;
                    const T* ap = da->data() + q * M * K;
                    T* bp = gb.data() + q * K * N;
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t k = 0; k < K; ++k) {
                            T x = ap[i * K + k];
                            for (std::size_t j = 0; j < N; ++j) bp[k * N + j] += x * gp[i * N + j];
                        }
                }
                t.accumulate(nb, gb);
            }
        });
}

// ---------------------------------------------------------------------------
// softmax / log-softmax / layer norm / bias
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& a, std::size_t axis) {
    detail::check_axis("softmax_axis", a.shape, axis);
    std::size_t outer, extent, inner;
    detail::axis_strides(a.shape, axis, outer, extent, inner);
    std::vector<T> v(a.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            T mx = (*a.data)[o * extent * inner + i];
            for (std::size_t j = 1; j < extent; ++j)
                mx = std::max(mx, (*a.data)[(o * extent + j) * inner + i]);
            T sum = T(0);
            for (std::size_t j = 0; j < extent; ++j) {
                T e = std::exp((*a.data)[(o * extent + j) * inner + i] - mx);
                v[(o * extent + j) * inner + i] = e;
                sum += e;
            }
            for (std::size_t j = 0; j < extent; ++j) v[(o * extent + j) * inner + i] /= sum;
        }
    Tensor<T> out = detail::finish<T>("softmax_axis", nullptr, a.shape, std::move(v), nullptr);
    if (a.tape) {
        int na = a.node;
        auto s = out.data;
        out.tape = a.tape;
        out.node = a.tape->record(
            out.shape, "softmax_axis",
            [na, s, outer, extent, inner](Tape<T>& t, const std::vector<T>& g) {
                if (na < 0) return;
                std::vector<T> ga(g.size());
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < inner; ++i) {
                        T dot = T(0);
                        for (std::size_t j = 0; j < extent; ++j) {
                            std::size_t idx = (o * extent + j) * inner + i;
                            dot += g[idx] * (*s)[idx];
                        }
                        for (std::size_t j = 0; j < extent; ++j) {
                            std::size_t idx = (o * extent + j) * inner + i;
                            ga[idx] = (*s)[idx] * (g[idx] - dot);
                        }
                    }
                t.accumulate(na, ga);
            });
    }
    return out;
}

template <typename T>
Tensor<T> log_softmax_axis(const Tensor<T>& a, std::size_t axis) {
    detail::check_axis("log_softmax_axis", a.shape, axis);
    std::size_t outer, extent, inner;
    detail::axis_strides(a.shape, axis, outer, extent, inner);
    std::vector<T> v(a.size());
    auto s = std::make_shared<std::vector<T>>(a.size());  // softmax, saved for backward
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            T mx = (*a.data)[o * extent * inner + i];
            for (std::size_t j = 1; j < extent; ++j)
                mx = std::max(mx, (*a.data)[(o * extent + j) * inner + i]);
            T sum = T(0);
            for (std::size_t j = 0; j < extent; ++j)
                sum += std::exp((*a.data)[(o * extent + j) * inner + i] - mx);
            T lse = mx + std::log(sum);
            for (std::size_t j = 0; j < extent; ++j) {
                std::size_t idx = (o * extent + j) * inner + i;
                v[idx] = (*a.data)[idx] - lse;
                (*s)[idx] = std::exp(v[idx]);
            }
        }
    int na = a.node;
    return detail::finish<T>(
        "log_softmax_axis", a.tape, a.shape, std::move(v),
        [na, s, outer, extent, inner](Tape<T>& t, const std::vector<T>& g) {
            if (na < 0) return;
            std::vector<T> ga(g.size());
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    T gsum = T(0);
                    for (std::size_t j = 0; j < extent; ++j)
                        gsum += g[(o * extent + j) * inner + i];
                    for (std::size_t j = 0; j < extent; ++j) {
                        std::size_t idx = (o * extent + j) * inner + i;
                        ga[idx] = g[idx] - (*s)[idx] * gsum;
                    }
                }
            t.accumulate(na, ga);
        });
}

// normalize over the last axis (population variance), then affine
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank >= 1 required");
    std::size_t C = x.shape.back();
    if (gamma.shape != Shape{C} || beta.shape != Shape{C})
        throw ShapeError("layer_norm: gamma/beta must have shape (" + std::to_string(C) +
                         "), got " + shape_str(gamma.shape) + " and " + shape_str(beta.shape));
    if (!(eps > T(0))) throw NumericError("layer_norm: eps must be positive");
    std::size_t rows = x.size() / C;
    std::vector<T> v(x.size());
    auto xhat = std::make_shared<std::vector<T>>(x.size());
    auto invstd = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xp = x.data->data() + r * C;
        T mean = T(0);
        for (std::size_t c = 0; c < C; ++c) mean += xp[c];
        mean /= static_cast<T>(C);
        T var = T(0);
        for (std::size_t c = 0; c < C; ++c) {
            T d = xp[c] - mean;
            var += d * d;
        }
        var /= static_cast<T>(C);
        T is = T(1) / std::sqrt(var + eps);
        (*invstd)[r] = is;
        for (std::size_t c = 0; c < C; ++c) {
            T xh = (xp[c] - mean) * is;
            (*xhat)[r * C + c] = xh;
            v[r * C + c] = (*gamma.data)[c] * xh + (*beta.data)[c];
        }
    }
    Tape<T>* tape = detail::joined_tape<T>({&x, &gamma, &beta}, "layer_norm");
    int nx = x.node, ng = gamma.node, nb = beta.node;
    auto gdat = gamma.data;
    return detail::finish<T>(
        "layer_norm", tape, x.shape, std::move(v),
        [nx, ng, nb, gdat, xhat, invstd, rows, C](Tape<T>& t, const std::vector<T>& g) {
            if (ng >= 0) {
                std::vector<T> gg(C, T(0));
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < C; ++c) gg[c] += g[r * C + c] * (*xhat)[r * C + c];
                t.accumulate(ng, gg);
            }
            if (nb >= 0) {
                std::vector<T> gb(C, T(0));
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < C; ++c) gb[c] += g[r * C + c];
                t.accumulate(nb, gb);
            }
            if (nx >= 0) {
                std::vector<T> gx(rows * C);
                for (std::size_t r = 0; r < rows; ++r) {
                    T m1 = T(0), m2 = T(0);
                    for (std::size_t c = 0; c < C; ++c) {
                        T gy = g[r * C + c] * (*gdat)[c];
                        m1 += gy;
                        m2 += gy * (*xhat)[r * C + c];
                    }
                    m1 /= static_cast<T>(C);
                    m2 /= static_cast<T>(C);
                    for (std::size_t c = 0; c < C; ++c) {
                        T gy = g[r * C + c] * (*gdat)[c];
                        gx[r * C + c] = (*invstd)[r] * (gy - m1 - (*xhat)[r * C + c] * m2);
                    }
                }
                t.accumulate(nx, gx);
            }
        });
}

// add a length-C bias vector to every position of x [.., C]
template <typename T>
Tensor<T> add_bias_lastaxis(const Tensor<T>& x, const Tensor<T>& b) {
    if (x.rank() < 1) throw ShapeError("add_bias_lastaxis: rank >= 1 required");
    std::size_t C = x.shape.back();
    if (b.shape != Shape{C})
        throw ShapeError("add_bias_lastaxis: bias " + shape_str(b.shape) +
                         " does not match last axis of " + shape_str(x.shape));
    std::size_t rows = x.size() / C;
    std::vector<T> v(x.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < C; ++c) v[r * C + c] = (*x.data)[r * C + c] + (*b.data)[c];
    Tape<T>* tape = detail::joined_tape<T>({&x, &b}, "add_bias_lastaxis");
    int nx = x.node, nb = b.node;
    return detail::finish<T>("add_bias_lastaxis", tape, x.shape, std::move(v),
                             [nx, nb, rows, C](Tape<T>& t, const std::vector<T>& g) {
                                 t.accumulate(nx, g);
                                 if (nb >= 0) {
                                     std::vector<T> gb(C, T(0));
                                     for (std::size_t r = 0; r < rows; ++r)
                                         for (std::size_t c = 0; c < C; ++c) gb[c] += g[r * C + c];
                                     t.accumulate(nb, gb);
                                 }
                             });
}

// ---------------------------------------------------------------------------
// finite-difference oracle
// ---------------------------------------------------------------------------

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per element. f maps a
// detached tensor to a scalar; x is never modified.
template <typename T, typename F>
Tensor<T> finite_difference_grad(F&& f, const Tensor<T>& x, T h = T(1e-5)) {
    if (!(h > T(0))) throw NumericError("finite_difference_grad: h must be positive");
    std::vector<T> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        Tensor<T> xp(x.shape, *x.data);
        (*xp.data)[i] += h;
        Tensor<T> xm(x.shape, *x.data);
        (*xm.data)[i] -= h;
        g[i] = (f(xp) - f(xm)) / (T(2) * h);
    }
    return Tensor<T>(x.shape, std::move(g));
}

// max_i |a_i - b_i| / max(1, |a_i|, |b_i|)
template <typename T>
double max_rel_err(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape)
        throw ShapeError("max_rel_err: shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double x = static_cast<double>((*a.data)[i]);
        double y = static_cast<double>((*b.data)[i]);
        double denom = std::max({1.0, std::abs(x), std::abs(y)});
        worst = std::max(worst, std::abs(x - y) / denom);
    }
    return worst;
}

}  // namespace nfuse
