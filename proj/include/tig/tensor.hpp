#pragma once
// Reverse-mode autodiff over dense tensors. A Tape records every primitive;
// backward() walks the records in reverse creation order (which is a
// topological order by construction) and accumulates gradients.
//
// The scalar type is a template parameter: float for training, double for
// gradient checks.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>

#include "tig/array.hpp"

namespace tig {

template <class T>
class Tape;

template <class T>
struct Tensor {
    Tape<T>* tp = nullptr;
    int id = -1;

    bool valid() const { return tp != nullptr && id >= 0; }
    const Array<T>& val() const { return tp->node(id).val; }
    const Shape& shape() const { return val().shape; }
    const Array<T>& grad() const { return tp->grad_of(id); }
};

template <class T>
class Tape {
public:
    struct Node {
        Array<T> val;
        Array<T> grad;  // empty until touched by backward
        std::function<void()> back;
        bool needs = false;
    };

    bool grad_enabled = true;
    uint64_t gen;

    Tape() : gen(next_gen()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Node& node(int id) { return nodes_[size_t(id)]; }
    const Node& node(int id) const { return nodes_[size_t(id)]; }
    size_t num_nodes() const { return nodes_.size(); }

    Tensor<T> make(Array<T> val, bool needs, std::function<void()> back = nullptr) {
        Node n;
        n.val = std::move(val);
        n.needs = needs && grad_enabled;
        if (n.needs) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Tensor<T>{this, int(nodes_.size()) - 1};
    }

    Tensor<T> leaf(Array<T> val, bool requires_grad = true) {
        return make(std::move(val), requires_grad, nullptr);
    }
    Tensor<T> constant(Array<T> val) { return make(std::move(val), false, nullptr); }
    Tensor<T> scalar(T x) { return constant(Array<T>({1}, {x})); }

    // Lazily allocated gradient buffer (zeros).
    Array<T>& grad_of(int id) {
        Node& n = node(id);
        if (n.grad.size() == 0) n.grad = Array<T>(n.val.shape);
        return n.grad;
    }
    bool touched(int id) const { return node(id).grad.size() != 0; }

    void backward(const Tensor<T>& loss) {
        TIG_CHECK(loss.tp == this, "backward: loss from another tape");
        TIG_CHECK(loss.val().size() == 1, "backward: loss must be a scalar");
        grad_of(loss.id)[0] += T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (n.needs && n.back && n.grad.size() != 0) n.back();
        }
    }

    void zero_grad() {
        for (auto& n : nodes_) n.grad = Array<T>();
    }

private:
    std::vector<Node> nodes_;
    static uint64_t next_gen() {
        static uint64_t g = 0;
        return ++g;
    }
};

namespace detail {

// b broadcasts over a if b.shape is a suffix of a.shape (covers scalar and
// per-last-dim vectors); anything fancier must be an explicit reshape/concat.
inline bool suffix_of(const Shape& b, const Shape& a) {
    if (b.size() > a.size()) return false;
    for (size_t i = 0; i < b.size(); ++i)
        if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binaries with suffix broadcast of b

template <class T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
    const Shape sa = a.shape(), sb = b.shape();
    check_shape(detail::suffix_of(sb, sa), "add", sa, sb);
    const long n = numel(sa), m = numel(sb);
    Array<T> out(sa);
    for (long i = 0; i < n; ++i) out[i] = a.val()[i] + b.val()[i % m];
    Tape<T>* tp = a.tp;
    int ia = a.id, ib = b.id;
    bool needs = tp->node(ia).needs || tp->node(ib).needs;
    Tensor<T> o = tp->make(std::move(out), needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ia, ib, io, n, m]() {
            const Array<T>& gy = tp->node(io).grad;
            if (tp->node(ia).needs) {
                Array<T>& ga = tp->grad_of(ia);
                for (long i = 0; i < n; ++i) ga[i] += gy[i];
            }
            if (tp->node(ib).needs) {
                Array<T>& gb = tp->grad_of(ib);
                for (long i = 0; i < n; ++i) gb[i % m] += gy[i];
            }
        };
    }
    return o;
}

template <class T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
    const Shape sa = a.shape(), sb = b.shape();
    check_shape(detail::suffix_of(sb, sa), "mul", sa, sb);
    const long n = numel(sa), m = numel(sb);
    Array<T> out(sa);
    for (long i = 0; i < n; ++i) out[i] = a.val()[i] * b.val()[i % m];
    Tape<T>* tp = a.tp;
    int ia = a.id, ib = b.id;
    bool needs = tp->node(ia).needs || tp->node(ib).needs;
    Tensor<T> o = tp->make(std::move(out), needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ia, ib, io, n, m]() {
            const Array<T>& gy = tp->node(io).grad;
            const Array<T>& va = tp->node(ia).val;
            const Array<T>& vb = tp->node(ib).val;
            if (tp->node(ia).needs) {
                Array<T>& ga = tp->grad_of(ia);
                for (long i = 0; i < n; ++i) ga[i] += gy[i] * vb[i % m];
            }
            if (tp->node(ib).needs) {
                Array<T>& gb = tp->grad_of(ib);
                for (long i = 0; i < n; ++i) gb[i % m] += gy[i] * va[i];
            }
        };
    }
    return o;
}

// y = k*x + c with scalar constants
template <class T>
Tensor<T> affine(Tensor<T> x, T k, T c = T(0)) {
    const long n = x.val().size();
    Array<T> out(x.shape());
    for (long i = 0; i < n; ++i) out[i] = k * x.val()[i] + c;
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, io, k, n]() {
            const Array<T>& gy = tp->node(io).grad;
            Array<T>& gx = tp->grad_of(ix);
            for (long i = 0; i < n; ++i) gx[i] += k * gy[i];
        };
    }
    return o;
}

template <class T>
Tensor<T> scale(Tensor<T> x, T k) {
    return affine(x, k, T(0));
}
template <class T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
    return add(a, scale(b, T(-1)));
}

// ---------------------------------------------------------------------------
// elementwise unaries

template <class T>
Tensor<T> unary_op(Tensor<T> x, T (*fwd)(T), T (*dfn)(T /*x*/, T /*y*/)) {
    const long n = x.val().size();
    Array<T> out(x.shape());
    for (long i = 0; i < n; ++i) out[i] = fwd(x.val()[i]);
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, io, dfn, n]() {
            const Array<T>& gy = tp->node(io).grad;
            const Array<T>& vx = tp->node(ix).val;
            const Array<T>& vy = tp->node(io).val;
            Array<T>& gx = tp->grad_of(ix);
            for (long i = 0; i < n; ++i) gx[i] += gy[i] * dfn(vx[i], vy[i]);
        };
    }
    return o;
}

template <class T>
Tensor<T> tanh_t(Tensor<T> x) {
    return unary_op<T>(
        x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}
template <class T>
Tensor<T> sigmoid(Tensor<T> x) {
    return unary_op<T>(
        x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}
template <class T>
Tensor<T> log_t(Tensor<T> x) {
    return unary_op<T>(
        x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}
template <class T>
Tensor<T> exp_t(Tensor<T> x) {
    return unary_op<T>(
        x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
template <class T>
Tensor<T> relu(Tensor<T> x) {
    return unary_op<T>(
        x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}
template <class T>
Tensor<T> leaky_relu(Tensor<T> x, T slope = T(0.2)) {
    const long n = x.val().size();
    Array<T> out(x.shape());
    for (long i = 0; i < n; ++i) {
        T v = x.val()[i];
        out[i] = v > T(0) ? v : slope * v;
    }
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, io, slope, n]() {
            const Array<T>& gy = tp->node(io).grad;
            const Array<T>& vx = tp->node(ix).val;
            Array<T>& gx = tp->grad_of(ix);
            for (long i = 0; i < n; ++i) gx[i] += gy[i] * (vx[i] > T(0) ? T(1) : slope);
        };
    }
    return o;
}

template <class T>
Tensor<T> clamp(Tensor<T> x, T lo, T hi) {
    const long n = x.val().size();
    Array<T> out(x.shape());
    for (long i = 0; i < n; ++i) out[i] = std::min(hi, std::max(lo, x.val()[i]));
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, io, lo, hi, n]() {
            const Array<T>& gy = tp->node(io).grad;
            const Array<T>& vx = tp->node(ix).val;
            Array<T>& gx = tp->grad_of(ix);
            for (long i = 0; i < n; ++i)
                if (vx[i] > lo && vx[i] < hi) gx[i] += gy[i];
        };
    }
    return o;
}

template <class T>
Tensor<T> stop_gradient(Tensor<T> x) {
    return x.tp->constant(x.val());
}

// ---------------------------------------------------------------------------
// reshape / permute / concat / slice

template <class T>
Tensor<T> reshape(Tensor<T> x, Shape s) {
    // one extent may be -1
    long known = 1;
    int wild = -1;
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] == -1) wild = int(i);
        else known *= s[i];
    }
    if (wild >= 0) s[size_t(wild)] = int(x.val().size() / known);
    check_shape(numel(s) == x.val().size(), "reshape", x.shape(), s);
    Array<T> out(s, x.val().v);
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, io]() {
            const Array<T>& gy = tp->node(io).grad;
            Array<T>& gx = tp->grad_of(ix);
            for (long i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        };
    }
    return o;
}

inline std::vector<long> row_strides(const Shape& s) {
    std::vector<long> st(s.size());
    long acc = 1;
    for (int i = int(s.size()) - 1; i >= 0; --i) {
        st[size_t(i)] = acc;
        acc *= s[size_t(i)];
    }
    return st;
}

template <class T>
void permute_copy(const Array<T>& in, const std::vector<int>& perm, Array<T>& out, bool accumulate_back = false) {
    const Shape& si = in.shape;
    auto ist = row_strides(si);
    auto ost = row_strides(out.shape);
    const int r = int(si.size());
    const long n = in.size();
    std::vector<long> idx(size_t(r), 0);
    for (long lin = 0; lin < n; ++lin) {
        long rem = lin;
        long o = 0;
        for (int d = 0; d < r; ++d) {
            long c = rem / ist[size_t(d)];
            rem %= ist[size_t(d)];
            // dimension d of input appears at position find(perm, d) in output
            o += c * ost[size_t(std::find(perm.begin(), perm.end(), d) - perm.begin())];
        }
        if (accumulate_back) out[o] += in[lin];
        else out[o] = in[lin];
    }
}

template <class T>
Tensor<T> permute(Tensor<T> x, std::vector<int> perm) {
    const Shape& si = x.shape();
    TIG_CHECK(perm.size() == si.size(), "permute: rank mismatch");
    Shape so(si.size());
    for (size_t i = 0; i < perm.size(); ++i) so[i] = si[size_t(perm[i])];
    Array<T> out(so);
    // walk the output in order, tracking the input offset with an odometer
    auto ist = row_strides(si);
    const int r = int(si.size());
    std::vector<long> step(size_t(r), 0L);
    for (int d = 0; d < r; ++d) step[size_t(d)] = ist[size_t(perm[size_t(d)])];
    const long n = x.val().size();
    auto walk = [so, step, r, n](auto&& f) {
        std::vector<long> idx(size_t(r), 0);
        long o = 0;
        for (long lin = 0; lin < n; ++lin) {
            f(lin, o);
            for (int d = r - 1; d >= 0; --d) {
                o += step[size_t(d)];
                if (++idx[size_t(d)] < so[size_t(d)]) break;
                o -= step[size_t(d)] * so[size_t(d)];
                idx[size_t(d)] = 0;
            }
        }
    };
    {
        const T* xv = x.val().data();
        T* ov = out.data();
        walk([&](long lin, long o) { ov[lin] = xv[o]; });
    }
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, io, walk]() {
            const T* gy = tp->node(io).grad.data();
            T* gx = tp->grad_of(ix).data();
            walk([&](long lin, long o2) { gx[o2] += gy[lin]; });
        };
    }
    return o;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    TIG_CHECK(!parts.empty(), "concat: empty part list");
    const Shape& s0 = parts[0].shape();
    const int r = int(s0.size());
    TIG_CHECK(axis >= 0 && axis < r, "concat: bad axis");
    Shape so = s0;
    so[size_t(axis)] = 0;
    for (auto& p : parts) {
        const Shape& sp = p.shape();
        for (int d = 0; d < r; ++d)
            if (d != axis) check_shape(sp[size_t(d)] == s0[size_t(d)], "concat", s0, sp);
        so[size_t(axis)] += sp[size_t(axis)];
    }
    long outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[size_t(d)];
    for (int d = axis + 1; d < r; ++d) inner *= s0[size_t(d)];
    Array<T> out(so);
    const long ototal = long(so[size_t(axis)]) * inner;
    long off = 0;
    bool needs = false;
    Tape<T>* tp = parts[0].tp;
    for (auto& p : parts) {
        const long ext = long(p.shape()[size_t(axis)]) * inner;
        for (long ou = 0; ou < outer; ++ou)
            std::copy_n(p.val().data() + ou * ext, ext, out.data() + ou * ototal + off);
        off += ext;
        needs = needs || tp->node(p.id).needs;
    }
    std::vector<int> ids;
    std::vector<long> exts;
    for (auto& p : parts) {
        ids.push_back(p.id);
        exts.push_back(long(p.shape()[size_t(axis)]) * inner);
    }
    Tensor<T> o = tp->make(std::move(out), needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, io, ids, exts, outer, ototal]() {
            const Array<T>& gy = tp->node(io).grad;
            long off2 = 0;
            for (size_t j = 0; j < ids.size(); ++j) {
                if (tp->node(ids[j]).needs) {
                    Array<T>& g = tp->grad_of(ids[j]);
                    for (long ou = 0; ou < outer; ++ou)
                        for (long i = 0; i < exts[j]; ++i)
                            g[ou * exts[j] + i] += gy[ou * ototal + off2 + i];
                }
                off2 += exts[j];
            }
        };
    }
    return o;
}

template <class T>
Tensor<T> slice(Tensor<T> x, int axis, int start, int len) {
    const Shape& si = x.shape();
    const int r = int(si.size());
    TIG_CHECK(axis >= 0 && axis < r, "slice: bad axis");
    TIG_CHECK(start >= 0 && start + len <= si[size_t(axis)], "slice: out of range");
    Shape so = si;
    so[size_t(axis)] = len;
    long outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= si[size_t(d)];
    for (int d = axis + 1; d < r; ++d) inner *= si[size_t(d)];
    const long itotal = long(si[size_t(axis)]) * inner;
    const long ototal = long(len) * inner;
    Array<T> out(so);
    for (long ou = 0; ou < outer; ++ou)
        std::copy_n(x.val().data() + ou * itotal + long(start) * inner, ototal, out.data() + ou * ototal);
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        const long soff = long(start) * inner;
        o.tp->node(io).back = [tp, ix, io, outer, itotal, ototal, soff]() {
            const Array<T>& gy = tp->node(io).grad;
            Array<T>& gx = tp->grad_of(ix);
            for (long ou = 0; ou < outer; ++ou)
                for (long i = 0; i < ototal; ++i) gx[ou * itotal + soff + i] += gy[ou * ototal + i];
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// matmul: 2x2, 3x3 (batched), 3x2 (shared rhs). Optional transposes.

template <class T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b, bool tA = false, bool tB = false) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const int ra = int(sa.size()), rb = int(sb.size());
    TIG_CHECK((ra == 2 || ra == 3) && (rb == 2 || rb == 3) && ra >= rb, "matmul: rank combination unsupported");
    long B = ra == 3 ? sa[0] : 1;
    long M = tA ? sa[size_t(ra - 1)] : sa[size_t(ra - 2)];
    long K = tA ? sa[size_t(ra - 2)] : sa[size_t(ra - 1)];
    long Kb = tB ? sb[size_t(rb - 1)] : sb[size_t(rb - 2)];
    long N = tB ? sb[size_t(rb - 2)] : sb[size_t(rb - 1)];
    check_shape(K == Kb && (rb == 2 || sb[0] == B), "matmul", sa, sb);
    Shape so = ra == 3 ? Shape{int(B), int(M), int(N)} : Shape{int(M), int(N)};
    if (rb == 2 && !tA && B > 1) {  // shared rhs: fold the batch into the rows
        M *= B;
        B = 1;
    }
    Array<T> out(so);
    const long astride = M * K, bstride = rb == 3 ? K * N : 0, ostride = M * N;
    for (long bi = 0; bi < B; ++bi)
        gemm(M, K, N, a.val().data() + bi * astride, tA, b.val().data() + bi * bstride, tB, out.data() + bi * ostride);
    Tape<T>* tp = a.tp;
    int ia = a.id, ib = b.id;
    bool needs = tp->node(ia).needs || tp->node(ib).needs;
    Tensor<T> o = tp->make(std::move(out), needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ia, ib, io, tA, tB, B, M, K, N, astride, bstride, ostride]() {
            const Array<T>& gy = tp->node(io).grad;
            const Array<T>& va = tp->node(ia).val;
            const Array<T>& vb = tp->node(ib).val;
            if (tp->node(ia).needs) {
                Array<T>& ga = tp->grad_of(ia);
                for (long bi = 0; bi < B; ++bi) {
                    const T* gyp = gy.data() + bi * ostride;
                    const T* bp = vb.data() + bi * bstride;
                    T* gap = ga.data() + bi * astride;
                    if (!tA) gemm_acc(M, N, K, gyp, false, bp, !tB, gap);
                    else gemm_acc(K, N, M, bp, tB, gyp, true, gap);
                }
            }
            if (tp->node(ib).needs) {
                Array<T>& gb = tp->grad_of(ib);
                for (long bi = 0; bi < B; ++bi) {
                    const T* gyp = gy.data() + bi * ostride;
                    const T* ap = va.data() + bi * astride;
                    T* gbp = gb.data() + bi * bstride;
                    if (!tB) gemm_acc(K, M, N, ap, !tA, gyp, false, gbp);
                    else gemm_acc(N, M, K, gyp, true, ap, tA, gbp);
                }
            }
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// softmax / layernorm over the last axis

template <class T>
Tensor<T> softmax_last(Tensor<T> x) {
    const Shape& s = x.shape();
    const long c = s.back();
    const long rows = x.val().size() / c;
    Array<T> out(s);
    for (long r = 0; r < rows; ++r) {
        const T* xi = x.val().data() + r * c;
        T* yo = out.data() + r * c;
        T mx = xi[0];
        for (long j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
        T sum = 0;
        for (long j = 0; j < c; ++j) {
            yo[j] = std::exp(xi[j] - mx);
            sum += yo[j];
        }
        const T inv = T(1) / sum;
        for (long j = 0; j < c; ++j) yo[j] *= inv;
    }
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, io, rows, c]() {
            const Array<T>& gy = tp->node(io).grad;
            const Array<T>& y = tp->node(io).val;
            Array<T>& gx = tp->grad_of(ix);
            for (long r = 0; r < rows; ++r) {
                const T* gyp = gy.data() + r * c;
                const T* yp = y.data() + r * c;
                T* gxp = gx.data() + r * c;
                T dot = 0;
                for (long j = 0; j < c; ++j) dot += gyp[j] * yp[j];
                for (long j = 0; j < c; ++j) gxp[j] += yp[j] * (gyp[j] - dot);
            }
        };
    }
    return o;
}

template <class T>
Tensor<T> layernorm_last(Tensor<T> x, T eps = T(1e-5)) {
    const Shape& s = x.shape();
    const long c = s.back();
    const long rows = x.val().size() / c;
    Array<T> out(s);
    Array<T> inv_sigma({int(rows)});
    for (long r = 0; r < rows; ++r) {
        const T* xi = x.val().data() + r * c;
        T* yo = out.data() + r * c;
        T mu = 0;
        for (long j = 0; j < c; ++j) mu += xi[j];
        mu /= T(c);
        T var = 0;
        for (long j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= T(c);
        const T is = T(1) / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (long j = 0; j < c; ++j) yo[j] = (xi[j] - mu) * is;
    }
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        auto isig = std::make_shared<Array<T>>(std::move(inv_sigma));
        o.tp->node(io).back = [tp, ix, io, rows, c, isig]() {
            const Array<T>& gy = tp->node(io).grad;
            const Array<T>& y = tp->node(io).val;
            Array<T>& gx = tp->grad_of(ix);
            for (long r = 0; r < rows; ++r) {
                const T* gyp = gy.data() + r * c;
                const T* yp = y.data() + r * c;
                T* gxp = gx.data() + r * c;
                T mg = 0, mgy = 0;
                for (long j = 0; j < c; ++j) {
                    mg += gyp[j];
                    mgy += gyp[j] * yp[j];
                }
                mg /= T(c);
                mgy /= T(c);
                const T is = (*isig)[r];
                for (long j = 0; j < c; ++j) gxp[j] += is * (gyp[j] - mg - yp[j] * mgy);
            }
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
Tensor<T> sum(Tensor<T> x) {
    T s = 0;
    for (long i = 0; i < x.val().size(); ++i) s += x.val()[i];
    Tape<T>* tp = x.tp;
    int ix = x.id;
    const long n = x.val().size();
    Tensor<T> o = tp->make(Array<T>({1}, {s}), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, io, n]() {
            const T g = tp->node(io).grad[0];
            Array<T>& gx = tp->grad_of(ix);
            for (long i = 0; i < n; ++i) gx[i] += g;
        };
    }
    return o;
}

template <class T>
Tensor<T> mean(Tensor<T> x) {
    return scale(sum(x), T(1) / T(x.val().size()));
}

// mean over the last axis: (..., c) -> (...)
template <class T>
Tensor<T> mean_last(Tensor<T> x) {
    const Shape& s = x.shape();
    TIG_CHECK(s.size() >= 2, "mean_last: rank must be >= 2");
    const long c = s.back();
    const long rows = x.val().size() / c;
    Shape so(s.begin(), s.end() - 1);
    Array<T> out(so);
    for (long r = 0; r < rows; ++r) {
        T m = 0;
        for (long j = 0; j < c; ++j) m += x.val()[r * c + j];
        out[r] = m / T(c);
    }
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, io, rows, c]() {
            const Array<T>& gy = tp->node(io).grad;
            Array<T>& gx = tp->grad_of(ix);
            for (long r = 0; r < rows; ++r) {
                const T g = gy[r] / T(c);
                for (long j = 0; j < c; ++j) gx[r * c + j] += g;
            }
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// embedding lookup: table (V, e), ids any int shape S -> (S..., e)

template <class T>
Tensor<T> embedding(Tensor<T> table, const IArray& ids) {
    const Shape& ts = table.shape();
    TIG_CHECK(ts.size() == 2, "embedding: table must be rank 2");
    const long V = ts[0], e = ts[1];
    Shape so = ids.shape;
    so.push_back(int(e));
    Array<T> out(so);
    const long n = ids.size();
    for (long i = 0; i < n; ++i) {
        const long id = ids[i];
        TIG_CHECK(id >= 0 && id < V, "embedding: id out of range");
        std::copy_n(table.val().data() + id * e, e, out.data() + i * e);
    }
    Tape<T>* tp = table.tp;
    int it = table.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(it).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        auto idc = std::make_shared<IArray>(ids);
        o.tp->node(io).back = [tp, it, io, idc, e, n]() {
            const Array<T>& gy = tp->node(io).grad;
            Array<T>& gt = tp->grad_of(it);
            for (long i = 0; i < n; ++i) {
                const long id = (*idc)[i];
                for (long j = 0; j < e; ++j) gt[id * e + j] += gy[i * e + j];
            }
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// masked fill: where mask != 0, replace with `value` (no gradient there)

template <class T>
Tensor<T> masked_fill(Tensor<T> x, const Array<uint8_t>& mask, T value) {
    check_shape(detail::suffix_of(mask.shape, x.shape()), "masked_fill", x.shape(), mask.shape);
    const long n = x.val().size(), m = mask.size();
    Array<T> out(x.shape());
    for (long i = 0; i < n; ++i) out[i] = mask[i % m] ? value : x.val()[i];
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        auto mk = std::make_shared<Array<uint8_t>>(mask);
        o.tp->node(io).back = [tp, ix, io, mk, n, m]() {
            const Array<T>& gy = tp->node(io).grad;
            Array<T>& gx = tp->grad_of(ix);
            for (long i = 0; i < n; ++i)
                if (!(*mk)[i % m]) gx[i] += gy[i];
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// 2-D convolution (NCHW), square kernel, zero pad; optional per-channel bias.

template <class T>
Tensor<T> conv2d(Tensor<T> x, Tensor<T> w, Tensor<T> bias, int stride, int pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    TIG_CHECK(xs.size() == 4 && ws.size() == 4, "conv2d: x and w must be rank 4");
    check_shape(xs[1] == ws[1], "conv2d(in-channels)", xs, ws);
    TIG_CHECK(ws[2] == ws[3], "conv2d: kernel must be square");
    const long N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const long Co = ws[0], k = ws[2];
    const long Ho = (H + 2 * pad - k) / stride + 1;
    const long Wo = (W + 2 * pad - k) / stride + 1;
    TIG_CHECK(Ho > 0 && Wo > 0, "conv2d: empty output");
    const bool has_bias = bias.valid();
    if (has_bias) check_shape(bias.val().size() == Co, "conv2d(bias)", ws, bias.shape());
    const long K = C * k * k;

    // cols per sample in (K, P) layout, y = w * cols lands directly in NCHW;
    // when the output plane is small the row layout keeps the gemm inner loop
    // long, so switch on P
    const long P = Ho * Wo;
    const bool rows = P < 64;
    Array<T> out({int(N), int(Co), int(Ho), int(Wo)});
    std::vector<T> cols(size_t(K * P));
    for (long ni = 0; ni < N; ++ni) {
        const T* xp = x.val().data() + ni * C * H * W;
        if (rows) im2col_rows(xp, C, H, W, k, stride, pad, Ho, Wo, cols.data());
        else im2col(xp, C, H, W, k, stride, pad, Ho, Wo, cols.data());
        T* yo = out.data() + ni * Co * P;
        gemm(Co, K, P, w.val().data(), false, cols.data(), rows, yo);
        if (has_bias)
            for (long c = 0; c < Co; ++c) {
                const T b = bias.val()[c];
                for (long p = 0; p < P; ++p) yo[c * P + p] += b;
            }
    }
    Tape<T>* tp = x.tp;
    int ix = x.id, iw = w.id, ib = has_bias ? bias.id : -1;
    bool needs = tp->node(ix).needs || tp->node(iw).needs || (has_bias && tp->node(ib).needs);
    Tensor<T> o = tp->make(std::move(out), needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, iw, ib, io, N, C, H, W, Co, k, K, Ho, Wo, stride, pad]() {
            const Array<T>& gy = tp->node(io).grad;
            const Array<T>& vx = tp->node(ix).val;
            const Array<T>& vw = tp->node(iw).val;
            const bool nx = tp->node(ix).needs, nw = tp->node(iw).needs;
            const bool nb = ib >= 0 && tp->node(ib).needs;
            const long P = Ho * Wo;
            const bool rows = P < 64;
            std::vector<T> cols(size_t(K * P));
            std::vector<T> gcols(size_t(K * P));
            Array<T>* gx = nx ? &tp->grad_of(ix) : nullptr;
            Array<T>* gw = nw ? &tp->grad_of(iw) : nullptr;
            Array<T>* gb = nb ? &tp->grad_of(ib) : nullptr;
            for (long ni = 0; ni < N; ++ni) {
                const T* gyp = gy.data() + ni * Co * P;
                const T* xp = vx.data() + ni * C * H * W;
                if (nw || nx) {
                    if (rows) im2col_rows(xp, C, H, W, k, stride, pad, Ho, Wo, cols.data());
                    else im2col(xp, C, H, W, k, stride, pad, Ho, Wo, cols.data());
                }
                if (nw)  // gW (Co,K) += gy_s (Co,P) * cols^T (P,K)
                    gemm_acc(Co, P, K, gyp, false, cols.data(), !rows, gw->data());
                if (nx) {
                    T* gxp = gx->data() + ni * C * H * W;
                    if (rows) {  // gcols (P,K) = gy_s^T (P,Co) * w (Co,K)
                        gemm(P, Co, K, gyp, true, vw.data(), false, gcols.data());
                        col2im_rows_acc(gcols.data(), C, H, W, k, stride, pad, Ho, Wo, gxp);
                    } else {  // gcols (K,P) = w^T (K,Co) * gy_s (Co,P)
                        gemm(K, Co, P, vw.data(), true, gyp, false, gcols.data());
                        col2im_acc(gcols.data(), C, H, W, k, stride, pad, Ho, Wo, gxp);
                    }
                }
                if (nb)
                    for (long c = 0; c < Co; ++c) {
                        T s = 0;
                        for (long p = 0; p < P; ++p) s += gyp[c * P + p];
                        (*gb)[c] += s;
                    }
            }
        };
    }
    return o;
}

template <class T>
Tensor<T> conv2d(Tensor<T> x, Tensor<T> w, int stride, int pad) {
    return conv2d(x, w, Tensor<T>{}, stride, pad);
}

// The adjoint of conv2d with respect to its input, recorded as a primitive so
// that gradient graphs (R1) stay differentiable w.r.t. the weights.
// dy: (N,Co,Ho,Wo), w: (Co,C,k,k) -> (N,C,H,W) with the given geometry.
template <class T>
Tensor<T> conv2d_input_grad(Tensor<T> dy, Tensor<T> w, Shape in_shape, int stride, int pad) {
    const Shape& ys = dy.shape();
    const Shape& ws = w.shape();
    TIG_CHECK(ys.size() == 4 && ws.size() == 4 && in_shape.size() == 4, "conv2d_input_grad: rank");
    const long N = ys[0], Co = ys[1], Ho = ys[2], Wo = ys[3];
    const long C = in_shape[1], H = in_shape[2], W = in_shape[3];
    const long k = ws[2], K = C * k * k;
    check_shape(ws[0] == Co && ws[1] == C && in_shape[0] == N, "conv2d_input_grad", ys, ws);
    const long P = Ho * Wo;
    Array<T> out(in_shape);
    std::vector<T> dcols(size_t(K * P));
    for (long ni = 0; ni < N; ++ni) {
        const T* dyp = dy.val().data() + ni * Co * P;
        gemm(K, Co, P, w.val().data(), true, dyp, false, dcols.data());
        col2im_acc(dcols.data(), C, H, W, k, stride, pad, Ho, Wo, out.data() + ni * C * H * W);
    }
    Tape<T>* tp = dy.tp;
    int iy = dy.id, iw = w.id;
    bool needs = tp->node(iy).needs || tp->node(iw).needs;
    Tensor<T> o = tp->make(std::move(out), needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, iy, iw, io, N, C, H, W, Co, k, K, Ho, Wo, stride, pad]() {
            // upstream U has the input geometry; the map is bilinear in (dy, w):
            //   d/d(dy) = conv2d_forward(U, w), d/d(w) = dy_mat^T * im2col(U)
            const Array<T>& U = tp->node(io).grad;
            const Array<T>& vw = tp->node(iw).val;
            const Array<T>& vy = tp->node(iy).val;
            const bool ny = tp->node(iy).needs, nw = tp->node(iw).needs;
            const long P = Ho * Wo;
            std::vector<T> cols(size_t(K * P));
            Array<T>* gy = ny ? &tp->grad_of(iy) : nullptr;
            Array<T>* gw = nw ? &tp->grad_of(iw) : nullptr;
            for (long ni = 0; ni < N; ++ni) {
                im2col(U.data() + ni * C * H * W, C, H, W, k, stride, pad, Ho, Wo, cols.data());
                if (ny)  // gy_s (Co,P) += w (Co,K) * cols (K,P)
                    gemm_acc(Co, K, P, vw.data(), false, cols.data(), false, gy->data() + ni * Co * P);
                if (nw)  // gW (Co,K) += dy_s (Co,P) * cols^T (P,K)
                    gemm_acc(Co, P, K, vy.data() + ni * Co * P, false, cols.data(), true, gw->data());
            }
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// resampling (NCHW)

template <class T>
Tensor<T> upsample_nearest(Tensor<T> x, int f) {
    const Shape& s = x.shape();
    TIG_CHECK(s.size() == 4 && f >= 1, "upsample_nearest: rank 4, factor >= 1");
    const long N = s[0], C = s[1], H = s[2], W = s[3];
    Array<T> out({int(N), int(C), int(H * f), int(W * f)});
    for (long nc = 0; nc < N * C; ++nc) {
        const T* xi = x.val().data() + nc * H * W;
        T* yo = out.data() + nc * H * f * W * f;
        for (long oy = 0; oy < H * f; ++oy)
            for (long ox = 0; ox < W * f; ++ox) yo[oy * W * f + ox] = xi[(oy / f) * W + (ox / f)];
    }
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, io, N, C, H, W, f]() {
            const Array<T>& gy = tp->node(io).grad;
            Array<T>& gx = tp->grad_of(ix);
            for (long nc = 0; nc < N * C; ++nc) {
                const T* gyp = gy.data() + nc * H * f * W * f;
                T* gxp = gx.data() + nc * H * W;
                for (long oy = 0; oy < H * f; ++oy)
                    for (long ox = 0; ox < W * f; ++ox) gxp[(oy / f) * W + (ox / f)] += gyp[oy * W * f + ox];
            }
        };
    }
    return o;
}

namespace detail {
// half-pixel-centers sampling table for integer-factor bilinear upsampling
template <class T>
void bilinear_axis(long in, int f, std::vector<int>& i0, std::vector<int>& i1, std::vector<T>& w1) {
    const long out = in * f;
    i0.resize(size_t(out));
    i1.resize(size_t(out));
    w1.resize(size_t(out));
    for (long o = 0; o < out; ++o) {
        double src = (double(o) + 0.5) / f - 0.5;
        if (src < 0) src = 0;
        if (src > double(in - 1)) src = double(in - 1);
        const long lo = long(src);
        i0[size_t(o)] = int(lo);
        i1[size_t(o)] = int(std::min(lo + 1, in - 1));
        w1[size_t(o)] = T(src - double(lo));
    }
}
}  // namespace detail

template <class T>
Tensor<T> upsample_bilinear(Tensor<T> x, int f) {
    const Shape& s = x.shape();
    TIG_CHECK(s.size() == 4 && f >= 1, "upsample_bilinear: rank 4, factor >= 1");
    const long N = s[0], C = s[1], H = s[2], W = s[3];
    std::vector<int> y0, y1, x0, x1;
    std::vector<T> wy, wx;
    detail::bilinear_axis<T>(H, f, y0, y1, wy);
    detail::bilinear_axis<T>(W, f, x0, x1, wx);
    const long Ho = H * f, Wo = W * f;
    Array<T> out({int(N), int(C), int(Ho), int(Wo)});
    for (long nc = 0; nc < N * C; ++nc) {
        const T* xi = x.val().data() + nc * H * W;
        T* yo = out.data() + nc * Ho * Wo;
        for (long oy = 0; oy < Ho; ++oy) {
            const T b = wy[size_t(oy)];
            const long r0 = y0[size_t(oy)] * W, r1 = y1[size_t(oy)] * W;
            for (long ox = 0; ox < Wo; ++ox) {
                const T a = wx[size_t(ox)];
                yo[oy * Wo + ox] = (T(1) - b) * ((T(1) - a) * xi[r0 + x0[size_t(ox)]] + a * xi[r0 + x1[size_t(ox)]]) +
                                   b * ((T(1) - a) * xi[r1 + x0[size_t(ox)]] + a * xi[r1 + x1[size_t(ox)]]);
            }
        }
    }
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, io, N, C, H, W, Ho, Wo, y0, y1, x0, x1, wy, wx]() {
            const Array<T>& gy = tp->node(io).grad;
            Array<T>& gx = tp->grad_of(ix);
            for (long nc = 0; nc < N * C; ++nc) {
                const T* gyp = gy.data() + nc * Ho * Wo;
                T* gxp = gx.data() + nc * H * W;
                for (long oy = 0; oy < Ho; ++oy) {
                    const T b = wy[size_t(oy)];
                    const long r0 = y0[size_t(oy)] * W, r1 = y1[size_t(oy)] * W;
                    for (long ox = 0; ox < Wo; ++ox) {
                        const T a = wx[size_t(ox)];
                        const T g = gyp[oy * Wo + ox];
                        gxp[r0 + x0[size_t(ox)]] += (T(1) - b) * (T(1) - a) * g;
                        gxp[r0 + x1[size_t(ox)]] += (T(1) - b) * a * g;
                        gxp[r1 + x0[size_t(ox)]] += b * (T(1) - a) * g;
                        gxp[r1 + x1[size_t(ox)]] += b * a * g;
                    }
                }
            }
        };
    }
    return o;
}

template <class T>
Tensor<T> avgpool2(Tensor<T> x) {
    const Shape& s = x.shape();
    TIG_CHECK(s.size() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0, "avgpool2: rank 4 with even H,W");
    const long N = s[0], C = s[1], H = s[2], W = s[3];
    const long Ho = H / 2, Wo = W / 2;
    Array<T> out({int(N), int(C), int(Ho), int(Wo)});
    for (long nc = 0; nc < N * C; ++nc) {
        const T* xi = x.val().data() + nc * H * W;
        T* yo = out.data() + nc * Ho * Wo;
        for (long oy = 0; oy < Ho; ++oy)
            for (long ox = 0; ox < Wo; ++ox)
                yo[oy * Wo + ox] = (xi[2 * oy * W + 2 * ox] + xi[2 * oy * W + 2 * ox + 1] +
                                    xi[(2 * oy + 1) * W + 2 * ox] + xi[(2 * oy + 1) * W + 2 * ox + 1]) *
                                   T(0.25);
    }
    Tape<T>* tp = x.tp;
    int ix = x.id;
    Tensor<T> o = tp->make(std::move(out), tp->node(ix).needs);
    if (o.tp->node(o.id).needs) {
        int io = o.id;
        o.tp->node(io).back = [tp, ix, io, N, C, H, W, Ho, Wo]() {
            const Array<T>& gy = tp->node(io).grad;
            Array<T>& gx = tp->grad_of(ix);
            for (long nc = 0; nc < N * C; ++nc) {
                const T* gyp = gy.data() + nc * Ho * Wo;
                T* gxp = gx.data() + nc * H * W;
                for (long oy = 0; oy < Ho; ++oy)
                    for (long ox = 0; ox < Wo; ++ox) {
                        const T g = gyp[oy * Wo + ox] * T(0.25);
                        gxp[2 * oy * W + 2 * ox] += g;
                        gxp[2 * oy * W + 2 * ox + 1] += g;
                        gxp[(2 * oy + 1) * W + 2 * ox] += g;
                        gxp[(2 * oy + 1) * W + 2 * ox + 1] += g;
                    }
            }
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// grad_check: central finite differences against the tape gradient.
// f builds a scalar loss from a leaf made of `x` on a fresh tape.

template <class T, class F>
T grad_check(F f, const Array<T>& x, T step = T(1e-3)) {
    Array<T> analytic(x.shape);
    {
        Tape<T> tape;
        Tensor<T> xt = tape.leaf(x);
        Tensor<T> loss = f(tape, xt);
        tape.backward(loss);
        if (tape.touched(xt.id)) analytic = tape.node(xt.id).grad;
    }
    T max_err = 0;
    Array<T> xp = x;
    for (long i = 0; i < x.size(); ++i) {
        const T orig = xp[i];
        xp[i] = orig + step;
        T fp, fm;
        {
            Tape<T> tape;
            tape.grad_enabled = false;
            fp = f(tape, tape.leaf(xp)).val()[0];
        }
        xp[i] = orig - step;
        {
            Tape<T> tape;
            tape.grad_enabled = false;
            fm = f(tape, tape.leaf(xp)).val()[0];
        }
        xp[i] = orig;
        const T numeric = (fp - fm) / (2 * step);
        const T a = analytic[i];
        const T denom = std::max(T(1e-8), std::abs(a) + std::abs(numeric));
        max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
    return max_err;
}

}  // namespace tig
