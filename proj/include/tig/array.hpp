#pragma once
// Dense row-major n-d arrays plus the handful of BLAS-like kernels the
// autograd primitives are built on. Everything here is plain data, no tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tig {

using Shape = std::vector<int>;

inline long numel(const Shape& s) {
    long n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

#define TIG_CHECK(cond, msg)                                        \
    do {                                                            \
        if (!(cond)) ::tig::fail(std::string("tig: ") + (msg));     \
    } while (0)

inline void check_shape(bool ok, const char* op, const Shape& a, const Shape& b) {
    if (!ok) fail(std::string("tig: shape mismatch in ") + op + ": " + shape_str(a) + " vs " + shape_str(b));
}

template <class T>
struct Array {
    Shape shape;
    std::vector<T> v;

    Array() = default;
    explicit Array(Shape s, T fill = T(0)) : shape(std::move(s)), v(size_t(numel(shape)), fill) {}
    Array(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        TIG_CHECK(long(v.size()) == numel(shape), "Array data length != product of extents");
    }

    long size() const { return long(v.size()); }
    T* data() { return v.data(); }
    const T* data() const { return v.data(); }
    T& operator[](long i) { return v[size_t(i)]; }
    const T& operator[](long i) const { return v[size_t(i)]; }

    template <class U>
    Array<U> cast() const {
        Array<U> out(shape);
        for (long i = 0; i < size(); ++i) out[i] = U(v[size_t(i)]);
        return out;
    }
};

using IArray = Array<int>;

// ---------------------------------------------------------------------------
// gemm: C (MxN) += A (MxK) * B (KxN), row-major. The axpy-over-j inner loop
// vectorizes on any of gcc/clang with -O3.
template <class T>
void gemm_nn(long M, long K, long N, const T* A, const T* B, T* C) {
    if (N < 16) {  // axpy over a narrow row is all loop overhead; use dots
        for (long i = 0; i < M; ++i) {
            const T* a = A + i * K;
            T* c = C + i * N;
            for (long j = 0; j < N; ++j) {
                T s = 0;
                for (long k = 0; k < K; ++k) s += a[k] * B[k * N + j];
                c[j] += s;
            }
        }
        return;
    }
    // tile wide outputs so the accumulator rows stay cache resident
    const long JT = N > 768 ? 512 : N;
    for (long j0 = 0; j0 < N; j0 += JT) {
        const long j1 = std::min(N, j0 + JT);
        long i = 0;
        for (; i + 2 <= M; i += 2) {  // two rows at once, one pass over B
            const T* a0 = A + i * K;
            const T* a1 = a0 + K;
            T* c0 = C + i * N;
            T* c1 = c0 + N;
            for (long k = 0; k < K; ++k) {
                const T x0 = a0[k], x1 = a1[k];
                if (x0 == T(0) && x1 == T(0)) continue;
                const T* b = B + k * N;
                for (long j = j0; j < j1; ++j) {
                    c0[j] += x0 * b[j];
                    c1[j] += x1 * b[j];
                }
            }
        }
        for (; i < M; ++i) {
            const T* a = A + i * K;
            T* c = C + i * N;
            for (long k = 0; k < K; ++k) {
                const T aik = a[k];
                if (aik == T(0)) continue;
                const T* b = B + k * N;
                for (long j = j0; j < j1; ++j) c[j] += aik * b[j];
            }
        }
    }
}

template <class T>
void transpose_mat(long R, long C, const T* in, T* out) {  // in RxC -> out CxR
    for (long i = 0; i < R; ++i)
        for (long j = 0; j < C; ++j) out[j * R + i] = in[i * C + j];
}

// C (+)= A Bt where B is stored (N x K); contiguous dot products
template <class T>
void gemm_nt_acc(long M, long K, long N, const T* A, const T* B, T* C) {
    for (long i = 0; i < M; ++i) {
        const T* a = A + i * K;
        T* c = C + i * N;
        if (K < 16) {  // short dots: the simd reduction prologue dominates
            for (long j = 0; j < N; ++j) {
                const T* b = B + j * K;
                T s = 0;
                for (long k = 0; k < K; ++k) s += a[k] * b[k];
                c[j] += s;
            }
            continue;
        }
        long j = 0;
        for (; j + 2 <= N; j += 2) {  // two dots share the loads of a
            const T* b0 = B + j * K;
            const T* b1 = b0 + K;
            T s0 = 0, s1 = 0;
#pragma omp simd reduction(+ : s0, s1)
            for (long k = 0; k < K; ++k) {
                s0 += a[k] * b0[k];
                s1 += a[k] * b1[k];
            }
            c[j] += s0;
            c[j + 1] += s1;
        }
        for (; j < N; ++j) {
            const T* b = B + j * K;
            T s = 0;
#pragma omp simd reduction(+ : s)
            for (long k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] += s;
        }
    }
}

// C += At B where A is stored (K x M); rank-1 updates, axpy inner loop
template <class T>
void gemm_tn_acc(long M, long K, long N, const T* A, const T* B, T* C) {
    long k = 0;
    for (; k + 2 <= K; k += 2) {  // two rank-1 updates per pass over C
        const T* a0 = A + k * M;
        const T* a1 = a0 + M;
        const T* b0 = B + k * N;
        const T* b1 = b0 + N;
        for (long i = 0; i < M; ++i) {
            const T x0 = a0[i], x1 = a1[i];
            if (x0 == T(0) && x1 == T(0)) continue;
            T* c = C + i * N;
            for (long j = 0; j < N; ++j) c[j] += x0 * b0[j] + x1 * b1[j];
        }
    }
    for (; k < K; ++k) {
        const T* ak = A + k * M;
        const T* bk = B + k * N;
        for (long i = 0; i < M; ++i) {
            const T aki = ak[i];
            if (aki == T(0)) continue;
            T* c = C + i * N;
            for (long j = 0; j < N; ++j) c[j] += aki * bk[j];
        }
    }
}

// C (+)= op(A) op(B); no temporaries, each transpose case gets its own kernel
template <class T>
void gemm_ex(long M, long K, long N, const T* A, bool tA, const T* B, bool tB, T* C, bool acc) {
    if (!acc) std::fill(C, C + M * N, T(0));
    if (!tA && !tB) {
        gemm_nn(M, K, N, A, B, C);
    } else if (!tA && tB) {
        if (K < 32 && N >= 16 && K * N <= 4096) {
            // short dots vectorize poorly; transpose the small B and go axpy
            T bt[4096];
            transpose_mat(N, K, B, bt);
            gemm_nn(M, K, N, A, bt, C);
        } else {
            gemm_nt_acc(M, K, N, A, B, C);
        }
    } else if (tA && !tB) {
        gemm_tn_acc(M, K, N, A, B, C);
    } else {
        // A (K x M), B (N x K); strided dot, rare enough to leave plain
        for (long i = 0; i < M; ++i) {
            T* c = C + i * N;
            for (long j = 0; j < N; ++j) {
                const T* b = B + j * K;
                T s = 0;
                for (long k = 0; k < K; ++k) s += A[k * M + i] * b[k];
                c[j] += s;
            }
        }
    }
}

// C = A op(B) with optional transposes, C overwritten.
template <class T>
void gemm(long M, long K, long N, const T* A, bool tA, const T* B, bool tB, T* C) {
    gemm_ex(M, K, N, A, tA, B, tB, C, false);
}

// accumulate variant (C += ...)
template <class T>
void gemm_acc(long M, long K, long N, const T* A, bool tA, const T* B, bool tB, T* C) {
    gemm_ex(M, K, N, A, tA, B, tB, C, true);
}

// ---------------------------------------------------------------------------
// im2col / col2im for NCHW convolution, square kernel, zero padding.
// cols layout is (C*k*k, Ho*Wo) so conv forward is W (Co,K) * cols and the
// gemm inner loop runs over the wide spatial axis.
template <class T>
void im2col(const T* x, long C, long H, long W, long k, long stride, long pad,
            long Ho, long Wo, T* cols) {
    const long P = Ho * Wo;
    long r = 0;
    for (long c = 0; c < C; ++c) {
        const T* xc = x + c * H * W;
        for (long ky = 0; ky < k; ++ky)
            for (long kx = 0; kx < k; ++kx, ++r) {
                T* row = cols + r * P;
                // stride 1: each output row is a contiguous span of the input row
                const long lo = stride == 1 ? std::max(0L, pad - kx) : 0;
                const long hi = stride == 1 ? std::min(Wo, W + pad - kx) : 0;
                for (long oy = 0; oy < Ho; ++oy) {
                    const long iy = oy * stride + ky - pad;
                    T* ro = row + oy * Wo;
                    if (iy < 0 || iy >= H) {
                        for (long ox = 0; ox < Wo; ++ox) ro[ox] = T(0);
                        continue;
                    }
                    const T* xr = xc + iy * W;
                    if (stride == 1) {
                        for (long ox = 0; ox < lo; ++ox) ro[ox] = T(0);
                        if (hi > lo) std::memcpy(ro + lo, xr + lo + kx - pad, size_t(hi - lo) * sizeof(T));
                        for (long ox = hi; ox < Wo; ++ox) ro[ox] = T(0);
                        continue;
                    }
                    for (long ox = 0; ox < Wo; ++ox) {
                        const long ix = ox * stride + kx - pad;
                        ro[ox] = (ix >= 0 && ix < W) ? xr[ix] : T(0);
                    }
                }
            }
    }
}

template <class T>
void col2im_acc(const T* cols, long C, long H, long W, long k, long stride, long pad,
                long Ho, long Wo, T* x) {
    const long P = Ho * Wo;
    long r = 0;
    for (long c = 0; c < C; ++c) {
        T* xc = x + c * H * W;
        for (long ky = 0; ky < k; ++ky)
            for (long kx = 0; kx < k; ++kx, ++r) {
                const T* row = cols + r * P;
                const long lo = stride == 1 ? std::max(0L, pad - kx) : 0;
                const long hi = stride == 1 ? std::min(Wo, W + pad - kx) : 0;
                for (long oy = 0; oy < Ho; ++oy) {
                    const long iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    T* xr = xc + iy * W;
                    const T* ro = row + oy * Wo;
                    if (stride == 1) {
                        T* xs = xr + kx - pad;
                        for (long ox = lo; ox < hi; ++ox) xs[ox] += ro[ox];
                        continue;
                    }
                    for (long ox = 0; ox < Wo; ++ox) {
                        const long ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < W) xr[ix] += ro[ox];
                    }
                }
            }
    }
}

// row-per-pixel layout (Ho*Wo, C*k*k); better when the output plane is small
template <class T>
void im2col_rows(const T* x, long C, long H, long W, long k, long stride, long pad,
                 long Ho, long Wo, T* cols) {
    const long K = C * k * k;
    for (long oy = 0; oy < Ho; ++oy)
        for (long ox = 0; ox < Wo; ++ox) {
            T* row = cols + (oy * Wo + ox) * K;
            long idx = 0;
            for (long c = 0; c < C; ++c) {
                const T* xc = x + c * H * W;
                for (long ky = 0; ky < k; ++ky) {
                    const long iy = oy * stride + ky - pad;
                    for (long kx = 0; kx < k; ++kx, ++idx) {
                        const long ix = ox * stride + kx - pad;
                        row[idx] = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? xc[iy * W + ix] : T(0);
                    }
                }
            }
        }
}

template <class T>
void col2im_rows_acc(const T* cols, long C, long H, long W, long k, long stride, long pad,
                     long Ho, long Wo, T* x) {
    const long K = C * k * k;
    for (long oy = 0; oy < Ho; ++oy)
        for (long ox = 0; ox < Wo; ++ox) {
            const T* row = cols + (oy * Wo + ox) * K;
            long idx = 0;
            for (long c = 0; c < C; ++c) {
                T* xc = x + c * H * W;
                for (long ky = 0; ky < k; ++ky) {
                    const long iy = oy * stride + ky - pad;
                    for (long kx = 0; kx < k; ++kx, ++idx) {
                        const long ix = ox * stride + kx - pad;
                        if (iy >= 0 && iy < H && ix >= 0 && ix < W) xc[iy * W + ix] += row[idx];
                    }
                }
            }
        }
}

}  // namespace tig
