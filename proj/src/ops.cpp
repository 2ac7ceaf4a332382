#include "vdyn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "vdyn/threading.hpp"

namespace vdyn {

namespace {

template <typename T>
void check_4d(const Tensor<T>& t, const char* what) {
    require(t.ndim() == 4, std::string(what) + ": expected a 4-D tensor, got " + t.shape_str());
}

// im2col for one sample: out[Cin*k*k, H'*W'], row-major. Stride 1 uses
// precomputed in-range column spans so inner loops are branch-free.
template <typename T>
void im2col(const T* x, int cin, int h, int w, int k, const ConvSpec& spec, int ho, int wo,
            T* col) {
    const int stride = spec.stride;
    const int pad = spec.pad;
    for (int c = 0; c < cin; ++c) {
        const T* xc = x + int64_t(c) * h * w;
        for (int u = 0; u < k; ++u) {
            for (int v = 0; v < k; ++v) {
                T* row = col + (int64_t(c) * k * k + u * k + v) * ho * wo;
                if (stride == 1) {
                    const int j0 = std::max(0, pad - v);
                    const int j1 = std::min(wo, w + pad - v);
                    for (int i = 0; i < ho; ++i) {
                        const int yi = i + u - pad;
                        T* dst = row + int64_t(i) * wo;
                        if (yi < 0 || yi >= h || j0 >= j1) {
                            std::fill(dst, dst + wo, T(0));
                            continue;
                        }
                        std::fill(dst, dst + j0, T(0));
                        std::memcpy(dst + j0, xc + int64_t(yi) * w + j0 + v - pad,
                                    sizeof(T) * static_cast<size_t>(j1 - j0));
                        std::fill(dst + j1, dst + wo, T(0));
                    }
                } else {
                    for (int i = 0; i < ho; ++i) {
                        int yi = i * stride + u - pad;
                        T* dst = row + int64_t(i) * wo;
                        if (yi < 0 || yi >= h) {
                            std::fill(dst, dst + wo, T(0));
                            continue;
                        }
                        const T* src = xc + int64_t(yi) * w;
                        for (int j = 0; j < wo; ++j) {
                            int xj = j * stride + v - pad;
                            dst[j] = (xj >= 0 && xj < w) ? src[xj] : T(0);
                        }
                    }
                }
            }
        }
    }
}

// col2im accumulation, inverse of im2col.
template <typename T>
void col2im_acc(const T* col, int cin, int h, int w, int k, const ConvSpec& spec, int ho, int wo,
                T* x) {
    const int stride = spec.stride;
    const int pad = spec.pad;
    for (int c = 0; c < cin; ++c) {
        T* xc = x + int64_t(c) * h * w;
        for (int u = 0; u < k; ++u) {
            for (int v = 0; v < k; ++v) {
                const T* row = col + (int64_t(c) * k * k + u * k + v) * ho * wo;
                if (stride == 1) {
                    const int j0 = std::max(0, pad - v);
                    const int j1 = std::min(wo, w + pad - v);
                    if (j0 >= j1) continue;
                    for (int i = 0; i < ho; ++i) {
                        const int yi = i + u - pad;
                        if (yi < 0 || yi >= h) continue;
                        T* dst = xc + int64_t(yi) * w + v - pad;
                        const T* src = row + int64_t(i) * wo;
                        for (int j = j0; j < j1; ++j) dst[j] += src[j];
                    }
                } else {
                    for (int i = 0; i < ho; ++i) {
                        int yi = i * stride + u - pad;
                        if (yi < 0 || yi >= h) continue;
                        T* dst = xc + int64_t(yi) * w;
                        const T* src = row + int64_t(i) * wo;
                        for (int j = 0; j < wo; ++j) {
                            int xj = j * stride + v - pad;
                            if (xj >= 0 && xj < w) dst[xj] += src[j];
                        }
                    }
                }
            }
        }
    }
}

// Register-blocked microkernel core: C[ib..ie, jt..jt+jw) += A * B over
// K rows [kb, ke), where a_row(i, kk) reads A. The 4x32 accumulator tile
// lives in registers; K order is fixed, so results are bit-identical for any
// thread count or panel schedule.
template <typename T, typename AGet>
inline void mk_tile(int64_t ib, int64_t ie, int64_t jt, int64_t jw, int64_t kb, int64_t ke,
                    const T* b, int64_t n, T* c, AGet a_row) {
    constexpr int64_t kJT = 32;
    int64_t i = ib;
    for (; i + 4 <= ie; i += 4) {
        T acc0[kJT] = {}, acc1[kJT] = {}, acc2[kJT] = {}, acc3[kJT] = {};
        const T* bp = b + kb * n + jt;
        for (int64_t kk = kb; kk < ke; ++kk, bp += n) {
            const T v0 = a_row(i, kk), v1 = a_row(i + 1, kk), v2 = a_row(i + 2, kk),
                    v3 = a_row(i + 3, kk);
            for (int64_t j = 0; j < jw; ++j) {
                const T bj = bp[j];
                acc0[j] += v0 * bj;
                acc1[j] += v1 * bj;
                acc2[j] += v2 * bj;
                acc3[j] += v3 * bj;
            }
        }
        T* c0 = c + i * n + jt;
        for (int64_t j = 0; j < jw; ++j) {
            c0[j] += acc0[j];
            c0[n + j] += acc1[j];
            c0[2 * n + j] += acc2[j];
            c0[3 * n + j] += acc3[j];
        }
    }
    for (; i < ie; ++i) {
        T acc[kJT] = {};
        const T* bp = b + kb * n + jt;
        for (int64_t kk = kb; kk < ke; ++kk, bp += n) {
            const T v = a_row(i, kk);
            for (int64_t j = 0; j < jw; ++j) acc[j] += v * bp[j];
        }
        T* ci = c + i * n + jt;
        for (int64_t j = 0; j < jw; ++j) ci[j] += acc[j];
    }
}

// Shared panel schedule: column tiles outermost so each B panel (<= 256x32)
// stays cache-resident while every row tile consumes it.
template <typename T, typename AGet>
void mk_panels(int64_t m0, int64_t m1, int64_t n, int64_t k, const T* b, T* c, AGet a_row) {
    constexpr int64_t kKB = 256;
    constexpr int64_t kJT = 32;
    for (int64_t jt = 0; jt < n; jt += kJT) {
        const int64_t jw = std::min<int64_t>(kJT, n - jt);
        for (int64_t kb = 0; kb < k; kb += kKB) {
            const int64_t ke = std::min(k, kb + kKB);
            mk_tile(m0, m1, jt, jw, kb, ke, b, n, c, a_row);
        }
    }
}

template <typename T>
void gemm_rows(int64_t m0, int64_t m1, int64_t n, int64_t k, const T* a, const T* b, T* c,
               bool accumulate) {
    if (!accumulate) {
        for (int64_t i = m0; i < m1; ++i) std::fill(c + i * n, c + i * n + n, T(0));
    }
    mk_panels(m0, m1, n, k, b, c, [a, k](int64_t i, int64_t kk) { return a[i * k + kk]; });
}

// C[M,N] += A[M,K] * B[N,K]^T: dot-product form. B row tiles stay in L1 while
// all A rows stream against them; lane sums use a fixed strip order.
template <typename T>
void gemm_nt_rows(int64_t m0, int64_t m1, int64_t n, int64_t k, const T* a, const T* b, T* c) {
    constexpr int64_t kLanes = 16;
    constexpr int64_t kJRows = 8;
    const int64_t k_main = k - k % kLanes;
    for (int64_t j0 = 0; j0 < n; j0 += kJRows) {
        const int64_t j1 = std::min(n, j0 + kJRows);
        for (int64_t i = m0; i < m1; ++i) {
            const T* ai = a + i * k;
            for (int64_t j = j0; j < j1; ++j) {
                const T* bj = b + j * k;
                T lanes[kLanes] = {};
                for (int64_t kk = 0; kk < k_main; kk += kLanes) {
                    for (int64_t l = 0; l < kLanes; ++l) lanes[l] += ai[kk + l] * bj[kk + l];
                }
                T acc = 0;
                for (int64_t l = 0; l < kLanes; ++l) acc += lanes[l];
                for (int64_t kk = k_main; kk < k; ++kk) acc += ai[kk] * bj[kk];
                c[i * n + j] += acc;
            }
        }
    }
}

// C[M,N] = A[K,M]^T * B[K,N]; `m_total` is the row stride of A.
template <typename T>
void gemm_tn_rows(int64_t m0, int64_t m1, int64_t m_total, int64_t n, int64_t k, const T* a,
                  const T* b, T* c) {
    for (int64_t i = m0; i < m1; ++i) std::fill(c + i * n, c + i * n + n, T(0));
    mk_panels(m0, m1, n, k, b, c,
              [a, m_total](int64_t i, int64_t kk) { return a[kk * m_total + i]; });
}

}  // namespace

template <typename T>
void gemm(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c, bool accumulate,
          bool parallel_rows) {
    if (parallel_rows && m >= 2) {
        parallel_for(m, [&](int64_t r0, int64_t r1) { gemm_rows(r0, r1, n, k, a, b, c, accumulate); });
    } else {
        gemm_rows<T>(0, m, n, k, a, b, c, accumulate);
    }
}

template <typename T>
void gemm_nt_acc(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c) {
    gemm_nt_rows<T>(0, m, n, k, a, b, c);
}

template <typename T>
void gemm_tn(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c, bool parallel_rows) {
    if (parallel_rows && m >= 2) {
        parallel_for(m, [&](int64_t r0, int64_t r1) { gemm_tn_rows(r0, r1, m, n, k, a, b, c); });
    } else {
        gemm_tn_rows<T>(0, m, m, n, k, a, b, c);
    }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         const ConvSpec& spec) {
    check_4d(x, "conv2d");
    check_4d(w, "conv2d weights");
    const int batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int cout = w.dim(0), k = w.dim(2);
    require(w.dim(1) == cin, "conv2d: input has " + std::to_string(cin) + " channels but kernel expects " +
                                 std::to_string(w.dim(1)));
    require(w.dim(2) == w.dim(3), "conv2d: only square kernels are supported");
    require(b.size() == cout, "conv2d: bias length must equal output channels");
    require(spec.stride >= 1, "conv2d: stride must be positive");
    require(spec.pad >= 0, "conv2d: pad must be non-negative");
    require(k <= h + 2 * spec.pad && k <= wd + 2 * spec.pad, "conv2d: kernel exceeds padded input");
    const int ho = conv_out_size(h, k, spec);
    const int wo = conv_out_size(wd, k, spec);
    require(ho >= 1 && wo >= 1, "conv2d: empty output");

    Tensor<T> y({batch, cout, ho, wo});
    const int64_t col_rows = int64_t(cin) * k * k;
    const int64_t col_cols = int64_t(ho) * wo;
    parallel_for(batch, [&](int64_t n0, int64_t n1) {
        std::vector<T> col(static_cast<size_t>(col_rows * col_cols));
        for (int64_t n = n0; n < n1; ++n) {
            im2col(x.data() + n * cin * h * wd, cin, h, wd, k, spec, ho, wo, col.data());
            T* yn = y.data() + n * cout * col_cols;
            gemm_rows<T>(0, cout, col_cols, col_rows, w.data(), col.data(), yn, false);
            for (int o = 0; o < cout; ++o) {
                T bo = b[o];
                T* yo = yn + int64_t(o) * col_cols;
                for (int64_t p = 0; p < col_cols; ++p) yo[p] += bo;
            }
        }
    });
    return y;
}

template <typename T>
Tensor<T> conv2d_forward_naive(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                               const ConvSpec& spec) {
    const int batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int cout = w.dim(0), k = w.dim(2);
    require(w.dim(1) == cin, "conv2d_naive: channel mismatch");
    const int ho = conv_out_size(h, k, spec);
    const int wo = conv_out_size(wd, k, spec);
    Tensor<T> y({batch, cout, ho, wo});
    for (int n = 0; n < batch; ++n)
        for (int o = 0; o < cout; ++o)
            for (int i = 0; i < ho; ++i)
                for (int j = 0; j < wo; ++j) {
                    T acc = b[o];
                    for (int c = 0; c < cin; ++c)
                        for (int u = 0; u < k; ++u)
                            for (int v = 0; v < k; ++v) {
                                int yi = i * spec.stride + u - spec.pad;
                                int xj = j * spec.stride + v - spec.pad;
                                if (yi < 0 || yi >= h || xj < 0 || xj >= wd) continue;
                                acc += x.at(n, c, yi, xj) * w.at(o, c, u, v);
                            }
                    y.at(n, o, i, j) = acc;
                }
    return y;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                               const Tensor<T>& dy) {
    const int batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int cout = w.dim(0), k = w.dim(2);
    const int ho = dy.dim(2), wo = dy.dim(3);
    require(dy.dim(0) == batch && dy.dim(1) == cout, "conv2d backward: upstream gradient shape mismatch");

    Conv2dGrads<T> g;
    g.dx = Tensor<T>({batch, cin, h, wd});
    g.dw = Tensor<T>({cout, cin, k, k});
    g.db = Tensor<T>({cout});

    const int64_t col_rows = int64_t(cin) * k * k;
    const int64_t col_cols = int64_t(ho) * wo;

    // db: per-channel reduction with fixed order.
    parallel_for(cout, [&](int64_t o0, int64_t o1) {
        for (int64_t o = o0; o < o1; ++o) {
            T acc = 0;
            for (int n = 0; n < batch; ++n) {
                const T* p = dy.data() + (n * cout + o) * col_cols;
                for (int64_t q = 0; q < col_cols; ++q) acc += p[q];
            }
            g.db[o] = acc;
        }
    });

    // Both gradient contractions run through the register-blocked NN kernel;
    // the small operands (w, per-sample dy) are transposed once so every GEMM
    // streams its large operand contiguously.
    std::vector<T> wt(static_cast<size_t>(col_rows * cout));
    for (int o = 0; o < cout; ++o)
        for (int64_t r = 0; r < col_rows; ++r)
            wt[static_cast<size_t>(r * cout + o)] = w[o * col_rows + r];

    // dx[n] = col2im(w^T * dy[n]): each sample owned by one thread.
    parallel_for(batch, [&](int64_t n0, int64_t n1) {
        std::vector<T> col(static_cast<size_t>(col_rows * col_cols));
        for (int64_t n = n0; n < n1; ++n) {
            gemm_rows<T>(0, col_rows, col_cols, cout, wt.data(), dy.data() + n * cout * col_cols,
                         col.data(), false);
            col2im_acc(col.data(), cin, h, wd, k, spec, ho, wo, g.dx.data() + n * cin * h * wd);
        }
    });

    // dw^T = sum_n im2col(x[n]) * dy[n]^T, accumulated in a fixed block order
    // so the result is identical for any thread count.
    const int kBlocks = std::min(batch, 8);
    std::vector<std::vector<T>> partial(static_cast<size_t>(kBlocks),
                                        std::vector<T>(static_cast<size_t>(col_rows * cout)));
    parallel_for(kBlocks, [&](int64_t b0, int64_t b1) {
        std::vector<T> col(static_cast<size_t>(col_rows * col_cols));
        std::vector<T> dyt(static_cast<size_t>(col_cols * cout));
        for (int64_t blk = b0; blk < b1; ++blk) {
            int64_t lo = batch * blk / kBlocks;
            int64_t hi = batch * (blk + 1) / kBlocks;
            T* dst = partial[static_cast<size_t>(blk)].data();
            for (int64_t n = lo; n < hi; ++n) {
                im2col(x.data() + n * cin * h * wd, cin, h, wd, k, spec, ho, wo, col.data());
                const T* dyn = dy.data() + n * cout * col_cols;
                for (int o = 0; o < cout; ++o)
                    for (int64_t q = 0; q < col_cols; ++q)
                        dyt[static_cast<size_t>(q * cout + o)] = dyn[o * col_cols + q];
                gemm_rows<T>(0, col_rows, cout, col_cols, col.data(), dyt.data(), dst, true);
            }
        }
    });
    for (int blk = 0; blk < kBlocks; ++blk) {
        const T* src = partial[static_cast<size_t>(blk)].data();
        for (int o = 0; o < cout; ++o)
            for (int64_t r = 0; r < col_rows; ++r) g.dw[o * col_rows + r] += src[r * cout + o];
    }
    return g;
}

template <typename T>
Tensor<T> cross_conv2d_forward(const Tensor<T>& features, const Tensor<T>& kernels) {
    check_4d(features, "cross_conv2d features");
    check_4d(kernels, "cross_conv2d kernels");
    const int batch = features.dim(0), ch = features.dim(1), h = features.dim(2), w = features.dim(3);
    const int k = kernels.dim(2);
    require(kernels.dim(0) == batch && kernels.dim(1) == ch,
            "cross_conv2d: batch/channel mismatch between features " + features.shape_str() +
                " and kernels " + kernels.shape_str());
    require(kernels.dim(3) == k, "cross_conv2d: kernels must be square");
    require(k % 2 == 1, "cross_conv2d: kernel size must be odd, got " + std::to_string(k));
    const int pad = (k - 1) / 2;

    Tensor<T> y({batch, ch, h, w});
    parallel_for(int64_t(batch) * ch, [&](int64_t p0, int64_t p1) {
        for (int64_t p = p0; p < p1; ++p) {
            const T* f = features.data() + p * h * w;
            const T* kn = kernels.data() + p * k * k;
            T* out = y.data() + p * h * w;
            for (int i = 0; i < h; ++i) {
                for (int j = 0; j < w; ++j) {
                    T acc = 0;
                    for (int u = 0; u < k; ++u) {
                        int yi = i + u - pad;
                        if (yi < 0 || yi >= h) continue;
                        const T* frow = f + int64_t(yi) * w;
                        const T* krow = kn + int64_t(u) * k;
                        for (int v = 0; v < k; ++v) {
                            int xj = j + v - pad;
                            if (xj < 0 || xj >= w) continue;
                            acc += frow[xj] * krow[v];
                        }
                    }
                    out[int64_t(i) * w + j] = acc;
                }
            }
        }
    });
    return y;
}

template <typename T>
CrossConvGrads<T> cross_conv2d_backward(const Tensor<T>& features, const Tensor<T>& kernels,
                                        const Tensor<T>& dy) {
    const int batch = features.dim(0), ch = features.dim(1), h = features.dim(2), w = features.dim(3);
    const int k = kernels.dim(2);
    const int pad = (k - 1) / 2;
    require(dy.same_shape(features), "cross_conv2d backward: gradient shape mismatch");

    CrossConvGrads<T> g;
    g.dfeatures = Tensor<T>({batch, ch, h, w});
    g.dkernels = Tensor<T>({batch, ch, k, k});
    parallel_for(int64_t(batch) * ch, [&](int64_t p0, int64_t p1) {
        for (int64_t p = p0; p < p1; ++p) {
            const T* f = features.data() + p * h * w;
            const T* kn = kernels.data() + p * k * k;
            const T* gy = dy.data() + p * h * w;
            T* df = g.dfeatures.data() + p * h * w;
            T* dk = g.dkernels.data() + p * k * k;
            for (int i = 0; i < h; ++i) {
                for (int j = 0; j < w; ++j) {
                    const T gyij = gy[int64_t(i) * w + j];
                    for (int u = 0; u < k; ++u) {
                        int yi = i + u - pad;
                        if (yi < 0 || yi >= h) continue;
                        for (int v = 0; v < k; ++v) {
                            int xj = j + v - pad;
                            if (xj < 0 || xj >= w) continue;
                            df[int64_t(yi) * w + xj] += gyij * kn[int64_t(u) * k + v];
                            dk[int64_t(u) * k + v] += gyij * f[int64_t(yi) * w + xj];
                        }
                    }
                }
            }
        }
    });
    return g;
}

template <typename T>
BatchNormResult<T> batch_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma,
                                      const Tensor<T>& beta, const BatchNormState<T>& state,
                                      BatchNormMode mode, T eps, T momentum) {
    check_4d(x, "batch_norm");
    const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    require(gamma.size() == ch && beta.size() == ch, "batch_norm: gamma/beta length must equal channels");
    require(state.running_mean.size() == ch && state.running_var.size() == ch,
            "batch_norm: running statistics length must equal channels");
    const int64_t per_ch = int64_t(batch) * h * w;
    if (mode == BatchNormMode::kTrain) {
        require(per_ch >= 2, "batch_norm: train mode needs at least 2 values per channel (variance undefined)");
    }

    BatchNormResult<T> r;
    r.y = Tensor<T>({batch, ch, h, w});
    r.updated_state = state;
    const int64_t hw = int64_t(h) * w;

    if (mode == BatchNormMode::kEval) {
        parallel_for(ch, [&](int64_t c0, int64_t c1) {
            for (int64_t c = c0; c < c1; ++c) {
                const T inv = T(1) / std::sqrt(state.running_var[c] + eps);
                const T g = gamma[c], bt = beta[c], mu = state.running_mean[c];
                for (int n = 0; n < batch; ++n) {
                    const T* xs = x.data() + (n * ch + c) * hw;
                    T* ys = r.y.data() + (n * ch + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) ys[i] = g * (xs[i] - mu) * inv + bt;
                }
            }
        });
        return r;
    }

    r.batch_mean = Tensor<T>({ch});
    r.batch_var = Tensor<T>({ch});
    parallel_for(ch, [&](int64_t c0, int64_t c1) {
        for (int64_t c = c0; c < c1; ++c) {
            T sum = 0;
            for (int n = 0; n < batch; ++n) {
                const T* xs = x.data() + (n * ch + c) * hw;
                for (int64_t i = 0; i < hw; ++i) sum += xs[i];
            }
            const T mean = sum / static_cast<T>(per_ch);
            T var = 0;
            for (int n = 0; n < batch; ++n) {
                const T* xs = x.data() + (n * ch + c) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    T d = xs[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<T>(per_ch);
            r.batch_mean[c] = mean;
            r.batch_var[c] = var;
            const T inv = T(1) / std::sqrt(var + eps);
            const T g = gamma[c], bt = beta[c];
            for (int n = 0; n < batch; ++n) {
                const T* xs = x.data() + (n * ch + c) * hw;
                T* ys = r.y.data() + (n * ch + c) * hw;
                for (int64_t i = 0; i < hw; ++i) ys[i] = g * (xs[i] - mean) * inv + bt;
            }
            // Unbiased variance in the running estimate, matching common practice.
            T unbiased = per_ch > 1 ? var * static_cast<T>(per_ch) / static_cast<T>(per_ch - 1) : var;
            r.updated_state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] + momentum * mean;
            r.updated_state.running_var[c] = (T(1) - momentum) * state.running_var[c] + momentum * unbiased;
        }
    });
    return r;
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                      const Tensor<T>& batch_mean, const Tensor<T>& batch_var,
                                      T eps, const Tensor<T>& dy) {
    const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t hw = int64_t(h) * w;
    const int64_t m = int64_t(batch) * hw;

    BatchNormGrads<T> g;
    g.dx = Tensor<T>({batch, ch, h, w});
    g.dgamma = Tensor<T>({ch});
    g.dbeta = Tensor<T>({ch});
    parallel_for(ch, [&](int64_t c0, int64_t c1) {
        for (int64_t c = c0; c < c1; ++c) {
            const T mean = batch_mean[c];
            const T inv = T(1) / std::sqrt(batch_var[c] + eps);
            T sum_dy = 0, sum_dy_xhat = 0;
            for (int n = 0; n < batch; ++n) {
                const T* xs = x.data() + (n * ch + c) * hw;
                const T* gs = dy.data() + (n * ch + c) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    sum_dy += gs[i];
                    sum_dy_xhat += gs[i] * (xs[i] - mean) * inv;
                }
            }
            g.dbeta[c] = sum_dy;
            g.dgamma[c] = sum_dy_xhat;
            const T gm = gamma[c];
            const T a = gm * inv / static_cast<T>(m);
            for (int n = 0; n < batch; ++n) {
                const T* xs = x.data() + (n * ch + c) * hw;
                const T* gs = dy.data() + (n * ch + c) * hw;
                T* ds = g.dx.data() + (n * ch + c) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    T xhat = (xs[i] - mean) * inv;
                    ds[i] = a * (static_cast<T>(m) * gs[i] - sum_dy - xhat * sum_dy_xhat);
                }
            }
        }
    });
    return g;
}

template <typename T>
BatchNormGrads<T> batch_norm_backward_eval(const Tensor<T>& x, const Tensor<T>& gamma,
                                           const BatchNormState<T>& state, T eps,
                                           const Tensor<T>& dy) {
    const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t hw = int64_t(h) * w;
    BatchNormGrads<T> g;
    g.dx = Tensor<T>({batch, ch, h, w});
    g.dgamma = Tensor<T>({ch});
    g.dbeta = Tensor<T>({ch});
    parallel_for(ch, [&](int64_t c0, int64_t c1) {
        for (int64_t c = c0; c < c1; ++c) {
            const T inv = T(1) / std::sqrt(state.running_var[c] + eps);
            const T mu = state.running_mean[c];
            const T scale = gamma[c] * inv;
            T sum_dy = 0, sum_dy_xhat = 0;
            for (int n = 0; n < batch; ++n) {
                const T* xs = x.data() + (n * ch + c) * hw;
                const T* gs = dy.data() + (n * ch + c) * hw;
                T* ds = g.dx.data() + (n * ch + c) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    sum_dy += gs[i];
                    sum_dy_xhat += gs[i] * (xs[i] - mu) * inv;
                    ds[i] = gs[i] * scale;
                }
            }
            g.dbeta[c] = sum_dy;
            g.dgamma[c] = sum_dy_xhat;
        }
    });
    return g;
}

template <typename T>
MaxPoolResult<T> max_pool2x2_forward(const Tensor<T>& x) {
    check_4d(x, "max_pool2x2");
    const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    require(h % 2 == 0 && w % 2 == 0,
            "max_pool2x2: spatial dims must be even, got " + x.shape_str());
    const int ho = h / 2, wo = w / 2;
    MaxPoolResult<T> r;
    r.y = Tensor<T>({batch, ch, ho, wo});
    r.argmax.assign(static_cast<size_t>(r.y.size()), 0);
    parallel_for(int64_t(batch) * ch, [&](int64_t p0, int64_t p1) {
        for (int64_t p = p0; p < p1; ++p) {
            const T* xs = x.data() + p * h * w;
            T* ys = r.y.data() + p * ho * wo;
            int32_t* am = r.argmax.data() + p * ho * wo;
            for (int i = 0; i < ho; ++i) {
                for (int j = 0; j < wo; ++j) {
                    int base = 2 * i * w + 2 * j;
                    // Scan in row-major order; strict > keeps the first max.
                    int best = base;
                    T bv = xs[base];
                    const int cand[3] = {base + 1, base + w, base + w + 1};
                    for (int idx : cand) {
                        if (xs[idx] > bv) {
                            bv = xs[idx];
                            best = idx;
                        }
                    }
                    ys[int64_t(i) * wo + j] = bv;
                    am[int64_t(i) * wo + j] = static_cast<int32_t>(p * h * w + best);
                }
            }
        }
    });
    return r;
}

template <typename T>
Tensor<T> max_pool2x2_backward(const std::vector<int>& x_shape,
                               const std::vector<int32_t>& argmax, const Tensor<T>& dy) {
    Tensor<T> dx(x_shape);
    require(static_cast<int64_t>(argmax.size()) == dy.size(), "max_pool2x2 backward: argmax/gradient mismatch");
    // argmax indices of plane p land inside plane p, so planes are independent.
    const int64_t planes = int64_t(dy.dim(0)) * dy.dim(1);
    const int64_t out_hw = int64_t(dy.dim(2)) * dy.dim(3);
    parallel_for(planes, [&](int64_t p0, int64_t p1) {
        for (int64_t i = p0 * out_hw; i < p1 * out_hw; ++i) {
            dx[argmax[static_cast<size_t>(i)]] += dy[i];
        }
    });
    return dx;
}

template <typename T>
Tensor<T> upsample_nearest_forward(const Tensor<T>& x, int factor) {
    check_4d(x, "upsample_nearest");
    require(factor >= 1, "upsample_nearest: factor must be >= 1");
    if (factor == 1) return x;
    const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> y({batch, ch, h * factor, w * factor});
    const int wo = w * factor;
    parallel_for(int64_t(batch) * ch, [&](int64_t p0, int64_t p1) {
        for (int64_t p = p0; p < p1; ++p) {
            const T* xs = x.data() + p * h * w;
            T* ys = y.data() + p * int64_t(h) * factor * wo;
            for (int i = 0; i < h; ++i) {
                T* row0 = ys + int64_t(i) * factor * wo;
                for (int j = 0; j < w; ++j) {
                    T v = xs[int64_t(i) * w + j];
                    for (int f = 0; f < factor; ++f) row0[j * factor + f] = v;
                }
                for (int f = 1; f < factor; ++f)
                    std::memcpy(row0 + int64_t(f) * wo, row0, sizeof(T) * static_cast<size_t>(wo));
            }
        }
    });
    return y;
}

template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& dy, int factor) {
    require(factor >= 1, "upsample_nearest: factor must be >= 1");
    if (factor == 1) return dy;
    const int batch = dy.dim(0), ch = dy.dim(1), ho = dy.dim(2), wo = dy.dim(3);
    require(ho % factor == 0 && wo % factor == 0, "upsample_nearest backward: size not divisible by factor");
    const int h = ho / factor, w = wo / factor;
    Tensor<T> dx({batch, ch, h, w});
    parallel_for(int64_t(batch) * ch, [&](int64_t p0, int64_t p1) {
        for (int64_t p = p0; p < p1; ++p) {
            const T* gs = dy.data() + p * int64_t(ho) * wo;
            T* ds = dx.data() + p * int64_t(h) * w;
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    T acc = 0;
                    for (int fi = 0; fi < factor; ++fi) {
                        const T* row = gs + (int64_t(i) * factor + fi) * wo + int64_t(j) * factor;
                        for (int fj = 0; fj < factor; ++fj) acc += row[fj];
                    }
                    ds[int64_t(i) * w + j] = acc;
                }
        }
    });
    return dx;
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    require(x.ndim() == 2 && w.ndim() == 2, "dense: x and w must be 2-D");
    const int batch = x.dim(0), d = x.dim(1), e = w.dim(1);
    require(w.dim(0) == d, "dense: inner dimensions disagree (" + std::to_string(d) + " vs " +
                               std::to_string(w.dim(0)) + ")");
    require(b.size() == e, "dense: bias length must equal output width");
    Tensor<T> y({batch, e});
    gemm<T>(batch, e, d, x.data(), w.data(), y.data(), false, true);
    parallel_for(batch, [&](int64_t n0, int64_t n1) {
        for (int64_t n = n0; n < n1; ++n) {
            T* yn = y.data() + n * e;
            for (int j = 0; j < e; ++j) yn[j] += b[j];
        }
    });
    return y;
}

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy) {
    const int batch = x.dim(0), d = x.dim(1), e = w.dim(1);
    require(dy.dim(0) == batch && dy.dim(1) == e, "dense backward: gradient shape mismatch");
    DenseGrads<T> g;
    g.dx = Tensor<T>({batch, d});
    g.dw = Tensor<T>({d, e});
    g.db = Tensor<T>({e});

    // dx = dy * w^T
    std::vector<T> wt(static_cast<size_t>(int64_t(d) * e));
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < e; ++j) wt[static_cast<size_t>(int64_t(j) * d + i)] = w.at(i, j);
    gemm<T>(batch, d, e, dy.data(), wt.data(), g.dx.data(), false, true);

    // dw = x^T * dy: rows of dw are partitioned, batch reduction order fixed.
    parallel_for(d, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
            T* dwr = g.dw.data() + r * e;
            for (int n = 0; n < batch; ++n) {
                const T xv = x.at(n, static_cast<int>(r));
                const T* gyn = dy.data() + int64_t(n) * e;
                for (int j = 0; j < e; ++j) dwr[j] += xv * gyn[j];
            }
        }
    });
    for (int n = 0; n < batch; ++n) {
        const T* gyn = dy.data() + int64_t(n) * e;
        for (int j = 0; j < e; ++j) g.db[j] += gyn[j];
    }
    return g;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    parallel_for(x.size(), [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    });
    return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
    require(x.same_shape(dy), "relu backward: shape mismatch");
    Tensor<T> dx(x.shape());
    parallel_for(x.size(), [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
    });
    return dx;
}

template <typename T>
Tensor<T> block_mean_downsample(const Tensor<T>& x) {
    check_4d(x, "block_mean_downsample");
    const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    require(h % 2 == 0 && w % 2 == 0, "block_mean_downsample: spatial dims must be even");
    const int ho = h / 2, wo = w / 2;
    Tensor<T> y({batch, ch, ho, wo});
    parallel_for(int64_t(batch) * ch, [&](int64_t p0, int64_t p1) {
        for (int64_t p = p0; p < p1; ++p) {
            const T* xs = x.data() + p * h * w;
            T* ys = y.data() + p * ho * wo;
            for (int i = 0; i < ho; ++i)
                for (int j = 0; j < wo; ++j) {
                    const T* b0 = xs + int64_t(2 * i) * w + 2 * j;
                    ys[int64_t(i) * wo + j] = (b0[0] + b0[1] + b0[w] + b0[w + 1]) * T(0.25);
                }
        }
    });
    return y;
}

template <typename T>
Tensor<T> block_mean_downsample_backward(const Tensor<T>& dy) {
    const int batch = dy.dim(0), ch = dy.dim(1), ho = dy.dim(2), wo = dy.dim(3);
    Tensor<T> dx({batch, ch, ho * 2, wo * 2});
    const int w = wo * 2;
    parallel_for(int64_t(batch) * ch, [&](int64_t p0, int64_t p1) {
        for (int64_t p = p0; p < p1; ++p) {
            const T* gs = dy.data() + p * ho * wo;
            T* ds = dx.data() + p * int64_t(ho) * 2 * w;
            for (int i = 0; i < ho; ++i)
                for (int j = 0; j < wo; ++j) {
                    T v = gs[int64_t(i) * wo + j] * T(0.25);
                    T* b0 = ds + int64_t(2 * i) * w + 2 * j;
                    b0[0] = v;
                    b0[1] = v;
                    b0[w] = v;
                    b0[w + 1] = v;
                }
        }
    });
    return dx;
}

template <typename T>
Tensor<T> downsample_to(const Tensor<T>& x, int target) {
    require(x.dim(2) == x.dim(3), "downsample_to: expected square input");
    int cur = x.dim(2);
    require(target >= 1 && cur % target == 0 && ((cur / target) & (cur / target - 1)) == 0,
            "downsample_to: target must be a power-of-two divisor of the input size");
    Tensor<T> out = x;
    while (cur > target) {
        out = block_mean_downsample(out);
        cur /= 2;
    }
    return out;
}

template <typename T>
Tensor<T> downsample_to_backward(const Tensor<T>& dy, int from_size) {
    Tensor<T> out = dy;
    while (out.dim(2) < from_size) {
        out = block_mean_downsample_backward(out);
    }
    return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
    require(!parts.empty(), "concat_channels: no inputs");
    const int batch = parts[0]->dim(0), h = parts[0]->dim(2), w = parts[0]->dim(3);
    int total_c = 0;
    for (const auto* p : parts) {
        require(p->dim(0) == batch && p->dim(2) == h && p->dim(3) == w,
                "concat_channels: inputs must share batch and spatial dims");
        total_c += p->dim(1);
    }
    Tensor<T> y({batch, total_c, h, w});
    const int64_t hw = int64_t(h) * w;
    for (int n = 0; n < batch; ++n) {
        int off = 0;
        for (const auto* p : parts) {
            const int c = p->dim(1);
            std::memcpy(y.data() + (int64_t(n) * total_c + off) * hw,
                        p->data() + int64_t(n) * c * hw, sizeof(T) * static_cast<size_t>(c * hw));
            off += c;
        }
    }
    return y;
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<int>& channel_counts) {
    const int batch = x.dim(0), h = x.dim(2), w = x.dim(3);
    int total = 0;
    for (int c : channel_counts) total += c;
    require(total == x.dim(1), "split_channels: channel counts do not sum to input channels");
    std::vector<Tensor<T>> out;
    out.reserve(channel_counts.size());
    const int64_t hw = int64_t(h) * w;
    int off = 0;
    for (int c : channel_counts) {
        Tensor<T> part({batch, c, h, w});
        for (int n = 0; n < batch; ++n) {
            std::memcpy(part.data() + int64_t(n) * c * hw,
                        x.data() + (int64_t(n) * x.dim(1) + off) * hw,
                        sizeof(T) * static_cast<size_t>(c * hw));
        }
        off += c;
        out.push_back(std::move(part));
    }
    return out;
}

#define VDYN_INSTANTIATE(T)                                                                        \
    template void gemm<T>(int64_t, int64_t, int64_t, const T*, const T*, T*, bool, bool);          \
    template void gemm_nt_acc<T>(int64_t, int64_t, int64_t, const T*, const T*, T*);               \
    template void gemm_tn<T>(int64_t, int64_t, int64_t, const T*, const T*, T*, bool);             \
    template Tensor<T> conv2d_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                         const ConvSpec&);                                         \
    template Tensor<T> conv2d_forward_naive<T>(const Tensor<T>&, const Tensor<T>&,                 \
                                               const Tensor<T>&, const ConvSpec&);                 \
    template Conv2dGrads<T> conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&,                 \
                                               const ConvSpec&, const Tensor<T>&);                 \
    template Tensor<T> cross_conv2d_forward<T>(const Tensor<T>&, const Tensor<T>&);                \
    template CrossConvGrads<T> cross_conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&,        \
                                                        const Tensor<T>&);                         \
    template BatchNormResult<T> batch_norm_forward<T>(const Tensor<T>&, const Tensor<T>&,          \
                                                      const Tensor<T>&, const BatchNormState<T>&,  \
                                                      BatchNormMode, T, T);                        \
    template BatchNormGrads<T> batch_norm_backward<T>(const Tensor<T>&, const Tensor<T>&,          \
                                                      const Tensor<T>&, const Tensor<T>&, T,       \
                                                      const Tensor<T>&);                           \
    template BatchNormGrads<T> batch_norm_backward_eval<T>(const Tensor<T>&, const Tensor<T>&,     \
                                                           const BatchNormState<T>&, T,            \
                                                           const Tensor<T>&);                      \
    template MaxPoolResult<T> max_pool2x2_forward<T>(const Tensor<T>&);                            \
    template Tensor<T> max_pool2x2_backward<T>(const std::vector<int>&,                            \
                                               const std::vector<int32_t>&, const Tensor<T>&);     \
    template Tensor<T> upsample_nearest_forward<T>(const Tensor<T>&, int);                         \
    template Tensor<T> upsample_nearest_backward<T>(const Tensor<T>&, int);                        \
    template Tensor<T> dense_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
    template DenseGrads<T> dense_backward<T>(const Tensor<T>&, const Tensor<T>&,                   \
                                             const Tensor<T>&);                                    \
    template Tensor<T> relu_forward<T>(const Tensor<T>&);                                          \
    template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);                       \
    template Tensor<T> block_mean_downsample<T>(const Tensor<T>&);                                 \
    template Tensor<T> block_mean_downsample_backward<T>(const Tensor<T>&);                        \
    template Tensor<T> downsample_to<T>(const Tensor<T>&, int);                                    \
    template Tensor<T> downsample_to_backward<T>(const Tensor<T>&, int);                           \
    template Tensor<T> concat_channels<T>(const std::vector<const Tensor<T>*>&);                   \
    template std::vector<Tensor<T>> split_channels<T>(const Tensor<T>&, const std::vector<int>&);

VDYN_INSTANTIATE(float)
VDYN_INSTANTIATE(double)

#undef VDYN_INSTANTIATE

}  // namespace vdyn
