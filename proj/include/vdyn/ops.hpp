#pragma once

#include <cstdint>
#include <vector>

#include "vdyn/tensor.hpp"

namespace vdyn {

struct ConvSpec {
    int stride = 1;
    int pad = 0;
};

inline int conv_out_size(int in, int k, const ConvSpec& spec) {
    return (in + 2 * spec.pad - k) / spec.stride + 1;
}

template <typename T>
struct Conv2dGrads {
    Tensor<T> dx, dw, db;
};

/// y[n,o,i,j] = b[o] + sum_{c,u,v} x[n,c,i*s+u-pad, j*s+v-pad] * w[o,c,u,v],
/// out-of-range x treated as zero.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         const ConvSpec& spec);

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                               const Tensor<T>& dy);

/// Reference six-nested-loop convolution, kept deliberately naive; the fast
/// path must agree with it within 1e-6.
template <typename T>
Tensor<T> conv2d_forward_naive(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                               const ConvSpec& spec);

template <typename T>
struct CrossConvGrads {
    Tensor<T> dfeatures, dkernels;
};

/// Depthwise per-sample convolution with same-size zero padding (k odd):
/// y[n,c,i,j] = sum_{u,v} features[n,c,i+u-pad, j+v-pad] * kernels[n,c,u,v].
template <typename T>
Tensor<T> cross_conv2d_forward(const Tensor<T>& features, const Tensor<T>& kernels);

template <typename T>
CrossConvGrads<T> cross_conv2d_backward(const Tensor<T>& features, const Tensor<T>& kernels,
                                        const Tensor<T>& dy);

enum class BatchNormMode { kTrain, kEval };

template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;  // [C]
    Tensor<T> running_var;   // [C]
};

template <typename T>
struct BatchNormResult {
    Tensor<T> y;
    Tensor<T> batch_mean;  // [C], train mode only
    Tensor<T> batch_var;   // [C], biased (divides by N), train mode only
    BatchNormState<T> updated_state;
};

/// Pure: returns the updated running statistics instead of mutating state.
template <typename T>
BatchNormResult<T> batch_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma,
                                      const Tensor<T>& beta, const BatchNormState<T>& state,
                                      BatchNormMode mode, T eps, T momentum);

template <typename T>
struct BatchNormGrads {
    Tensor<T> dx, dgamma, dbeta;
};

template <typename T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                      const Tensor<T>& batch_mean, const Tensor<T>& batch_var,
                                      T eps, const Tensor<T>& dy);

/// Eval-mode backward (normalization by frozen running statistics).
template <typename T>
BatchNormGrads<T> batch_norm_backward_eval(const Tensor<T>& x, const Tensor<T>& gamma,
                                           const BatchNormState<T>& state, T eps,
                                           const Tensor<T>& dy);

template <typename T>
struct MaxPoolResult {
    Tensor<T> y;
    std::vector<int32_t> argmax;  // flat input index per output element
};

/// 2x2 max pooling, stride 2. Ties break toward the first element in
/// row-major scan order so backward routing is deterministic.
template <typename T>
MaxPoolResult<T> max_pool2x2_forward(const Tensor<T>& x);

template <typename T>
Tensor<T> max_pool2x2_backward(const std::vector<int>& x_shape,
                               const std::vector<int32_t>& argmax, const Tensor<T>& dy);

template <typename T>
Tensor<T> upsample_nearest_forward(const Tensor<T>& x, int factor);

template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& dy, int factor);

/// y = x * w + b with x [B,D], w [D,E], b [E].
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
struct DenseGrads {
    Tensor<T> dx, dw, db;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x);

/// Gradient is zero at x == 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy);

/// 2x2 block mean (both spatial dims halved); used for image pyramids.
template <typename T>
Tensor<T> block_mean_downsample(const Tensor<T>& x);

template <typename T>
Tensor<T> block_mean_downsample_backward(const Tensor<T>& dy);

/// Repeated 2x2 block mean until the spatial size reaches `target`.
template <typename T>
Tensor<T> downsample_to(const Tensor<T>& x, int target);

template <typename T>
Tensor<T> downsample_to_backward(const Tensor<T>& dy, int from_size);

/// Concatenate along the channel axis; all inputs share (B,H,W).
template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts);

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<int>& channel_counts);

/// C[M,N] (+)= A[M,K] * B[K,N]; rows of C are partitioned across threads, so
/// the reduction order over K is fixed regardless of thread count.
template <typename T>
void gemm(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c, bool accumulate,
          bool parallel_rows);

/// C[M,N] += A[M,K] * B[N,K]^T (dot-product form, fixed lane-summation order).
template <typename T>
void gemm_nt_acc(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c);

/// C[M,N] = A[K,M]^T * B[K,N].
template <typename T>
void gemm_tn(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c, bool parallel_rows);

}  // namespace vdyn
