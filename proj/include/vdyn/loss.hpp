#pragma once

#include "vdyn/tensor.hpp"

namespace vdyn {

/// Loss components for one batch: total = kl + lambda * recon.
struct LossBreakdown {
    double kl = 0.0;
    double recon = 0.0;
    double total = 0.0;
    double lambda = 0.0;
};

/// Analytic KL divergence between N(mu, diag(exp(logvar))) and N(0, I):
/// 0.5 * sum_k (exp(logvar_k) + mu_k^2 - 1 - logvar_k). Inputs are [B,D];
/// the result is averaged over the batch.
template <typename T>
double kl_diag_gaussian(const Tensor<T>& mu, const Tensor<T>& logvar);

/// d(kl)/d(mu), d(kl)/d(logvar) for the batch-mean KL above.
template <typename T>
void kl_diag_gaussian_backward(const Tensor<T>& mu, const Tensor<T>& logvar, Tensor<T>* dmu,
                               Tensor<T>* dlogvar);

/// Mean squared error over every element.
template <typename T>
double recon_loss(const Tensor<T>& v, const Tensor<T>& v_hat);

/// d(recon)/d(v_hat).
template <typename T>
Tensor<T> recon_loss_backward(const Tensor<T>& v, const Tensor<T>& v_hat);

template <typename T>
LossBreakdown total_loss(const Tensor<T>& mu, const Tensor<T>& logvar, const Tensor<T>& v,
                         const Tensor<T>& v_hat, double lambda);

}  // namespace vdyn
