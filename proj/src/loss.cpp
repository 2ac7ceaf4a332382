#include "vdyn/loss.hpp"

#include <cmath>

namespace vdyn {

template <typename T>
double kl_diag_gaussian(const Tensor<T>& mu, const Tensor<T>& logvar) {
    require(mu.same_shape(logvar), "kl: mu and logvar must have equal shapes");
    require(all_finite(mu) && all_finite(logvar), "kl: non-finite input");
    const int batch = mu.ndim() == 2 ? mu.dim(0) : 1;
    double acc = 0.0;
    for (int64_t i = 0; i < mu.size(); ++i) {
        const double m = mu[i];
        const double lv = logvar[i];
        acc += 0.5 * (std::exp(lv) + m * m - 1.0 - lv);
    }
    return acc / batch;
}

template <typename T>
void kl_diag_gaussian_backward(const Tensor<T>& mu, const Tensor<T>& logvar, Tensor<T>* dmu,
                               Tensor<T>* dlogvar) {
    const int batch = mu.ndim() == 2 ? mu.dim(0) : 1;
    *dmu = Tensor<T>(mu.shape());
    *dlogvar = Tensor<T>(logvar.shape());
    const T inv_b = T(1) / static_cast<T>(batch);
    for (int64_t i = 0; i < mu.size(); ++i) {
        (*dmu)[i] = mu[i] * inv_b;
        (*dlogvar)[i] = T(0.5) * (std::exp(logvar[i]) - T(1)) * inv_b;
    }
}

template <typename T>
double recon_loss(const Tensor<T>& v, const Tensor<T>& v_hat) {
    require(v.same_shape(v_hat), "recon_loss: shape mismatch between target " + v.shape_str() +
                                     " and prediction " + v_hat.shape_str());
    double acc = 0.0;
    for (int64_t i = 0; i < v.size(); ++i) {
        const double d = double(v[i]) - double(v_hat[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(v.size());
}

template <typename T>
Tensor<T> recon_loss_backward(const Tensor<T>& v, const Tensor<T>& v_hat) {
    Tensor<T> g(v_hat.shape());
    const T scale = T(2) / static_cast<T>(v.size());
    for (int64_t i = 0; i < v.size(); ++i) g[i] = scale * (v_hat[i] - v[i]);
    return g;
}

template <typename T>
LossBreakdown total_loss(const Tensor<T>& mu, const Tensor<T>& logvar, const Tensor<T>& v,
                         const Tensor<T>& v_hat, double lambda) {
    require(lambda > 0.0, "total_loss: lambda must be positive");
    LossBreakdown out;
    out.lambda = lambda;
    out.kl = kl_diag_gaussian(mu, logvar);
    out.recon = recon_loss(v, v_hat);
    out.total = out.kl + lambda * out.recon;
    return out;
}

#define VDYN_INSTANTIATE(T)                                                                     \
    template double kl_diag_gaussian<T>(const Tensor<T>&, const Tensor<T>&);                    \
    template void kl_diag_gaussian_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*,  \
                                               Tensor<T>*);                                     \
    template double recon_loss<T>(const Tensor<T>&, const Tensor<T>&);                          \
    template Tensor<T> recon_loss_backward<T>(const Tensor<T>&, const Tensor<T>&);              \
    template LossBreakdown total_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                         const Tensor<T>&, double);

VDYN_INSTANTIATE(float)
VDYN_INSTANTIATE(double)

#undef VDYN_INSTANTIATE

}  // namespace vdyn
