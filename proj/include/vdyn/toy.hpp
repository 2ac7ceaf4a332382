#pragma once

#include <string>
#include <vector>

#include "vdyn/data.hpp"
#include "vdyn/eval.hpp"
#include "vdyn/rng.hpp"
#include "vdyn/tensor.hpp"

namespace vdyn {

enum class ToyFamily { kDeterministic, kVae, kCvae };

const char* toy_family_name(ToyFamily f);

/// Fully-connected stack (dense -> ReLU -> ... -> dense) in double precision
/// with hand-chained gradients; small enough to train in seconds.
struct ToyMlp {
    std::vector<Tensor<double>> weights, biases;
    std::vector<Tensor<double>> g_weights, g_biases;
    std::vector<Tensor<double>> act_in, act_out;  // caches

    void build(const std::vector<int>& widths, Rng& rng);
    Tensor<double> forward(const Tensor<double>& x);
    Tensor<double> backward(const Tensor<double>& dy);  // accumulates grads
    void zero_grads();
    void adam(std::vector<std::vector<double>>& m, std::vector<std::vector<double>>& v, int64_t t,
              double lr);
};

/// One of the three model families over the toy world: a deterministic
/// label->motion regressor, an unconditional motion VAE, and the conditional
/// VAE whose decoder also consumes the label.
struct ToyModel {
    ToyFamily family = ToyFamily::kDeterministic;
    ToyMlp net;      // deterministic regressor or VAE/cVAE decoder
    ToyMlp encoder;  // recognition net (VAE/cVAE only)
    double final_loss = 0;
    int epochs_run = 0;

    /// Deterministic prediction for a label (deterministic family only).
    std::pair<double, double> predict(int label);
    /// One generative draw; the unconditional VAE ignores the label.
    std::pair<double, double> sample(int label, Rng& rng);
};

struct ToyTrainConfig {
    int batch_size = 1024;
    double learning_rate = 1e-3;
    double lambda = 30.0;       // reconstruction weight for the VAE families
    int max_epochs = 150;
    double plateau_tol = 1e-4;  // stop when epoch loss changes less than this over 10 epochs
};

ToyModel train_toy(ToyFamily family, const std::vector<ToySample>& samples, uint64_t seed,
                   const ToyTrainConfig& cfg = {});

/// Analytic binned ground truth for one toy class.
Histogram2D toy_gt_histogram(int label);

struct ToyClassEval {
    double kl_circle = 0;
    double kl_square = 0;
    Histogram2D hist_circle, hist_square;
};

/// Per-class binned KL of n generative draws against the analytic ground
/// truth; the deterministic family contributes a point mass at its prediction.
ToyClassEval eval_toy(ToyModel& model, int n_samples, uint64_t seed);

void write_toy_report_csv(const std::vector<std::pair<ToyFamily, ToyClassEval>>& rows,
                          const std::string& path);

}  // namespace vdyn
