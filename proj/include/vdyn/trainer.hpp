#pragma once

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "vdyn/data.hpp"
#include "vdyn/model.hpp"
#include "vdyn/rng.hpp"

namespace vdyn {

struct TrainConfig {
    int epochs = 10;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 1;
    double lambda = 100.0;
    int checkpoint_interval = 200;  // steps between rolling checkpoints / health checks
    std::string checkpoint_path;    // empty: no rolling checkpoint
    // AE ablation: drop the KL term and the sampling layer (z := z_mean).
    bool use_kl = true;
    bool sample_noise = true;
    int bank_cap = 20000;

    void validate() const;
};

/// Returns the AE-ablation transform of a train config: the KL term dropped
/// and the sampling layer disabled, everything else untouched.
TrainConfig ae_baseline_config(const TrainConfig& base);

/// Empirical latent distribution: one recognition code per retained training
/// pair, sampled at test time instead of the prior.
struct LatentBank {
    std::vector<LatentCode> codes;
    int z_dim() const { return codes.empty() ? 0 : static_cast<int>(codes[0].z_mean.size()); }
};

/// Draw one latent: pick a stored code uniformly, then z = mean + eps*std
/// (with_noise=false returns the stored mean, used by the AE ablation).
std::vector<float> sample_test_latent(const LatentBank& bank, Rng& rng, bool with_noise = true);

struct LossRecord {
    int epoch = 0;
    int64_t step = 0;
    double kl = 0, recon = 0, total = 0;
};

struct TrainResult {
    LatentBank bank;
    std::vector<LossRecord> history;
    bool diverged = false;
    std::string divergence_info;
    std::vector<double> epoch_mean_total;
};

/// Adam moment buffers, parallel to the model's trainable parameter list.
struct AdamState {
    std::vector<std::vector<float>> m, v;
    int64_t t = 0;
};

/// One adaptive-moment update with bias correction. Throws on non-finite
/// gradients, naming the offending tensor.
void adam_step(std::vector<ParamRef<float>>& params, AdamState& state, double lr, double beta1,
               double beta2, double eps);

/// Minimize KL + lambda*MSE over the dataset with reshuffled epochs, then
/// encode every training pair in eval mode into the latent bank.
TrainResult train_model(CrossConvModel<float>& model, const ShapesDataset& data,
                        const TrainConfig& cfg);

void write_loss_history_csv(const std::vector<LossRecord>& history, const std::string& path);

nlohmann::json arch_to_json(const ArchConfig& cfg);
ArchConfig arch_from_json(const nlohmann::json& j);

/// Checkpoint: magic "VDCK", u32 version, JSON manifest (arch config + tensor
/// directory with names/shapes/offsets), then raw little-endian float32 data.
/// The latent bank rides along as two extra named tensors.
void checkpoint_save(CrossConvModel<float>& model, const LatentBank& bank, const std::string& path);

struct Checkpoint {
    std::unique_ptr<CrossConvModel<float>> model;
    LatentBank bank;
};
Checkpoint checkpoint_load(const std::string& path);

}  // namespace vdyn
