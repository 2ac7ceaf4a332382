#include "vdyn/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <numeric>

#include "vdyn/loss.hpp"

namespace vdyn {

void TrainConfig::validate() const {
    require(epochs >= 1, "train: epochs must be at least 1");
    require(batch_size >= 2, "train: batch_size must be at least 2");
    require(learning_rate > 0, "train: learning rate must be positive");
    require(lambda > 0, "train: lambda must be positive");
    require(bank_cap >= 1, "train: bank_cap must be positive");
}

TrainConfig ae_baseline_config(const TrainConfig& base) {
    TrainConfig c = base;
    c.use_kl = false;
    c.sample_noise = false;
    return c;
}

std::vector<float> sample_test_latent(const LatentBank& bank, Rng& rng, bool with_noise) {
    require(!bank.codes.empty(), "sample_test_latent: empty latent bank");
    const auto& code = bank.codes[rng.uniform_index(bank.codes.size())];
    const size_t d = code.z_mean.size();
    std::vector<float> z(d);
    if (with_noise) {
        for (size_t i = 0; i < d; ++i) {
            z[i] = code.z_mean[i] +
                   static_cast<float>(rng.normal()) * std::exp(code.z_logvar[i] / 2.f);
        }
    } else {
        z = code.z_mean;
    }
    return z;
}

void adam_step(std::vector<ParamRef<float>>& params, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
    std::vector<ParamRef<float>*> trainable;
    for (auto& p : params) {
        if (p.trainable) trainable.push_back(&p);
    }
    if (state.m.empty()) {
        state.m.resize(trainable.size());
        state.v.resize(trainable.size());
        for (size_t i = 0; i < trainable.size(); ++i) {
            state.m[i].assign(static_cast<size_t>(trainable[i]->value->size()), 0.f);
            state.v[i].assign(static_cast<size_t>(trainable[i]->value->size()), 0.f);
        }
    }
    require(state.m.size() == trainable.size(), "adam_step: state does not match parameter list");
    ++state.t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < trainable.size(); ++i) {
        ParamRef<float>& p = *trainable[i];
        float* w = p.value->data();
        const float* g = p.grad->data();
        float* m = state.m[i].data();
        float* v = state.v[i].data();
        const int64_t n = p.value->size();
        for (int64_t j = 0; j < n; ++j) {
            if (!std::isfinite(g[j])) {
                throw std::runtime_error("adam_step: non-finite gradient in " + p.name + "[" +
                                         std::to_string(j) + "]");
            }
            m[j] = static_cast<float>(beta1 * m[j] + (1.0 - beta1) * g[j]);
            v[j] = static_cast<float>(beta2 * v[j] + (1.0 - beta2) * double(g[j]) * g[j]);
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

namespace {

void assemble_batch(const ShapesDataset& data, const std::vector<int>& order, int64_t start,
                    int batch, Tensor<float>* images, Tensor<float>* diffs) {
    const int S = data.config.image_size;
    *images = Tensor<float>({batch, 3, S, S});
    *diffs = Tensor<float>({batch, 3, S, S});
    for (int b = 0; b < batch; ++b) {
        const auto& pair = data.pairs[static_cast<size_t>(order[static_cast<size_t>(start + b)])];
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const uint8_t* pa = pair.frame_a.px(x, y);
                const uint8_t* pb = pair.frame_b.px(x, y);
                for (int c = 0; c < 3; ++c) {
                    images->at(b, c, y, x) = pa[c] / 255.f;
                    diffs->at(b, c, y, x) = (int(pb[c]) - int(pa[c])) / 255.f;
                }
            }
    }
}

bool params_finite(std::vector<ParamRef<float>>& params, std::string* where) {
    for (auto& p : params) {
        if (!all_finite(*p.value)) {
            *where = p.name;
            return false;
        }
    }
    return true;
}

}  // namespace

TrainResult train_model(CrossConvModel<float>& model, const ShapesDataset& data,
                        const TrainConfig& cfg) {
    cfg.validate();
    require(!data.pairs.empty(), "train: dataset is empty");
    require(data.config.image_size == model.config().input_size,
            "train: dataset resolution does not match the architecture");

    TrainResult result;
    AdamState adam;
    auto params = model.params();
    const int n_pairs = static_cast<int>(data.pairs.size());
    const int batch = std::min(cfg.batch_size, n_pairs);
    const int steps_per_epoch = n_pairs / batch;
    require(steps_per_epoch >= 1, "train: dataset smaller than one batch");

    std::vector<int> order(static_cast<size_t>(n_pairs));
    std::iota(order.begin(), order.end(), 0);

    int64_t step = 0;
    bool checkpointed = false;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // reshuffle each epoch from the run seed
        Rng shuffle_rng(cfg.seed, 0xe90c0 + static_cast<uint64_t>(epoch));
        for (int i = n_pairs - 1; i > 0; --i) {
            std::swap(order[static_cast<size_t>(i)],
                      order[shuffle_rng.uniform_index(static_cast<uint64_t>(i) + 1)]);
        }
        double epoch_total = 0;
        for (int s = 0; s < steps_per_epoch; ++s, ++step) {
            Tensor<float> images, diffs;
            assemble_batch(data, order, int64_t(s) * batch, batch, &images, &diffs);

            Rng noise_rng(cfg.seed, 0x4015e + static_cast<uint64_t>(step));
            Tensor<float> noise({batch, model.config().z_dim});
            if (cfg.sample_noise) {
                for (int64_t i = 0; i < noise.size(); ++i)
                    noise[i] = static_cast<float>(noise_rng.normal());
            }

            auto out = model.forward_train(images, diffs, noise, cfg.sample_noise);
            const double kl = kl_diag_gaussian(out.mu, out.logvar);
            const double recon = recon_loss(diffs, out.v_hat);
            const double total = (cfg.use_kl ? kl : 0.0) + cfg.lambda * recon;
            result.history.push_back({epoch, step, kl, recon, total});
            epoch_total += total;

            if (!std::isfinite(total)) {
                result.diverged = true;
                result.divergence_info = "loss diverged at step " + std::to_string(step) +
                                         (checkpointed ? "; last-good checkpoint retained" : "");
                return result;
            }

            Tensor<float> dv_hat = recon_loss_backward(diffs, out.v_hat);
            for (int64_t i = 0; i < dv_hat.size(); ++i)
                dv_hat[i] *= static_cast<float>(cfg.lambda);
            Tensor<float> dmu, dlogvar;
            if (cfg.use_kl) {
                kl_diag_gaussian_backward(out.mu, out.logvar, &dmu, &dlogvar);
            }
            model.zero_grads();
            model.backward_train(dv_hat, dmu, dlogvar);
            adam_step(params, adam, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                      cfg.adam_eps);

            if (cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0) {
                std::string where;
                if (!params_finite(params, &where)) {
                    result.diverged = true;
                    result.divergence_info = "non-finite parameter " + where + " at step " +
                                             std::to_string(step) +
                                             (checkpointed ? "; last-good checkpoint retained" : "");
                    return result;
                }
                if (!cfg.checkpoint_path.empty()) {
                    checkpoint_save(model, LatentBank{}, cfg.checkpoint_path);
                    checkpointed = true;
                }
            }
        }
        result.epoch_mean_total.push_back(epoch_total / steps_per_epoch);
    }

    // Build the empirical latent bank: encode every training pair in eval mode.
    std::vector<int> retained(static_cast<size_t>(n_pairs));
    std::iota(retained.begin(), retained.end(), 0);
    if (n_pairs > cfg.bank_cap) {
        // uniform subsample keeps the empirical distribution unbiased
        Rng bank_rng(cfg.seed, 0xba0c);
        for (int i = n_pairs - 1; i > 0; --i) {
            std::swap(retained[static_cast<size_t>(i)],
                      retained[bank_rng.uniform_index(static_cast<uint64_t>(i) + 1)]);
        }
        retained.resize(static_cast<size_t>(cfg.bank_cap));
        std::sort(retained.begin(), retained.end());
    }
    const int enc_batch = std::min(64, static_cast<int>(retained.size()));
    for (size_t pos = 0; pos < retained.size(); pos += static_cast<size_t>(enc_batch)) {
        const int nb = static_cast<int>(std::min<size_t>(enc_batch, retained.size() - pos));
        std::vector<int> idx(retained.begin() + static_cast<int64_t>(pos),
                             retained.begin() + static_cast<int64_t>(pos) + nb);
        Tensor<float> images, diffs;
        assemble_batch(data, idx, 0, nb, &images, &diffs);
        auto [mu, logvar] = model.motion_encode(images, diffs);
        for (int b = 0; b < nb; ++b) {
            LatentCode code;
            code.z_mean.assign(mu.data() + int64_t(b) * mu.dim(1),
                               mu.data() + int64_t(b + 1) * mu.dim(1));
            code.z_logvar.assign(logvar.data() + int64_t(b) * logvar.dim(1),
                                 logvar.data() + int64_t(b + 1) * logvar.dim(1));
            result.bank.codes.push_back(std::move(code));
        }
    }
    return result;
}

void write_loss_history_csv(const std::vector<LossRecord>& history, const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("write_loss_history_csv: cannot open " + path);
    std::fprintf(f, "epoch,step,kl,recon,total\n");
    for (const auto& r : history) {
        std::fprintf(f, "%d,%lld,%.9g,%.9g,%.9g\n", r.epoch, static_cast<long long>(r.step), r.kl,
                     r.recon, r.total);
    }
    std::fclose(f);
}

nlohmann::json arch_to_json(const ArchConfig& c) {
    return nlohmann::json{{"input_size", c.input_size},
                          {"motion_input_size", c.motion_input_size},
                          {"scales", c.scales},
                          {"seg_channels", c.seg_channels},
                          {"kernel_size", c.kernel_size},
                          {"z_dim", c.z_dim},
                          {"encoder_channels", c.encoder_channels},
                          {"encoder_pads", c.encoder_pads},
                          {"kernel_decoder_hidden", c.kernel_decoder_hidden},
                          {"image_encoder_channels", c.image_encoder_channels},
                          {"decoder_channels", c.decoder_channels},
                          {"lambda", c.lambda},
                          {"bn_eps", c.bn_eps},
                          {"bn_momentum", c.bn_momentum}};
}

ArchConfig arch_from_json(const nlohmann::json& j) {
    ArchConfig c;
    c.input_size = j.at("input_size").get<int>();
    c.motion_input_size = j.at("motion_input_size").get<int>();
    c.scales = j.at("scales").get<std::vector<int>>();
    c.seg_channels = j.at("seg_channels").get<int>();
    c.kernel_size = j.at("kernel_size").get<int>();
    c.z_dim = j.at("z_dim").get<int>();
    c.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
    c.encoder_pads = j.at("encoder_pads").get<std::vector<int>>();
    c.kernel_decoder_hidden = j.at("kernel_decoder_hidden").get<int>();
    c.image_encoder_channels = j.at("image_encoder_channels").get<std::vector<int>>();
    c.decoder_channels = j.at("decoder_channels").get<std::vector<int>>();
    c.lambda = j.at("lambda").get<double>();
    c.bn_eps = j.at("bn_eps").get<double>();
    c.bn_momentum = j.at("bn_momentum").get<double>();
    c.validate();
    return c;
}

namespace {

constexpr char kCkptMagic[4] = {'V', 'D', 'C', 'K'};
constexpr uint32_t kCkptVersion = 1;

}  // namespace

void checkpoint_save(CrossConvModel<float>& model, const LatentBank& bank,
                     const std::string& path) {
    static_assert(std::endian::native == std::endian::little, "little-endian file format");
    auto params = model.params();

    Tensor<float> bank_mean, bank_logvar;
    if (!bank.codes.empty()) {
        const int n = static_cast<int>(bank.codes.size());
        const int d = bank.z_dim();
        bank_mean = Tensor<float>({n, d});
        bank_logvar = Tensor<float>({n, d});
        for (int i = 0; i < n; ++i) {
            std::copy(bank.codes[static_cast<size_t>(i)].z_mean.begin(),
                      bank.codes[static_cast<size_t>(i)].z_mean.end(),
                      bank_mean.data() + int64_t(i) * d);
            std::copy(bank.codes[static_cast<size_t>(i)].z_logvar.begin(),
                      bank.codes[static_cast<size_t>(i)].z_logvar.end(),
                      bank_logvar.data() + int64_t(i) * d);
        }
    }

    struct Entry {
        std::string name;
        const Tensor<float>* tensor;
        bool trainable;
    };
    std::vector<Entry> entries;
    for (auto& p : params) entries.push_back({p.name, p.value, p.trainable});
    if (!bank.codes.empty()) {
        entries.push_back({"latent_bank.z_mean", &bank_mean, false});
        entries.push_back({"latent_bank.z_logvar", &bank_logvar, false});
    }

    nlohmann::json manifest;
    manifest["arch"] = arch_to_json(model.config());
    manifest["tensors"] = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& e : entries) {
        manifest["tensors"].push_back({{"name", e.name},
                                       {"shape", e.tensor->shape()},
                                       {"offset", offset},
                                       {"trainable", e.trainable}});
        offset += static_cast<uint64_t>(e.tensor->size()) * sizeof(float);
    }
    const std::string ms = manifest.dump();

    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("checkpoint_save: cannot open " + path);
    fwrite(kCkptMagic, 1, 4, f);
    fwrite(&kCkptVersion, sizeof(uint32_t), 1, f);
    const uint64_t mlen = ms.size();
    fwrite(&mlen, sizeof(uint64_t), 1, f);
    fwrite(ms.data(), 1, ms.size(), f);
    for (const auto& e : entries) {
        fwrite(e.tensor->data(), sizeof(float), static_cast<size_t>(e.tensor->size()), f);
    }
    std::fclose(f);
}

Checkpoint checkpoint_load(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("checkpoint_load: cannot open " + path);
    auto fail = [&](const std::string& why) {
        std::fclose(f);
        throw std::runtime_error("checkpoint_load: " + why + " in " + path);
    };
    char magic[4];
    if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, kCkptMagic, 4) != 0) fail("bad magic");
    uint32_t version = 0;
    if (std::fread(&version, sizeof version, 1, f) != 1) fail("truncated header");
    if (version != kCkptVersion) fail("unsupported version " + std::to_string(version));
    uint64_t mlen = 0;
    if (std::fread(&mlen, sizeof mlen, 1, f) != 1) fail("truncated header");
    std::string ms(mlen, '\0');
    if (std::fread(ms.data(), 1, mlen, f) != mlen) fail("truncated manifest");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(ms);
    } catch (const std::exception& e) {
        fail(std::string("manifest parse error: ") + e.what());
    }

    Checkpoint out;
    try {
        out.model = std::make_unique<CrossConvModel<float>>(arch_from_json(manifest.at("arch")));
    } catch (const std::exception& e) {
        fail(std::string("invalid arch config: ") + e.what());
    }

    auto params = out.model->params();
    std::map<std::string, Tensor<float>*> by_name;
    for (auto& p : params) by_name[p.name] = p.value;

    Tensor<float> bank_mean, bank_logvar;
    size_t matched = 0;
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const std::vector<int> shape = t.at("shape").get<std::vector<int>>();
        Tensor<float>* dst = nullptr;
        if (name == "latent_bank.z_mean") {
            bank_mean = Tensor<float>(shape);
            dst = &bank_mean;
        } else if (name == "latent_bank.z_logvar") {
            bank_logvar = Tensor<float>(shape);
            dst = &bank_logvar;
        } else {
            auto it = by_name.find(name);
            if (it == by_name.end()) fail("unknown tensor " + name);
            dst = it->second;
            if (dst->shape() != shape) fail("shape disagreement for " + name);
            ++matched;
        }
        if (std::fread(dst->data(), sizeof(float), static_cast<size_t>(dst->size()), f) !=
            static_cast<size_t>(dst->size())) {
            fail("truncated tensor data for " + name);
        }
    }
    if (matched != by_name.size()) fail("checkpoint is missing model tensors");
    std::fclose(f);

    if (!bank_mean.empty()) {
        const int n = bank_mean.dim(0), d = bank_mean.dim(1);
        out.bank.codes.resize(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            out.bank.codes[static_cast<size_t>(i)].z_mean.assign(bank_mean.data() + int64_t(i) * d,
                                                                 bank_mean.data() + int64_t(i + 1) * d);
            out.bank.codes[static_cast<size_t>(i)].z_logvar.assign(
                bank_logvar.data() + int64_t(i) * d, bank_logvar.data() + int64_t(i + 1) * d);
        }
    }
    return out;
}

}  // namespace vdyn
