#include "vdyn/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace vdyn {

namespace {

std::vector<LatentCode> encode_probes(CrossConvModel<float>& model,
                                      const std::vector<ScenePair>& probes) {
    const int S = model.config().input_size;
    std::vector<LatentCode> codes;
    const int batch = 64;
    for (size_t start = 0; start < probes.size(); start += batch) {
        const int nb = static_cast<int>(std::min<size_t>(batch, probes.size() - start));
        Tensor<float> images({nb, 3, S, S}), diffs({nb, 3, S, S});
        for (int b = 0; b < nb; ++b) {
            const auto& pair = probes[start + static_cast<size_t>(b)];
            auto img = image_to_tensor(pair.frame_a);
            auto diff = difference_image(pair.frame_a, pair.frame_b);
            std::memcpy(images.data() + int64_t(b) * img.size(), img.data(),
                        sizeof(float) * static_cast<size_t>(img.size()));
            std::memcpy(diffs.data() + int64_t(b) * diff.size(), diff.data(),
                        sizeof(float) * static_cast<size_t>(diff.size()));
        }
        auto [mu, logvar] = model.motion_encode(images, diffs);
        for (int b = 0; b < nb; ++b) {
            LatentCode code;
            code.z_mean.assign(mu.data() + int64_t(b) * mu.dim(1), mu.data() + int64_t(b + 1) * mu.dim(1));
            code.z_logvar.assign(logvar.data() + int64_t(b) * logvar.dim(1),
                                 logvar.data() + int64_t(b + 1) * logvar.dim(1));
            codes.push_back(std::move(code));
        }
    }
    return codes;
}

}  // namespace

int DimStats::active_count() const {
    int n = 0;
    for (uint8_t a : active) n += a;
    return n;
}

nlohmann::json DimStats::to_json() const {
    return nlohmann::json{{"mean_z_mean", mean_z_mean},
                          {"std_z_mean", std_z_mean},
                          {"mean_z_logvar", mean_z_logvar},
                          {"active", active},
                          {"active_count", active_count()}};
}

DimStats dim_stats_from_codes(const std::vector<LatentCode>& codes) {
    require(!codes.empty(), "dim_stats: no codes");
    const size_t d = codes[0].z_mean.size();
    const double n = static_cast<double>(codes.size());
    DimStats st;
    st.mean_z_mean.assign(d, 0.0);
    st.std_z_mean.assign(d, 0.0);
    st.mean_z_logvar.assign(d, 0.0);
    st.active.assign(d, 0);
    for (const auto& c : codes) {
        for (size_t k = 0; k < d; ++k) {
            st.mean_z_mean[k] += c.z_mean[k];
            st.mean_z_logvar[k] += c.z_logvar[k];
        }
    }
    for (size_t k = 0; k < d; ++k) {
        st.mean_z_mean[k] /= n;
        st.mean_z_logvar[k] /= n;
    }
    for (const auto& c : codes) {
        for (size_t k = 0; k < d; ++k) {
            const double dv = c.z_mean[k] - st.mean_z_mean[k];
            st.std_z_mean[k] += dv * dv;
        }
    }
    for (size_t k = 0; k < d; ++k) {
        st.std_z_mean[k] = std::sqrt(st.std_z_mean[k] / n);
        // signal-carrying or noise-suppressed
        st.active[k] = (st.std_z_mean[k] > 0.1 || st.mean_z_logvar[k] < -0.5) ? 1 : 0;
    }
    return st;
}

DimStats latent_stats(CrossConvModel<float>& model, const std::vector<ScenePair>& probes) {
    require(probes.size() >= 100, "latent_stats: need at least 100 probe pairs");
    return dim_stats_from_codes(encode_probes(model, probes));
}

int pca_dominating(const std::vector<LatentCode>& codes, double variance_fraction) {
    require(codes.size() >= 100, "pca_dominating: need at least 100 codes");
    const int d = static_cast<int>(codes[0].z_mean.size());
    const int n = static_cast<int>(codes.size());

    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (const auto& c : codes)
        for (int k = 0; k < d; ++k) mean[k] += c.z_mean[static_cast<size_t>(k)];
    mean /= n;

    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    Eigen::VectorXd x(d);
    for (const auto& c : codes) {
        for (int k = 0; k < d; ++k) x[k] = c.z_mean[static_cast<size_t>(k)] - mean[k];
        cov.selfadjointView<Eigen::Lower>().rankUpdate(x);
    }
    cov /= n;

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(
        cov.selfadjointView<Eigen::Lower>());
    Eigen::VectorXd ev = solver.eigenvalues();  // ascending
    double trace = 0;
    for (int i = 0; i < d; ++i) trace += std::max(0.0, ev[i]);
    if (trace <= 0) return 0;
    double acc = 0;
    int count = 0;
    for (int i = d - 1; i >= 0; --i) {
        acc += std::max(0.0, ev[i]);
        ++count;
        if (acc >= variance_fraction * trace) break;
    }
    return count;
}

std::vector<ImageU8> traverse_dim(CrossConvModel<float>& model, const ImageU8& image,
                                  const std::vector<float>& base_z, int dim,
                                  const std::vector<float>& values) {
    require(dim >= 0 && dim < model.config().z_dim,
            "traverse_dim: dimension " + std::to_string(dim) + " out of range");
    require(static_cast<int>(base_z.size()) == model.config().z_dim,
            "traverse_dim: base z length mismatch");
    const int n = static_cast<int>(values.size());
    const int S = model.config().input_size;
    Tensor<float> img = image_to_tensor(image);
    Tensor<float> batch({n, 3, S, S});
    Tensor<float> z({n, model.config().z_dim});
    for (int i = 0; i < n; ++i) {
        std::memcpy(batch.data() + int64_t(i) * img.size(), img.data(),
                    sizeof(float) * static_cast<size_t>(img.size()));
        std::copy(base_z.begin(), base_z.end(), z.data() + int64_t(i) * z.dim(1));
        z.at(i, dim) = values[static_cast<size_t>(i)];
    }
    Tensor<float> v_hat = model.synthesize(batch, z);
    std::vector<ImageU8> frames;
    for (int i = 0; i < n; ++i) {
        Tensor<float> frame({1, 3, S, S});
        for (int64_t p = 0; p < frame.size(); ++p)
            frame[p] = img[p] + v_hat[int64_t(i) * frame.size() + p];
        frames.push_back(tensor_to_image(frame));
    }
    return frames;
}

namespace {

std::vector<ScenePair> probe_subset(const ShapesDataset& data, int count) {
    std::vector<ScenePair> probes;
    const int n = std::min<int>(count, static_cast<int>(data.pairs.size()));
    probes.assign(data.pairs.begin(), data.pairs.begin() + n);
    return probes;
}

}  // namespace

std::vector<SweepRow> sweep_lambda(const ArchConfig& arch, const ShapesDataset& data,
                                   const std::vector<double>& lambdas, const TrainConfig& base,
                                   int probe_count) {
    std::vector<SweepRow> rows;
    for (size_t i = 0; i < lambdas.size(); ++i) {
        SweepRow row;
        row.setting = lambdas[i];
        try {
            ArchConfig a = arch;
            a.lambda = lambdas[i];
            TrainConfig tc = base;
            tc.lambda = lambdas[i];
            tc.seed = base.seed + i;  // independent sub-seeds per row
            CrossConvModel<float> model(a, tc.seed);
            auto result = train_model(model, data, tc);
            if (result.diverged) {
                row.failed = true;
            } else {
                auto stats = latent_stats(model, probe_subset(data, probe_count));
                row.active_count = stats.active_count();
                row.pca_count = pca_dominating(result.bank.codes, 0.95);
                row.final_recon = result.history.back().recon;
            }
        } catch (const std::exception&) {
            row.failed = true;
        }
        rows.push_back(row);
    }
    return rows;
}

std::vector<SweepRow> sweep_zsize(const ArchConfig& arch, const ShapesDataset& data,
                                  const std::vector<int>& sizes, const TrainConfig& base,
                                  int probe_count) {
    std::vector<SweepRow> rows;
    const int k2 = arch.kernel_size * arch.kernel_size;
    for (size_t i = 0; i < sizes.size(); ++i) {
        // round up to the nearest multiple of k^2
        const int rounded = ((sizes[i] + k2 - 1) / k2) * k2;
        SweepRow row;
        row.setting = rounded;
        try {
            ArchConfig a = arch;
            a.z_dim = rounded;
            TrainConfig tc = base;
            tc.seed = base.seed + 1000 + i;
            CrossConvModel<float> model(a, tc.seed);
            auto result = train_model(model, data, tc);
            if (result.diverged) {
                row.failed = true;
            } else {
                auto stats = latent_stats(model, probe_subset(data, probe_count));
                row.active_count = stats.active_count();
                row.pca_count = pca_dominating(result.bank.codes, 0.95);
                row.final_recon = result.history.back().recon;
            }
        } catch (const std::exception&) {
            row.failed = true;
        }
        rows.push_back(row);
    }
    return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& setting_name,
                     const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("write_sweep_csv: cannot open " + path);
    std::fprintf(f, "%s,active_count,pca_count,final_recon,failed\n", setting_name.c_str());
    for (const auto& r : rows) {
        std::fprintf(f, "%g,%d,%d,%.8f,%d\n", r.setting, r.active_count, r.pca_count,
                     r.final_recon, r.failed ? 1 : 0);
    }
    std::fclose(f);
}

std::vector<std::vector<ImageU8>> export_feature_maps(CrossConvModel<float>& model,
                                                      const ImageU8& image) {
    const auto& cfg = model.config();
    Tensor<float> img = image_to_tensor(image);
    std::vector<std::vector<ImageU8>> out;
    auto feats = model.image_features(img);
    for (const auto& f : feats) {
        std::vector<ImageU8> maps;
        const int c = f.dim(1), h = f.dim(2), w = f.dim(3);
        for (int ch = 0; ch < c; ++ch) {
            std::vector<float> vals(static_cast<size_t>(h) * w);
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) vals[static_cast<size_t>(i) * w + j] = f.at(0, ch, i, j);
            maps.push_back(grayscale_map(vals, h, w, std::max(1, cfg.input_size / h / 2)));
        }
        out.push_back(std::move(maps));
    }
    return out;
}

}  // namespace vdyn
