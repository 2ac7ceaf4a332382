#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "vdyn/data.hpp"
#include "vdyn/eval.hpp"
#include "vdyn/model.hpp"
#include "vdyn/trainer.hpp"

namespace vdyn {

/// Per-dimension statistics of the recognition codes over a probe set.
struct DimStats {
    std::vector<double> mean_z_mean;
    std::vector<double> std_z_mean;
    std::vector<double> mean_z_logvar;
    std::vector<uint8_t> active;

    int active_count() const;
    nlohmann::json to_json() const;
};

/// Encodes every probe pair in eval mode and derives per-dimension statistics.
/// A dimension counts as active when std(z_mean) > 0.1 or mean z_logvar < -0.5
/// (it either carries signal or has had its noise suppressed).
DimStats latent_stats(CrossConvModel<float>& model, const std::vector<ScenePair>& probes);

DimStats dim_stats_from_codes(const std::vector<LatentCode>& codes);

/// Smallest number of principal components covering `variance_fraction` of the
/// z_mean covariance trace. Rank-deficient inputs are fine (zero eigenvalues).
int pca_dominating(const std::vector<LatentCode>& codes, double variance_fraction = 0.95);

/// Synthesizes a strip in which one latent dimension sweeps over `values`
/// while everything else stays fixed.
std::vector<ImageU8> traverse_dim(CrossConvModel<float>& model, const ImageU8& image,
                                  const std::vector<float>& base_z, int dim,
                                  const std::vector<float>& values);

struct SweepRow {
    double setting = 0;  // lambda, or the (rounded) z size
    int active_count = -1;
    int pca_count = -1;
    double final_recon = 0;
    bool failed = false;
};

/// Trains one model per lambda on the given dataset and reports active
/// dimension counts. Diverging rows are marked failed; the sweep continues.
std::vector<SweepRow> sweep_lambda(const ArchConfig& arch, const ShapesDataset& data,
                                   const std::vector<double>& lambdas, const TrainConfig& base,
                                   int probe_count = 1000);

/// Trains one model per latent size (each rounded up to the nearest multiple
/// of k^2) and reports the dominating PCA component count and final loss.
std::vector<SweepRow> sweep_zsize(const ArchConfig& arch, const ShapesDataset& data,
                                  const std::vector<int>& sizes, const TrainConfig& base,
                                  int probe_count = 1000);

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& setting_name,
                     const std::string& path);

/// Image-encoder outputs of one image, rendered channel-by-channel as
/// normalized grayscale maps (one list per scale).
std::vector<std::vector<ImageU8>> export_feature_maps(CrossConvModel<float>& model,
                                                      const ImageU8& image);

}  // namespace vdyn
