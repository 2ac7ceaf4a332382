#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vdyn/data.hpp"
#include "vdyn/model.hpp"
#include "vdyn/rng.hpp"
#include "vdyn/trainer.hpp"

namespace vdyn {

/// 41x41 binned distribution over [-5,5]^2 in (dx, dy). Counts accumulate as
/// integers (order-independent); normalize() produces the mass field.
struct Histogram2D {
    static constexpr int kBins = 41;
    static constexpr double kLo = -5.0;
    static constexpr double kHi = 5.0;

    std::vector<int64_t> counts = std::vector<int64_t>(kBins * kBins, 0);
    std::vector<double> mass;  // filled by normalize()
    int64_t total = 0;
    int64_t clipped = 0;

    static int bin_of(double v);
    static double bin_center(int i);
    void add(double dx, double dy);
    /// Deposit analytic probability mass directly (for ground-truth builds).
    void add_mass(double dx, double dy, double m);
    void normalize();
    double clip_fraction() const { return total ? double(clipped) / double(total) : 0.0; }
};

/// D_KL(p_gt || p_pred) with additive smoothing eps on the predicted
/// histogram (then renormalized); 0*log 0 := 0.
double kl_histogram(const Histogram2D& p_gt, const Histogram2D& p_pred, double eps = 1e-6);

/// Analytic class histograms implied by the generator configuration.
struct GtHistograms {
    Histogram2D circles;            // (dx, dy)
    Histogram2D squares;            // (dx, dy)
    Histogram2D triangles;          // (dx, dy)
    Histogram2D circles_triangles;  // (circle dy, triangle dy)
};
GtHistograms gt_class_histograms(const ShapesConfig& cfg);

struct Displacement {
    double dx = 0, dy = 0;
    double min_ssd = 0;
};

/// Masked template matching over integer displacements in [-7,7]^2 with
/// quadratic sub-pixel refinement. Masks under 20 pixels are flagged by
/// returning nullopt (the sample is excluded from histograms).
std::optional<Displacement> estimate_displacement(const ImageU8& frame_a, const ImageU8& frame_b,
                                                  const std::vector<uint8_t>& mask,
                                                  int search_radius = 7);

/// Produces n candidate next frames for one test scene.
using FrameSampler =
    std::function<std::vector<ImageU8>(const ScenePair& pair, int pair_index, int n_samples, Rng& rng)>;

/// Synthesis sampler backed by the trained model and its latent bank.
FrameSampler model_sampler(CrossConvModel<float>& model, const LatentBank& bank, bool with_noise);

/// Ground-truth simulator: re-renders the scene with freshly drawn
/// class-legal motions (evaluation ceiling).
FrameSampler gt_oracle_sampler(const ShapesConfig& cfg);

/// Nearest-neighbour flow transfer: 10-NN by pixel L2 over the training set,
/// one neighbour picked per sample, its flow forward-splatted onto the frame.
class FlowBaseline {
public:
    FlowBaseline(const ShapesDataset& train, int k_neighbors = 10);
    std::vector<int> neighbors(const ImageU8& query) const;
    FrameSampler sampler() const;

private:
    const ShapesDataset& train_;
    int k_;
};

struct EvalReport {
    double kl_circles = 0, kl_squares = 0, kl_triangles = 0, kl_circles_triangles = 0;
    int64_t n_images = 0;
    int64_t n_samples = 0;
    int64_t excluded_objects = 0;
    double clip_fraction = 0;
    // reconstruction with the true pair's encoded z (empty for non-model rows)
    double recon_mse = 0;
    double copy_mse = 0;
    double recon_psnr = 0;
    double recon_win_fraction = 0;  // share of pairs where recon beats copying the input
    std::vector<double> per_pair_recon_mse, per_pair_copy_mse;
    Histogram2D hist_circles, hist_squares, hist_triangles, hist_circles_triangles;

    nlohmann::json to_json(bool include_paper_reference = true) const;
    void write_json(const std::string& path) const;
    void write_csv(const std::string& path) const;
};

/// Samples futures for every test scene, measures per-object displacements by
/// template matching, and reports binned KL against the ground truth.
EvalReport evaluate_sampler(const FrameSampler& sampler, const std::vector<ScenePair>& test_set,
                            int n_samples_per_image, const GtHistograms& gt, uint64_t seed);

/// Adds the reconstruction-vs-copy comparison (model path only).
void add_reconstruction_metrics(CrossConvModel<float>& model, const std::vector<ScenePair>& test_set,
                                EvalReport* report);

void histogram_to_csv(const Histogram2D& h, const std::string& path);

}  // namespace vdyn
