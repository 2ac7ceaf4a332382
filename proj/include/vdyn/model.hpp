#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vdyn/ops.hpp"
#include "vdyn/rng.hpp"
#include "vdyn/tensor.hpp"

namespace vdyn {

/// Network architecture. The defaults are the desk-scale configuration; the
/// named presets cover the paper-scale layout and the reduced configs used by
/// sweeps and gradient checks.
struct ArchConfig {
    int input_size = 64;         // dataset resolution (square RGB)
    int motion_input_size = 32;  // motion-encoder resolution (pow2 divisor of input_size)
    std::vector<int> scales = {64, 32, 16};
    int seg_channels = 32;  // C: feature maps (segments) per scale
    int kernel_size = 5;    // k: cross-convolution kernel side, odd
    int z_dim = 800;        // D = K * k^2
    std::vector<int> encoder_channels = {32, 32, 64, 64, 128, 128};
    std::vector<int> encoder_pads;          // per conv; empty -> same padding (k/2) everywhere
    int kernel_decoder_hidden = 0;          // 0 -> K
    std::vector<int> image_encoder_channels;  // 4 entries, last == seg_channels; empty -> all C
    std::vector<int> decoder_channels = {64, 64, 3};
    double lambda = 100.0;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    void validate() const;

    int latent_kernels() const { return z_dim / (kernel_size * kernel_size); }  // K
    int num_scales() const { return static_cast<int>(scales.size()); }
    int feature_size(int scale_index) const { return scales[static_cast<size_t>(scale_index)] / 4; }
    int finest_feature_size() const { return scales[0] / 4; }
    std::vector<int> motion_encoder_sizes() const;  // spatial size after each conv/pool stage
    int encoder_out_spatial() const;
    int64_t encoder_flat() const;
    bool encoder_needs_dense() const { return encoder_flat() != int64_t(2) * z_dim; }
    std::vector<int> effective_encoder_pads() const;
    std::vector<int> effective_image_encoder_channels() const;
    int effective_kernel_decoder_hidden() const;

    static ArchConfig desk();
    static ArchConfig desk_small();  // sweep-sized config
    static ArchConfig paper();
    static ArchConfig tiny();  // gradient-check sized config
};

/// Per-sample latent code: mean and log-variance of the recognition Gaussian.
struct LatentCode {
    std::vector<float> z_mean;
    std::vector<float> z_logvar;
};

/// z = z_mean + noise .* exp(z_logvar / 2).
template <typename T>
std::vector<T> sample_latent(const std::vector<T>& z_mean, const std::vector<T>& z_logvar,
                             const std::vector<T>& noise);

/// Area-averaged image pyramid (repeated 2x2 block mean down to each scale).
template <typename T>
std::vector<Tensor<T>> build_pyramid(const Tensor<T>& image, const std::vector<int>& scales);

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* value = nullptr;
    Tensor<T>* grad = nullptr;  // null for batch-norm running statistics
    bool trainable = false;
};

/// Convolution + optional batch norm + optional ReLU, with cached
/// intermediates for the hand-derived backward pass.
template <typename T>
struct ConvBN {
    Tensor<T> w, b, gamma, beta;
    BatchNormState<T> bn;
    Tensor<T> gw, gb, ggamma, gbeta;
    ConvSpec spec;
    bool use_bn = true;
    bool use_relu = true;
    T eps = T(1e-5);
    T momentum = T(0.1);

    Tensor<T> x_in, conv_out, bn_mean, bn_var, act_in;
    bool cached_train = false;

    void init(int cin, int cout, int k, int pad, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x, bool train);
    Tensor<T> backward(const Tensor<T>& dy);
    void zero_grads();
    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);
};

template <typename T>
struct PoolSite {
    std::vector<int> in_shape;
    std::vector<int32_t> argmax;
};

/// Motion encoder: six conv+BN+ReLU blocks with pooling after layers 2, 4, 5
/// and 6, then a reshape (and a dense projection when the flattened width is
/// not already 2*D) split into (z_mean, z_logvar).
template <typename T>
struct MotionEncoder {
    std::vector<ConvBN<T>> convs;
    std::vector<bool> pool_after;
    std::vector<PoolSite<T>> pools;
    bool has_dense = false;
    Tensor<T> head_w, head_b, g_head_w, g_head_b;
    Tensor<T> head_in;  // [B, flat]
    std::vector<int> conv_out_shape;
    int z_dim = 0;

    void build(const ArchConfig& cfg, Rng& rng);
    std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& x, bool train);
    Tensor<T> backward(const Tensor<T>& dmu, const Tensor<T>& dlogvar);
    void zero_grads();
    void collect(std::vector<ParamRef<T>>& out);
};

/// Kernel decoder: z reshaped to K x k x k, two same-padded conv+BN+ReLU
/// layers producing S*C channels of k x k motion kernels.
template <typename T>
struct KernelDecoder {
    ConvBN<T> c1, c2;
    std::vector<int> z_shape;

    void build(const ArchConfig& cfg, Rng& rng);
    Tensor<T> forward(const Tensor<T>& z, bool train);  // [B, S*C, k, k]
    Tensor<T> backward(const Tensor<T>& dkernels);      // -> dz [B, D]
    void zero_grads();
    void collect(std::vector<ParamRef<T>>& out);
};

/// One scale of the image encoder: four conv+BN+ReLU blocks, the first two
/// followed by 2x2 max pooling (output = scale/4 with C channels).
template <typename T>
struct ImageEncoderScale {
    std::vector<ConvBN<T>> convs;
    std::vector<bool> pool_after;
    std::vector<PoolSite<T>> pools;

    void build(const ArchConfig& cfg, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x, bool train);
    Tensor<T> backward(const Tensor<T>& dy);
    void zero_grads();
    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);
};

/// Motion decoder: per-scale nearest upsampling to the finest feature size,
/// channel concatenation, one 9x9 and two 1x1 conv layers (final one linear),
/// then nearest upsampling to the dataset resolution.
template <typename T>
struct MotionDecoder {
    ConvBN<T> c9, c1a, c1b;
    std::vector<int> up_factors;
    std::vector<int> cat_channels;
    int out_factor = 1;

    void build(const ArchConfig& cfg, Rng& rng);
    Tensor<T> forward(const std::vector<Tensor<T>>& cross_outs, bool train);
    std::vector<Tensor<T>> backward(const Tensor<T>& dv_hat);
    void zero_grads();
    void collect(std::vector<ParamRef<T>>& out);
};

/// The full cross-convolutional network (motion encoder, kernel decoder,
/// image encoder, cross convolution, motion decoder).
template <typename T>
class CrossConvModel {
public:
    explicit CrossConvModel(ArchConfig cfg, uint64_t init_seed = 1);

    const ArchConfig& config() const { return cfg_; }

    std::vector<ParamRef<T>> params();
    int64_t trainable_param_count();
    void zero_grads();

    struct TrainOut {
        Tensor<T> v_hat;
        Tensor<T> mu, logvar;  // [B, D]
        Tensor<T> z;           // [B, D]
    };
    /// Training pass: batch-norm in batch-statistics mode, latent sampled as
    /// mu + noise .* exp(logvar/2) (or z = mu when sample_noise is false).
    TrainOut forward_train(const Tensor<T>& image, const Tensor<T>& diff, const Tensor<T>& noise,
                           bool sample_noise = true);

    struct InputGrads {
        Tensor<T> d_image, d_diff;
    };
    /// dmu_extra/dlogvar_extra carry the loss terms applied directly to the
    /// latent code (the KL gradients); pass empty tensors when absent.
    InputGrads backward_train(const Tensor<T>& dv_hat, const Tensor<T>& dmu_extra,
                              const Tensor<T>& dlogvar_extra);

    /// Test-time synthesis from an externally supplied latent code; never
    /// touches the motion encoder. Batch-norm uses running statistics.
    Tensor<T> synthesize(const Tensor<T>& image, const Tensor<T>& z);

    /// Synthesis pass with cached intermediates for backward_gen.
    Tensor<T> forward_gen(const Tensor<T>& image, const Tensor<T>& z, bool train_bn);
    struct GenGrads {
        Tensor<T> d_image, dz;
    };
    GenGrads backward_gen(const Tensor<T>& dv_hat);

    /// Recognition pass in eval mode (bank building, analogy-making).
    std::pair<Tensor<T>, Tensor<T>> motion_encode(const Tensor<T>& image, const Tensor<T>& diff);

    /// Image-encoder outputs per scale, eval mode (feature-map inspection).
    std::vector<Tensor<T>> image_features(const Tensor<T>& image);

    /// Shape table (component name, tensor shape) of a batch-2 dry run,
    /// derived analytically from the config.
    static std::vector<std::pair<std::string, std::vector<int>>> expected_shapes(
        const ArchConfig& cfg, int batch);

private:
    Tensor<T> run_gen_path(const Tensor<T>& image, const Tensor<T>& z, bool train);

    ArchConfig cfg_;
    MotionEncoder<T> me_;
    KernelDecoder<T> kd_;
    std::vector<ImageEncoderScale<T>> ie_;
    MotionDecoder<T> md_;

    // caches shared by train/gen passes
    std::vector<Tensor<T>> feats_, banks_;
    Tensor<T> mu_, logvar_, eps_, z_;
    bool sampled_noise_ = false;
};

}  // namespace vdyn
