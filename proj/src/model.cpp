#include "vdyn/model.hpp"

#include <algorithm>
#include <cmath>

namespace vdyn {

namespace {

constexpr int kEncoderConvSize = 5;       // motion-encoder and kernel-decoder convs
constexpr bool kEncoderPool[6] = {false, true, false, true, true, true};
constexpr bool kImagePool[4] = {true, true, false, false};

bool is_pow2(int v) { return v >= 1 && (v & (v - 1)) == 0; }

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
    require(dst.same_shape(src), "add_into: shape mismatch");
    for (int64_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
Tensor<T> hstack2(const Tensor<T>& a, const Tensor<T>& b) {
    const int batch = a.dim(0), d = a.dim(1);
    Tensor<T> y({batch, 2 * d});
    for (int n = 0; n < batch; ++n) {
        std::copy(a.data() + int64_t(n) * d, a.data() + int64_t(n + 1) * d, y.data() + int64_t(n) * 2 * d);
        std::copy(b.data() + int64_t(n) * d, b.data() + int64_t(n + 1) * d,
                  y.data() + int64_t(n) * 2 * d + d);
    }
    return y;
}

template <typename T>
void split2(const Tensor<T>& y, Tensor<T>* a, Tensor<T>* b) {
    const int batch = y.dim(0), d = y.dim(1) / 2;
    *a = Tensor<T>({batch, d});
    *b = Tensor<T>({batch, d});
    for (int n = 0; n < batch; ++n) {
        std::copy(y.data() + int64_t(n) * 2 * d, y.data() + int64_t(n) * 2 * d + d,
                  a->data() + int64_t(n) * d);
        std::copy(y.data() + int64_t(n) * 2 * d + d, y.data() + int64_t(n + 1) * 2 * d,
                  b->data() + int64_t(n) * d);
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// ArchConfig

std::vector<int> ArchConfig::effective_encoder_pads() const {
    if (!encoder_pads.empty()) return encoder_pads;
    return std::vector<int>(6, kEncoderConvSize / 2);
}

std::vector<int> ArchConfig::effective_image_encoder_channels() const {
    if (!image_encoder_channels.empty()) return image_encoder_channels;
    return std::vector<int>(4, seg_channels);
}

int ArchConfig::effective_kernel_decoder_hidden() const {
    return kernel_decoder_hidden > 0 ? kernel_decoder_hidden : latent_kernels();
}

std::vector<int> ArchConfig::motion_encoder_sizes() const {
    const auto pads = effective_encoder_pads();
    std::vector<int> sizes;
    int s = motion_input_size;
    for (int i = 0; i < 6; ++i) {
        ConvSpec spec{1, pads[static_cast<size_t>(i)]};
        s = conv_out_size(s, kEncoderConvSize, spec);
        require(s >= 1, "arch: motion encoder conv " + std::to_string(i + 1) + " collapses to size " +
                            std::to_string(s));
        if (kEncoderPool[i]) {
            require(s % 2 == 0 && s >= 2, "arch: motion encoder pool " + std::to_string(i + 1) +
                                              " needs an even size, got " + std::to_string(s));
            s /= 2;
        }
        sizes.push_back(s);
    }
    return sizes;
}

int ArchConfig::encoder_out_spatial() const { return motion_encoder_sizes().back(); }

int64_t ArchConfig::encoder_flat() const {
    return int64_t(encoder_channels.back()) * encoder_out_spatial() * encoder_out_spatial();
}

void ArchConfig::validate() const {
    require(input_size >= 16, "arch: input_size must be at least 16");
    require(!scales.empty(), "arch: scales must be non-empty");
    require(scales[0] == input_size, "arch: the largest scale must equal input_size");
    for (size_t i = 0; i + 1 < scales.size(); ++i) {
        require(scales[i + 1] * 2 == scales[i], "arch: scales must halve at each level");
    }
    require(kernel_size >= 1 && kernel_size % 2 == 1, "arch: kernel_size must be odd");
    require(z_dim >= kernel_size * kernel_size && z_dim % (kernel_size * kernel_size) == 0,
            "arch: z_dim must be a positive multiple of kernel_size^2");
    for (int s : scales) {
        require(s % 4 == 0, "arch: every scale must be divisible by 4 (two poolings)");
        // Same-padded cross convolution needs the kernel center on-map; this
        // is the binding constraint for the feature maps it runs on.
        require(s / 4 >= (kernel_size + 1) / 2,
                "arch: scale " + std::to_string(s) + " yields feature maps smaller than half the cross kernel");
    }
    require(motion_input_size >= 16 && input_size % motion_input_size == 0 &&
                is_pow2(input_size / motion_input_size),
            "arch: motion_input_size must be a power-of-two divisor of input_size, >= 16");
    require(encoder_channels.size() == 6, "arch: encoder_channels must list 6 layers");
    require(encoder_pads.empty() || encoder_pads.size() == 6, "arch: encoder_pads must list 6 entries");
    const auto iec = effective_image_encoder_channels();
    require(iec.size() == 4, "arch: image_encoder_channels must list 4 layers");
    require(iec.back() == seg_channels, "arch: last image-encoder channel count must equal seg_channels");
    require(decoder_channels.size() == 3 && decoder_channels.back() == 3,
            "arch: decoder_channels must list 3 layers ending in 3");
    require(lambda > 0.0, "arch: lambda must be positive");
    motion_encoder_sizes();  // throws if the conv/pool chain breaks
}

ArchConfig ArchConfig::desk() { return ArchConfig{}; }

ArchConfig ArchConfig::desk_small() {
    ArchConfig c;
    c.input_size = 32;
    c.motion_input_size = 32;
    c.scales = {32, 16};
    c.seg_channels = 16;
    c.kernel_size = 5;
    c.z_dim = 200;
    c.encoder_channels = {16, 16, 32, 32, 64, 64};
    c.image_encoder_channels = {16, 16, 16, 16};
    c.decoder_channels = {32, 32, 3};
    return c;
}

ArchConfig ArchConfig::paper() {
    ArchConfig c;
    c.input_size = 256;
    c.motion_input_size = 128;
    c.scales = {256, 128, 64, 32};
    c.seg_channels = 32;
    c.kernel_size = 5;
    c.z_dim = 3200;
    c.encoder_channels = {96, 96, 128, 128, 256, 256};
    c.encoder_pads = {2, 2, 2, 2, 0, 0};
    c.kernel_decoder_hidden = 128;
    c.image_encoder_channels = {64, 64, 64, 32};
    c.decoder_channels = {128, 128, 3};
    return c;
}

ArchConfig ArchConfig::tiny() {
    ArchConfig c;
    c.input_size = 16;
    c.motion_input_size = 16;
    c.scales = {16};
    c.seg_channels = 4;
    c.kernel_size = 3;
    c.z_dim = 18;
    c.encoder_channels = {4, 4, 8, 8, 8, 8};
    c.image_encoder_channels = {4, 4, 4, 4};
    c.decoder_channels = {8, 8, 3};
    return c;
}

// ---------------------------------------------------------------------------
// free functions

template <typename T>
std::vector<T> sample_latent(const std::vector<T>& z_mean, const std::vector<T>& z_logvar,
                             const std::vector<T>& noise) {
    require(z_mean.size() == z_logvar.size() && z_mean.size() == noise.size(),
            "sample_latent: mean/logvar/noise lengths must agree");
    std::vector<T> z(z_mean.size());
    for (size_t i = 0; i < z.size(); ++i) {
        z[i] = z_mean[i] + noise[i] * std::exp(z_logvar[i] / T(2));
    }
    return z;
}

template <typename T>
std::vector<Tensor<T>> build_pyramid(const Tensor<T>& image, const std::vector<int>& scales) {
    require(image.ndim() == 4 && image.dim(2) == image.dim(3), "build_pyramid: expected square 4-D input");
    const int s0 = image.dim(2);
    require(!scales.empty() && scales[0] == s0, "build_pyramid: input size must equal the largest scale");
    std::vector<Tensor<T>> levels;
    Tensor<T> cur = image;
    for (int target : scales) {
        require(target >= 1 && s0 % target == 0 && is_pow2(s0 / target),
                "build_pyramid: scale " + std::to_string(target) + " is not a power-of-two divisor of " +
                    std::to_string(s0));
        while (cur.dim(2) > target) cur = block_mean_downsample(cur);
        levels.push_back(cur);
    }
    return levels;
}

// ---------------------------------------------------------------------------
// ConvBN

template <typename T>
void ConvBN<T>::init(int cin, int cout, int k, int pad, Rng& rng) {
    spec = ConvSpec{1, pad};
    w = Tensor<T>({cout, cin, k, k});
    const double bound = std::sqrt(6.0 / (double(cin) * k * k));
    for (int64_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.uniform(-bound, bound));
    b = Tensor<T>({cout});
    gw = Tensor<T>(w.shape());
    gb = Tensor<T>(b.shape());
    if (use_bn) {
        gamma = Tensor<T>({cout});
        gamma.fill(T(1));
        beta = Tensor<T>({cout});
        bn.running_mean = Tensor<T>({cout});
        bn.running_var = Tensor<T>({cout});
        bn.running_var.fill(T(1));
        ggamma = Tensor<T>({cout});
        gbeta = Tensor<T>({cout});
    }
}

template <typename T>
Tensor<T> ConvBN<T>::forward(const Tensor<T>& x, bool train) {
    x_in = x;
    cached_train = train;
    Tensor<T> y = conv2d_forward(x, w, b, spec);
    if (use_bn) {
        conv_out = y;
        auto r = batch_norm_forward(y, gamma, beta, bn,
                                    train ? BatchNormMode::kTrain : BatchNormMode::kEval, eps,
                                    momentum);
        if (train) {
            bn_mean = r.batch_mean;
            bn_var = r.batch_var;
            bn = r.updated_state;
        }
        y = std::move(r.y);
    }
    if (use_relu) {
        act_in = y;
        y = relu_forward(y);
    }
    return y;
}

template <typename T>
Tensor<T> ConvBN<T>::backward(const Tensor<T>& dy) {
    Tensor<T> g = dy;
    if (use_relu) g = relu_backward(act_in, g);
    if (use_bn) {
        BatchNormGrads<T> bg = cached_train
                                   ? batch_norm_backward(conv_out, gamma, bn_mean, bn_var, eps, g)
                                   : batch_norm_backward_eval(conv_out, gamma, bn, eps, g);
        add_into(ggamma, bg.dgamma);
        add_into(gbeta, bg.dbeta);
        g = std::move(bg.dx);
    }
    Conv2dGrads<T> cg = conv2d_backward(x_in, w, spec, g);
    add_into(gw, cg.dw);
    add_into(gb, cg.db);
    return std::move(cg.dx);
}

template <typename T>
void ConvBN<T>::zero_grads() {
    gw.fill(T(0));
    gb.fill(T(0));
    if (use_bn) {
        ggamma.fill(T(0));
        gbeta.fill(T(0));
    }
}

template <typename T>
void ConvBN<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".w", &w, &gw, true});
    out.push_back({prefix + ".b", &b, &gb, true});
    if (use_bn) {
        out.push_back({prefix + ".bn_gamma", &gamma, &ggamma, true});
        out.push_back({prefix + ".bn_beta", &beta, &gbeta, true});
        out.push_back({prefix + ".bn_running_mean", &bn.running_mean, nullptr, false});
        out.push_back({prefix + ".bn_running_var", &bn.running_var, nullptr, false});
    }
}

// ---------------------------------------------------------------------------
// MotionEncoder

template <typename T>
void MotionEncoder<T>::build(const ArchConfig& cfg, Rng& rng) {
    const auto pads = cfg.effective_encoder_pads();
    z_dim = cfg.z_dim;
    convs.resize(6);
    pool_after.assign(kEncoderPool, kEncoderPool + 6);
    pools.resize(6);
    int cin = 6;  // image and difference image, concatenated
    for (int i = 0; i < 6; ++i) {
        convs[static_cast<size_t>(i)].eps = static_cast<T>(cfg.bn_eps);
        convs[static_cast<size_t>(i)].momentum = static_cast<T>(cfg.bn_momentum);
        convs[static_cast<size_t>(i)].init(cin, cfg.encoder_channels[static_cast<size_t>(i)],
                                           kEncoderConvSize, pads[static_cast<size_t>(i)], rng);
        cin = cfg.encoder_channels[static_cast<size_t>(i)];
    }
    has_dense = cfg.encoder_needs_dense();
    const int64_t flat = cfg.encoder_flat();
    if (has_dense) {
        head_w = Tensor<T>({static_cast<int>(flat), 2 * cfg.z_dim});
        const double bound = std::sqrt(6.0 / static_cast<double>(flat));
        for (int64_t i = 0; i < head_w.size(); ++i)
            head_w[i] = static_cast<T>(rng.uniform(-bound, bound));
        head_b = Tensor<T>({2 * cfg.z_dim});
        g_head_w = Tensor<T>(head_w.shape());
        g_head_b = Tensor<T>(head_b.shape());
    }
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> MotionEncoder<T>::forward(const Tensor<T>& x, bool train) {
    Tensor<T> cur = x;
    for (int i = 0; i < 6; ++i) {
        cur = convs[static_cast<size_t>(i)].forward(cur, train);
        if (pool_after[static_cast<size_t>(i)]) {
            auto pr = max_pool2x2_forward(cur);
            pools[static_cast<size_t>(i)].in_shape = cur.shape();
            pools[static_cast<size_t>(i)].argmax = std::move(pr.argmax);
            cur = std::move(pr.y);
        }
    }
    conv_out_shape = cur.shape();
    const int batch = cur.dim(0);
    Tensor<T> flat = cur.reshaped({batch, static_cast<int>(cur.size() / batch)});
    Tensor<T> out;
    if (has_dense) {
        head_in = flat;
        out = dense_forward(flat, head_w, head_b);
    } else {
        out = std::move(flat);
    }
    require(out.dim(1) == 2 * z_dim, "motion_encoder: head width must be 2*z_dim");
    Tensor<T> mu, logvar;
    split2(out, &mu, &logvar);
    return {std::move(mu), std::move(logvar)};
}

template <typename T>
Tensor<T> MotionEncoder<T>::backward(const Tensor<T>& dmu, const Tensor<T>& dlogvar) {
    Tensor<T> dy = hstack2(dmu, dlogvar);
    Tensor<T> dflat;
    if (has_dense) {
        DenseGrads<T> dg = dense_backward(head_in, head_w, dy);
        add_into(g_head_w, dg.dw);
        add_into(g_head_b, dg.db);
        dflat = std::move(dg.dx);
    } else {
        dflat = std::move(dy);
    }
    Tensor<T> cur = dflat.reshaped(conv_out_shape);
    for (int i = 5; i >= 0; --i) {
        if (pool_after[static_cast<size_t>(i)]) {
            cur = max_pool2x2_backward(pools[static_cast<size_t>(i)].in_shape,
                                       pools[static_cast<size_t>(i)].argmax, cur);
        }
        cur = convs[static_cast<size_t>(i)].backward(cur);
    }
    return cur;
}

template <typename T>
void MotionEncoder<T>::zero_grads() {
    for (auto& c : convs) c.zero_grads();
    if (has_dense) {
        g_head_w.fill(T(0));
        g_head_b.fill(T(0));
    }
}

template <typename T>
void MotionEncoder<T>::collect(std::vector<ParamRef<T>>& out) {
    for (size_t i = 0; i < convs.size(); ++i) {
        convs[i].collect("motion_encoder.conv" + std::to_string(i + 1), out);
    }
    if (has_dense) {
        out.push_back({"motion_encoder.head.w", &head_w, &g_head_w, true});
        out.push_back({"motion_encoder.head.b", &head_b, &g_head_b, true});
    }
}

// ---------------------------------------------------------------------------
// KernelDecoder

template <typename T>
void KernelDecoder<T>::build(const ArchConfig& cfg, Rng& rng) {
    const int K = cfg.latent_kernels();
    const int hidden = cfg.effective_kernel_decoder_hidden();
    const int out_ch = cfg.num_scales() * cfg.seg_channels;
    c1.eps = c2.eps = static_cast<T>(cfg.bn_eps);
    c1.momentum = c2.momentum = static_cast<T>(cfg.bn_momentum);
    c1.init(K, hidden, kEncoderConvSize, kEncoderConvSize / 2, rng);
    c2.init(hidden, out_ch, kEncoderConvSize, kEncoderConvSize / 2, rng);
    z_shape = {0, cfg.z_dim};
}

template <typename T>
Tensor<T> KernelDecoder<T>::forward(const Tensor<T>& z, bool train) {
    const int batch = z.dim(0);
    const int K = c1.w.dim(1);
    const int k = static_cast<int>(std::lround(std::sqrt(double(z.dim(1)) / K)));
    require(K * k * k == z.dim(1), "kernel_decoder: z length must equal K*k^2");
    z_shape = z.shape();
    Tensor<T> zk = z.reshaped({batch, K, k, k});
    Tensor<T> h = c1.forward(zk, train);
    return c2.forward(h, train);
}

template <typename T>
Tensor<T> KernelDecoder<T>::backward(const Tensor<T>& dkernels) {
    Tensor<T> dh = c2.backward(dkernels);
    Tensor<T> dzk = c1.backward(dh);
    return dzk.reshaped(z_shape);
}

template <typename T>
void KernelDecoder<T>::zero_grads() {
    c1.zero_grads();
    c2.zero_grads();
}

template <typename T>
void KernelDecoder<T>::collect(std::vector<ParamRef<T>>& out) {
    c1.collect("kernel_decoder.conv1", out);
    c2.collect("kernel_decoder.conv2", out);
}

// ---------------------------------------------------------------------------
// ImageEncoderScale

template <typename T>
void ImageEncoderScale<T>::build(const ArchConfig& cfg, Rng& rng) {
    const auto channels = cfg.effective_image_encoder_channels();
    convs.resize(4);
    pool_after.assign(kImagePool, kImagePool + 4);
    pools.resize(4);
    int cin = 3;
    for (int i = 0; i < 4; ++i) {
        convs[static_cast<size_t>(i)].eps = static_cast<T>(cfg.bn_eps);
        convs[static_cast<size_t>(i)].momentum = static_cast<T>(cfg.bn_momentum);
        convs[static_cast<size_t>(i)].init(cin, channels[static_cast<size_t>(i)], kEncoderConvSize,
                                           kEncoderConvSize / 2, rng);
        cin = channels[static_cast<size_t>(i)];
    }
}

template <typename T>
Tensor<T> ImageEncoderScale<T>::forward(const Tensor<T>& x, bool train) {
    Tensor<T> cur = x;
    for (int i = 0; i < 4; ++i) {
        cur = convs[static_cast<size_t>(i)].forward(cur, train);
        if (pool_after[static_cast<size_t>(i)]) {
            auto pr = max_pool2x2_forward(cur);
            pools[static_cast<size_t>(i)].in_shape = cur.shape();
            pools[static_cast<size_t>(i)].argmax = std::move(pr.argmax);
            cur = std::move(pr.y);
        }
    }
    return cur;
}

template <typename T>
Tensor<T> ImageEncoderScale<T>::backward(const Tensor<T>& dy) {
    Tensor<T> cur = dy;
    for (int i = 3; i >= 0; --i) {
        if (pool_after[static_cast<size_t>(i)]) {
            cur = max_pool2x2_backward(pools[static_cast<size_t>(i)].in_shape,
                                       pools[static_cast<size_t>(i)].argmax, cur);
        }
        cur = convs[static_cast<size_t>(i)].backward(cur);
    }
    return cur;
}

template <typename T>
void ImageEncoderScale<T>::zero_grads() {
    for (auto& c : convs) c.zero_grads();
}

template <typename T>
void ImageEncoderScale<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    for (size_t i = 0; i < convs.size(); ++i) {
        convs[i].collect(prefix + ".conv" + std::to_string(i + 1), out);
    }
}

// ---------------------------------------------------------------------------
// MotionDecoder

template <typename T>
void MotionDecoder<T>::build(const ArchConfig& cfg, Rng& rng) {
    const int cat_c = cfg.num_scales() * cfg.seg_channels;
    const auto& dc = cfg.decoder_channels;
    c9.eps = c1a.eps = static_cast<T>(cfg.bn_eps);
    c9.momentum = c1a.momentum = static_cast<T>(cfg.bn_momentum);
    c9.init(cat_c, dc[0], 9, 4, rng);
    c1a.init(dc[0], dc[1], 1, 0, rng);
    // Final layer regresses the signed difference image: linear, no
    // normalization.
    c1b.use_bn = false;
    c1b.use_relu = false;
    c1b.init(dc[1], dc[2], 1, 0, rng);

    const int finest = cfg.finest_feature_size();
    up_factors.clear();
    cat_channels.clear();
    for (int s = 0; s < cfg.num_scales(); ++s) {
        up_factors.push_back(finest / cfg.feature_size(s));
        cat_channels.push_back(cfg.seg_channels);
    }
    out_factor = cfg.input_size / finest;
}

template <typename T>
Tensor<T> MotionDecoder<T>::forward(const std::vector<Tensor<T>>& cross_outs, bool train) {
    std::vector<Tensor<T>> ups;
    ups.reserve(cross_outs.size());
    for (size_t s = 0; s < cross_outs.size(); ++s) {
        ups.push_back(upsample_nearest_forward(cross_outs[s], up_factors[s]));
    }
    std::vector<const Tensor<T>*> parts;
    for (const auto& u : ups) parts.push_back(&u);
    Tensor<T> cat = concat_channels(parts);
    Tensor<T> h = c9.forward(cat, train);
    h = c1a.forward(h, train);
    h = c1b.forward(h, train);
    return upsample_nearest_forward(h, out_factor);
}

template <typename T>
std::vector<Tensor<T>> MotionDecoder<T>::backward(const Tensor<T>& dv_hat) {
    Tensor<T> g = upsample_nearest_backward(dv_hat, out_factor);
    g = c1b.backward(g);
    g = c1a.backward(g);
    g = c9.backward(g);
    std::vector<Tensor<T>> parts = split_channels(g, cat_channels);
    std::vector<Tensor<T>> out;
    out.reserve(parts.size());
    for (size_t s = 0; s < parts.size(); ++s) {
        out.push_back(upsample_nearest_backward(parts[s], up_factors[s]));
    }
    return out;
}

template <typename T>
void MotionDecoder<T>::zero_grads() {
    c9.zero_grads();
    c1a.zero_grads();
    c1b.zero_grads();
}

template <typename T>
void MotionDecoder<T>::collect(std::vector<ParamRef<T>>& out) {
    c9.collect("decoder.conv9x9", out);
    c1a.collect("decoder.conv1x1", out);
    c1b.collect("decoder.out", out);
}

// ---------------------------------------------------------------------------
// CrossConvModel

template <typename T>
CrossConvModel<T>::CrossConvModel(ArchConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(init_seed, 0x1717);
    me_.build(cfg_, rng);
    kd_.build(cfg_, rng);
    ie_.resize(static_cast<size_t>(cfg_.num_scales()));
    for (auto& scale_enc : ie_) scale_enc.build(cfg_, rng);
    md_.build(cfg_, rng);
}

template <typename T>
std::vector<ParamRef<T>> CrossConvModel<T>::params() {
    std::vector<ParamRef<T>> out;
    me_.collect(out);
    kd_.collect(out);
    for (size_t s = 0; s < ie_.size(); ++s) {
        ie_[s].collect("image_encoder.s" + std::to_string(cfg_.scales[s]), out);
    }
    md_.collect(out);
    return out;
}

template <typename T>
int64_t CrossConvModel<T>::trainable_param_count() {
    int64_t n = 0;
    for (const auto& p : params()) {
        if (p.trainable) n += p.value->size();
    }
    return n;
}

template <typename T>
void CrossConvModel<T>::zero_grads() {
    me_.zero_grads();
    kd_.zero_grads();
    for (auto& scale_enc : ie_) scale_enc.zero_grads();
    md_.zero_grads();
}

template <typename T>
typename CrossConvModel<T>::TrainOut CrossConvModel<T>::forward_train(const Tensor<T>& image,
                                                                      const Tensor<T>& diff,
                                                                      const Tensor<T>& noise,
                                                                      bool sample_noise) {
    require(image.same_shape(diff), "forward_train: image and difference image must share shape");
    require(image.dim(1) == 3 && image.dim(2) == cfg_.input_size && image.dim(3) == cfg_.input_size,
            "forward_train: expected [B,3," + std::to_string(cfg_.input_size) + "," +
                std::to_string(cfg_.input_size) + "], got " + image.shape_str());
    const int batch = image.dim(0);
    require(noise.dim(0) == batch && noise.dim(1) == cfg_.z_dim,
            "forward_train: noise must be [B, z_dim]");

    Tensor<T> m_img = downsample_to(image, cfg_.motion_input_size);
    Tensor<T> m_diff = downsample_to(diff, cfg_.motion_input_size);
    Tensor<T> m_in = concat_channels<T>({&m_img, &m_diff});
    auto code = me_.forward(m_in, true);
    mu_ = std::move(code.first);
    logvar_ = std::move(code.second);
    eps_ = noise;
    sampled_noise_ = sample_noise;

    z_ = Tensor<T>({batch, cfg_.z_dim});
    if (sample_noise) {
        for (int64_t i = 0; i < z_.size(); ++i)
            z_[i] = mu_[i] + noise[i] * std::exp(logvar_[i] / T(2));
    } else {
        z_ = mu_;
    }

    TrainOut out;
    out.v_hat = run_gen_path(image, z_, true);
    out.mu = mu_;
    out.logvar = logvar_;
    out.z = z_;
    return out;
}

template <typename T>
Tensor<T> CrossConvModel<T>::run_gen_path(const Tensor<T>& image, const Tensor<T>& z, bool train) {
    Tensor<T> kernels = kd_.forward(z, train);
    std::vector<int> per_scale(static_cast<size_t>(cfg_.num_scales()), cfg_.seg_channels);
    banks_ = split_channels(kernels, per_scale);

    std::vector<Tensor<T>> pyramid = build_pyramid(image, cfg_.scales);
    feats_.clear();
    std::vector<Tensor<T>> cross;
    for (int s = 0; s < cfg_.num_scales(); ++s) {
        feats_.push_back(ie_[static_cast<size_t>(s)].forward(pyramid[static_cast<size_t>(s)], train));
        cross.push_back(cross_conv2d_forward(feats_.back(), banks_[static_cast<size_t>(s)]));
    }
    return md_.forward(cross, train);
}

template <typename T>
typename CrossConvModel<T>::InputGrads CrossConvModel<T>::backward_train(
    const Tensor<T>& dv_hat, const Tensor<T>& dmu_extra, const Tensor<T>& dlogvar_extra) {
    GenGrads gen = backward_gen(dv_hat);

    Tensor<T> dmu = std::move(gen.dz);
    Tensor<T> dlogvar(logvar_.shape());
    if (sampled_noise_) {
        for (int64_t i = 0; i < dlogvar.size(); ++i) {
            dlogvar[i] = dmu[i] * eps_[i] * T(0.5) * std::exp(logvar_[i] / T(2));
        }
    }
    if (!dmu_extra.empty()) add_into(dmu, dmu_extra);
    if (!dlogvar_extra.empty()) add_into(dlogvar, dlogvar_extra);

    Tensor<T> dm_in = me_.backward(dmu, dlogvar);
    auto halves = split_channels(dm_in, {3, 3});
    InputGrads out;
    out.d_image = std::move(gen.d_image);
    add_into(out.d_image, downsample_to_backward(halves[0], cfg_.input_size));
    out.d_diff = downsample_to_backward(halves[1], cfg_.input_size);
    return out;
}

template <typename T>
Tensor<T> CrossConvModel<T>::synthesize(const Tensor<T>& image, const Tensor<T>& z) {
    require(z.ndim() == 2 && z.dim(1) == cfg_.z_dim, "synthesize: z must be [B, z_dim]");
    require(image.dim(0) == z.dim(0), "synthesize: batch mismatch between image and z");
    return run_gen_path(image, z, false);
}

template <typename T>
Tensor<T> CrossConvModel<T>::forward_gen(const Tensor<T>& image, const Tensor<T>& z, bool train_bn) {
    return run_gen_path(image, z, train_bn);
}

template <typename T>
typename CrossConvModel<T>::GenGrads CrossConvModel<T>::backward_gen(const Tensor<T>& dv_hat) {
    std::vector<Tensor<T>> dcross = md_.backward(dv_hat);
    std::vector<Tensor<T>> dbank_parts;
    Tensor<T> d_image({dv_hat.dim(0), 3, cfg_.input_size, cfg_.input_size});
    for (int s = 0; s < cfg_.num_scales(); ++s) {
        CrossConvGrads<T> cg = cross_conv2d_backward(feats_[static_cast<size_t>(s)],
                                                     banks_[static_cast<size_t>(s)],
                                                     dcross[static_cast<size_t>(s)]);
        dbank_parts.push_back(std::move(cg.dkernels));
        Tensor<T> dpyr = ie_[static_cast<size_t>(s)].backward(cg.dfeatures);
        add_into(d_image, downsample_to_backward(dpyr, cfg_.input_size));
    }
    std::vector<const Tensor<T>*> bank_ptrs;
    for (const auto& p : dbank_parts) bank_ptrs.push_back(&p);
    Tensor<T> dkernels = concat_channels(bank_ptrs);
    GenGrads out;
    out.dz = kd_.backward(dkernels);
    out.d_image = std::move(d_image);
    return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> CrossConvModel<T>::motion_encode(const Tensor<T>& image,
                                                                 const Tensor<T>& diff) {
    require(image.same_shape(diff), "motion_encode: image and difference image must share shape");
    Tensor<T> m_img = downsample_to(image, cfg_.motion_input_size);
    Tensor<T> m_diff = downsample_to(diff, cfg_.motion_input_size);
    Tensor<T> m_in = concat_channels<T>({&m_img, &m_diff});
    return me_.forward(m_in, false);
}

template <typename T>
std::vector<Tensor<T>> CrossConvModel<T>::image_features(const Tensor<T>& image) {
    std::vector<Tensor<T>> pyramid = build_pyramid(image, cfg_.scales);
    std::vector<Tensor<T>> out;
    for (int s = 0; s < cfg_.num_scales(); ++s) {
        out.push_back(ie_[static_cast<size_t>(s)].forward(pyramid[static_cast<size_t>(s)], false));
    }
    return out;
}

template <typename T>
std::vector<std::pair<std::string, std::vector<int>>> CrossConvModel<T>::expected_shapes(
    const ArchConfig& cfg, int batch) {
    std::vector<std::pair<std::string, std::vector<int>>> out;
    out.push_back({"motion_input", {batch, 6, cfg.motion_input_size, cfg.motion_input_size}});
    const auto enc_sizes = cfg.motion_encoder_sizes();
    for (int i = 0; i < 6; ++i) {
        out.push_back({"motion_encoder.conv" + std::to_string(i + 1),
                       {batch, cfg.encoder_channels[static_cast<size_t>(i)],
                        enc_sizes[static_cast<size_t>(i)], enc_sizes[static_cast<size_t>(i)]}});
    }
    out.push_back({"z_mean", {batch, cfg.z_dim}});
    out.push_back({"z_logvar", {batch, cfg.z_dim}});
    const int k = cfg.kernel_size;
    out.push_back({"kernel_decoder.reshape", {batch, cfg.latent_kernels(), k, k}});
    out.push_back(
        {"kernel_decoder.out", {batch, cfg.num_scales() * cfg.seg_channels, k, k}});
    for (int s = 0; s < cfg.num_scales(); ++s) {
        const int f = cfg.feature_size(s);
        out.push_back({"image_encoder.s" + std::to_string(cfg.scales[static_cast<size_t>(s)]),
                       {batch, cfg.seg_channels, f, f}});
        out.push_back({"cross.s" + std::to_string(cfg.scales[static_cast<size_t>(s)]),
                       {batch, cfg.seg_channels, f, f}});
    }
    const int finest = cfg.finest_feature_size();
    out.push_back({"decoder.concat", {batch, cfg.num_scales() * cfg.seg_channels, finest, finest}});
    out.push_back({"decoder.conv9x9", {batch, cfg.decoder_channels[0], finest, finest}});
    out.push_back({"decoder.conv1x1", {batch, cfg.decoder_channels[1], finest, finest}});
    out.push_back({"decoder.out", {batch, 3, finest, finest}});
    out.push_back({"v_hat", {batch, 3, cfg.input_size, cfg.input_size}});
    return out;
}

#define VDYN_INSTANTIATE(T)                                                                  \
    template std::vector<T> sample_latent<T>(const std::vector<T>&, const std::vector<T>&,   \
                                             const std::vector<T>&);                         \
    template std::vector<Tensor<T>> build_pyramid<T>(const Tensor<T>&, const std::vector<int>&); \
    template struct ConvBN<T>;                                                               \
    template struct MotionEncoder<T>;                                                        \
    template struct KernelDecoder<T>;                                                        \
    template struct ImageEncoderScale<T>;                                                    \
    template struct MotionDecoder<T>;                                                        \
    template class CrossConvModel<T>;

VDYN_INSTANTIATE(float)
VDYN_INSTANTIATE(double)

#undef VDYN_INSTANTIATE

}  // namespace vdyn
