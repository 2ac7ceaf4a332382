#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vdyn/ops.hpp"
#include "vdyn/rng.hpp"
#include "vdyn/tensor.hpp"

using namespace vdyn;

namespace {

template <typename T>
Tensor<T> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

// Test-local oracle, independent of the library's naive path.
template <typename T>
Tensor<T> conv_oracle(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                      int pad) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), K = w.dim(2);
    const int HO = (H + 2 * pad - K) / stride + 1;
    const int WO = (W + 2 * pad - K) / stride + 1;
    Tensor<T> y({B, O, HO, WO});
    for (int n = 0; n < B; ++n)
        for (int o = 0; o < O; ++o)
            for (int i = 0; i < HO; ++i)
                for (int j = 0; j < WO; ++j) {
                    double acc = b[o];
                    for (int c = 0; c < C; ++c)
                        for (int u = 0; u < K; ++u)
                            for (int v = 0; v < K; ++v) {
                                int yy = i * stride + u - pad;
                                int xx = j * stride + v - pad;
                                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                                acc += double(x.at(n, c, yy, xx)) * double(w.at(o, c, u, v));
                            }
                    y.at(n, o, i, j) = static_cast<T>(acc);
                }
    return y;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    REQUIRE(a.same_shape(b));
    double m = 0;
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace

TEST_CASE("tensor invariants") {
    Tensor<float> t({2, 3, 4, 5});
    CHECK(t.size() == 120);
    CHECK_THROWS(Tensor<float>({2, 0, 3}));
    CHECK_THROWS(Tensor<float>({4}, {1.f, 2.f}));
    // row-major indexing over (batch, channel, row, column)
    t.at(1, 2, 3, 4) = 7.f;
    CHECK(t[119] == 7.f);
    CHECK_THROWS(t.reshaped({7, 7}));
}

TEST_CASE("conv2d scalar kernel") {
    Tensor<double> x({1, 1, 3, 3});
    x.fill(1.0);
    Tensor<double> w({1, 1, 1, 1}, {2.0});
    Tensor<double> b({1});
    auto y = conv2d_forward(x, w, b, ConvSpec{1, 0});
    CHECK(y.shape() == std::vector<int>({1, 1, 3, 3}));
    for (int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(2.0));
}

TEST_CASE("conv2d delta kernel is identity (property)") {
    Rng rng(11);
    for (int rep = 0; rep < 10; ++rep) {
        int B = 1 + int(rng.uniform_index(3));
        int C = 1 + int(rng.uniform_index(4));
        int H = 3 + int(rng.uniform_index(6));
        int W = 3 + int(rng.uniform_index(6));
        auto x = random_tensor<double>({B, C, H, W}, rng);
        Tensor<double> w({C, C, 3, 3});
        for (int c = 0; c < C; ++c) w.at(c, c, 1, 1) = 1.0;
        Tensor<double> b({C});
        auto y = conv2d_forward(x, w, b, ConvSpec{1, 1});
        CHECK(max_abs_diff(y, x) == doctest::Approx(0.0));
    }
}

TEST_CASE("conv2d matches independent summation oracle") {
    Rng rng(7);
    auto x = random_tensor<double>({2, 3, 8, 8}, rng);
    auto w = random_tensor<double>({4, 3, 5, 5}, rng);
    auto b = random_tensor<double>({4}, rng);
    auto fast = conv2d_forward(x, w, b, ConvSpec{1, 2});
    auto ref = conv_oracle(x, w, b, 1, 2);
    CHECK(max_abs_diff(fast, ref) < 1e-6);

    // strided case
    auto fast2 = conv2d_forward(x, w, b, ConvSpec{2, 2});
    auto ref2 = conv_oracle(x, w, b, 2, 2);
    CHECK(max_abs_diff(fast2, ref2) < 1e-6);

    // the library's naive path must agree with the im2col path too
    auto naive = conv2d_forward_naive(x, w, b, ConvSpec{1, 2});
    CHECK(max_abs_diff(fast, naive) < 1e-6);
}

TEST_CASE("conv2d rejects channel mismatch") {
    Tensor<float> x({1, 2, 4, 4});
    Tensor<float> w({1, 3, 3, 3});
    Tensor<float> b({1});
    CHECK_THROWS_WITH_AS(conv2d_forward(x, w, b, ConvSpec{1, 1}),
                         doctest::Contains("channels"), std::invalid_argument);
}

TEST_CASE("cross_conv2d identity and shift kernels") {
    Rng rng(3);
    auto f = random_tensor<double>({2, 3, 6, 6}, rng);
    Tensor<double> k({2, 3, 3, 3});
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c) k.at(n, c, 1, 1) = 1.0;
    auto y = cross_conv2d_forward(f, k);
    CHECK(max_abs_diff(y, f) == doctest::Approx(0.0));

    // delta displaced one column right shifts content one column left
    Tensor<double> ks({2, 3, 3, 3});
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c) ks.at(n, c, 1, 2) = 1.0;
    auto ys = cross_conv2d_forward(f, ks);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 6; ++j) {
                    double expect = (j + 1 < 6) ? f.at(n, c, i, j + 1) : 0.0;
                    CHECK(ys.at(n, c, i, j) == doctest::Approx(expect));
                }
}

TEST_CASE("cross_conv2d matches per-channel summation oracle") {
    Rng rng(5);
    auto f = random_tensor<double>({2, 32, 16, 16}, rng);
    auto k = random_tensor<double>({2, 32, 5, 5}, rng);
    auto y = cross_conv2d_forward(f, k);
    const int pad = 2;
    double worst = 0;
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 32; ++c)
            for (int i = 0; i < 16; ++i)
                for (int j = 0; j < 16; ++j) {
                    double acc = 0;
                    for (int u = 0; u < 5; ++u)
                        for (int v = 0; v < 5; ++v) {
                            int yy = i + u - pad, xx = j + v - pad;
                            if (yy < 0 || yy >= 16 || xx < 0 || xx >= 16) continue;
                            acc += f.at(n, c, yy, xx) * k.at(n, c, u, v);
                        }
                    worst = std::max(worst, std::abs(acc - y.at(n, c, i, j)));
                }
    CHECK(worst < 1e-6);
}

TEST_CASE("cross_conv2d rejects even kernels and mismatched batch") {
    Tensor<float> f({2, 3, 6, 6});
    CHECK_THROWS_AS(cross_conv2d_forward(f, Tensor<float>({2, 3, 4, 4})), std::invalid_argument);
    CHECK_THROWS_AS(cross_conv2d_forward(f, Tensor<float>({1, 3, 3, 3})), std::invalid_argument);
    CHECK_THROWS_AS(cross_conv2d_forward(f, Tensor<float>({2, 2, 3, 3})), std::invalid_argument);
}

TEST_CASE("cross_conv2d equals single-channel conv2d at B=1") {
    Rng rng(17);
    auto f = random_tensor<double>({1, 4, 7, 7}, rng);
    auto k = random_tensor<double>({1, 4, 3, 3}, rng);
    auto y = cross_conv2d_forward(f, k);
    for (int c = 0; c < 4; ++c) {
        Tensor<double> fc({1, 1, 7, 7});
        Tensor<double> wc({1, 1, 3, 3});
        for (int i = 0; i < 49; ++i) fc[i] = f[c * 49 + i];
        for (int i = 0; i < 9; ++i) wc[i] = k[c * 9 + i];
        Tensor<double> b({1});
        auto yc = conv2d_forward(fc, wc, b, ConvSpec{1, 1});
        for (int i = 0; i < 49; ++i) CHECK(yc[i] == doctest::Approx(y[c * 49 + i]).epsilon(1e-12));
    }
}

TEST_CASE("batch_norm two-point and constant cases") {
    // channel values {1, 3} normalize to about {-1, +1}
    Tensor<double> x({2, 1, 1, 1}, {1.0, 3.0});
    Tensor<double> gamma({1}, {1.0});
    Tensor<double> beta({1}, {0.0});
    BatchNormState<double> st{Tensor<double>({1}), Tensor<double>({1})};
    st.running_var.fill(1.0);
    auto r = batch_norm_forward(x, gamma, beta, st, BatchNormMode::kTrain, 1e-5, 0.1);
    CHECK(r.y[0] == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(r.y[1] == doctest::Approx(1.0).epsilon(1e-4));

    // constant input with beta 5 stays at about 5 (zero variance handled by eps)
    Tensor<double> xc({2, 1, 2, 2});
    xc.fill(3.7);
    Tensor<double> beta5({1}, {5.0});
    auto rc = batch_norm_forward(xc, gamma, beta5, st, BatchNormMode::kTrain, 1e-5, 0.1);
    for (int64_t i = 0; i < rc.y.size(); ++i) CHECK(rc.y[i] == doctest::Approx(5.0).epsilon(1e-6));
}

TEST_CASE("batch_norm matches explicit-statistics oracle") {
    Rng rng(23);
    auto x = random_tensor<double>({4, 8, 6, 6}, rng);
    Tensor<double> gamma({8}), beta({8});
    for (int c = 0; c < 8; ++c) {
        gamma[c] = rng.uniform(0.5, 1.5);
        beta[c] = rng.uniform(-1.0, 1.0);
    }
    BatchNormState<double> st{Tensor<double>({8}), Tensor<double>({8})};
    st.running_var.fill(1.0);
    const double eps = 1e-5;
    auto r = batch_norm_forward(x, gamma, beta, st, BatchNormMode::kTrain, eps, 0.1);
    double worst = 0;
    for (int c = 0; c < 8; ++c) {
        double sum = 0, n = 4.0 * 36.0;
        for (int b = 0; b < 4; ++b)
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 6; ++j) sum += x.at(b, c, i, j);
        double mean = sum / n;
        double var = 0;
        for (int b = 0; b < 4; ++b)
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 6; ++j) var += (x.at(b, c, i, j) - mean) * (x.at(b, c, i, j) - mean);
        var /= n;
        for (int b = 0; b < 4; ++b)
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 6; ++j) {
                    double expect = gamma[c] * (x.at(b, c, i, j) - mean) / std::sqrt(var + eps) + beta[c];
                    worst = std::max(worst, std::abs(expect - r.y.at(b, c, i, j)));
                }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("batch_norm rejects single-value train mode and eval uses running stats") {
    Tensor<double> x1({1, 1, 1, 1}, {2.0});
    Tensor<double> gamma({1}, {1.0});
    Tensor<double> beta({1}, {0.0});
    BatchNormState<double> st{Tensor<double>({1}, {1.0}), Tensor<double>({1}, {4.0})};
    CHECK_THROWS_AS(batch_norm_forward(x1, gamma, beta, st, BatchNormMode::kTrain, 1e-5, 0.1),
                    std::invalid_argument);
    auto r = batch_norm_forward(x1, gamma, beta, st, BatchNormMode::kEval, 0.0, 0.1);
    CHECK(r.y[0] == doctest::Approx((2.0 - 1.0) / 2.0));
}

TEST_CASE("max_pool2x2 basics, tie rule, oracle") {
    Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
    auto r = max_pool2x2_forward(x);
    CHECK(r.y.size() == 1);
    CHECK(r.y[0] == 4.0);

    // tie: constant input routes gradient to the first element in scan order
    Tensor<double> xc({1, 1, 2, 2});
    xc.fill(3.0);
    auto rc = max_pool2x2_forward(xc);
    CHECK(rc.y[0] == 3.0);
    CHECK(rc.argmax[0] == 0);
    Tensor<double> dy({1, 1, 1, 1}, {1.0});
    auto dx = max_pool2x2_backward({1, 1, 2, 2}, rc.argmax, dy);
    CHECK(dx[0] == 1.0);
    CHECK(dx[1] == 0.0);

    CHECK_THROWS_AS(max_pool2x2_forward(Tensor<double>({1, 1, 3, 4})), std::invalid_argument);

    Rng rng(31);
    auto xr = random_tensor<double>({2, 3, 8, 8}, rng);
    auto rr = max_pool2x2_forward(xr);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j) {
                    double m = std::max(std::max(xr.at(n, c, 2 * i, 2 * j), xr.at(n, c, 2 * i, 2 * j + 1)),
                                        std::max(xr.at(n, c, 2 * i + 1, 2 * j), xr.at(n, c, 2 * i + 1, 2 * j + 1)));
                    CHECK(rr.y.at(n, c, i, j) == m);
                }
}

TEST_CASE("upsample_nearest basics and gradient replication") {
    Rng rng(37);
    auto x = random_tensor<double>({1, 2, 3, 3}, rng);
    auto same = upsample_nearest_forward(x, 1);
    CHECK(max_abs_diff(same, x) == 0.0);

    Tensor<double> one({1, 1, 1, 1}, {7.0});
    auto y = upsample_nearest_forward(one, 3);
    CHECK(y.shape() == std::vector<int>({1, 1, 3, 3}));
    for (int64_t i = 0; i < 9; ++i) CHECK(y[i] == 7.0);

    CHECK_THROWS_AS(upsample_nearest_forward(x, 0), std::invalid_argument);

    auto up = upsample_nearest_forward(x, 4);
    Tensor<double> ones(up.shape());
    ones.fill(1.0);
    auto dx = upsample_nearest_backward(ones, 4);
    for (int64_t i = 0; i < dx.size(); ++i) CHECK(dx[i] == 16.0);
}

TEST_CASE("upsample then repeated max pooling recovers positive input") {
    Rng rng(41);
    auto x = random_tensor<double>({2, 3, 4, 4}, rng, 0.1, 2.0);
    auto up = upsample_nearest_forward(x, 4);
    auto p1 = max_pool2x2_forward(up);
    auto p2 = max_pool2x2_forward(p1.y);
    CHECK(max_abs_diff(p2.y, x) == 0.0);
}

TEST_CASE("dense basics and triple-loop oracle") {
    Rng rng(43);
    // identity weights
    Tensor<double> x = random_tensor<double>({2, 4}, rng);
    Tensor<double> wi({4, 4});
    for (int i = 0; i < 4; ++i) wi.at(i, i) = 1.0;
    Tensor<double> b0({4});
    auto y = dense_forward(x, wi, b0);
    CHECK(max_abs_diff(y, x) == 0.0);

    // zero input broadcasts bias
    Tensor<double> xz({3, 4});
    Tensor<double> bb({4}, {1, 2, 3, 4});
    auto yb = dense_forward(xz, wi, bb);
    for (int n = 0; n < 3; ++n)
        for (int j = 0; j < 4; ++j) CHECK(yb.at(n, j) == bb[j]);

    auto xr = random_tensor<double>({3, 5}, rng);
    auto wr = random_tensor<double>({5, 4}, rng);
    auto br = random_tensor<double>({4}, rng);
    auto yr = dense_forward(xr, wr, br);
    for (int n = 0; n < 3; ++n)
        for (int j = 0; j < 4; ++j) {
            double acc = br[j];
            for (int d = 0; d < 5; ++d) acc += xr.at(n, d) * wr.at(d, j);
            CHECK(std::abs(acc - yr.at(n, j)) < 1e-7);
        }

    CHECK_THROWS_AS(dense_forward(xr, Tensor<double>({4, 4}), br), std::invalid_argument);
}

TEST_CASE("relu trivials") {
    Tensor<double> x({1, 3}, {-1.0, 2.0, 0.0});
    auto y = relu_forward(x);
    CHECK(y[0] == 0.0);
    CHECK(y[1] == 2.0);
    CHECK(y[2] == 0.0);
    Tensor<double> dy({1, 3});
    dy.fill(1.0);
    auto dx = relu_backward(x, dy);
    CHECK(dx[0] == 0.0);
    CHECK(dx[1] == 1.0);
    CHECK(dx[2] == 0.0);  // zero gradient at x == 0
}

TEST_CASE("forward ops are pure (bit-identical reruns)") {
    Rng rng(53);
    auto x = random_tensor<float>({2, 4, 8, 8}, rng);
    auto w = random_tensor<float>({4, 4, 3, 3}, rng);
    auto b = random_tensor<float>({4}, rng);
    auto y1 = conv2d_forward(x, w, b, ConvSpec{1, 1});
    auto y2 = conv2d_forward(x, w, b, ConvSpec{1, 1});
    for (int64_t i = 0; i < y1.size(); ++i) CHECK(y1[i] == y2[i]);

    auto k = random_tensor<float>({2, 4, 3, 3}, rng);
    auto c1 = cross_conv2d_forward(x, k);
    auto c2 = cross_conv2d_forward(x, k);
    for (int64_t i = 0; i < c1.size(); ++i) CHECK(c1[i] == c2[i]);
}

TEST_CASE("block mean downsample matches explicit oracle") {
    Rng rng(59);
    auto x = random_tensor<double>({1, 3, 8, 8}, rng);
    auto y = block_mean_downsample(x);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                double m = (x.at(0, c, 2 * i, 2 * j) + x.at(0, c, 2 * i, 2 * j + 1) +
                            x.at(0, c, 2 * i + 1, 2 * j) + x.at(0, c, 2 * i + 1, 2 * j + 1)) /
                           4.0;
                CHECK(y.at(0, c, i, j) == doctest::Approx(m).epsilon(1e-12));
            }
}
