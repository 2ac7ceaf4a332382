#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vdyn/gradcheck.hpp"
#include "vdyn/loss.hpp"
#include "vdyn/model.hpp"
#include "vdyn/ops.hpp"
#include "vdyn/rng.hpp"

using namespace vdyn;

namespace {

Tensor<double> randn(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

// Scalar probe: fixed random weights dotted with the op output, so upstream
// gradients are generic.
Tensor<double> probe_weights(const std::vector<int>& shape, Rng& rng) {
    Tensor<double> w(shape);
    for (int64_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-1.0, 1.0);
    return w;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0;
    for (int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST_CASE("gradcheck: dense layer at 1e-6") {
    Rng rng(101);
    auto x = randn({4, 6}, rng);
    auto w = randn({6, 5}, rng, 0.5);
    auto b = randn({5}, rng, 0.1);
    auto pw = probe_weights({4, 5}, rng);

    auto g = dense_backward(x, w, pw);
    auto loss = [&] { return dot(dense_forward(x, w, b), pw); };
    // db check needs d loss / d b = column sums of pw
    Tensor<double> db({5});
    for (int n = 0; n < 4; ++n)
        for (int j = 0; j < 5; ++j) db[j] += pw.at(n, j);

    auto rep = finite_diff_check(loss,
                                 {{"x", x.data(), g.dx.data(), x.size()},
                                  {"w", w.data(), g.dw.data(), w.size()},
                                  {"b", b.data(), db.data(), b.size()}},
                                 1e-5, 1e-6, 1);
    INFO(rep.worst_location, " err=", rep.max_rel_error);
    CHECK(rep.pass);
}

TEST_CASE("gradcheck: conv2d") {
    Rng rng(103);
    auto x = randn({2, 3, 7, 7}, rng);
    auto w = randn({4, 3, 3, 3}, rng, 0.5);
    auto b = randn({4}, rng, 0.1);
    ConvSpec spec{1, 1};
    auto pw = probe_weights({2, 4, 7, 7}, rng);
    auto g = conv2d_backward(x, w, spec, pw);
    auto loss = [&] { return dot(conv2d_forward(x, w, b, spec), pw); };
    auto rep = finite_diff_check(loss,
                                 {{"x", x.data(), g.dx.data(), x.size()},
                                  {"w", w.data(), g.dw.data(), w.size()},
                                  {"b", b.data(), g.db.data(), b.size()}},
                                 1e-5, 1e-5, 2);
    INFO(rep.worst_location, " err=", rep.max_rel_error);
    CHECK(rep.pass);
}

TEST_CASE("gradcheck: cross_conv2d per spec point") {
    Rng rng(107);
    auto f = randn({2, 8, 10, 10}, rng);
    auto k = randn({2, 8, 5, 5}, rng, 0.5);
    auto pw = probe_weights({2, 8, 10, 10}, rng);
    auto g = cross_conv2d_backward(f, k, pw);
    auto loss = [&] { return dot(cross_conv2d_forward(f, k), pw); };
    auto rep = finite_diff_check(loss,
                                 {{"features", f.data(), g.dfeatures.data(), f.size()},
                                  {"kernels", k.data(), g.dkernels.data(), k.size()}},
                                 1e-5, 1e-5, 3);
    INFO(rep.worst_location, " err=", rep.max_rel_error);
    CHECK(rep.pass);
}

TEST_CASE("gradcheck: batch_norm train mode") {
    Rng rng(109);
    auto x = randn({3, 4, 5, 5}, rng);
    auto gamma = randn({4}, rng, 0.3);
    for (int i = 0; i < 4; ++i) gamma[i] += 1.0;
    auto beta = randn({4}, rng, 0.3);
    BatchNormState<double> st{Tensor<double>({4}), Tensor<double>({4})};
    st.running_var.fill(1.0);
    const double eps = 1e-5;
    auto pw = probe_weights({3, 4, 5, 5}, rng);

    auto fwd = batch_norm_forward(x, gamma, beta, st, BatchNormMode::kTrain, eps, 0.1);
    auto g = batch_norm_backward(x, gamma, fwd.batch_mean, fwd.batch_var, eps, pw);
    auto loss = [&] {
        return dot(batch_norm_forward(x, gamma, beta, st, BatchNormMode::kTrain, eps, 0.1).y, pw);
    };
    auto rep = finite_diff_check(loss,
                                 {{"x", x.data(), g.dx.data(), x.size()},
                                  {"gamma", gamma.data(), g.dgamma.data(), gamma.size()},
                                  {"beta", beta.data(), g.dbeta.data(), beta.size()}},
                                 1e-5, 1e-5, 4);
    INFO(rep.worst_location, " err=", rep.max_rel_error);
    CHECK(rep.pass);
}

TEST_CASE("gradcheck: pooling, upsampling, relu") {
    Rng rng(113);
    auto x = randn({2, 3, 6, 6}, rng);
    {
        auto pw = probe_weights({2, 3, 3, 3}, rng);
        auto fwd = max_pool2x2_forward(x);
        auto dx = max_pool2x2_backward(x.shape(), fwd.argmax, pw);
        auto loss = [&] { return dot(max_pool2x2_forward(x).y, pw); };
        auto rep = finite_diff_check(loss, {{"x", x.data(), dx.data(), x.size()}}, 1e-6, 1e-5, 5);
        INFO("pool ", rep.worst_location, " err=", rep.max_rel_error);
        CHECK(rep.pass);
    }
    {
        auto pw = probe_weights({2, 3, 12, 12}, rng);
        auto dx = upsample_nearest_backward(pw, 2);
        auto loss = [&] { return dot(upsample_nearest_forward(x, 2), pw); };
        auto rep = finite_diff_check(loss, {{"x", x.data(), dx.data(), x.size()}}, 1e-5, 1e-5, 6);
        CHECK(rep.pass);
    }
    {
        auto pw = probe_weights({2, 3, 6, 6}, rng);
        auto dx = relu_backward(x, pw);
        // h below the distance of any coordinate to 0 keeps the kink away
        auto loss = [&] { return dot(relu_forward(x), pw); };
        auto rep = finite_diff_check(loss, {{"x", x.data(), dx.data(), x.size()}}, 1e-7, 1e-5, 7);
        CHECK(rep.pass);
    }
}

TEST_CASE("gradcheck: conv2d -> batch_norm(train) -> relu composite") {
    Rng rng(127);
    auto x = randn({2, 3, 8, 8}, rng);
    auto w = randn({4, 3, 5, 5}, rng, 0.4);
    auto b = randn({4}, rng, 0.1);
    auto gamma = randn({4}, rng, 0.2);
    for (int i = 0; i < 4; ++i) gamma[i] += 1.0;
    auto beta = randn({4}, rng, 0.2);
    BatchNormState<double> st{Tensor<double>({4}), Tensor<double>({4})};
    st.running_var.fill(1.0);
    ConvSpec spec{1, 2};
    const double eps = 1e-5;
    auto pw = probe_weights({2, 4, 8, 8}, rng);

    auto forward = [&] {
        auto c = conv2d_forward(x, w, b, spec);
        auto bn = batch_norm_forward(c, gamma, beta, st, BatchNormMode::kTrain, eps, 0.1);
        return relu_forward(bn.y);
    };
    // analytic chain
    auto c = conv2d_forward(x, w, b, spec);
    auto bn = batch_norm_forward(c, gamma, beta, st, BatchNormMode::kTrain, eps, 0.1);
    auto y = relu_forward(bn.y);
    auto d_relu = relu_backward(bn.y, pw);
    auto d_bn = batch_norm_backward(c, gamma, bn.batch_mean, bn.batch_var, eps, d_relu);
    auto d_conv = conv2d_backward(x, w, spec, d_bn.dx);

    auto loss = [&] { return dot(forward(), pw); };
    auto rep = finite_diff_check(loss,
                                 {{"x", x.data(), d_conv.dx.data(), x.size()},
                                  {"w", w.data(), d_conv.dw.data(), w.size()},
                                  {"b", b.data(), d_conv.db.data(), b.size()},
                                  {"gamma", gamma.data(), d_bn.dgamma.data(), gamma.size()},
                                  {"beta", beta.data(), d_bn.dbeta.data(), beta.size()}},
                                 1e-5, 1e-4, 8);
    INFO(rep.worst_location, " err=", rep.max_rel_error);
    CHECK(rep.pass);
}

TEST_CASE("gradcheck: 20 random instances per layer op") {
    Rng rng(131);
    int fails = 0;
    for (int rep = 0; rep < 20; ++rep) {
        int B = 1 + int(rng.uniform_index(2));
        int C = 1 + int(rng.uniform_index(3));
        int H = 4 + 2 * int(rng.uniform_index(3));
        auto x = randn({B, C, H, H}, rng);

        {  // conv2d
            int O = 1 + int(rng.uniform_index(3));
            auto w = randn({O, C, 3, 3}, rng, 0.5);
            auto b = randn({O}, rng, 0.1);
            ConvSpec spec{1, 1};
            auto pw = probe_weights({B, O, H, H}, rng);
            auto g = conv2d_backward(x, w, spec, pw);
            auto loss = [&] { return dot(conv2d_forward(x, w, b, spec), pw); };
            auto r = finite_diff_check(loss,
                                       {{"x", x.data(), g.dx.data(), x.size()},
                                        {"w", w.data(), g.dw.data(), w.size()},
                                        {"b", b.data(), g.db.data(), b.size()}},
                                       1e-5, 1e-5, 200 + rep, 50);
            if (!r.pass) ++fails;
        }
        {  // cross conv
            auto k = randn({B, C, 3, 3}, rng, 0.5);
            auto pw = probe_weights({B, C, H, H}, rng);
            auto g = cross_conv2d_backward(x, k, pw);
            auto loss = [&] { return dot(cross_conv2d_forward(x, k), pw); };
            auto r = finite_diff_check(loss,
                                       {{"f", x.data(), g.dfeatures.data(), x.size()},
                                        {"k", k.data(), g.dkernels.data(), k.size()}},
                                       1e-5, 1e-5, 300 + rep, 50);
            if (!r.pass) ++fails;
        }
        {  // dense
            int D = 2 + int(rng.uniform_index(5)), E = 2 + int(rng.uniform_index(5));
            auto xd = randn({B + 1, D}, rng);
            auto w = randn({D, E}, rng, 0.5);
            auto b = randn({E}, rng, 0.1);
            auto pw = probe_weights({B + 1, E}, rng);
            auto g = dense_backward(xd, w, pw);
            Tensor<double> db({E});
            for (int n = 0; n < B + 1; ++n)
                for (int j = 0; j < E; ++j) db[j] += pw.at(n, j);
            auto loss = [&] { return dot(dense_forward(xd, w, b), pw); };
            auto r = finite_diff_check(loss,
                                       {{"x", xd.data(), g.dx.data(), xd.size()},
                                        {"w", w.data(), g.dw.data(), w.size()},
                                        {"b", b.data(), db.data(), b.size()}},
                                       1e-5, 1e-5, 400 + rep, 50);
            if (!r.pass) ++fails;
        }
        {  // batch norm (train)
            auto gamma = randn({C}, rng, 0.2);
            for (int i = 0; i < C; ++i) gamma[i] += 1.0;
            auto beta = randn({C}, rng, 0.2);
            BatchNormState<double> st{Tensor<double>({C}), Tensor<double>({C})};
            st.running_var.fill(1.0);
            auto pw = probe_weights({B, C, H, H}, rng);
            auto fw = batch_norm_forward(x, gamma, beta, st, BatchNormMode::kTrain, 1e-5, 0.1);
            auto g = batch_norm_backward(x, gamma, fw.batch_mean, fw.batch_var, 1e-5, pw);
            auto loss = [&] {
                return dot(batch_norm_forward(x, gamma, beta, st, BatchNormMode::kTrain, 1e-5, 0.1).y, pw);
            };
            auto r = finite_diff_check(loss,
                                       {{"x", x.data(), g.dx.data(), x.size()},
                                        {"gamma", gamma.data(), g.dgamma.data(), gamma.size()},
                                        {"beta", beta.data(), g.dbeta.data(), beta.size()}},
                                       1e-5, 1e-5, 500 + rep, 50);
            if (!r.pass) ++fails;
        }
    }
    CHECK(fails == 0);
}

TEST_CASE("gradcheck: non-finite values are reported") {
    Rng rng(211);
    auto x = randn({2, 2}, rng);
    Tensor<double> g({2, 2});
    g[0] = std::numeric_limits<double>::quiet_NaN();
    auto rep = finite_diff_check([&] { return x[0]; },
                                 {{"x", x.data(), g.data(), x.size()}}, 1e-5, 1e-5, 1);
    CHECK_FALSE(rep.pass);
    CHECK(rep.failure.find("x[0]") != std::string::npos);
}

TEST_CASE("gradcheck: end-to-end synthesize on tiny config") {
    auto cfg = ArchConfig::tiny();
    CrossConvModel<double> model(cfg, 42);
    Rng rng(401);
    Tensor<double> image({2, 3, 16, 16});
    for (int64_t i = 0; i < image.size(); ++i) image[i] = rng.uniform();
    Tensor<double> z({2, cfg.z_dim});
    for (int64_t i = 0; i < z.size(); ++i) z[i] = 0.5 * rng.normal();
    Tensor<double> pw = probe_weights({2, 3, 16, 16}, rng);

    model.zero_grads();
    auto v_hat = model.forward_gen(image, z, false);
    auto gin = model.backward_gen(pw);
    auto loss = [&] { return dot(model.forward_gen(image, z, false), pw); };

    std::vector<GradCheckTerm> terms;
    terms.push_back({"image", image.data(), gin.d_image.data(), image.size()});
    terms.push_back({"z", z.data(), gin.dz.data(), z.size()});
    for (auto& p : model.params()) {
        if (p.trainable) terms.push_back({p.name, p.value->data(), p.grad->data(), p.value->size()});
    }
    auto rep = finite_diff_check(loss, terms, 1e-5, 1e-4, 9, 60);
    INFO(rep.worst_location, " err=", rep.max_rel_error, " coords=", rep.coords_checked);
    CHECK(rep.pass);
    CHECK(v_hat.shape() == std::vector<int>({2, 3, 16, 16}));
}

TEST_CASE("gradcheck: full training objective on tiny config") {
    auto cfg = ArchConfig::tiny();
    CrossConvModel<double> model(cfg, 77);
    Rng rng(601);
    Tensor<double> image({2, 3, 16, 16});
    for (int64_t i = 0; i < image.size(); ++i) image[i] = rng.uniform();
    Tensor<double> diff({2, 3, 16, 16});
    for (int64_t i = 0; i < diff.size(); ++i) diff[i] = 0.3 * rng.normal();
    Tensor<double> noise({2, cfg.z_dim});
    for (int64_t i = 0; i < noise.size(); ++i) noise[i] = rng.normal();
    const double lambda = 5.0;

    auto loss = [&] {
        auto out = model.forward_train(image, diff, noise, true);
        return kl_diag_gaussian(out.mu, out.logvar) + lambda * recon_loss(diff, out.v_hat);
    };

    model.zero_grads();
    auto out = model.forward_train(image, diff, noise, true);
    Tensor<double> dmu, dlogvar;
    kl_diag_gaussian_backward(out.mu, out.logvar, &dmu, &dlogvar);
    Tensor<double> dv_hat = recon_loss_backward(diff, out.v_hat);
    for (int64_t i = 0; i < dv_hat.size(); ++i) dv_hat[i] *= lambda;
    model.backward_train(dv_hat, dmu, dlogvar);

    std::vector<GradCheckTerm> terms;
    for (auto& p : model.params()) {
        if (p.trainable) terms.push_back({p.name, p.value->data(), p.grad->data(), p.value->size()});
    }
    auto rep = finite_diff_check(loss, terms, 1e-5, 1e-4, 10, 40);
    INFO(rep.worst_location, " err=", rep.max_rel_error, " coords=", rep.coords_checked);
    CHECK(rep.pass);
}
