#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vdyn/gradcheck.hpp"
#include "vdyn/loss.hpp"
#include "vdyn/rng.hpp"

using namespace vdyn;

TEST_CASE("kl analytic values") {
    Tensor<double> mu0({1, 4});
    Tensor<double> lv0({1, 4});
    CHECK(kl_diag_gaussian(mu0, lv0) == doctest::Approx(0.0));

    Tensor<double> mu1({1, 1}, {1.0});
    Tensor<double> lv1({1, 1}, {0.0});
    CHECK(kl_diag_gaussian(mu1, lv1) == doctest::Approx(0.5));

    Tensor<double> mu2({1, 1}, {0.0});
    Tensor<double> lv2({1, 1}, {std::log(4.0)});
    CHECK(kl_diag_gaussian(mu2, lv2) == doctest::Approx(0.5 * (4.0 - 1.0 - std::log(4.0))));
    CHECK(kl_diag_gaussian(mu2, lv2) == doctest::Approx(0.80685).epsilon(1e-4));

    Tensor<double> bad({1, 1}, {std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(kl_diag_gaussian(bad, lv2), std::invalid_argument);
}

TEST_CASE("kl zero iff prior, and decomposes per dimension") {
    Rng rng(5);
    Tensor<double> mu({1, 6}), lv({1, 6});
    for (int i = 0; i < 6; ++i) {
        mu[i] = rng.uniform(-1, 1);
        lv[i] = rng.uniform(-1, 1);
    }
    CHECK(kl_diag_gaussian(mu, lv) > 1e-12);

    Tensor<double> mu0({1, 6}), lv0({1, 6});
    CHECK(kl_diag_gaussian(mu0, lv0) < 1e-12);

    // concatenated code equals sum of the parts
    double whole = kl_diag_gaussian(mu, lv);
    Tensor<double> mua({1, 3}), lva({1, 3}), mub({1, 3}), lvb({1, 3});
    for (int i = 0; i < 3; ++i) {
        mua[i] = mu[i];
        lva[i] = lv[i];
        mub[i] = mu[i + 3];
        lvb[i] = lv[i + 3];
    }
    CHECK(whole == doctest::Approx(kl_diag_gaussian(mua, lva) + kl_diag_gaussian(mub, lvb)));
}

TEST_CASE("recon loss basics") {
    Tensor<double> v({2, 3}), vh({2, 3});
    CHECK(recon_loss(v, vh) == doctest::Approx(0.0));
    for (int i = 0; i < 6; ++i) vh[i] = 2.5;
    CHECK(recon_loss(v, vh) == doctest::Approx(2.5 * 2.5));
    CHECK_THROWS_AS(recon_loss(v, Tensor<double>({3, 2})), std::invalid_argument);

    Rng rng(9);
    for (int i = 0; i < 6; ++i) {
        v[i] = rng.uniform(-1, 1);
        vh[i] = rng.uniform(-1, 1);
    }
    double expect = 0;
    for (int i = 0; i < 6; ++i) expect += (v[i] - vh[i]) * (v[i] - vh[i]);
    expect /= 6.0;
    CHECK(recon_loss(v, vh) == doctest::Approx(expect).epsilon(1e-7));
}

TEST_CASE("total loss invariants") {
    Rng rng(13);
    Tensor<double> mu({2, 4}), lv({2, 4}), v({2, 8}), vh({2, 8});
    for (int64_t i = 0; i < mu.size(); ++i) {
        mu[i] = rng.uniform(-1, 1);
        lv[i] = rng.uniform(-1, 1);
    }
    for (int64_t i = 0; i < v.size(); ++i) {
        v[i] = rng.uniform(-1, 1);
        vh[i] = rng.uniform(-1, 1);
    }

    auto l1 = total_loss(mu, lv, v, vh, 10.0);
    CHECK(l1.total == doctest::Approx(l1.kl + l1.lambda * l1.recon));
    CHECK(l1.kl >= 0.0);
    CHECK(l1.recon >= 0.0);

    // lambda doubled: total - kl doubles exactly
    auto l2 = total_loss(mu, lv, v, vh, 20.0);
    CHECK(l2.total - l2.kl == doctest::Approx(2.0 * (l1.total - l1.kl)));

    CHECK_THROWS_AS(total_loss(mu, lv, v, vh, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(total_loss(mu, lv, v, vh, -1.0), std::invalid_argument);

    // perfect reconstruction + prior posterior -> 0
    Tensor<double> mu0({2, 4}), lv0({2, 4});
    auto l0 = total_loss(mu0, lv0, v, v, 10.0);
    CHECK(l0.total == doctest::Approx(0.0));
}

TEST_CASE("loss gradients match central differences") {
    Rng rng(17);
    Tensor<double> mu({3, 5}), lv({3, 5});
    for (int64_t i = 0; i < mu.size(); ++i) {
        mu[i] = rng.uniform(-1, 1);
        lv[i] = rng.uniform(-1, 1);
    }
    Tensor<double> dmu, dlv;
    kl_diag_gaussian_backward(mu, lv, &dmu, &dlv);
    auto rep = finite_diff_check([&] { return kl_diag_gaussian(mu, lv); },
                                 {{"mu", mu.data(), dmu.data(), mu.size()},
                                  {"logvar", lv.data(), dlv.data(), lv.size()}},
                                 1e-5, 1e-6, 21);
    INFO(rep.worst_location, " err=", rep.max_rel_error);
    CHECK(rep.pass);

    Tensor<double> v({2, 6}), vh({2, 6});
    for (int64_t i = 0; i < v.size(); ++i) {
        v[i] = rng.uniform(-1, 1);
        vh[i] = rng.uniform(-1, 1);
    }
    auto dvh = recon_loss_backward(v, vh);
    auto rep2 = finite_diff_check([&] { return recon_loss(v, vh); },
                                  {{"v_hat", vh.data(), dvh.data(), vh.size()}}, 1e-5, 1e-6, 22);
    CHECK(rep2.pass);
}

TEST_CASE("minimizing KL alone drives the code to the prior") {
    Rng rng(19);
    Tensor<double> mu({1, 8}), lv({1, 8});
    for (int i = 0; i < 8; ++i) {
        mu[i] = rng.uniform(-1, 1);
        lv[i] = rng.uniform(-1, 1);
    }
    const double lr = 0.1;
    for (int step = 0; step < 200; ++step) {
        Tensor<double> dmu, dlv;
        kl_diag_gaussian_backward(mu, lv, &dmu, &dlv);
        for (int i = 0; i < 8; ++i) {
            mu[i] -= lr * dmu[i];
            lv[i] -= lr * dlv[i];
        }
    }
    double worst_mu = 0, worst_lv = 0;
    for (int i = 0; i < 8; ++i) {
        worst_mu = std::max(worst_mu, std::abs(mu[i]));
        worst_lv = std::max(worst_lv, std::abs(lv[i]));
    }
    CHECK(worst_mu < 1e-3);
    CHECK(worst_lv < 1e-2);
}
