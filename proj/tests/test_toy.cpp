#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vdyn/toy.hpp"

using namespace vdyn;

namespace {

// Shared across cases: training three families once keeps the suite fast.
struct Trained {
    std::vector<ToySample> samples = gen_toyworld(21, 60000);
    ToyModel det = train_toy(ToyFamily::kDeterministic, samples, 5);
    ToyModel vae = train_toy(ToyFamily::kVae, samples, 5);
    ToyModel cvae = train_toy(ToyFamily::kCvae, samples, 5);
};

Trained& trained() {
    static Trained t;
    return t;
}

}  // namespace

TEST_CASE("deterministic family predicts the class-conditional mean (~0)") {
    auto& t = trained();
    for (int label = 0; label < 2; ++label) {
        auto [vx, vy] = t.det.predict(label);
        INFO("label ", label, " -> ", vx, ",", vy);
        CHECK(std::abs(vx) < 0.05);
        CHECK(std::abs(vy) < 0.05);
    }
}

TEST_CASE("cvae recovers per-class anisotropy; vae ignores the label") {
    auto& t = trained();
    Rng rng(9);
    // per-class sample std over both axes
    for (int label = 0; label < 2; ++label) {
        double sx = 0, sxx = 0, sy = 0, syy = 0;
        const int n = 20000;
        for (int i = 0; i < n; ++i) {
            auto [vx, vy] = t.cvae.sample(label, rng);
            sx += vx;
            sxx += vx * vx;
            sy += vy;
            syy += vy * vy;
        }
        const double std_x = std::sqrt(sxx / n - (sx / n) * (sx / n));
        const double std_y = std::sqrt(syy / n - (sy / n) * (sy / n));
        const double ratio = label == 0 ? std_y / std_x : std_x / std_y;
        INFO("label ", label, " std ", std_x, " ", std_y);
        CHECK(ratio > 3.0);  // the ground truth anisotropy is 5:1
        // dominant axis: vertical for circles, horizontal for squares
        if (label == 0) {
            CHECK(std_y > std_x);
        } else {
            CHECK(std_x > std_y);
        }
    }

    // the unconditional VAE's samples cannot depend on the label: two draws
    // differ only by sampling noise (binned total variation below 10%)
    Histogram2D h0, h1;
    const int n = 50000;
    for (int i = 0; i < n; ++i) {
        auto [ax, ay] = t.vae.sample(0, rng);
        h0.add(ax, ay);
        auto [bx, by] = t.vae.sample(1, rng);
        h1.add(bx, by);
    }
    h0.normalize();
    h1.normalize();
    double tv = 0;
    for (size_t i = 0; i < h0.mass.size(); ++i) tv += std::abs(h0.mass[i] - h1.mass[i]);
    tv /= 2;
    INFO("tv ", tv);
    CHECK(tv < 0.10);
}

TEST_CASE("per-class KL ordering: cvae < vae < deterministic point mass") {
    auto& t = trained();
    auto det_ev = eval_toy(t.det, 50000, 3);
    auto vae_ev = eval_toy(t.vae, 50000, 3);
    auto cvae_ev = eval_toy(t.cvae, 50000, 3);
    INFO("det ", det_ev.kl_circle, "/", det_ev.kl_square, " vae ", vae_ev.kl_circle, "/",
         vae_ev.kl_square, " cvae ", cvae_ev.kl_circle, "/", cvae_ev.kl_square);

    CHECK(cvae_ev.kl_circle < vae_ev.kl_circle);
    CHECK(cvae_ev.kl_square < vae_ev.kl_square);
    CHECK(det_ev.kl_circle >= 5.0 * cvae_ev.kl_circle);
    CHECK(det_ev.kl_square >= 5.0 * cvae_ev.kl_square);
}

TEST_CASE("ground-truth sampler is self-consistent under binning") {
    Rng rng(111);
    Histogram2D h;
    for (int i = 0; i < 50000; ++i) {
        h.add(rng.normal(0.0, 0.2), rng.normal(0.0, 1.0));
    }
    h.normalize();
    CHECK(kl_histogram(toy_gt_histogram(0), h) < 0.05);
}

TEST_CASE("toy trainings are deterministic in the seed") {
    auto samples = gen_toyworld(77, 20000);
    auto m1 = train_toy(ToyFamily::kCvae, samples, 13);
    auto m2 = train_toy(ToyFamily::kCvae, samples, 13);
    CHECK(m1.final_loss == m2.final_loss);
    Rng r1(5), r2(5);
    for (int i = 0; i < 10; ++i) {
        auto a = m1.sample(i % 2, r1);
        auto b = m2.sample(i % 2, r2);
        CHECK(a.first == b.first);
        CHECK(a.second == b.second);
    }
}

TEST_CASE("train_toy rejects undersized datasets") {
    auto samples = gen_toyworld(1, 100);
    CHECK_THROWS_AS(train_toy(ToyFamily::kVae, samples, 1), std::invalid_argument);
}
