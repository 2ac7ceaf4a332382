#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vdyn/eval.hpp"

using namespace vdyn;

namespace {

// Exact bin mass of an axis-aligned Gaussian via erf products.
Histogram2D binned_gaussian(double sx, double sy) {
    Histogram2D h;
    auto cdf = [](double v, double s) { return 0.5 * (1.0 + std::erf(v / (s * std::sqrt(2.0)))); };
    const double w = (Histogram2D::kHi - Histogram2D::kLo) / Histogram2D::kBins;
    for (int r = 0; r < Histogram2D::kBins; ++r) {
        const double y0 = Histogram2D::kLo + r * w, y1 = y0 + w;
        for (int c = 0; c < Histogram2D::kBins; ++c) {
            const double x0 = Histogram2D::kLo + c * w, x1 = x0 + w;
            const double m = (cdf(x1, sx) - cdf(x0, sx)) * (cdf(y1, sy) - cdf(y0, sy));
            if (m > 0) h.add_mass(Histogram2D::bin_center(c), Histogram2D::bin_center(r), m);
        }
    }
    h.normalize();
    return h;
}

}  // namespace

TEST_CASE("histogram binning, clipping and normalization") {
    Histogram2D h;
    h.add(0.0, 0.0);
    h.add(4.9, -4.9);
    h.add(7.0, 0.0);  // out of range: clipped to the edge bin
    CHECK(h.total == 3);
    CHECK(h.clipped == 1);
    h.normalize();
    double sum = 0;
    for (double m : h.mass) sum += m;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(Histogram2D::bin_of(0.0) == 20);
    CHECK(Histogram2D::bin_center(20) == doctest::Approx(0.0));
}

TEST_CASE("kl_histogram basics") {
    auto p = binned_gaussian(1.0, 0.5);
    // self-KL is zero up to the declared smoothing floor: the eps on p_pred
    // bounds KL(p,p) by log(1 + 1681*eps)
    CHECK(kl_histogram(p, p) >= 0.0);
    CHECK(kl_histogram(p, p) <= std::log(1.0 + 1681e-6));
    CHECK(kl_histogram(p, p, 0.0) == doctest::Approx(0.0).epsilon(1e-12));

    // one-hot vs uniform: the 1e-6 smoothing leaves a uniform histogram
    // unchanged, so the value is exactly log(41*41)
    Histogram2D onehot, uniform;
    onehot.add_mass(0.0, 0.0, 1.0);
    onehot.normalize();
    for (int r = 0; r < 41; ++r)
        for (int c = 0; c < 41; ++c)
            uniform.add_mass(Histogram2D::bin_center(c), Histogram2D::bin_center(r), 1.0);
    uniform.normalize();
    CHECK(kl_histogram(onehot, uniform) == doctest::Approx(std::log(1681.0)).epsilon(1e-9));
    CHECK(kl_histogram(onehot, uniform) == doctest::Approx(7.427).epsilon(1e-3));

    // nonnegativity on random-ish pairs
    auto q = binned_gaussian(0.7, 1.3);
    CHECK(kl_histogram(p, q) > 0.0);
}

TEST_CASE("kl of the two toy-world gaussians matches a quadrature oracle") {
    auto p = binned_gaussian(0.2, 1.0);
    auto q = binned_gaussian(1.0, 0.2);
    const double got = kl_histogram(p, q);

    // independent oracle: midpoint quadrature of the bin masses, same formula
    const double w = (Histogram2D::kHi - Histogram2D::kLo) / Histogram2D::kBins;
    auto mass_at = [&](double sx, double sy, int r, int c) {
        const int sub = 24;
        double acc = 0;
        for (int i = 0; i < sub; ++i)
            for (int j = 0; j < sub; ++j) {
                const double x = Histogram2D::kLo + c * w + (j + 0.5) * w / sub;
                const double y = Histogram2D::kLo + r * w + (i + 0.5) * w / sub;
                acc += std::exp(-0.5 * (x * x / (sx * sx) + y * y / (sy * sy)));
            }
        return acc / (sx * sy);
    };
    std::vector<double> pm(41 * 41), qm(41 * 41);
    double ps = 0, qs = 0;
    for (int r = 0; r < 41; ++r)
        for (int c = 0; c < 41; ++c) {
            pm[static_cast<size_t>(r) * 41 + c] = mass_at(0.2, 1.0, r, c);
            qm[static_cast<size_t>(r) * 41 + c] = mass_at(1.0, 0.2, r, c);
            ps += pm[static_cast<size_t>(r) * 41 + c];
            qs += qm[static_cast<size_t>(r) * 41 + c];
        }
    const double eps = 1e-6;
    double expect = 0;
    for (int i = 0; i < 41 * 41; ++i) {
        const double pp = pm[static_cast<size_t>(i)] / ps;
        if (pp <= 0) continue;
        const double qq = (qm[static_cast<size_t>(i)] / qs + eps) / (1 + eps * 1681);
        expect += pp * std::log(pp / qq);
    }
    INFO("got ", got, " expect ", expect);
    CHECK(got == doctest::Approx(expect).epsilon(0.01));
}

TEST_CASE("displacement estimation on pure shifts") {
    ShapesConfig cfg;
    auto pair = gen_scene_pair(100, 0, cfg);
    // frame_b equal to frame_a: zero displacement
    auto mask = pair.visible_mask(0);
    auto d0 = estimate_displacement(pair.frame_a, pair.frame_a, mask);
    REQUIRE(d0.has_value());
    CHECK(d0->dx == doctest::Approx(0.0).epsilon(0.05));
    CHECK(d0->dy == doctest::Approx(0.0).epsilon(0.05));

    // integer translate by (2, 0)
    ImageU8 shifted(pair.frame_a.width, pair.frame_a.height);
    std::fill(shifted.rgb.begin(), shifted.rgb.end(), 255);
    for (int y = 0; y < shifted.height; ++y)
        for (int x = 0; x + 2 < shifted.width; ++x)
            std::copy(pair.frame_a.px(x, y), pair.frame_a.px(x, y) + 3, shifted.px(x + 2, y));
    auto d2 = estimate_displacement(pair.frame_a, shifted, mask);
    REQUIRE(d2.has_value());
    CHECK(std::abs(d2->dx - 2.0) < 0.1);
    CHECK(std::abs(d2->dy - 0.0) < 0.1);

    // degenerate mask is flagged
    std::vector<uint8_t> tiny_mask(mask.size(), 0);
    for (int i = 0; i < 10; ++i) tiny_mask[static_cast<size_t>(i)] = 1;
    CHECK_FALSE(estimate_displacement(pair.frame_a, pair.frame_b, tiny_mask).has_value());
}

TEST_CASE("displacement matches generator ground truth for >= 95% of objects") {
    ShapesConfig cfg;
    int total = 0, good = 0;
    for (uint64_t i = 0; i < 60; ++i) {
        auto pair = gen_scene_pair(2718, i, cfg);
        for (size_t o = 0; o < pair.objects.size(); ++o) {
            auto mask = pair.visible_mask(static_cast<int>(o));
            auto d = estimate_displacement(pair.frame_a, pair.frame_b, mask);
            if (!d) continue;
            ++total;
            const double ex = pair.objects[o].dx, ey = pair.objects[o].dy;
            if (std::abs(d->dx - ex) <= 0.5 && std::abs(d->dy - ey) <= 0.5) ++good;
        }
    }
    INFO("good ", good, " of ", total);
    CHECK(total > 150);
    CHECK(double(good) / double(total) >= 0.95);
}

TEST_CASE("displacement estimation is translation equivariant") {
    ShapesConfig cfg;
    auto pair = gen_scene_pair(12, 5, cfg);
    const int S = pair.image_size();
    auto mask = pair.visible_mask(1);
    auto base = estimate_displacement(pair.frame_a, pair.frame_b, mask);
    REQUIRE(base.has_value());

    // shift both frames (and the mask) by (3, 2)
    auto shift_img = [S](const ImageU8& src, int sx, int sy) {
        ImageU8 out(S, S);
        std::fill(out.rgb.begin(), out.rgb.end(), 255);
        for (int y = 0; y < S - sy; ++y)
            for (int x = 0; x < S - sx; ++x)
                std::copy(src.px(x, y), src.px(x, y) + 3, out.px(x + sx, y + sy));
        return out;
    };
    auto a2 = shift_img(pair.frame_a, 3, 2);
    auto b2 = shift_img(pair.frame_b, 3, 2);
    std::vector<uint8_t> m2(mask.size(), 0);
    for (int y = 0; y < S - 2; ++y)
        for (int x = 0; x < S - 3; ++x)
            if (mask[static_cast<size_t>(y) * S + x]) m2[static_cast<size_t>(y + 2) * S + x + 3] = 1;
    auto moved = estimate_displacement(a2, b2, m2);
    REQUIRE(moved.has_value());
    CHECK(moved->dx == doctest::Approx(base->dx).epsilon(0.02));
    CHECK(moved->dy == doctest::Approx(base->dy).epsilon(0.02));
}

TEST_CASE("ground-truth oracle sampler scores near-zero KL") {
    ShapesConfig cfg;
    auto gt = gt_class_histograms(cfg);
    std::vector<ScenePair> test_set;
    for (uint64_t i = 0; i < 40; ++i) test_set.push_back(gen_scene_pair(777, i, cfg));
    auto rep = evaluate_sampler(gt_oracle_sampler(cfg), test_set, 125, gt, 99);
    INFO("KL: ", rep.kl_circles, " ", rep.kl_squares, " ", rep.kl_triangles, " ",
         rep.kl_circles_triangles);
    CHECK(rep.kl_circles < 0.1);
    CHECK(rep.kl_squares < 0.1);
    // Triangles and the joint statistic sit on zero-width diagonal supports:
    // both measured axes must stay in-bin at once, so the template-matching
    // channel floors them near 0.4 even for ground-truth frames. That floor
    // is shared by every method the evaluation compares.
    CHECK(rep.kl_triangles < 0.5);
    CHECK(rep.kl_circles_triangles < 0.5);
    CHECK(rep.clip_fraction < 0.05);
    CHECK(rep.n_samples == 40 * 125);
}

TEST_CASE("flow baseline retrieves itself and produces sane warps") {
    auto train = gen_shapes(3131, 40, 64, false);
    FlowBaseline flow(train, 10);
    auto nn = flow.neighbors(train.pairs[7].frame_a);
    REQUIRE(nn.size() == 10);
    CHECK(nn[0] == 7);  // distance zero to itself

    // warping a training pair by its own flow approximates its frame_b
    const float bg[3] = {1.f, 1.f, 1.f};
    const auto& pair = train.pairs[3];
    auto warped = warp_by_flow(pair.frame_a, pair.flow_field(), pair.top_object_a(), false, bg);
    int64_t close = 0;
    for (size_t i = 0; i < warped.rgb.size(); ++i) {
        if (std::abs(int(warped.rgb[i]) - int(pair.frame_b.rgb[i])) <= 40) ++close;
    }
    CHECK(double(close) / double(warped.rgb.size()) > 0.95);
}

TEST_CASE("paper-scale reference values ride along in the report") {
    EvalReport rep;
    auto j = rep.to_json();
    CHECK(j.at("paper_scale_reference").at("ours").at("circles").get<double>() ==
          doctest::Approx(1.70));
    CHECK(j.at("paper_scale_reference").at("flow").at("circles_triangles").get<double>() ==
          doctest::Approx(8.42));
    CHECK(j.at("paper_scale_reference").at("ae").at("squares").get<double>() ==
          doctest::Approx(12.37));
}
