#include "vdyn/toy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "vdyn/loss.hpp"
#include "vdyn/ops.hpp"

namespace vdyn {

const char* toy_family_name(ToyFamily f) {
    switch (f) {
        case ToyFamily::kDeterministic:
            return "deterministic";
        case ToyFamily::kVae:
            return "vae";
        case ToyFamily::kCvae:
            return "cvae";
    }
    return "?";
}

void ToyMlp::build(const std::vector<int>& widths, Rng& rng) {
    weights.clear();
    biases.clear();
    for (size_t i = 0; i + 1 < widths.size(); ++i) {
        Tensor<double> w({widths[i], widths[i + 1]});
        const double bound = std::sqrt(6.0 / widths[i]);
        for (int64_t j = 0; j < w.size(); ++j) w[j] = rng.uniform(-bound, bound);
        weights.push_back(std::move(w));
        biases.push_back(Tensor<double>({widths[i + 1]}));
        g_weights.push_back(Tensor<double>({widths[i], widths[i + 1]}));
        g_biases.push_back(Tensor<double>({widths[i + 1]}));
    }
    act_in.resize(weights.size());
    act_out.resize(weights.size());
}

Tensor<double> ToyMlp::forward(const Tensor<double>& x) {
    Tensor<double> cur = x;
    for (size_t l = 0; l < weights.size(); ++l) {
        act_in[l] = cur;
        cur = dense_forward(cur, weights[l], biases[l]);
        if (l + 1 < weights.size()) {
            act_out[l] = cur;
            cur = relu_forward(cur);
        }
    }
    return cur;
}

Tensor<double> ToyMlp::backward(const Tensor<double>& dy) {
    Tensor<double> g = dy;
    for (size_t l = weights.size(); l-- > 0;) {
        if (l + 1 < weights.size()) g = relu_backward(act_out[l], g);
        DenseGrads<double> dg = dense_backward(act_in[l], weights[l], g);
        for (int64_t i = 0; i < dg.dw.size(); ++i) g_weights[l][i] += dg.dw[i];
        for (int64_t i = 0; i < dg.db.size(); ++i) g_biases[l][i] += dg.db[i];
        g = std::move(dg.dx);
    }
    return g;
}

void ToyMlp::zero_grads() {
    for (auto& g : g_weights) g.fill(0.0);
    for (auto& g : g_biases) g.fill(0.0);
}

void ToyMlp::adam(std::vector<std::vector<double>>& m, std::vector<std::vector<double>>& v,
                  int64_t t, double lr) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, double(t));
    const double bc2 = 1.0 - std::pow(b2, double(t));
    size_t slot = 0;
    auto update = [&](Tensor<double>& w, Tensor<double>& g) {
        if (m.size() <= slot) {
            m.emplace_back(static_cast<size_t>(w.size()), 0.0);
            v.emplace_back(static_cast<size_t>(w.size()), 0.0);
        }
        for (int64_t i = 0; i < w.size(); ++i) {
            m[slot][static_cast<size_t>(i)] = b1 * m[slot][static_cast<size_t>(i)] + (1 - b1) * g[i];
            v[slot][static_cast<size_t>(i)] =
                b2 * v[slot][static_cast<size_t>(i)] + (1 - b2) * g[i] * g[i];
            const double mh = m[slot][static_cast<size_t>(i)] / bc1;
            const double vh = v[slot][static_cast<size_t>(i)] / bc2;
            w[i] -= lr * mh / (std::sqrt(vh) + eps);
        }
        ++slot;
    };
    for (size_t l = 0; l < weights.size(); ++l) {
        update(weights[l], g_weights[l]);
        update(biases[l], g_biases[l]);
    }
}

namespace {

Tensor<double> one_hot(const std::vector<int>& labels) {
    Tensor<double> x({static_cast<int>(labels.size()), 2});
    for (size_t i = 0; i < labels.size(); ++i) x.at(static_cast<int>(i), labels[i]) = 1.0;
    return x;
}

Tensor<double> hconcat(const Tensor<double>& a, const Tensor<double>& b) {
    const int n = a.dim(0), da = a.dim(1), db = b.dim(1);
    Tensor<double> out({n, da + db});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < da; ++j) out.at(i, j) = a.at(i, j);
        for (int j = 0; j < db; ++j) out.at(i, da + j) = b.at(i, j);
    }
    return out;
}

}  // namespace

std::pair<double, double> ToyModel::predict(int label) {
    require(family == ToyFamily::kDeterministic, "predict: deterministic family only");
    Tensor<double> x = one_hot({label});
    auto y = net.forward(x);
    return {y[0], y[1]};
}

std::pair<double, double> ToyModel::sample(int label, Rng& rng) {
    if (family == ToyFamily::kDeterministic) return predict(label);
    Tensor<double> z({1, 2});
    z[0] = rng.normal();
    z[1] = rng.normal();
    Tensor<double> in = family == ToyFamily::kCvae ? hconcat(z, one_hot({label})) : z;
    auto y = net.forward(in);
    return {y[0], y[1]};
}

ToyModel train_toy(ToyFamily family, const std::vector<ToySample>& samples, uint64_t seed,
                   const ToyTrainConfig& cfg) {
    require(samples.size() >= 10000, "train_toy: need at least 10,000 samples");
    ToyModel model;
    model.family = family;
    Rng init(seed, 0x70e5);
    if (family == ToyFamily::kDeterministic) {
        model.net.build({2, 32, 32, 2}, init);
    } else {
        model.encoder.build({2, 32, 32, 4}, init);  // (mu, logvar), 2 each
        model.net.build({family == ToyFamily::kCvae ? 4 : 2, 32, 32, 2}, init);
    }

    const int n = static_cast<int>(samples.size());
    const int batch = std::min(cfg.batch_size, n);
    const int steps = n / batch;
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    std::vector<std::vector<double>> am, av, am2, av2;
    int64_t t = 0;
    std::vector<double> epoch_loss;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng shuffle(seed, 0x5413 + static_cast<uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[shuffle.uniform_index(static_cast<uint64_t>(i) + 1)]);
        double total = 0;
        for (int s = 0; s < steps; ++s) {
            Tensor<double> v({batch, 2});
            std::vector<int> labels(static_cast<size_t>(batch));
            for (int b = 0; b < batch; ++b) {
                const auto& smp = samples[static_cast<size_t>(order[static_cast<size_t>(s * batch + b)])];
                v.at(b, 0) = smp.vx;
                v.at(b, 1) = smp.vy;
                labels[static_cast<size_t>(b)] = smp.label;
            }
            ++t;
            if (family == ToyFamily::kDeterministic) {
                model.net.zero_grads();
                auto y = model.net.forward(one_hot(labels));
                const double loss = recon_loss(v, y);
                total += loss;
                model.net.backward(recon_loss_backward(v, y));
                model.net.adam(am, av, t, cfg.learning_rate);
            } else {
                model.net.zero_grads();
                model.encoder.zero_grads();
                auto code = model.encoder.forward(v);
                Tensor<double> mu({batch, 2}), logvar({batch, 2});
                for (int b = 0; b < batch; ++b) {
                    mu.at(b, 0) = code.at(b, 0);
                    mu.at(b, 1) = code.at(b, 1);
                    logvar.at(b, 0) = code.at(b, 2);
                    logvar.at(b, 1) = code.at(b, 3);
                }
                Rng noise(seed, 0xe4 + static_cast<uint64_t>(t));
                Tensor<double> eps({batch, 2});
                for (int64_t i = 0; i < eps.size(); ++i) eps[i] = noise.normal();
                Tensor<double> z({batch, 2});
                for (int64_t i = 0; i < z.size(); ++i)
                    z[i] = mu[i] + eps[i] * std::exp(logvar[i] / 2.0);

                Tensor<double> dec_in =
                    family == ToyFamily::kCvae ? hconcat(z, one_hot(labels)) : z;
                auto v_hat = model.net.forward(dec_in);
                const double kl = kl_diag_gaussian(mu, logvar);
                const double rec = recon_loss(v, v_hat);
                total += kl + cfg.lambda * rec;

                Tensor<double> dv = recon_loss_backward(v, v_hat);
                for (int64_t i = 0; i < dv.size(); ++i) dv[i] *= cfg.lambda;
                Tensor<double> d_dec_in = model.net.backward(dv);
                Tensor<double> dz({batch, 2});
                for (int b = 0; b < batch; ++b) {
                    dz.at(b, 0) = d_dec_in.at(b, 0);
                    dz.at(b, 1) = d_dec_in.at(b, 1);
                }
                Tensor<double> dmu, dlogvar;
                kl_diag_gaussian_backward(mu, logvar, &dmu, &dlogvar);
                Tensor<double> dcode({batch, 4});
                for (int b = 0; b < batch; ++b) {
                    dcode.at(b, 0) = dz.at(b, 0) + dmu.at(b, 0);
                    dcode.at(b, 1) = dz.at(b, 1) + dmu.at(b, 1);
                    dcode.at(b, 2) =
                        dz.at(b, 0) * eps.at(b, 0) * 0.5 * std::exp(logvar.at(b, 0) / 2.0) +
                        dlogvar.at(b, 0);
                    dcode.at(b, 3) =
                        dz.at(b, 1) * eps.at(b, 1) * 0.5 * std::exp(logvar.at(b, 1) / 2.0) +
                        dlogvar.at(b, 1);
                }
                model.encoder.backward(dcode);
                model.net.adam(am, av, t, cfg.learning_rate);
                model.encoder.adam(am2, av2, t, cfg.learning_rate);
            }
            if (!std::isfinite(total)) {
                throw std::runtime_error("train_toy: loss diverged");
            }
        }
        epoch_loss.push_back(total / steps);
        model.epochs_run = epoch + 1;
        if (epoch >= 10 &&
            std::abs(epoch_loss[static_cast<size_t>(epoch)] -
                     epoch_loss[static_cast<size_t>(epoch - 10)]) < cfg.plateau_tol) {
            break;
        }
    }
    model.final_loss = epoch_loss.back();
    return model;
}

Histogram2D toy_gt_histogram(int label) {
    const double sx = label == 0 ? 0.2 : 1.0;
    const double sy = label == 0 ? 1.0 : 0.2;
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

ToyClassEval eval_toy(ToyModel& model, int n_samples, uint64_t seed) {
    ToyClassEval out;
    Rng rng(seed, 0x7e);
    for (int label = 0; label < 2; ++label) {
        Histogram2D& h = label == 0 ? out.hist_circle : out.hist_square;
        if (model.family == ToyFamily::kDeterministic) {
            // point-mass distribution at the deterministic prediction
            auto [vx, vy] = model.predict(label);
            h.add_mass(vx, vy, 1.0);
        } else {
            for (int i = 0; i < n_samples; ++i) {
                auto [vx, vy] = model.sample(label, rng);
                h.add(vx, vy);
            }
        }
        h.normalize();
    }
    out.kl_circle = kl_histogram(toy_gt_histogram(0), out.hist_circle);
    out.kl_square = kl_histogram(toy_gt_histogram(1), out.hist_square);
    return out;
}

void write_toy_report_csv(const std::vector<std::pair<ToyFamily, ToyClassEval>>& rows,
                          const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("write_toy_report_csv: cannot open " + path);
    std::fprintf(f, "family,class,kl\n");
    for (const auto& [family, ev] : rows) {
        std::fprintf(f, "%s,circle,%.6f\n", toy_family_name(family), ev.kl_circle);
        std::fprintf(f, "%s,square,%.6f\n", toy_family_name(family), ev.kl_square);
    }
    std::fclose(f);
}

}  // namespace vdyn
