#include "vdyn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "vdyn/rng.hpp"

namespace vdyn {

GradCheckReport finite_diff_check(const std::function<double()>& loss,
                                  std::vector<GradCheckTerm> terms, double h, double tol,
                                  uint64_t seed, int64_t max_coords) {
    GradCheckReport report;
    Rng rng(seed, 0xfdc);

    double base = loss();
    if (!std::isfinite(base)) {
        report.failure = "loss is non-finite at the check point";
        return report;
    }
    for (const auto& term : terms) {
        for (int64_t i = 0; i < term.count; ++i) {
            if (!std::isfinite(term.grads[i])) {
                report.failure = term.name + "[" + std::to_string(i) + "]: non-finite analytic gradient";
                return report;
            }
            if (!std::isfinite(term.values[i])) {
                report.failure = term.name + "[" + std::to_string(i) + "]: non-finite value";
                return report;
            }
        }
    }

    for (const auto& term : terms) {
        std::vector<int64_t> coords;
        if (term.count <= max_coords) {
            coords.resize(static_cast<size_t>(term.count));
            for (int64_t i = 0; i < term.count; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            // Random subset without replacement bias concerns: duplicates are
            // harmless, but keep them unique for coverage.
            std::vector<char> taken(static_cast<size_t>(term.count), 0);
            while (static_cast<int64_t>(coords.size()) < max_coords) {
                int64_t c = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(term.count)));
                if (!taken[static_cast<size_t>(c)]) {
                    taken[static_cast<size_t>(c)] = 1;
                    coords.push_back(c);
                }
            }
        }
        for (int64_t c : coords) {
            double saved = term.values[c];
            term.values[c] = saved + h;
            double lp = loss();
            term.values[c] = saved - h;
            double lm = loss();
            term.values[c] = saved;
            if (!std::isfinite(lp) || !std::isfinite(lm)) {
                report.failure = term.name + "[" + std::to_string(c) + "]: non-finite perturbed loss";
                return report;
            }
            double numeric = (lp - lm) / (2.0 * h);
            double analytic = term.grads[c];
            double denom = std::max({1.0, std::abs(numeric), std::abs(analytic)});
            double rel = std::abs(numeric - analytic) / denom;
            ++report.coords_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_location = term.name + "[" + std::to_string(c) + "]";
            }
        }
    }
    report.pass = report.max_rel_error < tol;
    return report;
}

}  // namespace vdyn
