#pragma once

#include <functional>
#include <string>
#include <vector>

namespace vdyn {

/// One tensor entering a finite-difference check: current values plus the
/// analytic gradient computed at that point.
struct GradCheckTerm {
    std::string name;
    double* values = nullptr;
    const double* grads = nullptr;
    int64_t count = 0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    bool pass = false;
    std::string worst_location;
    int64_t coords_checked = 0;
    std::string failure;  // non-empty when aborted (non-finite values)
};

/// Central-difference check of analytic gradients. `loss` must be a pure
/// function of the values behind the registered terms; the analytic gradients
/// are evaluated once by the caller before invoking this. Tensors larger than
/// `max_coords` are probed on a random subset of at least that many coordinates.
GradCheckReport finite_diff_check(const std::function<double()>& loss,
                                  std::vector<GradCheckTerm> terms, double h, double tol,
                                  uint64_t seed = 0, int64_t max_coords = 200);

}  // namespace vdyn
