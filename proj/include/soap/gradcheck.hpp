#pragma once

#include <functional>
#include <string>
#include <vector>

#include "soap/params.hpp"
#include "soap/tensor.hpp"

namespace soap {

struct GradCheckOptions {
    double step = 1e-4;
    double tolerance = 1e-4;
    std::size_t samples_per_param = 0;  // 0 = every coordinate
    std::uint64_t seed = 0;
};

struct GradCheckRecord {
    std::string param;
    std::size_t index;
    double analytic;
    double numeric;
    double rel_err;
};

struct GradCheckReport {
    std::vector<GradCheckRecord> records;
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    bool pass = true;
};

// Compares analytic gradients (one taped backward pass) against central
// finite differences of loss_fn for a sample of coordinates of every
// registered parameter. loss_fn must be a deterministic pure function of the
// parameter values and is evaluated without an active tape for the numeric
// probes. Relative error denominators are floored at 1e-8.
GradCheckReport finite_diff_check(ParamRegistry& params,
                                  const std::function<Tensor()>& loss_fn,
                                  const GradCheckOptions& options = {});

}  // namespace soap
