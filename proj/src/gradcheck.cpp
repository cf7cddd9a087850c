#include "soap/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

#include "soap/rng.hpp"

namespace soap {

GradCheckReport finite_diff_check(ParamRegistry& params,
                                  const std::function<Tensor()>& loss_fn,
                                  const GradCheckOptions& options) {
    if (!(options.step > 0.0)) {
        throw std::invalid_argument("finite_diff_check: step must be positive");
    }

    // analytic gradients from one recorded pass
    std::vector<Tensor> analytic;
    {
        Tape tape;
        params.watch_all(tape);
        Tensor loss = loss_fn();
        tape.backward(loss);
        analytic.reserve(params.count());
        for (const auto& item : params.items()) {
            analytic.push_back(tape.grad_of(*item.tensor));
        }
    }

    GradCheckReport report;
    const double h = options.step;
    std::size_t param_idx = 0;
    for (const auto& item : params.items()) {
        Tensor& t = *item.tensor;
        std::vector<std::size_t> coords;
        if (options.samples_per_param == 0 || options.samples_per_param >= t.size()) {
            coords.resize(t.size());
            for (std::size_t i = 0; i < t.size(); ++i) coords[i] = i;
        } else {
            Rng rng(Rng::mix(options.seed, param_idx + 1));
            coords = rng.sample_indices(t.size(), options.samples_per_param);
        }
        for (std::size_t c : coords) {
            const double saved = t[c];
            t[c] = saved + h;
            const double plus = loss_fn().item();
            t[c] = saved - h;
            const double minus = loss_fn().item();
            t[c] = saved;
            const double numeric = (plus - minus) / (2.0 * h);
            const double a = analytic[param_idx][c];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            const double rel = std::fabs(a - numeric) / denom;
            report.records.push_back(GradCheckRecord{item.name, c, a, numeric, rel});
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = item.name;
                report.worst_index = c;
            }
        }
        ++param_idx;
    }
    report.pass = report.max_rel_err <= options.tolerance;
    return report;
}

}  // namespace soap
