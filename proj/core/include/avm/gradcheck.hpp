#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "avm/tensor.hpp"

namespace avm {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::vector<GradCheckEntry> params;
};

// Central-difference check of tape gradients. `f` must rebuild the forward
// graph from the current parameter values on every call: once under a tape
// to obtain analytic gradients, then twice per coordinate for the numeric
// estimate. Relative error uses max(|analytic|, |numeric|, 1e-8) as
// denominator. Throws if f turns non-finite, naming the coordinate.
GradCheckReport finite_difference_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params, double h = 1e-5);

}  // namespace avm
