#include "avm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace avm {

GradCheckReport finite_difference_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_difference_check: h must be > 0");

    // analytic pass
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        for (auto& [name, p] : params) const_cast<Tensor&>(p).zero_grad();
        Tensor loss = f();
        if (!std::isfinite(loss.item()))
            throw std::runtime_error("finite_difference_check: non-finite loss at base point");
        tape.backward(loss);
        for (auto& [name, p] : params) {
            auto g = p.grad();
            analytic.emplace_back(g.begin(), g.end());
        }
    }

    auto eval = [&]() -> double {
        Tensor out = f();  // no tape active: pure evaluation
        return out.item();
    };

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& name = params[pi].first;
        Tensor p = params[pi].second;
        GradCheckEntry entry;
        entry.name = name;
        auto vals = p.values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + h;
            const double plus = eval();
            vals[i] = saved - h;
            const double minus = eval();
            vals[i] = saved;
            if (!std::isfinite(plus) || !std::isfinite(minus))
                throw std::runtime_error("finite_difference_check: non-finite value at " + name +
                                         "[" + std::to_string(i) + "]");
            const double numeric = (plus - minus) / (2.0 * h);
            const double a = analytic[pi][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double rel = std::abs(a - numeric) / denom;
            if (rel >= entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic_at_worst = a;
                entry.numeric_at_worst = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.params.push_back(std::move(entry));
    }
    return report;
}

}  // namespace avm
