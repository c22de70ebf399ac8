#include "avm/rng.hpp"

#include <cmath>

namespace avm {

double Rng::normal() {
    if (state_.has_cached_normal) {
        state_.has_cached_normal = false;
        return state_.cached_normal;
    }
    // u1 in (0,1] so the log is finite
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    state_.cached_normal = r * std::sin(theta);
    state_.has_cached_normal = true;
    return r * std::cos(theta);
}

std::uint64_t Rng::poisson(double rate) {
    if (!(rate > 0.0)) return 0;
    std::uint64_t total = 0;
    // Knuth's product method is exact but O(rate); chunking keeps it bounded
    // while the sum of independent Poissons stays Poisson.
    while (rate > 30.0) {
        total += poisson(30.0);
        rate -= 30.0;
    }
    const double limit = std::exp(-rate);
    double prod = 1.0;
    std::uint64_t k = 0;
    do {
        ++k;
        prod *= uniform();
    } while (prod > limit);
    return total + k - 1;
}

}  // namespace avm
