#pragma once

// Independent reference computations used only by the tests. None of them
// share code with the library beyond the public types.

#include "plcmac/mac_domain.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

struct Kernel {
    double p_defer = 0.0;
    double slots = 0.0;
};

// Backward recursion over (backoff, deferral) states for a node that
// overhears a busy slot with probability pb each slot.
inline Kernel kernel_dp(unsigned window, unsigned deferral, double pb)
{
    // state (k, d): k slots left, deferral counter d
    const unsigned K = window;
    const unsigned D = deferral;
    std::vector<std::vector<Kernel>> v(K + 1, std::vector<Kernel>(D + 1));
    for (unsigned k = 1; k <= K; ++k) {
        for (unsigned d = 0; d <= D; ++d) {
            Kernel busy;
            if (d == 0) {
                busy = {1.0, 1.0};
            } else {
                busy = v[k - 1][d - 1];
                busy.slots += 1.0;
            }
            Kernel idle = v[k - 1][d];
            idle.slots += 1.0;
            v[k][d] = {pb * busy.p_defer + (1 - pb) * idle.p_defer,
                       pb * busy.slots + (1 - pb) * idle.slots};
        }
    }
    Kernel mean;
    for (unsigned k = 0; k <= K; ++k) {
        mean.p_defer += v[k][D].p_defer / (K + 1);
        mean.slots += v[k][D].slots / (K + 1);
    }
    return mean;
}

// Enumerates every busy/idle pattern of the first `window` slots.
inline Kernel kernel_brute_force(unsigned window, unsigned deferral, double pb)
{
    Kernel mean;
    for (unsigned k = 0; k <= window; ++k) {
        for (std::uint32_t pattern = 0; pattern < (1u << window); ++pattern) {
            double prob = 1.0;
            unsigned bc = k;
            unsigned dc = deferral;
            unsigned slots = 0;
            bool deferred = false;
            for (unsigned s = 0; s < window; ++s) {
                const bool busy = (pattern >> s) & 1u;
                prob *= busy ? pb : 1 - pb;
                if (bc == 0 || deferred)
                    continue;  // later slots do not matter; their mass sums to 1
                ++slots;
                if (busy && dc == 0) {
                    deferred = true;
                } else {
                    if (busy)
                        --dc;
                    --bc;
                }
            }
            mean.p_defer += prob * deferred / (window + 1);
            mean.slots += prob * slots / (window + 1);
        }
    }
    return mean;
}

// Mean backoff over the retry chain from its own recursion:
// V_m = w_m / (1 - f_m),  V_i = w_i + f_i V_{i+1}.
inline double chain_mean(const std::vector<double>& slots, const std::vector<double>& p_fail)
{
    const std::size_t m = slots.size();
    double v = slots[m - 1] / (1.0 - p_fail[m - 1]);
    for (std::size_t i = m - 1; i-- > 0;)
        v = slots[i] + p_fail[i] * v;
    return v;
}

// Random walk through the retry chain.
inline double chain_monte_carlo(const std::vector<double>& slots, const std::vector<double>& p_fail,
                                std::uint64_t trials, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double total = 0.0;
    for (std::uint64_t t = 0; t < trials; ++t) {
        std::size_t stage = 0;
        while (true) {
            total += slots[stage];
            if (u(rng) >= p_fail[stage])
                break;
            stage = std::min(stage + 1, slots.size() - 1);
        }
    }
    return total / static_cast<double>(trials);
}

}  // namespace oracle
