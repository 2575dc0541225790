#pragma once

// Reference computations written independently of the library: long-double
// arithmetic, direct loops, no shared helpers beyond the data types.

#include <cmath>
#include <cstddef>
#include <vector>

#include "dposim/core.hpp"
#include "dposim/samplers.hpp"

namespace oracle {

using ld = long double;

inline ld sigmoid(ld x) { return 1.0L / (1.0L + std::exp(-x)); }

inline std::vector<ld> softmax(const std::vector<double>& x) {
    ld m = x[0];
    for (double v : x) m = std::max<ld>(m, v);
    std::vector<ld> p(x.size());
    ld s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += p[i] = std::exp(static_cast<ld>(x[i]) - m);
    for (auto& v : p) v /= s;
    return p;
}

/// -p log sigma(z) - (1 - p) log sigma(-z), in a form safe for large |z|.
inline ld bce(ld p, ld z) {
    auto log_sig = [](ld t) { return t >= 0 ? -std::log1p(std::exp(-t)) : t - std::log1p(std::exp(t)); };
    return -p * log_sig(z) - (1 - p) * log_sig(-z);
}

/// The alpha-weighted expected DPO loss with the scheme held fixed:
/// 1/2 sum_c alpha_c sum_{y != y'} joint_c(y, y') BCE(sigma(r_y - r_y'), beta h).
inline ld weighted_loss(const std::vector<double>& theta, const dposim::SamplerScheme& s,
                        const dposim::BanditInstance& inst) {
    const std::size_t n = theta.size();
    ld total = 0;
    for (const auto& c : s.components) {
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t y2 = 0; y2 < n; ++y2) {
                if (y == y2) continue;
                const ld h = (static_cast<ld>(theta[y]) - theta[y2]) - (static_cast<ld>(inst.theta_ref[y]) - inst.theta_ref[y2]);
                const ld p = sigmoid(static_cast<ld>(inst.rewards[y]) - inst.rewards[y2]);
                total += 0.5L * c.alpha * c.joint(y, y2) * bce(p, inst.beta * h);
            }
        }
    }
    return total;
}

/// Central finite differences of weighted_loss.
inline std::vector<double> fd_gradient(const std::vector<double>& theta, const dposim::SamplerScheme& s,
                                       const dposim::BanditInstance& inst, double h = 1e-5) {
    std::vector<double> g(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        auto plus = theta, minus = theta;
        plus[i] += h;
        minus[i] -= h;
        g[i] = static_cast<double>((weighted_loss(plus, s, inst) - weighted_loss(minus, s, inst)) / (2.0L * h));
    }
    return g;
}

/// max_{y != y'} |r_y - r_y' - beta (log-ratio)| from the definition.
inline double max_abs_delta(const std::vector<double>& theta, const dposim::BanditInstance& inst) {
    ld m = 0;
    for (std::size_t y = 0; y < theta.size(); ++y) {
        for (std::size_t y2 = 0; y2 < theta.size(); ++y2) {
            const ld d = static_cast<ld>(inst.rewards[y]) - inst.rewards[y2] -
                         inst.beta * ((static_cast<ld>(theta[y]) - theta[y2]) -
                                      (static_cast<ld>(inst.theta_ref[y]) - inst.theta_ref[y2]));
            m = std::max(m, std::abs(d));
        }
    }
    return static_cast<double>(m);
}

/// V = E_pi r - beta KL(pi || pi_ref) evaluated directly from probabilities.
inline ld value(const std::vector<double>& theta, const dposim::BanditInstance& inst) {
    const auto p = softmax(theta);
    const auto q = softmax(inst.theta_ref);
    ld v = 0;
    for (std::size_t y = 0; y < p.size(); ++y) v += p[y] * (inst.rewards[y] - inst.beta * std::log(p[y] / q[y]));
    return v;
}

}  // namespace oracle
