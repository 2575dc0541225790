#pragma once

// Convergence metrics, rate classification, theorem-bound audits and the
// performance-difference decomposition of the value gap.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dposim/core.hpp"
#include "dposim/trainer.hpp"

namespace dposim {

struct DeltaMetrics {
    double max_abs = 0.0;
    /// Over ordered pairs y != y', so every unordered pair counts twice.
    double sum_abs = 0.0;
};

inline DeltaMetrics delta_metrics(std::span<const double> theta, const BanditInstance& inst) {
    DeltaMetrics m;
    const Matrix d = delta_matrix(theta, inst);
    for (double v : d.values()) {
        m.max_abs = std::max(m.max_abs, std::abs(v));
        m.sum_abs += std::abs(v);
    }
    return m;
}

struct PerfDiffAudit {
    double lhs = 0.0;     ///< V* - V^theta
    double middle = 0.0;  ///< E_{pi*, pi_theta} delta - beta KL(pi* || pi_theta)
    double bound = 0.0;   ///< E_{pi*, pi_theta} delta
};

inline PerfDiffAudit perf_diff_audit(std::span<const double> theta, const BanditInstance& inst) {
    const Vector star = optimal_policy(inst);
    const Vector pol = softmax(theta);
    const Matrix d = delta_matrix(theta, inst);
    PerfDiffAudit a;
    a.lhs = optimal_value(inst) - value(theta, inst);
    for (std::size_t y = 0; y < star.size(); ++y) {
        for (std::size_t y2 = 0; y2 < pol.size(); ++y2) a.bound += star[y] * pol[y2] * d(y, y2);
    }
    a.middle = a.bound - inst.beta * kl_divergence(star, pol);
    return a;
}

namespace detail {

/// Values at or below this are treated as sitting on the 64-bit floor:
/// max(1e-13, 10 x smallest positive value), where the smallest value only
/// counts as a floor when it is itself at precision level (<= 1e-11).
/// Otherwise a series that is still converging would always lose its last
/// records to the plateau.
inline double plateau_threshold(std::span<const double> errors, double absolute_floor = 1e-13) {
    double floor = std::numeric_limits<double>::infinity();
    for (double e : errors) {
        if (e > 0.0 && std::isfinite(e)) floor = std::min(floor, e);
    }
    if (!std::isfinite(floor) || floor > 1e-11) return absolute_floor;
    return std::max(absolute_floor, 10.0 * floor);
}

}  // namespace detail

enum class RateClass { Linear, Quadratic, Plateaued, Inconclusive };

inline const char* to_string(RateClass c) {
    switch (c) {
        case RateClass::Linear: return "Linear";
        case RateClass::Quadratic: return "Quadratic";
        case RateClass::Plateaued: return "Plateaued";
        case RateClass::Inconclusive: return "Inconclusive";
    }
    return "?";
}

struct RateReport {
    RateClass classification = RateClass::Inconclusive;
    /// Per-step contraction factor; set when Linear.
    double contraction_estimate = std::numeric_limits<double>::quiet_NaN();
    /// rho_t = log e_{t+1} / log e_t over the usable pre-plateau window.
    std::vector<double> log_ratio_series;
    double plateau_floor = 0.0;
    bool reached_plateau = false;
};

struct RateBands {
    double quadratic_lo = 1.7;
    double quadratic_hi = 2.3;
    double linear_lo = 0.9;
    double linear_hi = 1.1;
    /// Successive ratios must stay within this relative distance of their mean.
    double ratio_stability = 0.2;
    std::size_t quadratic_window = 2;
    std::size_t linear_window = 5;
    /// Fewest usable (below 1, above plateau) records needed to classify.
    std::size_t min_records = 3;
    double absolute_floor = 1e-13;
};

/// Classifies an error series sampled every `spacing` iterations.
///
/// The plateau threshold comes from detail::plateau_threshold; usable
/// records are those in the leading stretch before the first value at or under
/// the threshold that are also below 1. Ratios are converted to per-iteration
/// rates when spacing > 1.
inline RateReport classify_series(std::span<const double> errors, std::size_t spacing = 1,
                                  const RateBands& bands = {}) {
    RateReport rep;
    if (spacing == 0) throw std::invalid_argument("record spacing must be positive");
    double floor = std::numeric_limits<double>::infinity();
    for (double e : errors) {
        if (e > 0.0 && std::isfinite(e)) floor = std::min(floor, e);
    }
    if (!std::isfinite(floor)) floor = 0.0;
    rep.plateau_floor = floor;
    const double threshold = detail::plateau_threshold(errors, bands.absolute_floor);

    std::size_t first_plateau = errors.size();
    for (std::size_t i = 0; i < errors.size(); ++i) {
        if (errors[i] <= threshold) {
            first_plateau = i;
            break;
        }
    }
    rep.reached_plateau = !errors.empty() && errors.back() <= threshold;

    std::vector<double> usable;
    for (std::size_t i = 0; i < first_plateau; ++i) {
        if (errors[i] < 1.0 && errors[i] > 0.0) {
            usable.push_back(errors[i]);
        } else {
            usable.clear();
        }
    }
    const double k = static_cast<double>(spacing);
    std::vector<double> step_ratios;
    for (std::size_t i = 0; i + 1 < usable.size(); ++i) {
        const double rho = std::log(usable[i + 1]) / std::log(usable[i]);
        rep.log_ratio_series.push_back(std::pow(rho, 1.0 / k));
        step_ratios.push_back(std::pow(usable[i + 1] / usable[i], 1.0 / k));
    }

    if (usable.size() < bands.min_records) {
        rep.classification = rep.reached_plateau ? RateClass::Plateaued : RateClass::Inconclusive;
        return rep;
    }

    const auto& rho = rep.log_ratio_series;
    const std::size_t qn = std::min(bands.quadratic_window, rho.size());
    // Quadratic: the last ratio sits in the band and the trailing window never
    // drops under it (rho approaches 2 from above as log K / log e vanishes).
    const bool quadratic =
        rho.back() >= bands.quadratic_lo && rho.back() <= bands.quadratic_hi &&
        std::all_of(rho.end() - static_cast<std::ptrdiff_t>(qn), rho.end(),
                    [&](double r) { return r >= bands.quadratic_lo; });
    if (quadratic) {
        rep.classification = RateClass::Quadratic;
        return rep;
    }

    const std::size_t ln = std::min(bands.linear_window, rho.size());
    const auto rho_tail = std::span(rho).last(ln);
    const auto ratio_tail = std::span(step_ratios).last(ln);
    const bool rho_ok = std::all_of(rho_tail.begin(), rho_tail.end(),
                                    [&](double r) { return r >= bands.linear_lo && r <= bands.linear_hi; });
    double log_mean = 0.0;
    for (double r : ratio_tail) log_mean += std::log(r);
    const double gamma = std::exp(log_mean / static_cast<double>(ln));
    const bool stable = std::all_of(ratio_tail.begin(), ratio_tail.end(), [&](double r) {
        return std::abs(r - gamma) <= bands.ratio_stability * gamma;
    });
    if (rho_ok && stable && gamma > 0.0 && gamma < 1.0) {
        rep.classification = RateClass::Linear;
        rep.contraction_estimate = gamma;
        return rep;
    }
    rep.classification = RateClass::Inconclusive;
    return rep;
}

/// Classifies on max |delta| of each record.
inline RateReport classify_rate(const Trajectory& traj, const RateBands& bands = {}) {
    std::vector<double> errors;
    errors.reserve(traj.records.size());
    for (const auto& r : traj.records) errors.push_back(r.max_abs_delta);
    std::size_t spacing = 1;
    if (traj.records.size() >= 2) spacing = traj.records[1].iteration - traj.records[0].iteration;
    for (std::size_t i = 1; i + 1 < traj.records.size(); ++i) {
        if (traj.records[i + 1].iteration - traj.records[i].iteration != spacing) {
            throw std::invalid_argument("classify_rate needs uniformly spaced records");
        }
    }
    return classify_series(errors, spacing == 0 ? 1 : spacing, bands);
}

enum class Theorem { Thm1, Thm3, Thm4, Thm5, Thm6 };

inline const char* to_string(Theorem t) {
    switch (t) {
        case Theorem::Thm1: return "Thm1";
        case Theorem::Thm3: return "Thm3";
        case Theorem::Thm4: return "Thm4";
        case Theorem::Thm5: return "Thm5";
        case Theorem::Thm6: return "Thm6";
    }
    return "?";
}

inline Theorem parse_theorem(const std::string& s) {
    if (s == "Thm1") return Theorem::Thm1;
    if (s == "Thm3") return Theorem::Thm3;
    if (s == "Thm4") return Theorem::Thm4;
    if (s == "Thm5") return Theorem::Thm5;
    if (s == "Thm6") return Theorem::Thm6;
    throw std::invalid_argument("unknown theorem: " + s);
}

/// Upper bound on max |delta| after t exact iterations under the theorem's
/// step-size and initialization conditions.
inline double exact_bound(Theorem thm, std::size_t t) {
    const double td = static_cast<double>(t);
    switch (thm) {
        case Theorem::Thm1: return std::pow(0.588, td);
        case Theorem::Thm3: return std::pow(0.5, std::exp2(td) - 1.0);
        case Theorem::Thm4: return std::pow(0.611, std::exp2(td) - 1.0);
        default: break;
    }
    throw std::invalid_argument("exact_bound: theorem has no per-iteration bound");
}

/// floor(ln(1 / sigma)): the iteration count of the noisy-gradient bounds.
inline std::size_t noisy_bound_iterations(double sigma) {
    if (!(sigma > 0.0) || !(sigma < 1.0)) throw std::invalid_argument("sigma must lie in (0, 1)");
    return static_cast<std::size_t>(std::floor(std::log(1.0 / sigma)));
}

inline double noisy_bound_threshold(double sigma) { return 14.0 * sigma; }

struct BoundViolation {
    std::size_t run_index = 0;
    std::size_t iteration = 0;
    std::size_t first = 0;
    std::size_t second = 0;
    double observed = 0.0;
    double bound = 0.0;
};

struct BoundCheck {
    Theorem theorem = Theorem::Thm1;
    bool passed = true;
    std::optional<BoundViolation> first_violation;
    /// Records compared against the bound (plateau records are not).
    std::size_t records_checked = 0;
};

/// Rejects runs that were not produced under rewards in [0, 1], theta^0 =
/// theta_ref and eta = 1/(beta^2 A).
inline void require_theorem_preset(const BanditInstance& inst, double eta) {
    if (!inst.rewards_in_unit_interval()) {
        throw std::invalid_argument("theorem checks need rewards in [0, 1]");
    }
    const double want = condition_one_eta(inst);
    if (std::abs(eta - want) > 1e-12 * want) {
        throw std::invalid_argument("theorem checks need eta = 1/(beta^2 A)");
    }
}

inline constexpr double kBoundSlack = 1.0 + 1e-9;

/// Per-iteration bound audit for the exact-gradient theorems, stopping at the
/// first record that reaches the 64-bit plateau.
inline BoundCheck check_bound(const Trajectory& traj, Theorem thm, const BanditInstance& inst, double eta,
                              std::size_t run_index = 0) {
    if (thm == Theorem::Thm5 || thm == Theorem::Thm6) {
        throw std::invalid_argument("noisy-gradient theorems need a population of runs; use check_noisy_bound");
    }
    require_theorem_preset(inst, eta);
    BoundCheck out;
    out.theorem = thm;
    std::vector<double> errors;
    for (const auto& r : traj.records) errors.push_back(r.max_abs_delta);
    const double plateau = detail::plateau_threshold(errors);
    for (const auto& r : traj.records) {
        if (r.max_abs_delta <= plateau) break;
        ++out.records_checked;
        const double b = exact_bound(thm, r.iteration);
        if (r.max_abs_delta > b * kBoundSlack) {
            out.passed = false;
            out.first_violation = BoundViolation{run_index, r.iteration, 0, 0, r.max_abs_delta, b};
            break;
        }
    }
    return out;
}

/// Root-mean-square over runs of delta(y, y') at the final iterate, maximized
/// over ordered pairs.
struct NoisyBoundCheck {
    BoundCheck check;
    double max_pair_rms = 0.0;
    double threshold = 0.0;
    std::size_t iterations = 0;
};

inline NoisyBoundCheck check_noisy_bound(std::span<const Vector> final_thetas, Theorem thm,
                                         const BanditInstance& inst, double eta, double sigma) {
    if (thm != Theorem::Thm5 && thm != Theorem::Thm6) {
        throw std::invalid_argument("check_noisy_bound handles the noisy-gradient theorems only");
    }
    if (final_thetas.empty()) throw std::invalid_argument("no runs supplied");
    require_theorem_preset(inst, eta);
    if (!(sigma < 1.0 / 576.0)) throw std::invalid_argument("noisy bounds need sigma < 1/576");
    const std::size_t n = inst.action_count();
    Matrix sq(n);
    for (const auto& theta : final_thetas) {
        const Matrix d = delta_matrix(theta, inst);
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t y2 = 0; y2 < n; ++y2) sq(y, y2) += d(y, y2) * d(y, y2);
        }
    }
    NoisyBoundCheck out;
    out.check.theorem = thm;
    out.threshold = noisy_bound_threshold(sigma);
    out.iterations = noisy_bound_iterations(sigma);
    const double runs = static_cast<double>(final_thetas.size());
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t y2 = 0; y2 < n; ++y2) {
            if (y == y2) continue;
            const double rms = std::sqrt(sq(y, y2) / runs);
            ++out.check.records_checked;
            if (rms > out.max_pair_rms) out.max_pair_rms = rms;
            if (rms > out.threshold && out.check.passed) {
                out.check.passed = false;
                out.check.first_violation = BoundViolation{0, out.iterations, y, y2, rms, out.threshold};
            }
        }
    }
    return out;
}

/// Checks that a run converges no faster than linearly over [t_from, t_to]:
/// rho_t <= rho_max and successive ratios within +-tolerance of their mean.
/// Records at or below the plateau threshold are excluded.
struct LinearityAudit {
    bool passed = false;
    double max_rho = 0.0;
    double mean_ratio = 0.0;
    double max_ratio_deviation = 0.0;
    std::size_t ratios_checked = 0;
};

inline LinearityAudit audit_at_most_linear(std::span<const double> errors, std::size_t t_from, std::size_t t_to,
                                           double rho_max = 1.1, double tolerance = 0.2) {
    LinearityAudit a;
    const double threshold = detail::plateau_threshold(errors);
    std::vector<double> rhos, ratios;
    for (std::size_t t = t_from; t < t_to && t + 1 < errors.size(); ++t) {
        if (errors[t + 1] <= threshold || errors[t] <= threshold) break;
        rhos.push_back(std::log(errors[t + 1]) / std::log(errors[t]));
        ratios.push_back(errors[t + 1] / errors[t]);
    }
    a.ratios_checked = ratios.size();
    if (ratios.empty()) return a;
    a.max_rho = *std::max_element(rhos.begin(), rhos.end());
    double s = 0.0;
    for (double r : ratios) s += r;
    a.mean_ratio = s / static_cast<double>(ratios.size());
    for (double r : ratios) a.max_ratio_deviation = std::max(a.max_ratio_deviation, std::abs(r / a.mean_ratio - 1.0));
    a.passed = a.max_rho <= rho_max && a.max_ratio_deviation <= tolerance;
    return a;
}

}  // namespace dposim
