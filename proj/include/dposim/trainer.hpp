#pragma once

// Gradient descent on the alpha-weighted DPO loss, with exact gradients,
// gradients plus injected Gaussian noise, or minibatch estimates from sampled
// preference pairs.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dposim/core.hpp"
#include "dposim/random.hpp"
#include "dposim/samplers.hpp"

namespace dposim {

enum class GradientMode { Exact, EmpiricalNoise, EmpiricalPairs };

inline const char* to_string(GradientMode m) {
    switch (m) {
        case GradientMode::Exact: return "exact";
        case GradientMode::EmpiricalNoise: return "empirical-noise";
        case GradientMode::EmpiricalPairs: return "empirical-pairs";
    }
    return "?";
}

inline GradientMode parse_gradient_mode(const std::string& s) {
    if (s == "exact") return GradientMode::Exact;
    if (s == "empirical-noise") return GradientMode::EmpiricalNoise;
    if (s == "empirical-pairs") return GradientMode::EmpiricalPairs;
    throw std::invalid_argument("unknown gradient mode: " + s);
}

struct TrainConfig {
    GradientMode mode = GradientMode::Exact;
    double eta = 0.0;
    std::size_t iterations = 0;
    double noise_sigma = 0.0;
    std::size_t batch_size = 1;
    SamplerSpec sampler;
    std::uint64_t seed = 0;
    std::size_t record_every = 1;

    void validate() const {
        if (!(eta >= 0.0) || !std::isfinite(eta)) throw std::invalid_argument("learning rate must be >= 0");
        if (record_every == 0) throw std::invalid_argument("record_every must be positive");
        if (mode == GradientMode::EmpiricalNoise && !(noise_sigma > 0.0)) {
            throw std::invalid_argument("empirical-noise mode needs noise_sigma > 0");
        }
        if (mode == GradientMode::EmpiricalPairs && batch_size == 0) {
            throw std::invalid_argument("empirical-pairs mode needs batch_size >= 1");
        }
    }
};

/// The step size under which the theorem bounds are stated: 1 / (beta^2 A).
inline double condition_one_eta(const BanditInstance& inst) {
    return 1.0 / (inst.beta * inst.beta * static_cast<double>(inst.action_count()));
}

struct MetricRecord {
    std::size_t iteration = 0;
    double max_abs_delta = 0.0;
    double sum_abs_delta = 0.0;
    double value_gap = 0.0;
    double kl_to_ref = 0.0;
    std::uint64_t rejection_count = 0;
};

struct Trajectory {
    std::vector<MetricRecord> records;
    /// Final logits, one vector per context.
    std::vector<Vector> final_theta;
};

/// Raised when a logit or metric turns non-finite. Carries every record
/// written before the failure; the last of them is the last valid state.
class DivergedError : public std::runtime_error {
public:
    DivergedError(std::size_t iteration, Trajectory partial)
        : std::runtime_error("run diverged at iteration " + std::to_string(iteration)),
          iteration_(iteration), partial_(std::move(partial)) {}

    std::size_t iteration() const noexcept { return iteration_; }
    const MetricRecord& last_valid() const noexcept { return partial_.records.back(); }
    const Trajectory& partial() const noexcept { return partial_; }

private:
    std::size_t iteration_;
    Trajectory partial_;
};

namespace detail {

inline void check_dims(std::span<const double> theta, const SamplerScheme& scheme, const BanditInstance& inst) {
    const std::size_t n = inst.action_count();
    if (theta.size() != n || scheme.action_count() != n) {
        throw std::invalid_argument("dimension mismatch between logits, scheme and instance");
    }
    for (const auto& c : scheme.components) {
        if (c.joint.size() != n || c.second_dist.size() != n) {
            throw std::invalid_argument("dimension mismatch inside sampler component");
        }
    }
}

}  // namespace detail

/// g_y = -beta sum_c alpha_c sum_y' joint_c(y, y') Delta(y, y'; theta).
inline Vector exact_gradient(std::span<const double> theta, const SamplerScheme& scheme,
                             const BanditInstance& inst) {
    detail::check_dims(theta, scheme, inst);
    const std::size_t n = inst.action_count();
    const Matrix w = scheme.weighted_joint();
    const Matrix cd = capital_delta_matrix(theta, inst);
    Vector g(n, 0.0);
    for (std::size_t y = 0; y < n; ++y) {
        double acc = 0.0;
        for (std::size_t y2 = 0; y2 < n; ++y2) acc += w(y, y2) * cd(y, y2);
        g[y] = -inst.beta * acc;
    }
    return g;
}

inline Vector exact_step(std::span<const double> theta, const SamplerScheme& scheme, const BanditInstance& inst,
                         double eta) {
    const Vector g = exact_gradient(theta, scheme, inst);
    Vector next(theta.begin(), theta.end());
    for (std::size_t y = 0; y < next.size(); ++y) next[y] -= eta * g[y];
    return next;
}

/// Exact gradient plus beta * A * eps with eps_y ~ N(0, sigma^2) i.i.d.
inline Vector empirical_gradient_noise(std::span<const double> theta, const SamplerScheme& scheme,
                                       const BanditInstance& inst, double sigma, Rng& rng) {
    if (!(sigma >= 0.0)) throw std::invalid_argument("noise scale must be nonnegative");
    Vector g = exact_gradient(theta, scheme, inst);
    if (sigma == 0.0) return g;
    const double scale = inst.beta * static_cast<double>(inst.action_count());
    std::normal_distribution<double> noise(0.0, sigma);
    for (double& v : g) v += scale * noise(rng);
    return g;
}

struct PairGradient {
    Vector gradient;
    std::uint64_t rejections = 0;
};

/// Gradient of -log sigma(beta * log-ratio(winner, loser)) for one labelled pair.
inline void accumulate_pair_gradient(Vector& g, std::size_t winner, std::size_t loser, std::span<const double> theta,
                                     const BanditInstance& inst, double weight) {
    if (winner == loser) return;
    const double h = inst.beta * policy_log_ratio(winner, loser, theta, inst);
    const double coef = -inst.beta * sigmoid(-h) * weight;
    g[winner] += coef;
    g[loser] -= coef;
}

/// Minibatch estimate from sampled pairs with Bradley-Terry labels. Each pair
/// is weighted by alpha_c / P(component c), which makes the batch mean
/// unbiased for the exact gradient.
inline PairGradient empirical_gradient_pairs(std::span<const double> theta, const SamplerScheme& scheme,
                                             const BanditInstance& inst, std::size_t batch_size, Rng& rng) {
    detail::check_dims(theta, scheme, inst);
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    const double total = scheme.total_alpha();
    if (!(total > 0.0)) throw std::invalid_argument("scheme has zero total sampling weight");
    PairGradient out{Vector(inst.action_count(), 0.0), 0};
    for (std::size_t b = 0; b < batch_size; ++b) {
        const PairSample s = draw_pair(scheme, rng);
        out.rejections += s.rejections;
        // alpha_c / (alpha_c / total)
        const double weight = total;
        const bool first_wins = uniform01(rng) < bt_preference(s.first, s.second, inst);
        const std::size_t winner = first_wins ? s.first : s.second;
        const std::size_t loser = first_wins ? s.second : s.first;
        accumulate_pair_gradient(out.gradient, winner, loser, theta, inst, weight);
    }
    for (double& v : out.gradient) v /= static_cast<double>(batch_size);
    return out;
}

inline MetricRecord measure(std::size_t t, std::span<const double> theta, const BanditInstance& inst,
                            double optimal, std::uint64_t rejections) {
    MetricRecord r;
    r.iteration = t;
    const Matrix d = delta_matrix(theta, inst);
    for (double v : d.values()) {
        r.max_abs_delta = std::max(r.max_abs_delta, std::abs(v));
        r.sum_abs_delta += std::abs(v);
    }
    r.value_gap = optimal - value(theta, inst);
    r.kl_to_ref = kl_to_reference(theta, inst);
    r.rejection_count = rejections;
    return r;
}

namespace detail {

inline bool all_finite(std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

inline bool should_record(std::size_t t, const TrainConfig& cfg) {
    return t % cfg.record_every == 0 || t == cfg.iterations;
}

}  // namespace detail

/// Iterates theta <- theta - eta * G for cfg.iterations steps starting from
/// initial_theta (theta_ref when empty). `build_scheme(theta, inst)` supplies
/// the sampler; theta-dependent schemes are rebuilt from the current logits
/// before every step and treated as constants within it. rejection_count in
/// each record is cumulative.
template <class SchemeFactory>
Trajectory run_with(const BanditInstance& inst, const TrainConfig& cfg, SchemeFactory&& build_scheme,
                    bool rebuild_each_step, std::span<const double> initial_theta = {}) {
    inst.validate();
    cfg.validate();
    Vector theta = initial_theta.empty() ? inst.theta_ref : Vector(initial_theta.begin(), initial_theta.end());
    if (theta.size() != inst.action_count()) {
        throw std::invalid_argument("initial logits must have one entry per action");
    }
    Rng rng(cfg.seed);
    const double optimal = optimal_value(inst);
    std::optional<SamplerScheme> fixed_scheme;
    if (!rebuild_each_step) fixed_scheme = build_scheme(std::span<const double>(theta), inst);

    Trajectory traj;
    std::uint64_t rejections = 0;
    traj.records.push_back(measure(0, theta, inst, optimal, 0));
    for (std::size_t t = 0; t < cfg.iterations; ++t) {
        std::optional<SamplerScheme> rebuilt;
        if (!fixed_scheme) {
            try {
                rebuilt = build_scheme(std::span<const double>(theta), inst);
            } catch (const std::invalid_argument&) {
                // The first build sees the validated start; a later failure
                // means the logits have run out of floating-point range.
                if (t == 0) throw;
                throw DivergedError(t, std::move(traj));
            }
        }
        const SamplerScheme& scheme = fixed_scheme ? *fixed_scheme : *rebuilt;
        Vector g;
        switch (cfg.mode) {
            case GradientMode::Exact: g = exact_gradient(theta, scheme, inst); break;
            case GradientMode::EmpiricalNoise:
                g = empirical_gradient_noise(theta, scheme, inst, cfg.noise_sigma, rng);
                break;
            case GradientMode::EmpiricalPairs: {
                PairGradient pg = empirical_gradient_pairs(theta, scheme, inst, cfg.batch_size, rng);
                rejections += pg.rejections;
                g = std::move(pg.gradient);
                break;
            }
        }
        for (std::size_t y = 0; y < theta.size(); ++y) theta[y] -= cfg.eta * g[y];
        if (!detail::all_finite(theta)) throw DivergedError(t + 1, std::move(traj));
        if (detail::should_record(t + 1, cfg)) {
            const MetricRecord rec = measure(t + 1, theta, inst, optimal, rejections);
            if (!std::isfinite(rec.max_abs_delta) || !std::isfinite(rec.value_gap)) {
                throw DivergedError(t + 1, std::move(traj));
            }
            traj.records.push_back(rec);
        }
    }
    traj.final_theta.push_back(std::move(theta));
    return traj;
}

inline Trajectory run(const BanditInstance& inst, const TrainConfig& cfg, std::span<const double> initial_theta = {}) {
    return run_with(
        inst, cfg, [&](std::span<const double> th, const BanditInstance& b) { return cfg.sampler.build(th, b); },
        cfg.sampler.depends_on_theta(), initial_theta);
}

struct ContextualRun {
    /// rho-weighted average of the per-context metrics (rejections summed).
    Trajectory aggregate;
    std::vector<Trajectory> per_context;
};

/// Each context trains independently with its own generator stream.
inline ContextualRun run(const ContextualBandit& bandit, const TrainConfig& cfg) {
    bandit.validate();
    ContextualRun out;
    for (std::size_t x = 0; x < bandit.contexts.size(); ++x) {
        TrainConfig c = cfg;
        c.seed = bandit.contexts.size() == 1 ? cfg.seed : derive_seed(cfg.seed, x);
        out.per_context.push_back(run(bandit.contexts[x], c));
    }
    const std::size_t n_records = out.per_context.front().records.size();
    for (std::size_t i = 0; i < n_records; ++i) {
        MetricRecord agg;
        agg.iteration = out.per_context.front().records[i].iteration;
        for (std::size_t x = 0; x < bandit.contexts.size(); ++x) {
            const MetricRecord& r = out.per_context[x].records[i];
            const double w = bandit.context_weights[x];
            agg.max_abs_delta += w * r.max_abs_delta;
            agg.sum_abs_delta += w * r.sum_abs_delta;
            agg.value_gap += w * r.value_gap;
            agg.kl_to_ref += w * r.kl_to_ref;
            agg.rejection_count += r.rejection_count;
        }
        out.aggregate.records.push_back(agg);
    }
    for (const auto& t : out.per_context) out.aggregate.final_theta.push_back(t.final_theta.front());
    return out;
}

}  // namespace dposim
