#pragma once

// Tabular softmax policies over a finite bandit and the pairwise quantities
// (delta, capital delta, value, KL) that the samplers, trainer and analysis
// layers are written against.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dposim {

using Vector = std::vector<double>;

/// Dense row-major square matrix. Action counts stay small (tens to a few
/// hundred), so pair tables are materialized in full.
class Matrix {
public:
    Matrix() = default;
    explicit Matrix(std::size_t n, double fill = 0.0) : n_(n), data_(n * n, fill) {}

    std::size_t size() const noexcept { return n_; }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * n_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * n_ + j]; }

    double sum() const noexcept { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    std::span<const double> values() const noexcept { return data_; }

private:
    std::size_t n_ = 0;
    std::vector<double> data_;
};

inline double sigmoid(double x) noexcept {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// sigma'(x) = sigma(x) sigma(-x)
inline double sigmoid_prime(double x) noexcept { return sigmoid(x) * sigmoid(-x); }

namespace detail {

inline void require_finite(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw std::invalid_argument(std::string(what) + " contains a non-finite entry");
        }
    }
}

inline void require_index(std::size_t y, std::size_t n) {
    if (y >= n) {
        throw std::invalid_argument("action index " + std::to_string(y) + " out of range for " +
                                    std::to_string(n) + " actions");
    }
}

}  // namespace detail

inline double log_sum_exp(std::span<const double> x) {
    const double m = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

/// Max-subtracted softmax. Throws on non-finite input or fewer than two logits.
inline Vector softmax(std::span<const double> theta) {
    if (theta.size() < 2) {
        throw std::invalid_argument("softmax needs at least two logits");
    }
    detail::require_finite(theta, "logit vector");
    const double m = *std::max_element(theta.begin(), theta.end());
    Vector p(theta.size());
    double s = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        p[i] = std::exp(theta[i] - m);
        s += p[i];
    }
    for (double& v : p) v /= s;
    return p;
}

inline Vector log_softmax(std::span<const double> theta) {
    if (theta.size() < 2) {
        throw std::invalid_argument("log_softmax needs at least two logits");
    }
    detail::require_finite(theta, "logit vector");
    const double m = *std::max_element(theta.begin(), theta.end());
    double s = 0.0;
    for (double v : theta) s += std::exp(v - m);
    const double log_s = std::log(s);
    Vector out(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) out[i] = (theta[i] - m) - log_s;
    return out;
}

/// KL(p || q) for strictly positive q; terms with p = 0 contribute nothing.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw std::invalid_argument("kl_divergence: length mismatch");
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) kl += p[i] * std::log(p[i] / q[i]);
    }
    return kl;
}

/// A finite-armed bandit with KL regularization toward a softmax reference
/// policy. The reference logits default to zero (uniform reference).
struct BanditInstance {
    Vector rewards;
    double beta = 1.0;
    Vector theta_ref;

    BanditInstance() = default;
    BanditInstance(Vector r, double b, Vector ref = {})
        : rewards(std::move(r)), beta(b), theta_ref(std::move(ref)) {
        if (theta_ref.empty()) theta_ref.assign(rewards.size(), 0.0);
        validate();
    }

    std::size_t action_count() const noexcept { return rewards.size(); }

    void validate() const {
        if (rewards.size() < 2) {
            throw std::invalid_argument("a bandit needs at least two actions");
        }
        detail::require_finite(rewards, "reward vector");
        if (!(beta > 0.0) || !std::isfinite(beta)) {
            throw std::invalid_argument("beta must be a positive finite number");
        }
        if (theta_ref.size() != rewards.size()) {
            throw std::invalid_argument("reference logits must have one entry per action");
        }
        detail::require_finite(theta_ref, "reference logits");
    }

    bool rewards_in_unit_interval() const noexcept {
        return std::all_of(rewards.begin(), rewards.end(),
                           [](double r) { return r >= 0.0 && r <= 1.0; });
    }

    Vector reference_policy() const { return softmax(theta_ref); }
};

/// Unnormalized logits; every probability read goes through softmax.
struct TabularPolicy {
    Vector theta;

    Vector probabilities() const { return softmax(theta); }
};

/// One bandit per context plus a context distribution. All contexts share beta.
struct ContextualBandit {
    std::vector<BanditInstance> contexts;
    Vector context_weights;

    void validate() const {
        if (contexts.empty()) {
            throw std::invalid_argument("a contextual bandit needs at least one context");
        }
        if (context_weights.size() != contexts.size()) {
            throw std::invalid_argument("one context weight per context is required");
        }
        double total = 0.0;
        for (double w : context_weights) {
            if (!(w >= 0.0) || !std::isfinite(w)) {
                throw std::invalid_argument("context weights must be nonnegative");
            }
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-12) {
            throw std::invalid_argument("context weights must sum to 1");
        }
        for (const auto& c : contexts) {
            c.validate();
            if (c.beta != contexts.front().beta) {
                throw std::invalid_argument("all contexts must share beta");
            }
        }
    }
};

namespace detail {

inline void check_pair(std::size_t y, std::size_t y2, std::span<const double> theta,
                       const BanditInstance& inst) {
    if (theta.size() != inst.action_count()) {
        throw std::invalid_argument("logit vector length does not match the action count");
    }
    require_index(y, inst.action_count());
    require_index(y2, inst.action_count());
}

}  // namespace detail

/// log [pi_theta(y) pi_ref(y') / (pi_ref(y) pi_theta(y'))], read off the logits.
inline double policy_log_ratio(std::size_t y, std::size_t y2, std::span<const double> theta,
                               const BanditInstance& inst) {
    detail::check_pair(y, y2, theta, inst);
    if (y == y2) return 0.0;
    return (theta[y] - theta[y2]) - (inst.theta_ref[y] - inst.theta_ref[y2]);
}

/// Reward gap minus the beta-scaled policy log-ratio. Zero for every pair at
/// the regularized optimum.
inline double delta(std::size_t y, std::size_t y2, std::span<const double> theta,
                    const BanditInstance& inst) {
    const double lr = policy_log_ratio(y, y2, theta, inst);
    if (y == y2) return 0.0;
    return inst.rewards[y] - inst.rewards[y2] - inst.beta * lr;
}

/// sigma(r(y) - r(y')) - sigma(beta * log-ratio); the residual that drives the
/// exact DPO gradient.
inline double capital_delta(std::size_t y, std::size_t y2, std::span<const double> theta,
                            const BanditInstance& inst) {
    const double lr = policy_log_ratio(y, y2, theta, inst);
    if (y == y2) return 0.0;
    return sigmoid(inst.rewards[y] - inst.rewards[y2]) - sigmoid(inst.beta * lr);
}

/// Bradley-Terry probability that y is preferred over y'.
inline double bt_preference(std::size_t y, std::size_t y2, const BanditInstance& inst) {
    detail::require_index(y, inst.action_count());
    detail::require_index(y2, inst.action_count());
    return sigmoid(inst.rewards[y] - inst.rewards[y2]);
}

/// Logits of the closed-form optimum pi* ∝ pi_ref exp(r / beta).
inline Vector optimal_logits(const BanditInstance& inst) {
    inst.validate();
    Vector theta(inst.action_count());
    for (std::size_t y = 0; y < theta.size(); ++y) {
        theta[y] = inst.theta_ref[y] + inst.rewards[y] / inst.beta;
    }
    return theta;
}

inline Vector optimal_policy(const BanditInstance& inst) { return softmax(optimal_logits(inst)); }

/// KL(pi_theta || pi_ref), computed in log space.
inline double kl_to_reference(std::span<const double> theta, const BanditInstance& inst) {
    const Vector logp = log_softmax(theta);
    const Vector logq = log_softmax(inst.theta_ref);
    double kl = 0.0;
    for (std::size_t y = 0; y < logp.size(); ++y) {
        kl += std::exp(logp[y]) * (logp[y] - logq[y]);
    }
    return kl;
}

/// E_{pi_theta} r - beta KL(pi_theta || pi_ref).
inline double value(std::span<const double> theta, const BanditInstance& inst) {
    if (theta.size() != inst.action_count()) {
        throw std::invalid_argument("logit vector length does not match the action count");
    }
    const Vector p = softmax(theta);
    double expected = 0.0;
    for (std::size_t y = 0; y < p.size(); ++y) expected += p[y] * inst.rewards[y];
    return expected - inst.beta * kl_to_reference(theta, inst);
}

inline double optimal_value(const BanditInstance& inst) { return value(optimal_logits(inst), inst); }

/// Full delta table, delta(y, y') at [y][y'].
inline Matrix delta_matrix(std::span<const double> theta, const BanditInstance& inst) {
    const std::size_t n = inst.action_count();
    if (theta.size() != n) {
        throw std::invalid_argument("logit vector length does not match the action count");
    }
    Matrix d(n);
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t y2 = 0; y2 < n; ++y2) {
            if (y == y2) continue;
            d(y, y2) = inst.rewards[y] - inst.rewards[y2] -
                       inst.beta * ((theta[y] - theta[y2]) - (inst.theta_ref[y] - inst.theta_ref[y2]));
        }
    }
    return d;
}

inline Matrix capital_delta_matrix(std::span<const double> theta, const BanditInstance& inst) {
    const std::size_t n = inst.action_count();
    if (theta.size() != n) {
        throw std::invalid_argument("logit vector length does not match the action count");
    }
    Matrix d(n);
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t y2 = 0; y2 < n; ++y2) {
            if (y == y2) continue;
            const double lr = (theta[y] - theta[y2]) - (inst.theta_ref[y] - inst.theta_ref[y2]);
            d(y, y2) = sigmoid(inst.rewards[y] - inst.rewards[y2]) - sigmoid(inst.beta * lr);
        }
    }
    return d;
}

}  // namespace dposim
