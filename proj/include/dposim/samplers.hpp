#pragma once

// Pair samplers. A scheme is a list of components; each component is a pair of
// action distributions (first, second), its symmetrized joint over ordered
// pairs, and a sampling coefficient alpha that multiplies its loss gradient.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dposim/core.hpp"
#include "dposim/random.hpp"

namespace dposim {

enum class SchemeKind { Unif, MixR, MixP, MixPStar, Practical, Custom };

inline const char* to_string(SchemeKind k) {
    switch (k) {
        case SchemeKind::Unif: return "unif";
        case SchemeKind::MixR: return "mixr";
        case SchemeKind::MixP: return "mixp";
        case SchemeKind::MixPStar: return "mixpstar";
        case SchemeKind::Practical: return "practical";
        case SchemeKind::Custom: return "custom";
    }
    return "?";
}

struct SamplerComponent {
    Vector first_dist;
    Vector second_dist;
    double alpha = 0.0;
    /// joint(y, y') = first(y) second(y') + first(y') second(y); sums to 2.
    Matrix joint;
    /// Probability of keeping an ordered draw (y, y'); absent means always kept.
    std::optional<Matrix> acceptance;

    static SamplerComponent from_product(Vector first, Vector second, double alpha) {
        if (first.size() != second.size() || first.size() < 2) {
            throw std::invalid_argument("sampler distributions must have equal length >= 2");
        }
        if (!(alpha > 0.0) || !std::isfinite(alpha)) {
            throw std::invalid_argument("sampling coefficient must be positive and finite");
        }
        SamplerComponent c;
        const std::size_t n = first.size();
        c.joint = Matrix(n);
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t y2 = 0; y2 < n; ++y2) {
                c.joint(y, y2) = first[y] * second[y2] + first[y2] * second[y];
            }
        }
        c.first_dist = std::move(first);
        c.second_dist = std::move(second);
        c.alpha = alpha;
        return c;
    }
};

struct SamplerScheme {
    SchemeKind kind = SchemeKind::Custom;
    std::vector<SamplerComponent> components;
    bool depends_on_theta = false;

    double total_alpha() const {
        double s = 0.0;
        for (const auto& c : components) s += c.alpha;
        return s;
    }

    /// sum_c alpha_c joint_c: the per-pair weight multiplying capital delta in
    /// the exact gradient.
    Matrix weighted_joint() const {
        if (components.empty()) throw std::invalid_argument("scheme has no components");
        const std::size_t n = components.front().joint.size();
        Matrix w(n);
        for (const auto& c : components) {
            for (std::size_t y = 0; y < n; ++y) {
                for (std::size_t y2 = 0; y2 < n; ++y2) w(y, y2) += c.alpha * c.joint(y, y2);
            }
        }
        return w;
    }

    std::size_t action_count() const {
        return components.empty() ? 0 : components.front().first_dist.size();
    }
};

/// Which part of a two-component mixed scheme to keep. Used for ablations.
enum class ComponentPart { Both, UniformOnly, GuidedOnly };

namespace detail {

inline Vector uniform_dist(std::size_t n) { return Vector(n, 1.0 / static_cast<double>(n)); }

inline SamplerScheme select_part(SamplerScheme s, ComponentPart part) {
    if (part == ComponentPart::Both) return s;
    if (s.components.size() != 2) {
        throw std::invalid_argument("component ablation needs a two-component scheme");
    }
    s.components.erase(s.components.begin() + (part == ComponentPart::UniformOnly ? 1 : 0));
    s.kind = SchemeKind::Custom;
    return s;
}

inline double cosh_sum(double x) { return std::exp(x) + std::exp(-x); }

// e + 1/e: the clipped pair weight at |z| = 1.
inline const double kClipWeight = std::numbers::e + 1.0 / std::numbers::e;

}  // namespace detail

inline SamplerScheme build_unif(const BanditInstance& inst) {
    inst.validate();
    const std::size_t n = inst.action_count();
    const double a = static_cast<double>(n);
    SamplerScheme s;
    s.kind = SchemeKind::Unif;
    s.components.push_back(
        SamplerComponent::from_product(detail::uniform_dist(n), detail::uniform_dist(n), 2.0 * a * a));
    return s;
}

/// Uniform pairs plus reward-tilted pairs (∝ e^{r}, ∝ e^{-r}). Needs the true
/// rewards, so it is a simulation-only scheme.
inline SamplerScheme build_mix_r(const BanditInstance& inst, ComponentPart part = ComponentPart::Both) {
    inst.validate();
    const std::size_t n = inst.action_count();
    const double a = static_cast<double>(n);
    Vector neg(n);
    for (std::size_t y = 0; y < n; ++y) neg[y] = -inst.rewards[y];
    double alpha2 = 0.0;
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t y2 = 0; y2 < n; ++y2) alpha2 += std::exp(inst.rewards[y] - inst.rewards[y2]);
    }
    SamplerScheme s;
    s.kind = SchemeKind::MixR;
    s.components.push_back(
        SamplerComponent::from_product(detail::uniform_dist(n), detail::uniform_dist(n), a * a));
    s.components.push_back(SamplerComponent::from_product(softmax(inst.rewards), softmax(neg), alpha2));
    return detail::select_part(std::move(s), part);
}

/// Uniform pairs plus policy-difference-tilted pairs
/// (∝ e^{beta(theta - theta_ref)}, ∝ e^{beta(theta_ref - theta)}).
inline SamplerScheme build_mix_p(std::span<const double> theta, const BanditInstance& inst,
                                 ComponentPart part = ComponentPart::Both) {
    inst.validate();
    const std::size_t n = inst.action_count();
    if (theta.size() != n) throw std::invalid_argument("logit vector length does not match the action count");
    detail::require_finite(theta, "logit vector");
    const double a = static_cast<double>(n);
    Vector up(n), down(n);
    for (std::size_t y = 0; y < n; ++y) {
        up[y] = inst.beta * (theta[y] - inst.theta_ref[y]);
        down[y] = -up[y];
    }
    double alpha2 = 0.0;
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t y2 = 0; y2 < n; ++y2) alpha2 += std::exp(up[y] - up[y2]);
    }
    SamplerScheme s;
    s.kind = SchemeKind::MixP;
    s.depends_on_theta = true;
    s.components.push_back(
        SamplerComponent::from_product(detail::uniform_dist(n), detail::uniform_dist(n), a * a));
    s.components.push_back(SamplerComponent::from_product(softmax(up), softmax(down), alpha2));
    return detail::select_part(std::move(s), part);
}

/// Acceptance probability of a pair with absolute scaled log-ratio psi under
/// the Mix-P* rejection step.
inline double rejection_acceptance(double psi) {
    psi = std::abs(psi);
    if (psi <= 1.0) return 1.0;
    return detail::kClipWeight / detail::cosh_sum(psi);
}

/// Mix-P with the guided component's pair weight capped at e + 1/e.
///
/// The guided component keeps the Mix-P first/second distributions for
/// sampling, carries the per-draw acceptance table, and its joint is replaced
/// by the clipped joint min{e^psi + e^-psi, e + 1/e} / alpha2, where
/// alpha2 = 1/2 sum min{...}. That is both the expected post-rejection joint and
/// the joint built from clipped log-ratios z = clamp(beta * log-ratio, -1, 1).
inline SamplerScheme build_mix_p_star(std::span<const double> theta, const BanditInstance& inst,
                                      ComponentPart part = ComponentPart::Both) {
    SamplerScheme s = build_mix_p(theta, inst);
    s.kind = SchemeKind::MixPStar;
    const std::size_t n = inst.action_count();
    SamplerComponent& guided = s.components[1];
    Matrix clipped(n);
    Matrix accept(n, 1.0);
    double alpha2 = 0.0;
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t y2 = 0; y2 < n; ++y2) {
            const double h = inst.beta * ((theta[y] - theta[y2]) - (inst.theta_ref[y] - inst.theta_ref[y2]));
            const double z = std::clamp(h, -1.0, 1.0);
            clipped(y, y2) = detail::cosh_sum(z);
            accept(y, y2) = rejection_acceptance(h);
            alpha2 += clipped(y, y2);
        }
    }
    alpha2 *= 0.5;
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t y2 = 0; y2 < n; ++y2) clipped(y, y2) /= alpha2;
    }
    guided.joint = std::move(clipped);
    guided.acceptance = std::move(accept);
    guided.alpha = alpha2;
    return detail::select_part(std::move(s), part);
}

/// Fraction of draws assigned to the guided component when the mixing ratio
/// is 2 : (e^{r_max} + e^{-r_max}).
inline double reward_margin_guided_fraction(double r_max) {
    if (!(r_max > 0.0) || !std::isfinite(r_max)) {
        throw std::invalid_argument("reward margin must be positive and finite");
    }
    const double guided = detail::cosh_sum(r_max);
    return guided / (2.0 + guided);
}

/// Posterior-weighted practical sampler: (pi_theta, pi_theta) mixed with
/// (∝ pi_theta^{3/2} pi_ref^{-1/2}, ∝ pi_theta^{1/2} pi_ref^{1/2}). The two
/// alphas follow the reward-margin ratio and add up to total_alpha
/// (default 2A^2, the uniform scheme's scale).
inline SamplerScheme build_practical(std::span<const double> theta, const BanditInstance& inst, double r_max,
                                     double total_alpha = 0.0) {
    inst.validate();
    const std::size_t n = inst.action_count();
    if (theta.size() != n) throw std::invalid_argument("logit vector length does not match the action count");
    const double guided_fraction = reward_margin_guided_fraction(r_max);
    if (total_alpha == 0.0) total_alpha = 2.0 * static_cast<double>(n * n);
    if (!(total_alpha > 0.0)) throw std::invalid_argument("total sampling coefficient must be positive");

    const Vector logp = log_softmax(theta);
    const Vector logref = log_softmax(inst.theta_ref);
    Vector win_logits(n), lose_logits(n);
    for (std::size_t y = 0; y < n; ++y) {
        win_logits[y] = 1.5 * logp[y] - 0.5 * logref[y];
        lose_logits[y] = 0.5 * logp[y] + 0.5 * logref[y];
    }
    const Vector on_policy = softmax(theta);
    SamplerScheme s;
    s.kind = SchemeKind::Practical;
    s.depends_on_theta = true;
    s.components.push_back(
        SamplerComponent::from_product(on_policy, on_policy, total_alpha * (1.0 - guided_fraction)));
    s.components.push_back(SamplerComponent::from_product(softmax(win_logits), softmax(lose_logits),
                                                          total_alpha * guided_fraction));
    return s;
}

/// q ∝ p1^{w1} p2^{w2}, formed by mixing log-probabilities.
inline Vector geometric_mixture(std::span<const double> p1, std::span<const double> p2, double w1, double w2) {
    if (p1.size() != p2.size() || p1.size() < 2) {
        throw std::invalid_argument("geometric_mixture: distributions must have equal length >= 2");
    }
    Vector logits(p1.size());
    for (std::size_t i = 0; i < p1.size(); ++i) {
        if (!(p1[i] > 0.0) || !(p2[i] > 0.0)) {
            throw std::invalid_argument("geometric_mixture: entries must be strictly positive");
        }
        logits[i] = w1 * std::log(p1[i]) + w2 * std::log(p2[i]);
    }
    return softmax(logits);
}

/// One drawn pair. `first` is the draw from the component's first sampler.
struct PairSample {
    std::size_t first = 0;
    std::size_t second = 0;
    std::size_t component = 0;
    std::uint64_t rejections = 0;
};

/// Component probability proportional to alpha; then independent draws from
/// its first/second samplers, redrawn until the acceptance test passes.
inline PairSample draw_pair(const SamplerScheme& scheme, Rng& rng) {
    if (scheme.components.empty()) throw std::invalid_argument("scheme has no components");
    std::vector<double> weights;
    weights.reserve(scheme.components.size());
    for (const auto& c : scheme.components) weights.push_back(c.alpha);
    PairSample out;
    out.component = draw_categorical(weights, rng);
    const SamplerComponent& c = scheme.components[out.component];
    for (;;) {
        out.first = draw_categorical(c.first_dist, rng);
        out.second = draw_categorical(c.second_dist, rng);
        if (!c.acceptance) break;
        const double keep = (*c.acceptance)(out.first, out.second);
        if (keep >= 1.0 || uniform01(rng) < keep) break;
        ++out.rejections;
    }
    return out;
}

/// Sampler selection by name: unif, mixr, mixp, mixpstar, practical, and the
/// ablations mixr-uniform / mixr-guided / mixp-uniform / mixp-guided.
struct SamplerSpec {
    SchemeKind kind = SchemeKind::Unif;
    ComponentPart part = ComponentPart::Both;
    double r_max = 1.0;
    double total_alpha = 0.0;

    std::string name() const {
        std::string n = to_string(kind);
        if (part == ComponentPart::UniformOnly) n += "-uniform";
        if (part == ComponentPart::GuidedOnly) n += "-guided";
        return n;
    }

    static SamplerSpec parse(const std::string& text) {
        SamplerSpec s;
        std::string base = text;
        if (const auto dash = text.find('-'); dash != std::string::npos) {
            base = text.substr(0, dash);
            const std::string suffix = text.substr(dash + 1);
            if (suffix == "uniform") {
                s.part = ComponentPart::UniformOnly;
            } else if (suffix == "guided") {
                s.part = ComponentPart::GuidedOnly;
            } else {
                throw std::invalid_argument("unknown sampler variant: " + text);
            }
        }
        if (base == "unif") s.kind = SchemeKind::Unif;
        else if (base == "mixr") s.kind = SchemeKind::MixR;
        else if (base == "mixp") s.kind = SchemeKind::MixP;
        else if (base == "mixpstar") s.kind = SchemeKind::MixPStar;
        else if (base == "practical") s.kind = SchemeKind::Practical;
        else throw std::invalid_argument("unknown sampler: " + text);
        const bool mixed = s.kind == SchemeKind::MixR || s.kind == SchemeKind::MixP || s.kind == SchemeKind::MixPStar;
        if (s.part != ComponentPart::Both && !mixed) {
            throw std::invalid_argument("component ablation is only defined for mixed samplers: " + text);
        }
        return s;
    }

    bool depends_on_theta() const {
        return kind == SchemeKind::MixP || kind == SchemeKind::MixPStar || kind == SchemeKind::Practical;
    }

    SamplerScheme build(std::span<const double> theta, const BanditInstance& inst) const {
        switch (kind) {
            case SchemeKind::Unif: return build_unif(inst);
            case SchemeKind::MixR: return build_mix_r(inst, part);
            case SchemeKind::MixP: return build_mix_p(theta, inst, part);
            case SchemeKind::MixPStar: return build_mix_p_star(theta, inst, part);
            case SchemeKind::Practical: return build_practical(theta, inst, r_max, total_alpha);
            case SchemeKind::Custom: break;
        }
        throw std::invalid_argument("custom schemes cannot be built from a name");
    }
};

}  // namespace dposim
