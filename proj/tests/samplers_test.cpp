#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <random>

#include "dposim/samplers.hpp"
#include "oracles.hpp"

using namespace dposim;

namespace {

BanditInstance random_instance(std::mt19937_64& rng, std::size_t n, double beta) {
    std::normal_distribution<double> nd;
    Vector r(n);
    for (auto& v : r) v = nd(rng);
    return BanditInstance(r, beta);
}

Vector random_theta(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Vector t(n);
    for (auto& v : t) v = nd(rng);
    return t;
}

}  // namespace

TEST(Unif, WeightIsFourOffDiagonal) {
    const BanditInstance inst({0.1, 0.4, 0.9, 0.3}, 2.0);
    const SamplerScheme s = build_unif(inst);
    EXPECT_DOUBLE_EQ(s.total_alpha(), 32.0);
    const Matrix w = s.weighted_joint();
    for (std::size_t y = 0; y < 4; ++y) {
        for (std::size_t y2 = 0; y2 < 4; ++y2) EXPECT_NEAR(w(y, y2), 4.0, 1e-14);
    }
    EXPECT_NEAR(s.components[0].joint.sum(), 2.0, 1e-14);
}

TEST(MixR, WeightedJointIsInverseSigmoidDerivative) {
    std::mt19937_64 rng(11);
    for (int rep = 0; rep < 100; ++rep) {
        const auto inst = random_instance(rng, 2 + rep % 19, 0.5 + 0.05 * rep);
        const auto s = build_mix_r(inst);
        ASSERT_EQ(s.components.size(), 2u);
        EXPECT_NEAR(s.components[0].alpha, std::pow(inst.action_count(), 2.0), 1e-9);
        for (const auto& c : s.components) EXPECT_NEAR(c.joint.sum(), 2.0, 1e-12);
        const Matrix w = s.weighted_joint();
        for (std::size_t y = 0; y < inst.action_count(); ++y) {
            for (std::size_t y2 = 0; y2 < inst.action_count(); ++y2) {
                if (y == y2) continue;
                const auto gap = static_cast<oracle::ld>(inst.rewards[y]) - inst.rewards[y2];
                const double want = static_cast<double>(1.0L / (oracle::sigmoid(gap) * oracle::sigmoid(-gap)));
                EXPECT_NEAR(w(y, y2), want, 1e-10 * want);
            }
        }
    }
}

TEST(MixP, WeightedJointIsInverseSigmoidDerivativeOfLogRatio) {
    std::mt19937_64 rng(12);
    for (int rep = 0; rep < 100; ++rep) {
        auto inst = random_instance(rng, 2 + rep % 19, 0.3 + 0.04 * rep);
        inst.theta_ref = random_theta(rng, inst.action_count());
        const Vector theta = random_theta(rng, inst.action_count());
        const auto s = build_mix_p(theta, inst);
        EXPECT_TRUE(s.depends_on_theta);
        const Matrix w = s.weighted_joint();
        for (std::size_t y = 0; y < inst.action_count(); ++y) {
            for (std::size_t y2 = 0; y2 < inst.action_count(); ++y2) {
                if (y == y2) continue;
                const oracle::ld h = inst.beta * static_cast<oracle::ld>(policy_log_ratio(y, y2, theta, inst));
                const double want = static_cast<double>(1.0L / (oracle::sigmoid(h) * oracle::sigmoid(-h)));
                EXPECT_NEAR(w(y, y2), want, 1e-10 * want);
            }
        }
    }
}

TEST(MixPStar, AcceptanceProbability) {
    // (e + 1/e) / (e^2 + e^-2) = 0.4101542...
    EXPECT_NEAR(rejection_acceptance(2.0), 0.410156, 2e-6);
    const double e = std::numbers::e;
    EXPECT_NEAR(rejection_acceptance(2.0), (e + 1 / e) / (e * e + 1 / (e * e)), 1e-15);
    EXPECT_DOUBLE_EQ(rejection_acceptance(1.0), 1.0);
    EXPECT_DOUBLE_EQ(rejection_acceptance(0.3), 1.0);
    EXPECT_DOUBLE_EQ(rejection_acceptance(-2.0), rejection_acceptance(2.0));
    EXPECT_NEAR(rejection_acceptance(1.0 + 1e-12), 1.0, 1e-11);
}

TEST(MixPStar, ClippedWeightsAndHalfSumAlpha) {
    std::mt19937_64 rng(13);
    for (int rep = 0; rep < 30; ++rep) {
        const auto inst = random_instance(rng, 3 + rep % 6, 2.0);
        const Vector theta = random_theta(rng, inst.action_count());
        const auto s = build_mix_p_star(theta, inst);
        const auto& g = s.components[1];
        double half = 0.0;
        const std::size_t n = inst.action_count();
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t y2 = 0; y2 < n; ++y2) {
                const double h = inst.beta * policy_log_ratio(y, y2, theta, inst);
                half += std::min(std::exp(h) + std::exp(-h), std::numbers::e + 1.0 / std::numbers::e);
            }
        }
        half *= 0.5;
        EXPECT_NEAR(g.alpha, half, 1e-12 * half);
        EXPECT_NEAR(g.joint.sum(), 2.0, 1e-12);
        // Clipping never raises the weight above Mix-P's.
        const Matrix wp = build_mix_p(theta, inst).weighted_joint();
        const Matrix ws = s.weighted_joint();
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t y2 = 0; y2 < n; ++y2) EXPECT_LE(ws(y, y2), wp(y, y2) * (1 + 1e-12));
        }
    }
}

TEST(MixPStar, RejectionFrequenciesMatchClippedJoint) {
    std::mt19937_64 rng(14);
    for (std::size_t n : {2u, 3u, 5u}) {
        // Log-ratios of a few units: a good share of pairs is clipped while
        // the acceptance rate stays workable.
        const auto inst = random_instance(rng, n, 1.0);
        const Vector theta = random_theta(rng, n, 1.5);
        auto s = build_mix_p_star(theta, inst, ComponentPart::GuidedOnly);
        ASSERT_EQ(s.components.size(), 1u);
        Rng draw_rng(99 + n);
        const int draws = 1'000'000;
        Matrix counts(n);
        for (int i = 0; i < draws; ++i) {
            const PairSample p = draw_pair(s, draw_rng);
            counts(p.first, p.second) += 1.0;
        }
        const Matrix& joint = s.components[0].joint;
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t y2 = y + 1; y2 < n; ++y2) {
                const double freq = (counts(y, y2) + counts(y2, y)) / draws;
                const double p = joint(y, y2);  // symmetric joint of the unordered pair
                const double se = std::sqrt(p * (1 - p) / draws);
                EXPECT_NEAR(freq, p, 3 * se + 1e-12) << n << " " << y << " " << y2;
            }
        }
    }
}

TEST(Practical, ReferenceMarginRatio) {
    const double r = 4.0;
    const double guided = std::exp(r) + std::exp(-r);
    EXPECT_NEAR(reward_margin_guided_fraction(r), guided / (2.0 + guided), 1e-15);
    EXPECT_THROW(reward_margin_guided_fraction(0.0), std::invalid_argument);
    const BanditInstance inst({0.1, 0.5, 0.9}, 1.0, {0.2, 0.0, -0.3});
    const Vector theta{0.4, -0.1, 0.2};
    const auto s = build_practical(theta, inst, r);
    EXPECT_NEAR(s.total_alpha(), 18.0, 1e-12);
    EXPECT_NEAR(s.components[1].alpha / s.components[0].alpha, guided / 2.0, 1e-10);
    // Component 2 distributions from their defining products.
    const Vector p = softmax(theta), q = inst.reference_policy();
    Vector win(3), lose(3);
    double zw = 0, zl = 0;
    for (int y = 0; y < 3; ++y) {
        zw += win[y] = std::pow(p[y], 1.5) * std::pow(q[y], -0.5);
        zl += lose[y] = std::sqrt(p[y] * q[y]);
    }
    for (int y = 0; y < 3; ++y) {
        EXPECT_NEAR(s.components[1].first_dist[y], win[y] / zw, 1e-14);
        EXPECT_NEAR(s.components[1].second_dist[y], lose[y] / zl, 1e-14);
        EXPECT_NEAR(s.components[0].first_dist[y], p[y], 1e-15);
    }
}

TEST(GeometricMixture, ArgmaxMatchesProduct) {
    std::mt19937_64 rng(15);
    for (int rep = 0; rep < 1000; ++rep) {
        const std::size_t n = 2 + rep % 30;
        const Vector p1 = softmax(random_theta(rng, n)), p2 = softmax(random_theta(rng, n));
        const double w1 = 0.5 + (rep % 7) * 0.25, w2 = 0.5 + (rep % 5) * 0.3;
        const Vector q = geometric_mixture(p1, p2, w1, w2);
        std::size_t best = 0;
        for (std::size_t y = 1; y < n; ++y) {
            if (std::pow(p1[y], w1) * std::pow(p2[y], w2) > std::pow(p1[best], w1) * std::pow(p2[best], w2)) best = y;
        }
        EXPECT_EQ(static_cast<std::size_t>(std::max_element(q.begin(), q.end()) - q.begin()), best);
    }
    EXPECT_THROW(geometric_mixture(Vector{0.5, 0.5}, Vector{1.0, 0.0}, 1, 1), std::invalid_argument);
}

TEST(DrawPair, ComponentFrequencyFollowsAlpha) {
    const BanditInstance inst({0.0, 1.0, 2.0}, 1.0);
    const auto s = build_mix_r(inst);
    Rng rng(1);
    const int draws = 200'000;
    int second = 0;
    for (int i = 0; i < draws; ++i) second += draw_pair(s, rng).component == 1;
    const double p = s.components[1].alpha / s.total_alpha();
    EXPECT_NEAR(static_cast<double>(second) / draws, p, 4 * std::sqrt(p * (1 - p) / draws));
}

TEST(SamplerSpec, ParseAndErrors) {
    EXPECT_EQ(SamplerSpec::parse("mixr-uniform").name(), "mixr-uniform");
    EXPECT_EQ(SamplerSpec::parse("mixpstar").kind, SchemeKind::MixPStar);
    EXPECT_THROW(SamplerSpec::parse("bogus"), std::invalid_argument);
    EXPECT_THROW(SamplerSpec::parse("unif-guided"), std::invalid_argument);
    EXPECT_THROW(SamplerSpec::parse("mixr-half"), std::invalid_argument);
    const BanditInstance inst({0.0, 1.0}, 1.0);
    const auto s = SamplerSpec::parse("mixr-guided").build(Vector{0.0, 0.0}, inst);
    EXPECT_EQ(s.components.size(), 1u);
}
