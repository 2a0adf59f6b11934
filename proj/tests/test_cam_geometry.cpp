#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "gobfeed/cam_geometry.hpp"

using namespace gobfeed;

namespace {

Cycle two_section(double sp0, double lp0, double up0, double sp1, double lp1, double up1) {
    Cycle c;
    c.machine_state.n_sections = 2;
    c.sections = {{sp0, lp0, up0}, {sp1, lp1, up1}};
    return c;
}

Cycle random_cycle(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> j(0.0, 120.0), s(1.0, 100.0);
    std::vector<double> p(2 * n);
    for (std::size_t i = 0; i < n; ++i) p[i] = j(rng);
    for (std::size_t i = 0; i < n; ++i) p[n + i] = p[i] + s(rng);
    Cycle c;
    c.machine_state.n_sections = static_cast<int>(n);
    c.sections = from_free_parameters(p, n);
    return c;
}

}  // namespace

TEST(ValidateCycle, ContinuousTwoSectionCycleIsClean) {
    EXPECT_TRUE(validate_cycle(two_section(10, 8, 40, 8, 10, 38)).ok());
}

TEST(ValidateCycle, ReportsContinuityBreachWithMagnitude) {
    const auto r = validate_cycle(two_section(10, 8, 40, 8.5, 10, 38));
    ASSERT_EQ(r.violations.size(), 1u);
    EXPECT_EQ(r.violations[0].kind, ViolationKind::continuity);
    EXPECT_EQ(r.violations[0].section, 1u);
    EXPECT_NEAR(r.violations[0].magnitude, 0.5, 1e-12);
}

TEST(ValidateCycle, ReportsFlatStroke) {
    std::vector<double> p(16, 50.0);
    for (int i = 0; i < 8; ++i) p[8 + i] = 120.0;
    p[8 + 3] = p[3];
    Cycle c;
    c.sections = from_free_parameters(p, 8);
    const auto r = validate_cycle(c);
    ASSERT_EQ(r.violations.size(), 1u);
    EXPECT_EQ(r.violations[0].kind, ViolationKind::non_positive_stroke);
    EXPECT_EQ(r.violations[0].section, 3u);
}

TEST(ValidateCycle, ReportsNegativeDeadpoints) {
    const auto r = validate_cycle(two_section(-1, 8, 40, 8, -1, 38));
    bool negative = false;
    for (const auto& v : r.violations) negative = negative || v.kind == ViolationKind::negative_deadpoint;
    EXPECT_TRUE(negative);
}

TEST(ValidateCycle, RejectsSingleSection) {
    Cycle c;
    c.sections = {{1, 1, 5}};
    EXPECT_THROW(validate_cycle(c), std::invalid_argument);
}

TEST(FreeParameters, EightSectionsGiveSixteen) {
    std::mt19937_64 rng(3);
    EXPECT_EQ(to_free_parameters(random_cycle(rng, 8)).size(), 16u);
}

TEST(FreeParameters, TwoSectionLayoutIsJunctionsThenUppers) {
    const auto p = to_free_parameters(two_section(10, 8, 40, 8, 10, 38));
    EXPECT_EQ(p, (std::vector<double>{8, 10, 40, 38}));
    const auto s = from_free_parameters({8, 10, 40, 38}, 2);
    EXPECT_EQ(s, two_section(10, 8, 40, 8, 10, 38).sections);
}

TEST(FreeParameters, ZeroJunctions) {
    const auto s = from_free_parameters({0, 0, 0, 5, 6, 7}, 3);
    Cycle c;
    c.sections = s;
    EXPECT_TRUE(validate_cycle(c).ok());
    for (const auto& cam : s) {
        EXPECT_EQ(cam.sp, 0.0);
        EXPECT_EQ(cam.lp, 0.0);
    }
}

TEST(FreeParameters, BadStrokeIsEmittedButFlagged) {
    Cycle c;
    c.sections = from_free_parameters({10, 10, 5, 20}, 2);
    EXPECT_FALSE(validate_cycle(c).ok());
}

TEST(FreeParameters, WrongLengthThrows) {
    EXPECT_THROW(from_free_parameters({1, 2, 3}, 2), std::invalid_argument);
}

TEST(FreeParameters, InvalidCycleCarriesReport) {
    try {
        to_free_parameters(two_section(10, 8, 40, 9, 10, 38));
        FAIL() << "expected InvalidCycle";
    } catch (const InvalidCycle& e) {
        EXPECT_FALSE(e.report().ok());
    }
}

TEST(FreeParametersProperty, RoundTripIsExact) {
    std::mt19937_64 rng(11);
    for (int k = 0; k < 100; ++k) {
        const std::size_t n = 2 + static_cast<std::size_t>(k % 11);
        const auto c = random_cycle(rng, n);
        const auto p = to_free_parameters(c);
        EXPECT_EQ(from_free_parameters(p, n), c.sections);
        EXPECT_EQ(to_free_parameters(from_free_parameters(p, n)), p);
        EXPECT_EQ(continuity_residual(c.sections), 0.0);
    }
}

TEST(FreeParametersProperty, SectionDeltaMatchesCamDifference) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> d(0.0, 3.0);
    for (int k = 0; k < 50; ++k) {
        const auto c = random_cycle(rng, 6);
        auto p = to_free_parameters(c);
        std::vector<double> dp(p.size());
        for (auto& v : dp) v = d(rng);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] += dp[i];
        const auto moved = from_free_parameters(p, 6);
        for (std::size_t i = 0; i < 6; ++i) {
            const auto a = section_delta(dp, i), b = delta_between(c.sections[i], moved[i]);
            EXPECT_NEAR(a.dsp, b.dsp, 1e-12);
            EXPECT_NEAR(a.dlp, b.dlp, 1e-12);
            EXPECT_NEAR(a.dup, b.dup, 1e-12);
        }
    }
}

TEST(Profile, KnotExampleHitsDeadpoints) {
    const RelativeProfile prof{"example", {{0, 0.2}, {0.3, 0}, {0.7, 1}, {1, 0.25}}};
    const auto curve = interpolate_profile(prof, {10, 8, 40}, 8.0, 200);
    double lo = 1e9, hi = -1e9;
    for (const auto& s : curve.samples) {
        lo = std::min(lo, s.height_mm);
        hi = std::max(hi, s.height_mm);
    }
    EXPECT_NEAR(curve.samples.front().height_mm, 10.0, 1e-9);
    EXPECT_NEAR(lo, 8.0, 1e-9);
    EXPECT_NEAR(hi, 40.0, 1e-9);
    // hand evaluation of LP + v (UP - LP) at the inner knots
    for (const auto& s : curve.samples) {
        if (std::abs(s.time_s - 0.3 * 8.0) < 1e-12) {
            EXPECT_NEAR(s.height_mm, 8.0 + 0.0 * 32.0, 1e-9);
        }
        if (std::abs(s.time_s - 0.7 * 8.0) < 1e-12) {
            EXPECT_NEAR(s.height_mm, 8.0 + 1.0 * 32.0, 1e-9);
        }
    }
}

TEST(Profile, UnitScaleReproducesNormalizedShape) {
    const auto prof = default_profile();
    const auto curve = interpolate_profile(prof, {0, 0, 1}, 1.0, 101);
    for (const auto& [p, v] : prof.knots) {
        auto it = std::find_if(curve.samples.begin(), curve.samples.end(),
                               [&](const MotionSample& s) { return std::abs(s.time_s - p) < 1e-12; });
        ASSERT_NE(it, curve.samples.end());
        EXPECT_NEAR(it->height_mm, v, 1e-12);
    }
}

TEST(Profile, TimesIncreaseAndHeightsStayInEnvelope) {
    std::mt19937_64 rng(9);
    for (int k = 0; k < 30; ++k) {
        const auto c = random_cycle(rng, 8);
        for (const auto& cam : c.sections) {
            const auto curve = interpolate_profile(default_profile(), cam, 8.0, 64);
            for (std::size_t s = 1; s < curve.samples.size(); ++s) {
                EXPECT_GT(curve.samples[s].time_s, curve.samples[s - 1].time_s);
            }
            for (const auto& s : curve.samples) {
                EXPECT_GE(s.height_mm, std::min(cam.lp, cam.sp) - 1e-9);
                EXPECT_LE(s.height_mm, std::max(cam.up, cam.sp) + 1e-9);
            }
        }
    }
}

TEST(Profile, ConsecutiveSectionsJoinWithoutJump) {
    std::mt19937_64 rng(21);
    const auto c = random_cycle(rng, 8);
    for (std::size_t i = 0; i < 8; ++i) {
        const auto a = interpolate_profile(default_profile(), c.sections[i], 8.0, 50);
        const auto b = interpolate_profile(default_profile(), c.sections[(i + 1) % 8], 8.0, 50);
        EXPECT_NEAR(a.samples.back().height_mm, b.samples.front().height_mm, 1e-9);
    }
    const auto trace = cycle_trace(c, default_profile(), 50);
    for (std::size_t s = 1; s < trace.samples.size(); ++s) EXPECT_GT(trace.samples[s].time_s, trace.samples[s - 1].time_s);
}

TEST(Profile, DegenerateCamRejected) {
    EXPECT_THROW(interpolate_profile(default_profile(), {5, 5, 5}, 8.0, 10), std::invalid_argument);
    EXPECT_THROW(interpolate_profile(default_profile(), {5, 5, 9}, 0.0, 10), std::invalid_argument);
    EXPECT_THROW(interpolate_profile(default_profile(), {5, 5, 9}, 1.0, 1), std::invalid_argument);
}

TEST(Profile, MalformedProfilesRejected) {
    EXPECT_THROW(validate_profile({"x", {{0, 0}, {1, 0.5}}}), std::invalid_argument);
    EXPECT_THROW(validate_profile({"x", {{0, 0}, {0.5, 1}, {0.4, 0}, {1, 0}}}), std::invalid_argument);
    EXPECT_THROW(validate_profile({"x", {{0.1, 0}, {0.5, 1}, {1, 0}}}), std::invalid_argument);
}
