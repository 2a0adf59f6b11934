#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gobfeed/experiments.hpp"
#include "gobfeed/inversion.hpp"

using namespace gobfeed;

namespace {

InversionRequest request(std::size_t n = 8) {
    InversionRequest r;
    r.machine_state.temperature_c = 1150;
    r.machine_state.master_speed = 7;
    r.machine_state.n_sections = static_cast<int>(n);
    r.machine_state.firing_order.resize(n);
    for (std::size_t i = 0; i < n; ++i) r.machine_state.firing_order[i] = static_cast<int>(i);
    r.initial_cycle.machine_state = r.machine_state;
    r.initial_cycle.sections.assign(n, nominal_cam(WorkingPoint{}));
    r.targets.assign(n, GobDelta{});
    return r;
}

void expect_valid_cycle(const InversionResult& res) {
    EXPECT_LE(continuity_residual(res.cycle.sections), 1e-9);
    for (const auto& s : res.cycle.sections) {
        EXPECT_GE(s.sp, 0.0);
        EXPECT_GE(s.lp, 0.0);
        EXPECT_GE(s.up, 0.0);
    }
}

// truth dparams for one changed section, realised through the closed form
InversionRequest planted(std::size_t section, const DeadpointDelta& d, std::vector<double>* truth_out = nullptr) {
    auto r = request();
    const std::size_t n = r.initial_cycle.size();
    std::vector<double> truth(2 * n, 0.0);
    truth[prev_section(section, n)] = d.dsp;
    truth[section] = d.dlp;
    truth[n + section] = d.dup;
    for (std::size_t i = 0; i < n; ++i) r.targets[i] = surrogate_response(r.machine_state, section_delta(truth, i));
    if (truth_out) *truth_out = truth;
    return r;
}

}  // namespace

TEST(Objective, PlantedSolutionIsWithinTolerance) {
    std::vector<double> truth;
    const auto r = planted(3, {1.0, -2.0, 4.0}, &truth);
    auto p = r;
    p.params.upper_preference = 0.0;
    const auto v = objective(SurrogateModel{}, truth, p);
    EXPECT_LE(v.data_term, 1e-20);
    EXPECT_LE(v.loss, 0.1 * 0.1);
}

TEST(Objective, ZeroDeltaFixedPoint) {
    const auto r = request();
    const auto v = objective(SurrogateModel{}, std::vector<double>(16, 0.0), r);
    EXPECT_EQ(v.loss, 0.0);
}

TEST(Objective, DoublingOffsetsQuadruplesDataTerm) {
    auto a = request(), b = request();
    for (std::size_t i = 0; i < 8; ++i) {
        a.targets[i] = {1.0 + i, -0.5 * i};
        b.targets[i] = {2 * a.targets[i].dw, 2 * a.targets[i].dl};
    }
    const std::vector<double> zero(16, 0.0);
    EXPECT_NEAR(objective(SurrogateModel{}, zero, b).data_term, 4 * objective(SurrogateModel{}, zero, a).data_term, 1e-12);
}

TEST(Objective, BarrierPenalisesNegativeDeadpoints) {
    const auto r = request();
    std::vector<double> x(16, 0.0);
    x[2] = -(r.initial_cycle.sections[2].lp + 5.0);
    const auto v = objective(ConstantModel{}, x, r);
    EXPECT_GE(v.penalty_term, r.params.barrier_weight * 0.0025);  // (5 mm / 100 mm)^2
}

TEST(Objective, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> d(0, 5);
    auto r = request();
    for (auto& t : r.targets) t = {d(rng), d(rng)};
    const auto base = to_free_parameters(r.initial_cycle);
    for (int k = 0; k < 20; ++k) {
        std::vector<double> x(16), g;
        for (auto& v : x) v = d(rng);
        objective_and_gradient(SurrogateModel{}, x, r, base, g);
        for (std::size_t c = 0; c < 16; ++c) {
            auto hi = x, lo = x;
            hi[c] += 1e-5;
            lo[c] -= 1e-5;
            const double fd = (objective(SurrogateModel{}, hi, r).loss - objective(SurrogateModel{}, lo, r).loss) / 2e-5;
            EXPECT_NEAR(g[c], fd, 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(Gradient, ZeroTargetsConvergeAtStepZero) {
    const auto res = invert_gradient(SurrogateModel{}, request());
    EXPECT_EQ(res.trace.verdict, Verdict::converged);
    EXPECT_EQ(res.trace.steps.size(), 1u);
    EXPECT_EQ(res.trace.accepted_moves, 0u);
    for (double v : res.dparams) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(res.cycle.sections, request().initial_cycle.sections);
}

TEST(Gradient, SingleSectionClosedLoop) {
    auto r = request();
    r.targets[2] = {10.0, 0.0};
    const auto res = invert_gradient(SurrogateModel{}, r);
    ASSERT_EQ(res.trace.verdict, Verdict::converged);
    expect_valid_cycle(res);
    for (std::size_t i = 0; i < 8; ++i) {
        const auto o = surrogate_response(r.machine_state, section_delta(res.dparams, i));
        EXPECT_NEAR(o.dw, i == 2 ? 10.0 : 0.0, 2.0);
        EXPECT_NEAR(o.dl, 0.0, 2.0);
    }
}

TEST(Gradient, NegativeUpperRequestIsInfeasible) {
    auto r = request();
    r.targets[4] = {-500.0, 0.0};
    const auto res = invert_gradient(SurrogateModel{}, r);
    EXPECT_EQ(res.trace.verdict, Verdict::infeasible);
    EXPECT_FALSE(res.trace.reason.empty());
    expect_valid_cycle(res);
}

TEST(Gradient, StartsFromZeroAndLossNeverRises) {
    auto r = request();
    r.targets[1] = {15.0, -6.0};
    r.targets[5] = {-8.0, 3.0};
    const auto res = invert_gradient(SurrogateModel{}, r);
    for (double v : res.trace.steps.front().dparams) EXPECT_EQ(v, 0.0);
    for (std::size_t k = 1; k < res.trace.steps.size(); ++k)
        EXPECT_LE(res.trace.steps[k].loss, res.trace.steps[k - 1].loss);
    EXPECT_GT(res.trace.theta_max, 0.0);
    EXPECT_LE(res.trace.theta_max, r.params.learning_rate);
    EXPECT_FALSE(res.trace.loss_normalization.empty());
}

TEST(Gradient, RecoversPlantedDeltas) {
    std::vector<double> truth;
    const auto r = planted(6, {0.0, 0.0, 3.0}, &truth);
    const auto res = invert_gradient(SurrogateModel{}, r);
    ASSERT_EQ(res.trace.verdict, Verdict::converged);
    EXPECT_NEAR(res.dparams[8 + 6], truth[8 + 6], 1.0);
    EXPECT_NEAR(res.dparams[5], truth[5], 0.5);
    EXPECT_NEAR(res.dparams[6], truth[6], 0.5);
}

TEST(Gradient, ConstantModelStallsAsInfeasible) {
    auto r = request();
    r.targets[0] = {5.0, 0.0};
    const auto res = invert_gradient(ConstantModel{}, r);
    EXPECT_NE(res.trace.verdict, Verdict::converged);
    expect_valid_cycle(res);
}

TEST(Gradient, RejectsBadRequests) {
    auto r = request();
    r.targets.pop_back();
    EXPECT_THROW(invert_gradient(SurrogateModel{}, r), std::invalid_argument);
    r = request();
    r.initial_cycle.sections[3].sp += 1.0;
    EXPECT_THROW(invert_gradient(SurrogateModel{}, r), InvalidCycle);
    r = request();
    r.params.max_steps = 0;
    EXPECT_THROW(invert_gradient(SurrogateModel{}, r), std::invalid_argument);
}

TEST(MonteCarlo, ZeroTargetsNeedNoMoves) {
    auto r = request();
    r.params.kind = OptimizerKind::montecarlo;
    const auto res = invert(SurrogateModel{}, r);
    EXPECT_EQ(res.trace.verdict, Verdict::converged);
    EXPECT_EQ(res.trace.accepted_moves, 0u);
}

TEST(MonteCarlo, AcceptedMovesStrictlyDecrease) {
    auto r = request();
    r.targets[3] = {6.0, 2.0};
    r.params.kind = OptimizerKind::montecarlo;
    const auto res = invert(SurrogateModel{}, r);
    double last = res.trace.steps.front().loss;
    for (std::size_t k = 1; k < res.trace.steps.size(); ++k) {
        const auto& s = res.trace.steps[k];
        if (s.accepted) {
            EXPECT_LT(s.loss, last);
            last = s.loss;
        } else {
            EXPECT_EQ(s.loss, last);
        }
    }
    expect_valid_cycle(res);
}

TEST(MonteCarlo, AgreesWithGradient) {
    auto r = request();
    r.targets[3] = {6.0, 2.0};
    const auto g = invert_gradient(SurrogateModel{}, r);
    r.params.kind = OptimizerKind::montecarlo;
    r.params.max_steps = 20000;
    const auto m = invert(SurrogateModel{}, r);
    ASSERT_EQ(g.trace.verdict, Verdict::converged);
    ASSERT_EQ(m.trace.verdict, Verdict::converged);
    EXPECT_TRUE(within_tolerance(r, g.predictions));
    EXPECT_TRUE(within_tolerance(r, m.predictions));
    const double lo = std::min(g.loss, m.loss), hi = std::max(g.loss, m.loss);
    EXPECT_LE(hi, 10 * lo);
}

TEST(Determinism, BothOptimizersRepeatTraces) {
    auto r = request();
    r.targets[1] = {7.0, -3.0};
    for (auto kind : {OptimizerKind::gradient, OptimizerKind::montecarlo}) {
        r.params.kind = kind;
        r.params.seed = 99;
        const auto a = invert(SurrogateModel{}, r), b = invert(SurrogateModel{}, r);
        ASSERT_EQ(a.trace.steps.size(), b.trace.steps.size());
        for (std::size_t k = 0; k < a.trace.steps.size(); ++k) {
            EXPECT_EQ(a.trace.steps[k].dparams, b.trace.steps[k].dparams);
            EXPECT_EQ(a.trace.steps[k].loss, b.trace.steps[k].loss);
        }
        EXPECT_EQ(a.dparams, b.dparams);
    }
}

TEST(InversionProperty, EmittedCyclesAlwaysContinuous) {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> w(-120, 120), l(-60, 60);
    for (int k = 0; k < 30; ++k) {
        auto r = request();
        r.targets[static_cast<std::size_t>(k % 8)] = {w(rng), l(rng)};
        r.params.kind = k % 3 == 0 ? OptimizerKind::montecarlo : OptimizerKind::gradient;
        r.params.max_steps = 1500;
        r.params.seed = static_cast<std::uint64_t>(k);
        const auto res = invert(SurrogateModel{}, r);
        expect_valid_cycle(res);
        EXPECT_TRUE(validate_cycle(res.cycle).ok() || res.trace.verdict == Verdict::infeasible);
    }
}

TEST(Batch, EmptyListGivesEmptyReport) {
    const auto s = batch_evaluate({}, SurrogateModel{}, surrogate_oracle());
    EXPECT_EQ(s.count, 0u);
    EXPECT_TRUE(s.cases.empty());
}

TEST(Batch, ExactModelReconstructsTransformations) {
    const auto records = flatten(generate_history(PlantConfig{}, 4000));
    CaseOptions opt;
    opt.count = 20;
    const auto cases = transformation_cases(complete_cycles(records), opt, InversionParams{});
    ASSERT_EQ(cases.size(), 20u);
    const auto s = batch_evaluate(cases, SurrogateModel{}, surrogate_oracle());
    EXPECT_GE(s.converged_fraction, 0.95);
    EXPECT_GE(s.oracle_within_3tol_fraction, 0.9);
    ASSERT_TRUE(s.median_upper_error_mm.has_value());
    EXPECT_LE(*s.median_upper_error_mm, 1.0);
    EXPECT_LE(*s.median_junction_error_mm, 0.5);
    for (const auto& c : s.cases) {
        EXPECT_LE(c.continuity_residual, 1e-9);
        EXPECT_GE(c.min_deadpoint, 0.0);
        EXPECT_LE(c.wall_time_s, 10.0);
    }
}

TEST(Sweep, PassesThroughZeroAndIsMonotone) {
    const auto s = stability_sweep(SurrogateModel{}, request(), 2, {-20, 20}, {-10, 10}, 9);
    ASSERT_FALSE(s.weight.truncated());
    bool saw_zero = false;
    for (const auto& p : s.weight.points) {
        if (p.requested == 0.0) {
            saw_zero = true;
            EXPECT_EQ(p.correction.dsp, 0.0);
            EXPECT_EQ(p.correction.dlp, 0.0);
            EXPECT_EQ(p.correction.dup, 0.0);
        }
    }
    EXPECT_TRUE(saw_zero);
    for (std::size_t k = 1; k < s.weight.points.size(); ++k) {
        EXPECT_GT(s.weight.points[k].requested, s.weight.points[k - 1].requested);
        EXPECT_GT(s.weight.points[k].correction.dup, s.weight.points[k - 1].correction.dup);
    }
}

TEST(Sweep, InfeasibleRangeTruncates) {
    const auto s = stability_sweep(SurrogateModel{}, request(), 0, {-600, 50}, {-5, 5}, 14);
    EXPECT_TRUE(s.weight.truncated_below.has_value());
    EXPECT_THROW(stability_sweep(SurrogateModel{}, request(), 9, {-1, 1}, {-1, 1}, 3), std::invalid_argument);
}

TEST(Landscape, ConstantModelIsFlat) {
    auto r = request();
    r.targets[0] = {5, 0};
    r.params.upper_preference = 0.0;
    GridSpec g{{{0, AxisVariable::sp, -5, 5, 11}, {0, AxisVariable::up, -5, 5, 11}}, {}};
    const auto grid = loss_landscape(ConstantModel{{1.0, 1.0}}, r, g);
    ASSERT_EQ(grid.size(), 121u);
    const auto [lo, hi] = std::minmax_element(grid.loss.begin(), grid.loss.end());
    EXPECT_EQ(*lo, *hi);
    EXPECT_TRUE(enumerate_minima(grid).minima.empty());
}

TEST(Landscape, RejectsOversizedGrids) {
    GridSpec g{{{0, AxisVariable::sp, -5, 5, 51}, {0, AxisVariable::up, -5, 5, 11}}, {}};
    EXPECT_THROW(loss_landscape(SurrogateModel{}, request(), g), std::invalid_argument);
    g.axes.pop_back();
    EXPECT_THROW(loss_landscape(SurrogateModel{}, request(), g), std::invalid_argument);
}

TEST(Landscape, GridMinimumNearOptimizerSolution) {
    auto r = request();
    r.targets[0] = {50.0, 0.0};
    const auto res = invert_gradient(SurrogateModel{}, r);
    EXPECT_LT(res.loss, 0.05 * res.trace.steps.front().loss);
    const std::size_t n = 8, a = prev_section(0, n), b = n;
    const double x0 = res.dparams[a], y0 = res.dparams[b];
    GridSpec g{{{0, AxisVariable::sp, x0 - 20, x0 + 20, 30}, {0, AxisVariable::up, y0 - 20, y0 + 20, 30}}, res.dparams};
    const auto grid = loss_landscape(SurrogateModel{}, r, g);
    const auto best = std::min_element(grid.loss.begin(), grid.loss.end()) - grid.loss.begin();
    const auto at = grid.coords(grid.unravel(static_cast<std::size_t>(best)));
    EXPECT_LE(std::abs(at[0] - x0), grid.axes[0].cell());
    EXPECT_LE(std::abs(at[1] - y0), grid.axes[1].cell());
}

TEST(Minima, ConvexGridHasOneMinimum) {
    LossGrid grid;
    grid.axes = {{0, AxisVariable::sp, -3, 3, 13}, {0, AxisVariable::up, -3, 3, 13}};
    for (std::size_t f = 0; f < 169; ++f) {
        const auto c = grid.coords(grid.unravel(f));
        grid.loss.push_back((c[0] - 0.7) * (c[0] - 0.7) + 2 * (c[1] + 1.1) * (c[1] + 1.1) + 0.3 * c[0] * c[1]);
    }
    const auto rep = enumerate_minima(grid);
    ASSERT_EQ(rep.minima.size(), 1u);
    EXPECT_EQ(rep.origin_nearest, 0u);
}

TEST(Minima, ConstantGridHasNone) {
    LossGrid grid;
    grid.axes = {{0, AxisVariable::sp, -3, 3, 5}, {0, AxisVariable::up, -3, 3, 5}, {1, AxisVariable::sp, -3, 3, 5},
                 {1, AxisVariable::up, -3, 3, 5}};
    grid.loss.assign(625, 2.5);
    EXPECT_TRUE(enumerate_minima(grid).minima.empty());
}

TEST(Minima, TwoMinimaFoundInDoubleWell) {
    LossGrid grid;
    grid.axes = {{0, AxisVariable::sp, -2, 2, 21}, {0, AxisVariable::up, -2, 2, 21}};
    for (std::size_t f = 0; f < 441; ++f) {
        const auto c = grid.coords(grid.unravel(f));
        grid.loss.push_back((c[0] * c[0] - 1) * (c[0] * c[0] - 1) + 0.1 * c[0] + c[1] * c[1]);
    }
    const auto rep = enumerate_minima(grid, 1.0);
    ASSERT_EQ(rep.minima.size(), 2u);
    EXPECT_LT(rep.minima[0].location[0], 0.0);  // tilted, left well is deeper
    EXPECT_LE(rep.minima[0].loss, rep.minima[1].loss);
}

TEST(TwoCam, CoarseGridOptimizerMatchesNearestMinimum) {
    const auto req = two_cam_request();
    const auto grid = loss_landscape(SurrogateModel{}, req, two_cam_grid(12));
    const auto minima = enumerate_minima(grid, 10.0);
    ASSERT_FALSE(minima.minima.empty());
    const auto res = invert_gradient(SurrogateModel{}, req);
    EXPECT_EQ(res.trace.verdict, Verdict::converged);
    expect_valid_cycle(res);
}
