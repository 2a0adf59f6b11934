#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cam_geometry.hpp"
#include "forward_model.hpp"
#include "plant_surrogate.hpp"

namespace gobfeed {

// Anything that maps feature rows to (dW, dL) and back-propagates a cotangent onto the delta inputs.
template <class M>
concept ResponseModel = requires(const M& m, const std::vector<Features>& rows, const std::vector<GobDelta>& cot) {
    { m.predict(rows) } -> std::convertible_to<std::vector<GobDelta>>;
    { m.delta_vjp(rows, cot) } -> std::convertible_to<std::vector<DeadpointDelta>>;
};

// The closed-form plant itself, used as an exact model.
struct SurrogateModel {
    std::vector<GobDelta> predict(const std::vector<Features>& rows) const {
        std::vector<GobDelta> out(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r)
            out[r] = surrogate_response(rows[r][0], rows[r][1], {rows[r][4], rows[r][5], rows[r][6]});
        return out;
    }
    std::vector<DeadpointDelta> delta_vjp(const std::vector<Features>& rows, const std::vector<GobDelta>& cot) const {
        std::vector<DeadpointDelta> out(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto J = surrogate_jacobian(rows[r][0], rows[r][1], {rows[r][4], rows[r][5], rows[r][6]});
            out[r] = {J[0][0] * cot[r].dw + J[1][0] * cot[r].dl, J[0][1] * cot[r].dw + J[1][1] * cot[r].dl,
                      J[0][2] * cot[r].dw + J[1][2] * cot[r].dl};
        }
        return out;
    }
};

// Untrained stand-in: the same output everywhere.
struct ConstantModel {
    GobDelta value{};
    std::vector<GobDelta> predict(const std::vector<Features>& rows) const {
        return std::vector<GobDelta>(rows.size(), value);
    }
    std::vector<DeadpointDelta> delta_vjp(const std::vector<Features>& rows, const std::vector<GobDelta>&) const {
        return std::vector<DeadpointDelta>(rows.size());
    }
};

static_assert(ResponseModel<TrainedModel>);
static_assert(ResponseModel<SurrogateModel>);
static_assert(ResponseModel<ConstantModel>);

// ---------------------------------------------------------------------------
// Request and parameters

enum class OptimizerKind { gradient, montecarlo };

struct InversionParams {
    double learning_rate = 2.0;  // theta, mm per unit normalized gradient
    std::size_t max_steps = 5000;
    double tolerance_weight_g = 1.0;
    double tolerance_length_mm = 1.0;
    OptimizerKind kind = OptimizerKind::gradient;
    double upper_preference = 0.01;  // on squared junction movement
    double step_size_penalty = 0.0;  // on squared total movement
    double mc_proposal_scale_mm = 2.0;
    std::uint64_t seed = 1;

    double momentum = 0.9;
    double weight_scale_g = 10.0;
    double length_scale_mm = 10.0;
    double deadpoint_scale_mm = 100.0;
    double barrier_weight = 1e3;
    double min_stroke_mm = 1.0;
    std::size_t stall_window = 200;
    double stall_improvement = 1e-6;
    double clamp_tolerance_mm = 1e-6;
    std::size_t settle_steps = 2000;  // steps allowed after reaching tolerance, until the loss stalls; 0 stops at once
};

inline void validate_params(const InversionParams& p) {
    if (!(p.learning_rate > 0.0) || p.max_steps < 1 || !(p.tolerance_weight_g > 0.0) || !(p.tolerance_length_mm > 0.0))
        throw std::invalid_argument("inversion params: need theta > 0, max_steps >= 1, tolerances > 0");
    if (!(p.upper_preference >= 0.0) || !(p.step_size_penalty >= 0.0) || !(p.mc_proposal_scale_mm > 0.0))
        throw std::invalid_argument("inversion params: penalties must be >= 0 and the proposal scale > 0");
    if (!(p.weight_scale_g > 0.0) || !(p.length_scale_mm > 0.0) || !(p.deadpoint_scale_mm > 0.0))
        throw std::invalid_argument("inversion params: normalization scales must be > 0");
    if (!(p.momentum >= 0.0 && p.momentum < 1.0)) throw std::invalid_argument("inversion params: momentum in [0, 1)");
}

struct InversionRequest {
    MachineState machine_state;
    Cycle initial_cycle;
    std::vector<GobDelta> targets;  // per section
    InversionParams params;
};

inline void validate_request(const InversionRequest& r) {
    validate_params(r.params);
    const auto n = r.initial_cycle.size();
    if (n < 2) throw std::invalid_argument("inversion request: need at least 2 sections");
    if (r.targets.size() != n)
        throw std::invalid_argument("inversion request: " + std::to_string(r.targets.size()) + " targets for " +
                                    std::to_string(n) + " sections");
    for (const auto& t : r.targets)
        if (!std::isfinite(t.dw) || !std::isfinite(t.dl)) throw std::invalid_argument("inversion request: non-finite target");
    auto report = validate_cycle(r.initial_cycle);
    if (!report.ok()) throw InvalidCycle(std::move(report));
}

// ---------------------------------------------------------------------------
// Objective over free-parameter deltas (junctions then uppers, relative to the initial cycle)

struct ObjectiveValue {
    double loss = 0.0;
    double data_term = 0.0;
    double penalty_term = 0.0;
    std::vector<GobDelta> predictions;
};

inline std::vector<Features> section_features(const MachineState& ms, const std::vector<double>& dparams) {
    const std::size_t n = dparams.size() / 2;
    std::vector<Features> rows(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto d = section_delta(dparams, i);
        rows[i] = {ms.temperature_c, ms.master_speed, ms.tube_rotation, ms.phase_deg, d.dsp, d.dlp, d.dup};
    }
    return rows;
}

namespace detail {

inline double penalty(const InversionRequest& req, const std::vector<double>& base, const std::vector<double>& x,
                      std::vector<double>* grad) {
    const auto& p = req.params;
    const std::size_t n = x.size() / 2;
    const double s2 = p.deadpoint_scale_mm * p.deadpoint_scale_mm;
    double pen = 0.0;
    for (std::size_t k = 0; k < 2 * n; ++k) {
        double w = p.step_size_penalty / s2;
        if (k < n) w += p.upper_preference / s2;
        pen += w * x[k] * x[k];
        if (grad) (*grad)[k] += 2.0 * w * x[k];
        const double v = base[k] + x[k];
        if (v < 0.0) {
            pen += p.barrier_weight * v * v;
            if (grad) (*grad)[k] += 2.0 * p.barrier_weight * v;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double gap = (base[i] + x[i]) + p.min_stroke_mm - (base[n + i] + x[n + i]);
        if (gap > 0.0) {
            pen += p.barrier_weight * gap * gap;
            if (grad) {
                (*grad)[i] += 2.0 * p.barrier_weight * gap;
                (*grad)[n + i] -= 2.0 * p.barrier_weight * gap;
            }
        }
    }
    return pen;
}

inline double data_term(const InversionRequest& req, const std::vector<GobDelta>& pred, std::vector<GobDelta>* cot) {
    const auto& p = req.params;
    const double sw = p.weight_scale_g, sl = p.length_scale_mm;
    double d = 0.0;
    if (cot) cot->resize(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double ew = (pred[i].dw - req.targets[i].dw) / sw;
        const double el = (pred[i].dl - req.targets[i].dl) / sl;
        d += ew * ew + el * el;
        if (cot) (*cot)[i] = {2.0 * ew / sw, 2.0 * el / sl};
    }
    return d;
}

}  // namespace detail

template <ResponseModel M>
ObjectiveValue objective(const M& model, const std::vector<double>& dparams, const InversionRequest& req) {
    const std::size_t n = req.initial_cycle.size();
    if (dparams.size() != 2 * n) throw std::invalid_argument("objective: expected " + std::to_string(2 * n) + " values");
    const auto base = to_free_parameters(req.initial_cycle);
    ObjectiveValue v;
    v.predictions = model.predict(section_features(req.machine_state, dparams));
    v.data_term = detail::data_term(req, v.predictions, nullptr);
    v.penalty_term = detail::penalty(req, base, dparams, nullptr);
    v.loss = v.data_term + v.penalty_term;
    return v;
}

template <ResponseModel M>
ObjectiveValue objective_and_gradient(const M& model, const std::vector<double>& dparams, const InversionRequest& req,
                                      const std::vector<double>& base, std::vector<double>& grad) {
    const std::size_t n = dparams.size() / 2;
    const auto rows = section_features(req.machine_state, dparams);
    ObjectiveValue v;
    v.predictions = model.predict(rows);
    std::vector<GobDelta> cot;
    v.data_term = detail::data_term(req, v.predictions, &cot);
    const auto g = model.delta_vjp(rows, cot);
    grad.assign(2 * n, 0.0);
    // SP_i is junction i-1, LP_i is junction i, UP_i is upper i.
    for (std::size_t i = 0; i < n; ++i) {
        grad[prev_section(i, n)] += g[i].dsp;
        grad[i] += g[i].dlp;
        grad[n + i] += g[i].dup;
    }
    v.penalty_term = detail::penalty(req, base, dparams, &grad);
    v.loss = v.data_term + v.penalty_term;
    return v;
}

// Loss of many free-parameter vectors in one model call.
template <ResponseModel M>
std::vector<double> objective_batch(const M& model, const std::vector<std::vector<double>>& points,
                                    const InversionRequest& req) {
    const std::size_t n = req.initial_cycle.size();
    const auto base = to_free_parameters(req.initial_cycle);
    std::vector<Features> rows;
    rows.reserve(points.size() * n);
    for (const auto& x : points) {
        auto r = section_features(req.machine_state, x);
        rows.insert(rows.end(), r.begin(), r.end());
    }
    const auto pred = model.predict(rows);
    std::vector<double> out(points.size());
    std::vector<GobDelta> slice(n);
    for (std::size_t k = 0; k < points.size(); ++k) {
        std::copy_n(pred.begin() + static_cast<std::ptrdiff_t>(k * n), n, slice.begin());
        out[k] = detail::data_term(req, slice, nullptr) + detail::penalty(req, base, points[k], nullptr);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trace and result

enum class Verdict { converged, max_steps, infeasible };

inline const char* to_string(Verdict v) {
    switch (v) {
    case Verdict::converged: return "converged";
    case Verdict::max_steps: return "max_steps";
    case Verdict::infeasible: return "infeasible";
    }
    return "unknown";
}

struct TraceStep {
    std::size_t step = 0;
    std::vector<double> dparams;
    std::vector<GobDelta> predictions;
    double loss = 0.0;
    bool accepted = true;
    double learning_rate = 0.0;
};

struct InversionTrace {
    std::vector<TraceStep> steps;
    Verdict verdict = Verdict::max_steps;
    std::string reason;
    double wall_time_s = 0.0;
    double theta_max = 0.0;
    std::size_t accepted_moves = 0;
    std::string loss_normalization;
};

struct InversionResult {
    Cycle cycle;
    std::vector<double> dparams;
    std::vector<GobDelta> predictions;
    double loss = 0.0;
    double clamped_mm = 0.0;
    InversionTrace trace;
};

using StepCallback = std::function<void(const TraceStep&)>;

inline bool within_tolerance(const InversionRequest& req, const std::vector<GobDelta>& pred, double factor = 1.0) {
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!(std::abs(pred[i].dw - req.targets[i].dw) <= factor * req.params.tolerance_weight_g)) return false;
        if (!(std::abs(pred[i].dl - req.targets[i].dl) <= factor * req.params.tolerance_length_mm)) return false;
    }
    return true;
}

inline std::string normalization_note(const InversionParams& p) {
    return "residuals divided by " + std::to_string(p.weight_scale_g) + " g and " + std::to_string(p.length_scale_mm) +
           " mm before squaring; deadpoint penalties use " + std::to_string(p.deadpoint_scale_mm) + " mm";
}

namespace detail {

inline bool stalled(const std::vector<double>& losses, const InversionParams& p) {
    const std::size_t k = losses.size();
    if (k <= p.stall_window) return false;
    return losses[k - 1 - p.stall_window] - losses[k - 1] < p.stall_improvement;
}

// Project onto non-negative deadpoints, rebuild the cycle and the final predictions.
template <ResponseModel M>
void finish(const M& model, const InversionRequest& req, std::vector<double> x, InversionResult& res,
            std::chrono::steady_clock::time_point t0) {
    const auto base = to_free_parameters(req.initial_cycle);
    const std::size_t n = base.size() / 2;
    double clamped = 0.0;
    std::vector<double> abs(2 * n);
    for (std::size_t k = 0; k < 2 * n; ++k) {
        abs[k] = base[k] + x[k];
        if (abs[k] < 0.0) {
            clamped = std::max(clamped, -abs[k]);
            abs[k] = 0.0;
            x[k] = -base[k];
        }
    }
    res.clamped_mm = clamped;
    bool barrier_active = false;
    for (std::size_t i = 0; i < n; ++i)
        barrier_active = barrier_active || base[i] + x[i] + req.params.min_stroke_mm > base[n + i] + x[n + i];
    barrier_active = barrier_active || clamped > 0.0;
    res.cycle.machine_state = req.initial_cycle.machine_state;
    res.cycle.sections = from_free_parameters(abs, n);
    const auto v = objective(model, x, req);
    res.dparams = std::move(x);
    res.predictions = v.predictions;
    res.loss = v.loss;
    if (clamped > req.params.clamp_tolerance_mm) {
        res.trace.verdict = Verdict::infeasible;
        res.trace.reason = "solution needs negative deadpoints (clamped " + std::to_string(clamped) + " mm)";
    } else if (res.trace.verdict == Verdict::converged && !within_tolerance(req, res.predictions)) {
        res.trace.verdict = Verdict::max_steps;
    }
    if (res.trace.verdict == Verdict::max_steps && barrier_active) {
        res.trace.verdict = Verdict::infeasible;
        res.trace.reason = "stopped against a deadpoint or stroke limit above tolerance";
    }
    for (std::size_t i = 0; i < n; ++i)
        if (!(res.cycle.sections[i].up > res.cycle.sections[i].lp)) {
            res.trace.verdict = Verdict::infeasible;
            res.trace.reason = "solution collapses the stroke of section " + std::to_string(i);
        }
    res.trace.loss_normalization = normalization_note(req.params);
    res.trace.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// Momentum descent with backtracking: a step that raises the loss is retried without momentum,
// then with theta halved, so accepted losses never increase. Theta creeps back up to its start value.
template <ResponseModel M>
InversionResult invert_gradient(const M& model, const InversionRequest& req, const StepCallback& on_step = {},
                                std::optional<std::vector<double>> start = std::nullopt) {
    validate_request(req);
    const auto t0 = std::chrono::steady_clock::now();
    const auto& p = req.params;
    const std::size_t n = req.initial_cycle.size();
    const auto base = to_free_parameters(req.initial_cycle);
    std::vector<double> x = start.value_or(std::vector<double>(2 * n, 0.0));
    if (x.size() != 2 * n) throw std::invalid_argument("invert_gradient: start has the wrong length");
    std::vector<double> g, g_new, v(2 * n, 0.0), x_new(2 * n), v_new(2 * n);
    double theta = p.learning_rate, theta_max = 0.0;

    InversionResult res;
    auto cur = objective_and_gradient(model, x, req, base, g);
    std::vector<double> losses{cur.loss};
    auto record = [&](std::size_t step, bool accepted) {
        TraceStep s{step, x, cur.predictions, cur.loss, accepted, theta};
        if (on_step) on_step(s);
        res.trace.steps.push_back(std::move(s));
    };
    record(0, true);

    res.trace.verdict = Verdict::max_steps;
    std::optional<std::size_t> reached;  // first step inside tolerance
    for (std::size_t step = 1;; ++step) {
        if (within_tolerance(req, cur.predictions)) {
            if (!reached) reached = step;
            if (step - *reached >= p.settle_steps || cur.data_term < 1e-14 || detail::stalled(losses, p)) {
                res.trace.verdict = Verdict::converged;
                break;
            }
        } else if (detail::stalled(losses, p)) {
            res.trace.verdict = Verdict::infeasible;
            res.trace.reason = "loss stalled above tolerance";
            break;
        }
        if (step >= p.max_steps) break;
        bool accepted = false;
        bool with_momentum = p.momentum > 0.0;
        ObjectiveValue trial;
        while (theta > 1e-12) {
            const double mu = with_momentum ? p.momentum : 0.0;
            for (std::size_t k = 0; k < 2 * n; ++k) {
                v_new[k] = mu * v[k] - theta * g[k];
                x_new[k] = x[k] + v_new[k];
            }
            trial = objective_and_gradient(model, x_new, req, base, g_new);
            if (trial.loss <= cur.loss) {
                accepted = true;
                break;
            }
            if (with_momentum) {
                with_momentum = false;
                std::fill(v.begin(), v.end(), 0.0);
            } else {
                theta *= 0.5;
            }
        }
        if (!accepted) {
            if (within_tolerance(req, cur.predictions)) {
                res.trace.verdict = Verdict::converged;
            } else {
                res.trace.verdict = Verdict::infeasible;
                res.trace.reason = "no descent direction left above tolerance";
            }
            break;
        }
        theta_max = std::max(theta_max, theta);
        x.swap(x_new);
        v.swap(v_new);
        g.swap(g_new);
        cur = std::move(trial);
        losses.push_back(cur.loss);
        record(step, true);
        ++res.trace.accepted_moves;
        if (with_momentum) theta = std::min(theta * 1.1, p.learning_rate);
    }
    if (res.trace.verdict == Verdict::max_steps && within_tolerance(req, cur.predictions))
        res.trace.verdict = Verdict::converged;
    res.trace.theta_max = theta_max;
    detail::finish(model, req, x, res, t0);
    return res;
}

// Seeded random search: Gaussian moves of one section's three deadpoints, kept only when the loss drops.
template <ResponseModel M>
InversionResult invert_montecarlo(const M& model, const InversionRequest& req, const StepCallback& on_step = {}) {
    validate_request(req);
    const auto t0 = std::chrono::steady_clock::now();
    const auto& p = req.params;
    const std::size_t n = req.initial_cycle.size();
    std::vector<double> x(2 * n, 0.0), x_new;
    std::mt19937_64 rng(p.seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    double scale = p.mc_proposal_scale_mm;
    const double scale_max = 8.0 * p.mc_proposal_scale_mm, scale_min = 1e-3 * p.mc_proposal_scale_mm;

    InversionResult res;
    auto cur = objective(model, x, req);
    std::vector<double> losses{cur.loss};
    auto record = [&](std::size_t step, bool accepted) {
        TraceStep s{step, x, cur.predictions, cur.loss, accepted, scale};
        if (on_step) on_step(s);
        res.trace.steps.push_back(std::move(s));
    };
    record(0, true);

    res.trace.verdict = Verdict::max_steps;
    std::optional<std::size_t> reached;  // first step inside tolerance
    for (std::size_t step = 1;; ++step) {
        if (within_tolerance(req, cur.predictions)) {
            if (!reached) reached = step;
            if (step - *reached >= p.settle_steps || cur.data_term < 1e-14 || detail::stalled(losses, p)) {
                res.trace.verdict = Verdict::converged;
                break;
            }
        } else if (detail::stalled(losses, p)) {
            res.trace.verdict = Verdict::infeasible;
            res.trace.reason = "loss stalled above tolerance";
            break;
        }
        if (step >= p.max_steps) break;
        const std::size_t i = pick(rng);
        x_new = x;
        x_new[prev_section(i, n)] += scale * unit(rng);
        x_new[i] += scale * unit(rng);
        x_new[n + i] += scale * unit(rng);
        auto trial = objective(model, x_new, req);
        const bool accepted = trial.loss < cur.loss;
        if (accepted) {
            x.swap(x_new);
            cur = std::move(trial);
            scale = std::min(scale * 1.3, scale_max);
            ++res.trace.accepted_moves;
        } else {
            scale = std::max(scale * 0.97, scale_min);
        }
        losses.push_back(cur.loss);
        record(step, accepted);
    }
    if (res.trace.verdict == Verdict::max_steps && within_tolerance(req, cur.predictions))
        res.trace.verdict = Verdict::converged;
    res.trace.theta_max = p.learning_rate;
    detail::finish(model, req, x, res, t0);
    return res;
}

template <ResponseModel M>
InversionResult invert(const M& model, const InversionRequest& req, const StepCallback& on_step = {}) {
    return req.params.kind == OptimizerKind::montecarlo ? invert_montecarlo(model, req, on_step)
                                                        : invert_gradient(model, req, on_step);
}

// ---------------------------------------------------------------------------
// Batch evaluation

using PlantOracle = std::function<GobDelta(const MachineState&, const DeadpointDelta&)>;

inline PlantOracle surrogate_oracle() {
    return [](const MachineState& ms, const DeadpointDelta& d) { return surrogate_response(ms, d); };
}

struct EvalCase {
    InversionRequest request;
    std::optional<std::vector<double>> true_dparams;  // historically applied free-parameter deltas
    std::optional<std::size_t> transformed_section;
    std::vector<GobDelta> initial_gobs;  // absolute (W, L) per section before the change, optional
};

struct CaseResult {
    std::size_t index = 0;
    Verdict verdict = Verdict::max_steps;
    std::size_t steps = 0;
    double wall_time_s = 0.0;
    std::vector<GobDelta> residuals;         // prediction - target, model
    std::vector<GobDelta> oracle_residuals;  // plant response - target
    double max_abs_residual_w = 0.0, max_abs_residual_l = 0.0;
    double max_relative_error_w = 0.0, max_relative_error_l = 0.0;  // vs the requested change
    double max_final_relative_error_w = 0.0, max_final_relative_error_l = 0.0;  // vs final absolute W, L
    bool oracle_within_3tol = false;
    std::optional<double> upper_error_mm;
    std::vector<double> junction_errors_mm;
    double continuity_residual = 0.0;
    double min_deadpoint = 0.0;
    std::vector<double> dparams;
    Cycle cycle;
};

struct BatchSummary {
    std::size_t count = 0;
    double converged_fraction = 0.0;
    double oracle_within_3tol_fraction = 0.0;
    std::optional<double> median_upper_error_mm;
    std::optional<double> median_junction_error_mm;
    double wall_time_median_s = 0.0, wall_time_p90_s = 0.0, wall_time_max_s = 0.0;
    std::vector<CaseResult> cases;
};

inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

template <ResponseModel M>
BatchSummary batch_evaluate(const std::vector<EvalCase>& cases, const M& model, const PlantOracle& oracle) {
    BatchSummary sum;
    sum.count = cases.size();
    if (cases.empty()) return sum;
    std::vector<double> ups, juncs, times;
    std::size_t conv = 0, inside = 0;
    for (std::size_t c = 0; c < cases.size(); ++c) {
        const auto& ec = cases[c];
        const auto& req = ec.request;
        const auto res = invert(model, req);
        CaseResult r;
        r.index = c;
        r.verdict = res.trace.verdict;
        r.steps = res.trace.steps.size();
        r.wall_time_s = res.trace.wall_time_s;
        r.dparams = res.dparams;
        r.cycle = res.cycle;
        r.continuity_residual = continuity_residual(res.cycle.sections);
        r.min_deadpoint = std::numeric_limits<double>::infinity();
        for (const auto& s : res.cycle.sections) r.min_deadpoint = std::min({r.min_deadpoint, s.sp, s.lp, s.up});
        const std::size_t n = req.initial_cycle.size();
        bool ok3 = true;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& t = req.targets[i];
            const GobDelta e{res.predictions[i].dw - t.dw, res.predictions[i].dl - t.dl};
            r.residuals.push_back(e);
            r.max_abs_residual_w = std::max(r.max_abs_residual_w, std::abs(e.dw));
            r.max_abs_residual_l = std::max(r.max_abs_residual_l, std::abs(e.dl));
            if (t.dw != 0.0) r.max_relative_error_w = std::max(r.max_relative_error_w, std::abs(e.dw / t.dw));
            if (t.dl != 0.0) r.max_relative_error_l = std::max(r.max_relative_error_l, std::abs(e.dl / t.dl));
            if (i < ec.initial_gobs.size()) {
                const double wf = ec.initial_gobs[i].dw + t.dw, lf = ec.initial_gobs[i].dl + t.dl;
                if (wf != 0.0) r.max_final_relative_error_w = std::max(r.max_final_relative_error_w, std::abs(e.dw / wf));
                if (lf != 0.0) r.max_final_relative_error_l = std::max(r.max_final_relative_error_l, std::abs(e.dl / lf));
            }
            const auto o = oracle(req.machine_state, section_delta(res.dparams, i));
            const GobDelta oe{o.dw - t.dw, o.dl - t.dl};
            r.oracle_residuals.push_back(oe);
            ok3 = ok3 && std::abs(oe.dw) <= 3.0 * req.params.tolerance_weight_g &&
                  std::abs(oe.dl) <= 3.0 * req.params.tolerance_length_mm;
        }
        r.oracle_within_3tol = ok3;
        if (ec.true_dparams && ec.transformed_section) {
            const auto& truth = *ec.true_dparams;
            const std::size_t i = *ec.transformed_section;
            r.upper_error_mm = std::abs(res.dparams[n + i] - truth[n + i]);
            ups.push_back(*r.upper_error_mm);
            for (std::size_t j : {prev_section(i, n), i}) {
                r.junction_errors_mm.push_back(std::abs(res.dparams[j] - truth[j]));
                juncs.push_back(r.junction_errors_mm.back());
            }
        }
        conv += r.verdict == Verdict::converged;
        inside += ok3;
        times.push_back(r.wall_time_s);
        sum.cases.push_back(std::move(r));
    }
    sum.converged_fraction = static_cast<double>(conv) / static_cast<double>(cases.size());
    sum.oracle_within_3tol_fraction = static_cast<double>(inside) / static_cast<double>(cases.size());
    if (!ups.empty()) sum.median_upper_error_mm = quantile(ups, 0.5);
    if (!juncs.empty()) sum.median_junction_error_mm = quantile(juncs, 0.5);
    sum.wall_time_median_s = quantile(times, 0.5);
    sum.wall_time_p90_s = quantile(times, 0.9);
    sum.wall_time_max_s = *std::max_element(times.begin(), times.end());
    return sum;
}

// ---------------------------------------------------------------------------
// Stability sweeps

struct SweepPoint {
    double requested = 0.0;
    Verdict verdict = Verdict::max_steps;
    DeadpointDelta correction;  // the swept section's dSP, dLP, dUP
    std::vector<double> dparams;
};

struct SweepCurve {
    std::string axis;  // "weight" or "length"
    std::vector<SweepPoint> points;  // ascending in requested change
    std::optional<double> truncated_below;  // first failing request on the negative side
    std::optional<double> truncated_above;
    bool truncated() const { return truncated_below.has_value() || truncated_above.has_value(); }
};

struct SweepResult {
    std::size_t section = 0;
    SweepCurve weight;
    SweepCurve length;
};

template <ResponseModel M>
SweepCurve sweep_axis(const M& model, const InversionRequest& base, std::size_t section, const Range& range,
                      std::size_t n_points, bool weight_axis) {
    SweepCurve curve;
    curve.axis = weight_axis ? "weight" : "length";
    std::vector<double> req_values;
    if (n_points <= 1 || range.lo == range.hi) {
        req_values.push_back(range.lo);
    } else {
        for (std::size_t k = 0; k < n_points; ++k)
            req_values.push_back(range.lo + (range.hi - range.lo) * static_cast<double>(k) / static_cast<double>(n_points - 1));
    }
    if (std::find(req_values.begin(), req_values.end(), 0.0) == req_values.end() && range.lo <= 0.0 && range.hi >= 0.0) {
        req_values.push_back(0.0);
        std::sort(req_values.begin(), req_values.end());
    }
    auto solve = [&](double value) {
        InversionRequest r = base;
        std::fill(r.targets.begin(), r.targets.end(), GobDelta{});
        if (weight_axis) r.targets[section].dw = value;
        else r.targets[section].dl = value;
        const auto res = invert_gradient(model, r);
        return SweepPoint{value, res.trace.verdict, section_delta(res.dparams, section), res.dparams};
    };
    // Walk outward from the request nearest to zero; stop a side at its first failure.
    std::size_t anchor = 0;
    for (std::size_t k = 1; k < req_values.size(); ++k)
        if (std::abs(req_values[k]) < std::abs(req_values[anchor])) anchor = k;
    std::vector<SweepPoint> below, above;
    for (std::size_t k = anchor + 1; k-- > 0;) {
        auto pt = solve(req_values[k]);
        if (pt.verdict != Verdict::converged) {
            curve.truncated_below = pt.requested;
            break;
        }
        below.push_back(std::move(pt));
    }
    for (std::size_t k = anchor + 1; k < req_values.size(); ++k) {
        auto pt = solve(req_values[k]);
        if (pt.verdict != Verdict::converged) {
            curve.truncated_above = pt.requested;
            break;
        }
        above.push_back(std::move(pt));
    }
    std::reverse(below.begin(), below.end());
    curve.points = std::move(below);
    for (auto& p : above) curve.points.push_back(std::move(p));
    return curve;
}

template <ResponseModel M>
SweepResult stability_sweep(const M& model, const InversionRequest& base, std::size_t section, const Range& weight_range,
                            const Range& length_range, std::size_t n_points) {
    validate_request(base);
    if (section >= base.initial_cycle.size()) throw std::invalid_argument("stability_sweep: no such section");
    SweepResult out;
    out.section = section;
    out.weight = sweep_axis(model, base, section, weight_range, n_points, true);
    out.length = sweep_axis(model, base, section, length_range, n_points, false);
    return out;
}

// ---------------------------------------------------------------------------
// Loss landscapes

enum class AxisVariable { sp, up };

struct GridAxis {
    std::size_t section = 0;
    AxisVariable variable = AxisVariable::up;
    double lo = -10.0, hi = 10.0;
    std::size_t count = 21;

    std::size_t param_index(std::size_t n) const {
        return variable == AxisVariable::sp ? prev_section(section, n) : n + section;
    }
    double value(std::size_t k) const {
        return count == 1 ? lo : lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(count - 1);
    }
    double cell() const { return count == 1 ? 0.0 : (hi - lo) / static_cast<double>(count - 1); }
    std::string label() const {
        return std::string(variable == AxisVariable::sp ? "dsp" : "dup") + "_" + std::to_string(section);
    }
};

struct GridSpec {
    std::vector<GridAxis> axes;
    std::vector<double> base_dparams;  // the other free parameters; empty means zero
};

struct LossGrid {
    std::vector<GridAxis> axes;
    std::vector<double> base_dparams;
    std::vector<double> loss;  // row-major, last axis fastest
    std::vector<std::vector<double>> path;  // optimizer path projected on the axes

    std::size_t size() const { return loss.size(); }
    std::vector<std::size_t> unravel(std::size_t flat) const {
        std::vector<std::size_t> idx(axes.size());
        for (std::size_t a = axes.size(); a-- > 0;) {
            idx[a] = flat % axes[a].count;
            flat /= axes[a].count;
        }
        return idx;
    }
    std::vector<double> coords(const std::vector<std::size_t>& idx) const {
        std::vector<double> c(axes.size());
        for (std::size_t a = 0; a < axes.size(); ++a) c[a] = axes[a].value(idx[a]);
        return c;
    }
};

inline constexpr std::size_t max_grid_evaluations = 10'000'000;

template <ResponseModel M>
LossGrid loss_landscape(const M& model, const InversionRequest& req, const GridSpec& spec,
                        const std::vector<std::vector<double>>& optimizer_path = {}) {
    validate_request(req);
    const std::size_t n = req.initial_cycle.size();
    if (spec.axes.size() != 2 && spec.axes.size() != 4)
        throw std::invalid_argument("loss_landscape: grid must have 2 or 4 axes");
    std::size_t total = 1;
    std::vector<std::size_t> pidx;
    for (const auto& a : spec.axes) {
        if (a.count < 1 || a.count > 50) throw std::invalid_argument("loss_landscape: per-axis count must lie in [1, 50]");
        if (a.section >= n) throw std::invalid_argument("loss_landscape: axis section out of range");
        if (!(a.hi >= a.lo)) throw std::invalid_argument("loss_landscape: empty axis range");
        pidx.push_back(a.param_index(n));
        total *= a.count;
    }
    for (std::size_t a = 0; a < pidx.size(); ++a)
        for (std::size_t b = a + 1; b < pidx.size(); ++b)
            if (pidx[a] == pidx[b]) throw std::invalid_argument("loss_landscape: two axes drive the same free parameter");
    if (total > max_grid_evaluations)
        throw std::invalid_argument("loss_landscape: " + std::to_string(total) + " evaluations exceed the limit of " +
                                    std::to_string(max_grid_evaluations) + "; reduce the per-axis counts");
    std::vector<double> base = spec.base_dparams.empty() ? std::vector<double>(2 * n, 0.0) : spec.base_dparams;
    if (base.size() != 2 * n) throw std::invalid_argument("loss_landscape: base has the wrong length");

    LossGrid grid;
    grid.axes = spec.axes;
    grid.base_dparams = base;
    grid.loss.resize(total);
    const std::size_t chunk = 4096;
    std::vector<std::vector<double>> pts;
    for (std::size_t s = 0; s < total; s += chunk) {
        const std::size_t m = std::min(chunk, total - s);
        pts.assign(m, base);
        for (std::size_t k = 0; k < m; ++k) {
            const auto idx = grid.unravel(s + k);
            for (std::size_t a = 0; a < pidx.size(); ++a) pts[k][pidx[a]] = spec.axes[a].value(idx[a]);
        }
        const auto l = objective_batch(model, pts, req);
        std::copy(l.begin(), l.end(), grid.loss.begin() + static_cast<std::ptrdiff_t>(s));
    }
    for (const auto& x : optimizer_path) {
        std::vector<double> c;
        for (auto i : pidx) c.push_back(x.at(i));
        grid.path.push_back(std::move(c));
    }
    return grid;
}

struct GridMinimum {
    std::vector<std::size_t> index;
    std::vector<double> location;
    double loss = 0.0;
};

struct MinimaReport {
    std::vector<GridMinimum> minima;  // ascending loss
    std::optional<std::size_t> origin_nearest;
};

inline double origin_distance(const std::vector<double>& location, double scale) {
    double d = 0.0;
    for (double v : location) d += (v / scale) * (v / scale);
    return std::sqrt(d);
}

// A cell is a minimum iff its loss is strictly below every existing axis neighbour.
inline MinimaReport enumerate_minima(const LossGrid& grid, double deadpoint_scale_mm = 10.0) {
    MinimaReport rep;
    const std::size_t dims = grid.axes.size();
    std::vector<std::size_t> stride(dims, 1);
    for (std::size_t a = dims; a-- > 1;) stride[a - 1] = stride[a] * grid.axes[a].count;
    for (std::size_t f = 0; f < grid.size(); ++f) {
        const auto idx = grid.unravel(f);
        const double v = grid.loss[f];
        bool is_min = true;
        bool has_neighbour = false;
        for (std::size_t a = 0; a < dims && is_min; ++a) {
            if (idx[a] > 0) {
                has_neighbour = true;
                is_min = v < grid.loss[f - stride[a]];
            }
            if (is_min && idx[a] + 1 < grid.axes[a].count) {
                has_neighbour = true;
                is_min = v < grid.loss[f + stride[a]];
            }
        }
        if (is_min && has_neighbour) rep.minima.push_back({idx, grid.coords(idx), v});
    }
    std::stable_sort(rep.minima.begin(), rep.minima.end(),
                     [](const GridMinimum& a, const GridMinimum& b) { return a.loss < b.loss; });
    for (std::size_t k = 0; k < rep.minima.size(); ++k)
        if (!rep.origin_nearest || origin_distance(rep.minima[k].location, deadpoint_scale_mm) <
                                       origin_distance(rep.minima[*rep.origin_nearest].location, deadpoint_scale_mm))
            rep.origin_nearest = k;
    return rep;
}

struct Basin {
    std::vector<double> location;  // on the grid axes
    std::vector<double> dparams;
    double loss = 0.0;
    Verdict verdict = Verdict::max_steps;
    std::size_t grid_minima = 0;  // raw grid minima that descend here
    std::vector<GobDelta> predictions;
};

struct BasinReport {
    std::vector<Basin> basins;  // ascending loss
    std::optional<std::size_t> origin_nearest;
};

// Descends from each grid minimum and merges end points closer than one cell on every axis.
template <ResponseModel M>
BasinReport consolidate_minima(const M& model, const InversionRequest& req, const LossGrid& grid,
                               const MinimaReport& minima, std::size_t max_seeds = 64, double polish_tolerance = 1e-3) {
    const std::size_t n = req.initial_cycle.size();
    std::vector<std::size_t> pidx;
    for (const auto& a : grid.axes) pidx.push_back(a.param_index(n));
    InversionRequest polish = req;
    polish.params.tolerance_weight_g = polish_tolerance;
    polish.params.tolerance_length_mm = polish_tolerance;
    polish.params.stall_improvement = 1e-10;
    BasinReport rep;
    for (std::size_t k = 0; k < std::min(max_seeds, minima.minima.size()); ++k) {
        std::vector<double> start = grid.base_dparams;
        for (std::size_t a = 0; a < pidx.size(); ++a) start[pidx[a]] = minima.minima[k].location[a];
        const auto res = invert_gradient(model, polish, {}, start);
        std::vector<double> loc;
        for (auto i : pidx) loc.push_back(res.dparams[i]);
        bool merged = false;
        for (auto& b : rep.basins) {
            bool close = true;
            for (std::size_t a = 0; a < loc.size(); ++a)
                close = close && std::abs(loc[a] - b.location[a]) <= grid.axes[a].cell();
            if (close) {
                ++b.grid_minima;
                merged = true;
                break;
            }
        }
        if (!merged) rep.basins.push_back({loc, res.dparams, res.loss, res.trace.verdict, 1, res.predictions});
    }
    std::stable_sort(rep.basins.begin(), rep.basins.end(), [](const Basin& a, const Basin& b) { return a.loss < b.loss; });
    for (std::size_t k = 0; k < rep.basins.size(); ++k)
        if (!rep.origin_nearest || origin_distance(rep.basins[k].location, 1.0) <
                                       origin_distance(rep.basins[*rep.origin_nearest].location, 1.0))
            rep.origin_nearest = k;
    return rep;
}

// Two-section scenario: +10 g on section 0, -10 g on section 1, lengths held.
inline InversionRequest two_cam_request(const MachineState& state = {}, double junction_mm = 65.0,
                                        double upper_mm = 150.0) {
    InversionRequest r;
    r.machine_state = state;
    r.machine_state.n_sections = 2;
    r.machine_state.firing_order = {0, 1};
    r.initial_cycle.machine_state = r.machine_state;
    r.initial_cycle.sections = {{junction_mm, junction_mm, upper_mm}, {junction_mm, junction_mm, upper_mm}};
    r.targets = {{10.0, 0.0}, {-10.0, 0.0}};
    return r;
}

inline GridSpec two_cam_grid(std::size_t count = 30) {
    GridSpec g;
    g.axes = {{0, AxisVariable::sp, -70.0, 35.0, count},
              {0, AxisVariable::up, -95.0, 25.0, count},
              {1, AxisVariable::sp, -70.0, 35.0, count},
              {1, AxisVariable::up, -70.0, 20.0, count}};
    return g;
}

}  // namespace gobfeed
