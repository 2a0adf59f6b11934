#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gobfeed {

struct MachineState {
    double temperature_c = 1150.0;
    double master_speed = 7.0;      // cuts per section per minute
    double tube_rotation = 20.0;
    double phase_deg = 10.0;
    double tube_height_mm = 100.0;
    std::vector<int> firing_order;  // metadata only
    int n_sections = 8;

    bool operator==(const MachineState&) const = default;
};

struct CamDeadpoints {
    double sp = 0.0;
    double lp = 0.0;
    double up = 0.0;

    bool operator==(const CamDeadpoints&) const = default;
};

struct DeadpointDelta {
    double dsp = 0.0;
    double dlp = 0.0;
    double dup = 0.0;

    bool operator==(const DeadpointDelta&) const = default;
};

struct Cycle {
    MachineState machine_state;
    std::vector<CamDeadpoints> sections;

    std::size_t size() const { return sections.size(); }
    bool operator==(const Cycle&) const = default;
};

enum class ViolationKind { continuity, non_positive_stroke, negative_deadpoint };

inline const char* to_string(ViolationKind k) {
    switch (k) {
    case ViolationKind::continuity: return "continuity";
    case ViolationKind::non_positive_stroke: return "non_positive_stroke";
    case ViolationKind::negative_deadpoint: return "negative_deadpoint";
    }
    return "unknown";
}

struct Violation {
    ViolationKind kind;
    std::size_t section;
    double magnitude;  // mm
};

struct ValidationReport {
    std::vector<Violation> violations;

    bool ok() const { return violations.empty(); }
    std::string describe() const {
        std::string out;
        for (const auto& v : violations) {
            if (!out.empty()) out += "; ";
            out += std::string(to_string(v.kind)) + " at section " + std::to_string(v.section) +
                   " (" + std::to_string(v.magnitude) + " mm)";
        }
        return out.empty() ? "valid" : out;
    }
};

class InvalidCycle : public std::invalid_argument {
public:
    explicit InvalidCycle(ValidationReport report)
        : std::invalid_argument("invalid cycle: " + report.describe()), m_report(std::move(report)) {}
    const ValidationReport& report() const noexcept { return m_report; }

private:
    ValidationReport m_report;
};

inline std::size_t prev_section(std::size_t i, std::size_t n) { return (i + n - 1) % n; }

// Continuity is circular: section 0 starts where section N-1 ended.
// Breaches up to `tolerance` mm are accepted.
inline ValidationReport validate_deadpoints(const std::vector<CamDeadpoints>& sections,
                                            double tolerance = 1e-9) {
    const std::size_t n = sections.size();
    if (n < 2) throw std::invalid_argument("validate_cycle: need at least 2 sections");
    ValidationReport report;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = sections[i];
        const double gap = std::abs(s.sp - sections[prev_section(i, n)].lp);
        if (!(gap <= tolerance)) report.violations.push_back({ViolationKind::continuity, i, gap});
        if (!(s.up > s.lp))
            report.violations.push_back({ViolationKind::non_positive_stroke, i, s.lp - s.up});
        const double lowest = std::min({s.sp, s.lp, s.up});
        if (!(lowest >= 0.0))
            report.violations.push_back({ViolationKind::negative_deadpoint, i, -lowest});
    }
    return report;
}

inline ValidationReport validate_cycle(const Cycle& cycle, double tolerance = 1e-9) {
    return validate_deadpoints(cycle.sections, tolerance);
}

// Largest |SP_i - LP_{i-1}| over the cycle.
inline double continuity_residual(const std::vector<CamDeadpoints>& sections) {
    const std::size_t n = sections.size();
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        worst = std::max(worst, std::abs(sections[i].sp - sections[prev_section(i, n)].lp));
    return worst;
}

// Layout: [junction_0 .. junction_{N-1}, upper_0 .. upper_{N-1}], junction_i = LP_i = SP_{i+1}.
inline std::vector<double> to_free_parameters(const std::vector<CamDeadpoints>& sections) {
    auto report = validate_deadpoints(sections);
    if (!report.ok()) throw InvalidCycle(std::move(report));
    const std::size_t n = sections.size();
    std::vector<double> params(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        params[i] = sections[i].lp;
        params[n + i] = sections[i].up;
    }
    return params;
}

inline std::vector<double> to_free_parameters(const Cycle& cycle) {
    return to_free_parameters(cycle.sections);
}

inline std::vector<CamDeadpoints> from_free_parameters(const std::vector<double>& params,
                                                       std::size_t n_sections) {
    if (n_sections < 2 || params.size() != 2 * n_sections)
        throw std::invalid_argument("from_free_parameters: expected " + std::to_string(2 * n_sections) +
                                    " values, got " + std::to_string(params.size()));
    std::vector<CamDeadpoints> sections(n_sections);
    for (std::size_t i = 0; i < n_sections; ++i) {
        sections[i].sp = params[prev_section(i, n_sections)];
        sections[i].lp = params[i];
        sections[i].up = params[n_sections + i];
    }
    return sections;
}

// Per-section deltas implied by free-parameter deltas.
inline DeadpointDelta section_delta(const std::vector<double>& dparams, std::size_t i) {
    const std::size_t n = dparams.size() / 2;
    return {dparams[prev_section(i, n)], dparams[i], dparams[n + i]};
}

inline DeadpointDelta delta_between(const CamDeadpoints& from, const CamDeadpoints& to) {
    return {to.sp - from.sp, to.lp - from.lp, to.up - from.up};
}

// ---------------------------------------------------------------------------
// Motion profiles

struct RelativeProfile {
    std::string name = "nominal";
    std::vector<std::pair<double, double>> knots;  // (phase fraction, normalized height)
};

struct MotionSample {
    double time_s;
    double height_mm;
};

struct MotionCurve {
    std::vector<MotionSample> samples;
};

inline void validate_profile(const RelativeProfile& p) {
    const auto& k = p.knots;
    if (k.size() < 2) throw std::invalid_argument("profile '" + p.name + "': need at least 2 knots");
    if (k.front().first != 0.0 || k.back().first != 1.0)
        throw std::invalid_argument("profile '" + p.name + "': phase must run from 0 to 1");
    bool hits_low = false, hits_high = false;
    for (std::size_t i = 0; i < k.size(); ++i) {
        if (i > 0 && !(k[i].first > k[i - 1].first))
            throw std::invalid_argument("profile '" + p.name + "': phase not strictly increasing");
        if (!(k[i].second >= 0.0 && k[i].second <= 1.0))
            throw std::invalid_argument("profile '" + p.name + "': height outside [0, 1]");
        hits_low = hits_low || k[i].second == 0.0;
        hits_high = hits_high || k[i].second == 1.0;
    }
    if (!hits_low || !hits_high)
        throw std::invalid_argument("profile '" + p.name + "': must reach both 0 and 1");
}

inline RelativeProfile default_profile() {
    return {"nominal", {{0.0, 0.0}, {0.12, 0.0}, {0.45, 1.0}, {0.6, 1.0}, {1.0, 0.0}}};
}

// Monotone piecewise cubic Hermite (Fritsch-Carlson slopes).
class MonotoneCubic {
public:
    MonotoneCubic(std::vector<double> x, std::vector<double> y) : m_x(std::move(x)), m_y(std::move(y)) {
        const std::size_t n = m_x.size();
        if (n < 2 || m_y.size() != n) throw std::invalid_argument("MonotoneCubic: bad knots");
        std::vector<double> secant(n - 1);
        for (std::size_t i = 0; i + 1 < n; ++i) secant[i] = (m_y[i + 1] - m_y[i]) / (m_x[i + 1] - m_x[i]);
        m_m.assign(n, 0.0);
        m_m[0] = secant[0];
        m_m[n - 1] = secant[n - 2];
        for (std::size_t i = 1; i + 1 < n; ++i) {
            if (secant[i - 1] * secant[i] > 0.0) m_m[i] = 0.5 * (secant[i - 1] + secant[i]);
        }
        for (std::size_t i = 0; i + 1 < n; ++i) {
            if (secant[i] == 0.0) {
                m_m[i] = 0.0;
                m_m[i + 1] = 0.0;
                continue;
            }
            const double a = m_m[i] / secant[i];
            const double b = m_m[i + 1] / secant[i];
            if (a < 0.0) m_m[i] = 0.0;
            if (b < 0.0) m_m[i + 1] = 0.0;
            const double r = a * a + b * b;
            if (r > 9.0) {
                const double t = 3.0 / std::sqrt(r);
                m_m[i] = t * a * secant[i];
                m_m[i + 1] = t * b * secant[i];
            }
        }
    }

    double operator()(double x) const {
        const std::size_t n = m_x.size();
        if (x <= m_x.front()) return m_y.front();
        if (x >= m_x.back()) return m_y.back();
        const auto it = std::upper_bound(m_x.begin(), m_x.end(), x);
        const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(it - m_x.begin()) - 1, n - 2);
        const double h = m_x[i + 1] - m_x[i];
        const double t = (x - m_x[i]) / h;
        const double t2 = t * t, t3 = t2 * t;
        return (2 * t3 - 3 * t2 + 1) * m_y[i] + (t3 - 2 * t2 + t) * h * m_m[i] +
               (-2 * t3 + 3 * t2) * m_y[i + 1] + (t3 - t2) * h * m_m[i + 1];
    }

private:
    std::vector<double> m_x, m_y, m_m;
};

inline double section_duration_s(double master_speed) {
    if (!(master_speed > 0.0)) throw std::invalid_argument("master speed must be positive");
    return 60.0 / master_speed;
}

// The curve starts at SP and ends at LP, where the next section's motion begins.
// Samples are uniform in time plus the knot instants, so the deadpoints are hit exactly.
inline MotionCurve interpolate_profile(const RelativeProfile& profile, const CamDeadpoints& cam,
                                       double cycle_time, std::size_t n_samples) {
    validate_profile(profile);
    if (!(cycle_time > 0.0)) throw std::invalid_argument("interpolate_profile: cycle_time must be > 0");
    if (n_samples < 2) throw std::invalid_argument("interpolate_profile: need n_samples >= 2");
    const double stroke = cam.up - cam.lp;
    if (!(stroke > 0.0)) throw std::invalid_argument("interpolate_profile: degenerate cam (upper <= lower)");

    std::vector<double> xs, ys;
    for (const auto& [p, v] : profile.knots) {
        xs.push_back(p);
        ys.push_back(v);
    }
    ys.front() = (cam.sp - cam.lp) / stroke;
    ys.back() = 0.0;
    const MonotoneCubic shape(xs, ys);

    std::vector<double> phases(n_samples);
    for (std::size_t k = 0; k < n_samples; ++k)
        phases[k] = static_cast<double>(k) / static_cast<double>(n_samples - 1);
    phases.insert(phases.end(), xs.begin(), xs.end());
    std::sort(phases.begin(), phases.end());
    phases.erase(std::unique(phases.begin(), phases.end()), phases.end());

    MotionCurve curve;
    curve.samples.reserve(phases.size());
    for (double p : phases) {
        double h;
        if (p == 0.0) h = cam.sp;
        else if (p == 1.0) h = cam.lp;
        else h = cam.lp + shape(p) * stroke;
        curve.samples.push_back({p * cycle_time, h});
    }
    return curve;
}

// Concatenated trace over all sections; shared boundary instants appear once.
inline MotionCurve cycle_trace(const Cycle& cycle, const RelativeProfile& profile, std::size_t n_samples) {
    const double dt = section_duration_s(cycle.machine_state.master_speed);
    MotionCurve trace;
    for (std::size_t i = 0; i < cycle.size(); ++i) {
        auto part = interpolate_profile(profile, cycle.sections[i], dt, n_samples);
        const double t0 = dt * static_cast<double>(i);
        for (std::size_t k = (i == 0 ? 0 : 1); k < part.samples.size(); ++k)
            trace.samples.push_back({t0 + part.samples[k].time_s, part.samples[k].height_mm});
    }
    return trace;
}

}  // namespace gobfeed
