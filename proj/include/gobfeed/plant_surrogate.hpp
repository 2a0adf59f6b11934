#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cam_geometry.hpp"

namespace gobfeed {

struct GobDelta {
    double dw = 0.0;  // g
    double dl = 0.0;  // mm

    bool operator==(const GobDelta&) const = default;
};

// Closed-form plant response. Constants are fixed and documented in docs/formats.md.
namespace surrogate {
inline constexpr double beta = 0.35;
inline constexpr double t_ref = 1150.0;
inline constexpr double ms_ref = 7.0;
inline constexpr double a1 = 2.5, a2 = 1.4, a3 = 0.03;
inline constexpr double b1 = 1.1, b2 = 0.7, b3 = 0.02;

inline double viscosity_gain(double temperature_c) { return std::exp(beta * (temperature_c - t_ref) / 100.0); }
inline double flow_factor(double master_speed) { return ms_ref / master_speed; }
}  // namespace surrogate

inline GobDelta surrogate_response(double temperature_c, double master_speed, const DeadpointDelta& d) {
    const double g = surrogate::viscosity_gain(temperature_c);
    const double s = surrogate::flow_factor(master_speed);
    using namespace surrogate;
    return {s * g * (a1 * d.dlp + a2 * (d.dup - d.dlp)) + a3 * d.dlp * d.dup,
            g * (b1 * d.dup + b2 * (d.dlp - d.dsp)) + b3 * d.dup * d.dsp};
}

inline GobDelta surrogate_response(const MachineState& state, const DeadpointDelta& d) {
    return surrogate_response(state.temperature_c, state.master_speed, d);
}

// Rows: (dW, dL); columns: (dSP, dLP, dUP).
inline std::array<std::array<double, 3>, 2> surrogate_jacobian(double temperature_c, double master_speed,
                                                               const DeadpointDelta& d) {
    const double g = surrogate::viscosity_gain(temperature_c);
    const double s = surrogate::flow_factor(master_speed);
    using namespace surrogate;
    return {{{0.0, s * g * (a1 - a2) + a3 * d.dup, s * g * a2 + a3 * d.dlp},
             {-g * b2 + b3 * d.dup, g * b2, g * b1 + b3 * d.dsp}}};
}

// ---------------------------------------------------------------------------
// Plant configuration

struct WorkingPoint {
    double weight_g = 400.0;
    double length_mm = 240.0;
    double dwell = 1.0;
    double nominal_junction_mm = 65.0;
    double nominal_upper_mm = 150.0;
};

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

struct PlantConfig {
    std::string line_id = "line-1";
    int n_sections = 8;
    std::vector<WorkingPoint> working_points = {
        {350.0, 220.0, 0.30, 62.0, 140.0},
        {420.0, 240.0, 0.30, 65.0, 148.0},
        {510.0, 265.0, 0.25, 68.0, 155.0},
        {600.0, 290.0, 0.15, 70.0, 160.0},
    };
    double noise_sigma_weight = 1.5;
    double noise_sigma_length = 1.0;
    double dirty_fraction = 0.02;
    double outlier_fraction = 0.002;  // undeclared sensor spikes, left for the cluster filter
    std::uint64_t seed = 1;

    Range temperature_c{1150.0, 1250.0};
    double temperature_jitter_c = 3.0;  // per adjustment segment
    std::vector<double> master_speeds{6.0, 6.5, 7.0, 7.5, 8.0};
    Range tube_rotation{10.0, 30.0};
    Range phase_deg{0.0, 20.0};
    double tube_gain_g_per_mm = 4.0;

    double run_length_mean_cycles = 3000.0;   // 0: one production run, no change-overs
    double adjustment_mean_cycles = 500.0;    // 0: no operator adjustments within a run
    double min_segment_cycles = 200.0;
    double multi_weight_fraction = 0.7;
    double junction_offset_mm = 12.0;
    double upper_offset_mm = 25.0;
    int sensor_hold_cycles = 20;  // the historian logs the latest gob snapshot; snapshots refresh at this period
    double start_timestamp = 1682899200.0;  // 2023-05-01T00:00:00Z
};

inline void validate_config(const PlantConfig& c) {
    auto fail = [](const std::string& m) { throw std::invalid_argument("plant config: " + m); };
    if (c.working_points.empty()) fail("no working points");
    double dwell = 0.0;
    for (const auto& wp : c.working_points) {
        if (!(wp.weight_g > 0.0) || !(wp.length_mm > 0.0)) fail("working point weight/length must be positive");
        if (!(wp.dwell >= 0.0)) fail("dwell fractions must be non-negative");
        if (!(wp.nominal_junction_mm >= 0.0) || !(wp.nominal_upper_mm > wp.nominal_junction_mm))
            fail("nominal cam must satisfy 0 <= junction < upper");
        dwell += wp.dwell;
    }
    if (std::abs(dwell - 1.0) > 1e-9) fail("dwell fractions must sum to 1");
    if (!(c.noise_sigma_weight >= 0.0) || !(c.noise_sigma_length >= 0.0)) fail("sigmas must be >= 0");
    if (!(c.dirty_fraction >= 0.0 && c.dirty_fraction <= 0.1)) fail("dirty_fraction must lie in [0, 0.1]");
    if (!(c.outlier_fraction >= 0.0 && c.outlier_fraction < 0.1)) fail("outlier_fraction must lie in [0, 0.1)");
    if (c.n_sections < 2 || c.n_sections > 12) fail("n_sections must lie in [2, 12]");
    if (c.master_speeds.empty()) fail("no master speeds");
    for (double ms : c.master_speeds)
        if (!(ms >= 5.0 && ms <= 10.0)) fail("master speed outside [5, 10]");
    if (!(c.temperature_c.lo >= 1000.0 && c.temperature_c.hi <= 1350.0 && c.temperature_c.lo <= c.temperature_c.hi))
        fail("temperature range outside [1000, 1350]");
    if (c.tube_rotation.lo > c.tube_rotation.hi || c.phase_deg.lo > c.phase_deg.hi) fail("empty range");
    if (!(c.tube_gain_g_per_mm > 0.0)) fail("tube gain must be positive");
    if (c.run_length_mean_cycles < 0.0 || c.adjustment_mean_cycles < 0.0) fail("segment means must be >= 0");
    if (!(c.min_segment_cycles >= 1.0)) fail("min_segment_cycles must be >= 1");
    if (!(c.multi_weight_fraction >= 0.0 && c.multi_weight_fraction <= 1.0)) fail("multi_weight_fraction in [0, 1]");
    if (c.sensor_hold_cycles < 1) fail("sensor_hold_cycles must be >= 1");
}

// ---------------------------------------------------------------------------
// Measurements and plant state

struct GobMeasurement {
    double weight_g = 0.0;   // NaN when missing
    double length_mm = 0.0;  // NaN when missing
    int section_index = 0;
    std::int64_t cycle_id = 0;
    double timestamp = 0.0;
    bool dirty = false;
};

struct PlantState {
    Cycle cycle;
    WorkingPoint working_point;
    double sigma_weight = 0.0;
    double sigma_length = 0.0;
    std::int64_t cycle_id = 0;
    double timestamp = 0.0;
};

inline CamDeadpoints nominal_cam(const WorkingPoint& wp) {
    return {wp.nominal_junction_mm, wp.nominal_junction_mm, wp.nominal_upper_mm};
}

inline GobDelta deterministic_gob(const MachineState& ms, const WorkingPoint& wp, const CamDeadpoints& cam) {
    const auto r = surrogate_response(ms, delta_between(nominal_cam(wp), cam));
    return {wp.weight_g + r.dw, wp.length_mm + r.dl};
}

inline std::vector<GobMeasurement> measure_with(const PlantState& ps, std::mt19937_64& rng) {
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<GobMeasurement> out;
    out.reserve(ps.cycle.size());
    for (std::size_t i = 0; i < ps.cycle.size(); ++i) {
        const auto det = deterministic_gob(ps.cycle.machine_state, ps.working_point, ps.cycle.sections[i]);
        GobMeasurement m;
        m.weight_g = det.dw + ps.sigma_weight * unit(rng);
        m.length_mm = det.dl + ps.sigma_length * unit(rng);
        m.section_index = static_cast<int>(i);
        m.cycle_id = ps.cycle_id;
        m.timestamp = ps.timestamp;
        out.push_back(m);
    }
    return out;
}

inline std::vector<GobMeasurement> measure(const PlantState& ps, std::uint64_t noise_seed) {
    std::mt19937_64 rng(noise_seed);
    return measure_with(ps, rng);
}

inline double cycle_duration_s(const MachineState& ms) {
    return section_duration_s(ms.master_speed) * static_cast<double>(ms.n_sections);
}

inline std::vector<int> identity_order(int n) {
    std::vector<int> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    return v;
}

// Live plant: single owner, one step at a time.
class Plant {
public:
    Plant(const PlantConfig& config, std::size_t working_point, MachineState state, std::uint64_t seed)
        : m_rng(seed) {
        validate_config(config);
        if (working_point >= config.working_points.size()) throw std::invalid_argument("Plant: no such working point");
        m_state.working_point = config.working_points[working_point];
        state.n_sections = config.n_sections;
        if (state.firing_order.empty()) state.firing_order = identity_order(config.n_sections);
        state.tube_height_mm = m_state.working_point.weight_g / config.tube_gain_g_per_mm;
        m_state.cycle.machine_state = state;
        m_state.cycle.sections.assign(static_cast<std::size_t>(config.n_sections), nominal_cam(m_state.working_point));
        m_state.sigma_weight = config.noise_sigma_weight;
        m_state.sigma_length = config.noise_sigma_length;
        m_state.timestamp = config.start_timestamp;
    }

    const PlantState& state() const noexcept { return m_state; }
    const Cycle& current_cycle() const noexcept { return m_state.cycle; }

    std::vector<GobMeasurement> step(const Cycle& applied) {
        if (applied.size() != m_state.cycle.size())
            throw std::invalid_argument("Plant::step: section count mismatch");
        auto report = validate_cycle(applied);
        if (!report.ok()) throw InvalidCycle(std::move(report));
        m_state.cycle.sections = applied.sections;
        return advance_one();
    }

    std::vector<GobMeasurement> advance_one() {
        auto out = measure_with(m_state, m_rng);
        m_state.cycle_id += 1;
        m_state.timestamp += cycle_duration_s(m_state.cycle.machine_state);
        return out;
    }

private:
    PlantState m_state;
    std::mt19937_64 m_rng;
};

// ---------------------------------------------------------------------------
// History generation

struct HistoryCycle {
    std::int64_t cycle_id = 0;
    double timestamp = 0.0;
    Cycle cycle;
    std::size_t working_point = 0;
    std::vector<GobMeasurement> gobs;
};

struct HistoryRecord {
    std::int64_t cycle_id = 0;
    double timestamp = 0.0;
    int section = 0;
    CamDeadpoints cam;
    double temperature_c = 0.0;
    double master_speed = 0.0;
    double tube_rotation = 0.0;
    double phase_deg = 0.0;
    double tube_height_mm = 0.0;
    double weight_g = 0.0;
    double length_mm = 0.0;
    bool dirty = false;
};

namespace detail {

inline std::size_t segment_length(std::mt19937_64& rng, double mean, double minimum) {
    if (mean <= 0.0) return std::numeric_limits<std::size_t>::max();
    std::exponential_distribution<double> e(1.0 / mean);
    return static_cast<std::size_t>(std::clamp(std::round(e(rng)), minimum, std::max(minimum, 2.5 * mean)));
}

inline std::size_t pick_working_point(std::mt19937_64& rng, const std::vector<WorkingPoint>& wps) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double x = u(rng), acc = 0.0;
    for (std::size_t i = 0; i < wps.size(); ++i) {
        acc += wps[i].dwell;
        if (x < acc) return i;
    }
    return wps.size() - 1;
}

// Per-section offsets in free-parameter layout. Section 0 stays at nominal, so junctions N-1 and 0 are pinned.
inline void draw_section_offset(std::mt19937_64& rng, const PlantConfig& c, std::vector<double>& off, std::size_t i) {
    const std::size_t n = off.size() / 2;
    std::uniform_real_distribution<double> uj(-c.junction_offset_mm, c.junction_offset_mm);
    std::uniform_real_distribution<double> uu(-c.upper_offset_mm, c.upper_offset_mm);
    if (i == 0) return;
    if (i != n - 1) off[i] = uj(rng);
    off[n + i] = uu(rng);
}

inline double round_to(double x, double step) { return std::round(x / step) * step; }

}  // namespace detail

inline std::vector<HistoryCycle> generate_history(const PlantConfig& config, std::size_t n_cycles) {
    validate_config(config);
    if (n_cycles < 1) throw std::invalid_argument("generate_history: n_cycles must be >= 1");
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> unit(0.0, 1.0);
    const auto n = static_cast<std::size_t>(config.n_sections);

    std::vector<HistoryCycle> history;
    history.reserve(n_cycles);
    double timestamp = config.start_timestamp;

    std::size_t run_left = 0, seg_left = 0;
    std::size_t wp_index = 0;
    bool multi_weight = false;
    MachineState run_state;
    double run_temperature = 0.0;
    std::vector<double> offsets(2 * n, 0.0);
    PlantState live;
    std::vector<GobMeasurement> snapshot;
    std::size_t since_snapshot = 0;

    for (std::size_t c = 0; c < n_cycles; ++c) {
        bool new_segment = false;
        if (run_left == 0) {
            wp_index = detail::pick_working_point(rng, config.working_points);
            const auto& wp = config.working_points[wp_index];
            run_state = MachineState{};
            run_state.n_sections = config.n_sections;
            run_state.firing_order = identity_order(config.n_sections);
            run_temperature = config.temperature_c.lo + unif(rng) * (config.temperature_c.hi - config.temperature_c.lo);
            run_state.master_speed = config.master_speeds[static_cast<std::size_t>(unif(rng) * config.master_speeds.size()) %
                                                          config.master_speeds.size()];
            run_state.tube_rotation =
                std::round(config.tube_rotation.lo + unif(rng) * (config.tube_rotation.hi - config.tube_rotation.lo));
            run_state.phase_deg = std::round(config.phase_deg.lo + unif(rng) * (config.phase_deg.hi - config.phase_deg.lo));
            run_state.tube_height_mm = wp.weight_g / config.tube_gain_g_per_mm;
            multi_weight = unif(rng) < config.multi_weight_fraction;
            std::fill(offsets.begin(), offsets.end(), 0.0);
            if (multi_weight)
                for (std::size_t i = 1; i < n; ++i) detail::draw_section_offset(rng, config, offsets, i);
            run_left = detail::segment_length(rng, config.run_length_mean_cycles, config.min_segment_cycles);
            seg_left = 0;
            new_segment = true;
        }
        if (seg_left == 0) {
            if (!new_segment && multi_weight) {
                const std::size_t i = 1 + static_cast<std::size_t>(unif(rng) * (n - 1)) % (n - 1);
                detail::draw_section_offset(rng, config, offsets, i);
            }
            seg_left = detail::segment_length(rng, config.adjustment_mean_cycles, config.min_segment_cycles);
            MachineState ms = run_state;
            ms.temperature_c = std::clamp(detail::round_to(run_temperature + config.temperature_jitter_c * unit(rng), 0.1),
                                          config.temperature_c.lo, config.temperature_c.hi);
            const auto& wp = config.working_points[wp_index];
            std::vector<double> params(2 * n);
            for (std::size_t i = 0; i < n; ++i) {
                params[i] = std::max(0.0, wp.nominal_junction_mm + offsets[i]);
                params[n + i] = wp.nominal_upper_mm + offsets[n + i];
            }
            live.cycle.machine_state = ms;
            live.cycle.sections = from_free_parameters(params, n);
            live.working_point = wp;
            live.sigma_weight = config.noise_sigma_weight;
            live.sigma_length = config.noise_sigma_length;
            since_snapshot = 0;
        }

        live.cycle_id = static_cast<std::int64_t>(c);
        live.timestamp = timestamp;
        if (since_snapshot % static_cast<std::size_t>(config.sensor_hold_cycles) == 0) {
            snapshot = measure_with(live, rng);
            for (auto& m : snapshot) {
                if (unif(rng) < config.outlier_fraction) {
                    const double sign = unif(rng) < 0.5 ? -1.0 : 1.0;
                    const double k = 8.0 + 4.0 * unif(rng);
                    m.weight_g += sign * k * std::max(config.noise_sigma_weight, 0.5);
                    m.length_mm += sign * k * std::max(config.noise_sigma_length, 0.5);
                }
            }
        }
        ++since_snapshot;

        HistoryCycle hc;
        hc.cycle_id = live.cycle_id;
        hc.timestamp = timestamp;
        hc.cycle = live.cycle;
        hc.working_point = wp_index;
        hc.gobs = snapshot;
        for (auto& m : hc.gobs) {
            m.cycle_id = hc.cycle_id;
            m.timestamp = timestamp;
            m.dirty = false;
            if (config.dirty_fraction > 0.0 && unif(rng) < config.dirty_fraction) {
                m.dirty = true;
                const double kind = unif(rng);
                if (kind < 1.0 / 3.0) m.weight_g = -std::abs(m.weight_g) * unif(rng);
                else if (kind < 2.0 / 3.0) m.length_mm = -std::abs(m.length_mm) * unif(rng);
                else if (unif(rng) < 0.5) m.weight_g = std::numeric_limits<double>::quiet_NaN();
                else m.length_mm = std::numeric_limits<double>::quiet_NaN();
            }
        }
        history.push_back(std::move(hc));
        timestamp += cycle_duration_s(live.cycle.machine_state);
        --run_left;
        --seg_left;
    }
    return history;
}

inline std::vector<HistoryRecord> flatten(const std::vector<HistoryCycle>& history) {
    std::vector<HistoryRecord> rows;
    rows.reserve(history.size() * (history.empty() ? 0 : history.front().gobs.size()));
    for (const auto& h : history) {
        const auto& ms = h.cycle.machine_state;
        for (std::size_t i = 0; i < h.gobs.size(); ++i) {
            HistoryRecord r;
            r.cycle_id = h.cycle_id;
            r.timestamp = h.timestamp;
            r.section = static_cast<int>(i);
            r.cam = h.cycle.sections[i];
            r.temperature_c = ms.temperature_c;
            r.master_speed = ms.master_speed;
            r.tube_rotation = ms.tube_rotation;
            r.phase_deg = ms.phase_deg;
            r.tube_height_mm = ms.tube_height_mm;
            r.weight_g = h.gobs[i].weight_g;
            r.length_mm = h.gobs[i].length_mm;
            r.dirty = h.gobs[i].dirty;
            rows.push_back(r);
        }
    }
    return rows;
}

}  // namespace gobfeed
