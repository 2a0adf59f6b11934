#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "config.hpp"
#include "data_pipeline.hpp"
#include "forward_model.hpp"
#include "inversion.hpp"
#include "plant_surrogate.hpp"

namespace gobfeed {

// ---------------------------------------------------------------------------
// History -> training data

struct DatasetBuild {
    std::size_t input_records = 0;
    std::size_t static_rejections = 0;
    std::size_t outlier_rejections = 0;
    std::size_t differential_samples = 0;
    std::vector<std::string> log;
    double split_timestamp = 0.0;
    std::size_t train_before_dedup = 0;
    std::optional<DedupReport> dedup;
    std::vector<DifferentialSample> train;
    std::vector<DifferentialSample> validation;
};

// clean -> differences -> temporal split -> dedup of the training part
inline DatasetBuild build_dataset(const std::vector<HistoryRecord>& records, const AppConfig& cfg) {
    DatasetBuild out;
    out.input_records = records.size();
    auto cleaned = clean(records, cfg.clean);
    out.static_rejections = cleaned.static_rejections;
    out.outlier_rejections = cleaned.outlier_rejections;
    auto diff = build_differential_samples(cleaned.records, cfg.reference);
    out.differential_samples = diff.samples.size();
    out.log = std::move(diff.log);
    auto split = temporal_split(diff.samples, cfg.dataset.validation_fraction);
    out.split_timestamp = split.split_timestamp;
    out.train_before_dedup = split.train.size();
    if (cfg.dataset.dedup) {
        auto d = dedup_histogram(split.train, cfg.bins);
        out.dedup = d.report;
        out.train = std::move(d.kept);
    } else {
        out.train = std::move(split.train);
    }
    out.validation = std::move(split.validation);
    return out;
}

inline json build_report_json(const DatasetBuild& b) {
    json j = {{"version", format_version},
              {"input_records", b.input_records},
              {"static_rejections", b.static_rejections},
              {"outlier_rejections", b.outlier_rejections},
              {"differential_samples", b.differential_samples},
              {"skipped_cycles", b.log.size()},
              {"split_timestamp", b.split_timestamp},
              {"train_before_dedup", b.train_before_dedup},
              {"train", b.train.size()},
              {"validation", b.validation.size()}};
    if (b.dedup) {
        json d = *b.dedup;
        d.erase("occupancy");
        j["dedup"] = d;
    }
    return j;
}

// ---------------------------------------------------------------------------
// Dedup granularity study

struct StudyPoint {
    double factor = 0.0;  // 0: no dedup
    std::size_t train_size = 0;
    double removal_fraction = 0.0;
    std::vector<double> val_mae;
    std::size_t best_epoch = 0;
};

inline std::vector<StudyPoint> dedup_study(const std::vector<DifferentialSample>& train_set,
                                           const std::vector<DifferentialSample>& validation,
                                           const std::vector<double>& factors, const BinSpec& bins,
                                           const NetworkSpec& spec, const TrainConfig& tc) {
    std::vector<StudyPoint> out;
    const auto val = Dataset::from_samples(validation);
    for (double f : factors) {
        StudyPoint p;
        p.factor = f;
        std::vector<DifferentialSample> kept;
        if (f > 0.0) {
            auto d = dedup_histogram(train_set, bins.scaled(f));
            kept = std::move(d.kept);
            p.removal_fraction = d.report.removal_fraction();
        } else {
            kept = train_set;
        }
        p.train_size = kept.size();
        if (kept.size() >= 2) {
            const auto m = train(Mlp::build(spec, tc.seed), Dataset::from_samples(kept), val, tc);
            p.best_epoch = m.best_epoch;
            p.val_mae = m.best_epoch > 0 ? m.history[m.best_epoch - 1].val_mae
                                         : detail::mae_per_target(m.predict_rows(val.x), val.y, val.output_dim);
        }
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Held-out cycles and single-section transformations

struct ObservedCycle {
    std::int64_t cycle_id = 0;
    double timestamp = 0.0;
    Cycle cycle;
    std::vector<GobDelta> gobs;  // absolute weight, length per section
};

// Complete, valid cycles of a (cleaned) record list.
inline std::vector<ObservedCycle> complete_cycles(const std::vector<HistoryRecord>& records) {
    std::vector<ObservedCycle> out;
    std::size_t begin = 0;
    while (begin < records.size()) {
        std::size_t end = begin + 1;
        while (end < records.size() && records[end].cycle_id == records[begin].cycle_id) ++end;
        const std::size_t n = end - begin;
        bool ok = n >= 2;
        for (std::size_t k = 0; k < n && ok; ++k) ok = records[begin + k].section == static_cast<int>(k);
        if (ok) {
            const auto& r0 = records[begin];
            ObservedCycle oc;
            oc.cycle_id = r0.cycle_id;
            oc.timestamp = r0.timestamp;
            auto& ms = oc.cycle.machine_state;
            ms.temperature_c = r0.temperature_c;
            ms.master_speed = r0.master_speed;
            ms.tube_rotation = r0.tube_rotation;
            ms.phase_deg = r0.phase_deg;
            ms.tube_height_mm = r0.tube_height_mm;
            ms.n_sections = static_cast<int>(n);
            ms.firing_order = identity_order(static_cast<int>(n));
            for (std::size_t k = 0; k < n; ++k) {
                oc.cycle.sections.push_back(records[begin + k].cam);
                oc.gobs.push_back({records[begin + k].weight_g, records[begin + k].length_mm});
            }
            if (validate_cycle(oc.cycle).ok()) out.push_back(std::move(oc));
        }
        begin = end;
    }
    return out;
}

// Round-robin over occupied histogram bins (shuffled by seed), so near-identical cycles are not drawn twice
// before every bin has been visited.
template <class Key>
std::vector<std::size_t> histogram_sample(const std::vector<Key>& keys, std::size_t count, std::uint64_t seed) {
    std::map<Key, std::vector<std::size_t>> bins;
    for (std::size_t i = 0; i < keys.size(); ++i) bins[keys[i]].push_back(i);
    std::mt19937_64 rng(seed);
    std::vector<std::vector<std::size_t>> groups;
    for (auto& [k, v] : bins) {
        std::shuffle(v.begin(), v.end(), rng);
        groups.push_back(std::move(v));
    }
    std::shuffle(groups.begin(), groups.end(), rng);
    std::vector<std::size_t> out;
    for (std::size_t round = 0; out.size() < count; ++round) {
        bool any = false;
        for (const auto& g : groups) {
            if (round < g.size()) {
                out.push_back(g[round]);
                any = true;
                if (out.size() == count) break;
            }
        }
        if (!any) break;
    }
    return out;
}

inline std::vector<std::int64_t> cycle_key(const ObservedCycle& c, const BinSpec& bins) {
    const auto& w = bins.widths;
    const auto& ms = c.cycle.machine_state;
    auto b = [](double x, double width) { return static_cast<std::int64_t>(std::floor(x / width)); };
    std::vector<std::int64_t> k = {b(ms.temperature_c, w.at("temperature")), b(ms.master_speed, w.at("machine_speed")),
                                   b(ms.tube_rotation, w.at("tube_rotation_speed")),
                                   b(ms.phase_deg, w.at("shear_plunger_phase"))};
    for (const auto& s : c.cycle.sections) {
        k.push_back(b(s.lp, 1.0));
        k.push_back(b(s.up, 1.0));
    }
    return k;
}

// Smallest (dSP, dLP, dUP) with surrogate response == target, by Gauss-Newton on the underdetermined system.
inline std::optional<DeadpointDelta> min_norm_section_delta(const MachineState& ms, const GobDelta& target,
                                                            std::size_t iterations = 60) {
    std::array<double, 3> d{0.0, 0.0, 0.0};
    for (std::size_t it = 0; it < iterations; ++it) {
        const DeadpointDelta dd{d[0], d[1], d[2]};
        const auto f = surrogate_response(ms, dd);
        const double rw = target.dw - f.dw, rl = target.dl - f.dl;
        if (std::abs(rw) < 1e-12 && std::abs(rl) < 1e-12) return dd;
        const auto J = surrogate_jacobian(ms.temperature_c, ms.master_speed, dd);
        double a = 0, b = 0, c = 0;  // J J^T
        for (int k = 0; k < 3; ++k) {
            a += J[0][k] * J[0][k];
            b += J[0][k] * J[1][k];
            c += J[1][k] * J[1][k];
        }
        const double det = a * c - b * b;
        if (!(std::abs(det) > 1e-12)) return std::nullopt;
        const double yw = (c * rw - b * rl) / det, yl = (a * rl - b * rw) / det;
        for (int k = 0; k < 3; ++k) d[k] += J[0][k] * yw + J[1][k] * yl;
    }
    const DeadpointDelta dd{d[0], d[1], d[2]};
    const auto f = surrogate_response(ms, dd);
    if (std::abs(target.dw - f.dw) < 1e-9 && std::abs(target.dl - f.dl) < 1e-9) return dd;
    return std::nullopt;
}

struct CaseOptions {
    std::size_t count = 200;
    double held_out_fraction = 0.25;
    double weight_range_g = 40.0;
    double length_range_mm = 20.0;
    double min_stroke_mm = 1.0;
    std::size_t max_attempts = 20;
    std::uint64_t seed = 1;
};

// Held-out cycles, each carrying a known change to one section realised through the surrogate plant.
inline std::vector<EvalCase> transformation_cases(const std::vector<ObservedCycle>& cycles, const CaseOptions& opt,
                                                  const InversionParams& params, const BinSpec& bins = {}) {
    std::vector<EvalCase> out;
    if (cycles.empty() || opt.count == 0) return out;
    std::vector<double> ts;
    for (const auto& c : cycles) ts.push_back(c.timestamp);
    std::sort(ts.begin(), ts.end());
    const auto cut_index = static_cast<std::size_t>(std::floor((1.0 - opt.held_out_fraction) * static_cast<double>(ts.size())));
    const double cut = ts[std::min(cut_index, ts.size() - 1)];
    std::vector<const ObservedCycle*> held;
    std::vector<std::vector<std::int64_t>> keys;
    for (const auto& c : cycles)
        if (c.timestamp >= cut) {
            held.push_back(&c);
            keys.push_back(cycle_key(c, bins));
        }
    const auto picks = histogram_sample(keys, opt.count, opt.seed);
    std::mt19937_64 rng(mix_seed(opt.seed, 77));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto p : picks) {
        const auto& oc = *held[p];
        const std::size_t n = oc.cycle.size();
        const auto base = to_free_parameters(oc.cycle);
        for (std::size_t attempt = 0; attempt < opt.max_attempts; ++attempt) {
            const std::size_t i = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
            const GobDelta target{opt.weight_range_g * u(rng), opt.length_range_mm * u(rng)};
            const auto d = min_norm_section_delta(oc.cycle.machine_state, target);
            if (!d) continue;
            std::vector<double> truth(2 * n, 0.0);
            truth[prev_section(i, n)] = d->dsp;
            truth[i] = d->dlp;
            truth[n + i] = d->dup;
            bool feasible = true;
            for (std::size_t k = 0; k < 2 * n; ++k) feasible = feasible && base[k] + truth[k] >= 0.0;
            for (std::size_t s = 0; s < n; ++s)
                feasible = feasible && base[n + s] + truth[n + s] > base[s] + truth[s] + opt.min_stroke_mm;
            if (!feasible) continue;
            EvalCase ec;
            ec.request.machine_state = oc.cycle.machine_state;
            ec.request.initial_cycle = oc.cycle;
            ec.request.params = params;
            for (std::size_t s = 0; s < n; ++s)
                ec.request.targets.push_back(surrogate_response(oc.cycle.machine_state, section_delta(truth, s)));
            ec.true_dparams = truth;
            ec.transformed_section = i;
            ec.initial_gobs = oc.gobs;
            out.push_back(std::move(ec));
            break;
        }
    }
    return out;
}

}  // namespace gobfeed
