#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cam_geometry.hpp"
#include "plant_surrogate.hpp"

namespace gobfeed {

// ---------------------------------------------------------------------------
// Cleaning

struct Rejection {
    std::size_t row;
    std::int64_t cycle_id;
    int section;
    std::string reason;
};

struct CleanResult {
    std::vector<HistoryRecord> records;
    std::vector<Rejection> rejections;
    std::size_t static_rejections = 0;
    std::size_t outlier_rejections = 0;
};

struct CleanOptions {
    Range temperature_c{1000.0, 1350.0};
    Range master_speed{5.0, 10.0};
    std::size_t min_run_cycles = 50;
    double outlier_sigmas = 4.0;
    bool remove_outliers = true;
};

inline const char* static_reject_reason(const HistoryRecord& r, const CleanOptions& o) {
    auto finite = [](double x) { return std::isfinite(x); };
    if (!finite(r.weight_g) || !finite(r.length_mm) || !finite(r.cam.sp) || !finite(r.cam.lp) || !finite(r.cam.up) ||
        !finite(r.temperature_c) || !finite(r.master_speed) || !finite(r.tube_rotation) || !finite(r.phase_deg) ||
        !finite(r.timestamp))
        return "missing field";
    if (r.weight_g <= 0.0) return "non-physical weight";
    if (r.length_mm <= 0.0) return "non-physical length";
    if (r.temperature_c < o.temperature_c.lo || r.temperature_c > o.temperature_c.hi) return "temperature out of range";
    if (r.master_speed < o.master_speed.lo || r.master_speed > o.master_speed.hi) return "master speed out of range";
    if (r.cam.sp < 0.0 || r.cam.lp < 0.0 || r.cam.up < 0.0) return "negative deadpoint";
    return nullptr;
}

namespace detail {

inline double median_of(std::vector<double> v) {
    const std::size_t n = v.size();
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), v.end());
    double hi = v[n / 2];
    if (n % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2));
    return 0.5 * (lo + hi);
}

inline bool same_setting(const HistoryRecord& a, const HistoryRecord& b) {
    return a.cam == b.cam && a.temperature_c == b.temperature_c && a.master_speed == b.master_speed &&
           a.tube_rotation == b.tube_rotation && a.phase_deg == b.phase_deg && a.tube_height_mm == b.tube_height_mm;
}

}  // namespace detail

// Static filter, then MAD outlier removal within runs of consecutive cycles at an unchanged setting.
inline CleanResult clean(const std::vector<HistoryRecord>& records, const CleanOptions& opt = {}) {
    CleanResult out;
    std::vector<char> keep(records.size(), 1);
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (const char* why = static_reject_reason(records[i], opt)) {
            keep[i] = 0;
            out.rejections.push_back({i, records[i].cycle_id, records[i].section, why});
            ++out.static_rejections;
        }
    }

    if (opt.remove_outliers) {
        // Per section, walk rows in order and split into runs at setting changes.
        std::map<int, std::vector<std::size_t>> by_section;
        for (std::size_t i = 0; i < records.size(); ++i)
            if (keep[i]) by_section[records[i].section].push_back(i);
        std::vector<std::size_t> flagged;
        for (const auto& [section, rows] : by_section) {
            std::size_t start = 0;
            while (start < rows.size()) {
                std::size_t end = start + 1;
                while (end < rows.size() && detail::same_setting(records[rows[end]], records[rows[start]]) &&
                       records[rows[end]].cycle_id - records[rows[end - 1]].cycle_id <= 5)
                    ++end;
                const auto first = records[rows[start]].cycle_id, last = records[rows[end - 1]].cycle_id;
                if (static_cast<std::size_t>(last - first + 1) >= opt.min_run_cycles) {
                    for (int field = 0; field < 2; ++field) {
                        std::vector<double> v;
                        v.reserve(end - start);
                        for (std::size_t k = start; k < end; ++k)
                            v.push_back(field == 0 ? records[rows[k]].weight_g : records[rows[k]].length_mm);
                        const double med = detail::median_of(v);
                        for (auto& x : v) x = std::abs(x - med);
                        const double spread = 1.4826 * detail::median_of(v);
                        if (!(spread > 0.0)) continue;
                        for (std::size_t k = start; k < end; ++k) {
                            const auto& r = records[rows[k]];
                            const double x = field == 0 ? r.weight_g : r.length_mm;
                            if (std::abs(x - med) > opt.outlier_sigmas * spread) flagged.push_back(rows[k]);
                        }
                    }
                }
                start = end;
            }
        }
        std::sort(flagged.begin(), flagged.end());
        flagged.erase(std::unique(flagged.begin(), flagged.end()), flagged.end());
        for (std::size_t i : flagged) {
            keep[i] = 0;
            out.rejections.push_back({i, records[i].cycle_id, records[i].section, "cluster outlier"});
            ++out.outlier_rejections;
        }
        std::sort(out.rejections.begin(), out.rejections.end(),
                  [](const Rejection& a, const Rejection& b) { return a.row < b.row; });
    }

    out.records.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i)
        if (keep[i]) out.records.push_back(records[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Differential samples

struct DifferentialSample {
    double temperature_c = 0.0;
    double master_speed = 0.0;
    double tube_rotation = 0.0;
    double phase_deg = 0.0;
    DeadpointDelta delta;
    GobDelta target;
    std::int64_t cycle_id = 0;
    double timestamp = 0.0;
    int reference_section = 0;
    int other_section = 1;
    double reference_weight_g = 0.0;
    double reference_length_mm = 0.0;

    std::array<double, 7> features() const {
        return {temperature_c, master_speed, tube_rotation, phase_deg, delta.dsp, delta.dlp, delta.dup};
    }
};

struct ReferencePolicy {
    enum class Kind { fixed, random } kind = Kind::fixed;
    int fixed_section = 0;
    bool all_pairs = false;  // every other section against the reference, instead of one random one
    std::uint64_t seed = 1;
};

struct DifferentialResult {
    std::vector<DifferentialSample> samples;
    std::vector<std::string> log;
};

inline DifferentialSample difference(const HistoryRecord& ref, const HistoryRecord& other) {
    DifferentialSample s;
    s.temperature_c = ref.temperature_c;
    s.master_speed = ref.master_speed;
    s.tube_rotation = ref.tube_rotation;
    s.phase_deg = ref.phase_deg;
    s.delta = delta_between(ref.cam, other.cam);
    s.target = {other.weight_g - ref.weight_g, other.length_mm - ref.length_mm};
    s.cycle_id = ref.cycle_id;
    s.timestamp = ref.timestamp;
    s.reference_section = ref.section;
    s.other_section = other.section;
    s.reference_weight_g = ref.weight_g;
    s.reference_length_mm = ref.length_mm;
    return s;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (key + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Records must be grouped by cycle (consecutive rows share cycle_id), as produced by flatten/clean.
inline DifferentialResult build_differential_samples(const std::vector<HistoryRecord>& records,
                                                     const ReferencePolicy& policy = {}) {
    DifferentialResult out;
    std::size_t begin = 0;
    while (begin < records.size()) {
        std::size_t end = begin + 1;
        while (end < records.size() && records[end].cycle_id == records[begin].cycle_id) ++end;
        const auto cycle_id = records[begin].cycle_id;
        std::vector<std::size_t> rows;
        for (std::size_t k = begin; k < end; ++k) rows.push_back(k);
        begin = end;
        if (rows.size() < 2) {
            out.log.push_back("cycle " + std::to_string(cycle_id) + ": fewer than 2 sections, skipped");
            continue;
        }
        std::mt19937_64 rng(mix_seed(policy.seed, static_cast<std::uint64_t>(cycle_id)));
        std::size_t ref_pos = rows.size();
        if (policy.kind == ReferencePolicy::Kind::fixed) {
            for (std::size_t k = 0; k < rows.size(); ++k)
                if (records[rows[k]].section == policy.fixed_section) ref_pos = k;
            if (ref_pos == rows.size()) {
                out.log.push_back("cycle " + std::to_string(cycle_id) + ": reference section missing, skipped");
                continue;
            }
        } else {
            ref_pos = std::uniform_int_distribution<std::size_t>(0, rows.size() - 1)(rng);
        }
        const auto& ref = records[rows[ref_pos]];
        if (policy.all_pairs) {
            for (std::size_t k = 0; k < rows.size(); ++k)
                if (k != ref_pos) out.samples.push_back(difference(ref, records[rows[k]]));
        } else {
            std::size_t pick = std::uniform_int_distribution<std::size_t>(0, rows.size() - 2)(rng);
            if (pick >= ref_pos) ++pick;
            out.samples.push_back(difference(ref, records[rows[pick]]));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Histogram deduplication

struct BinSpec {
    std::map<std::string, double> widths = {
        {"weight_class", 0.0025},        // relative
        {"length_class", 0.008},         // relative
        {"temperature", 2.0},
        {"machine_speed", 0.5},
        {"deadpoints", 0.05},
        {"weight_variation", 0.0015},    // relative to the reference weight
        {"length_variation", 0.0015},    // relative to the reference length
        {"tube_rotation_speed", 1.0},
        {"shear_plunger_phase", 1.0},
    };
    std::size_t max_per_bin = 1;
    std::uint64_t seed = 1;

    BinSpec scaled(double factor) const {
        BinSpec b = *this;
        for (auto& [k, w] : b.widths) w *= factor;
        return b;
    }
};

inline const std::vector<std::string>& dedup_variables() {
    static const std::vector<std::string> names = {"weight_class",     "length_class",       "temperature",
                                                   "machine_speed",    "deadpoints",         "weight_variation",
                                                   "length_variation", "tube_rotation_speed", "shear_plunger_phase"};
    return names;
}

inline void validate_bins(const BinSpec& bins) {
    for (const auto& name : dedup_variables()) {
        auto it = bins.widths.find(name);
        if (it == bins.widths.end()) throw std::invalid_argument("bin spec: missing width for '" + name + "'");
        if (!(it->second > 0.0)) throw std::invalid_argument("bin spec: width for '" + name + "' must be > 0");
    }
    if (bins.max_per_bin < 1) throw std::invalid_argument("bin spec: max_per_bin must be >= 1");
}

using BinKey = std::array<std::int64_t, 11>;

struct BinKeyHash {
    std::size_t operator()(const BinKey& k) const noexcept {
        std::uint64_t h = 1469598103934665603ull;
        for (auto v : k) h = mix_seed(h, static_cast<std::uint64_t>(v));
        return static_cast<std::size_t>(h);
    }
};

inline BinKey bin_key(const DifferentialSample& s, const BinSpec& bins) {
    const auto& w = bins.widths;
    auto abs_bin = [](double x, double width) { return static_cast<std::int64_t>(std::floor(x / width)); };
    auto rel_class = [](double x, double r) {
        return x > 0.0 ? static_cast<std::int64_t>(std::floor(std::log(x) / std::log1p(r)))
                       : std::numeric_limits<std::int64_t>::min();
    };
    const double dp = w.at("deadpoints");
    const double wref = std::abs(s.reference_weight_g) > 0.0 ? std::abs(s.reference_weight_g) : 1.0;
    const double lref = std::abs(s.reference_length_mm) > 0.0 ? std::abs(s.reference_length_mm) : 1.0;
    return {rel_class(s.reference_weight_g, w.at("weight_class")),
            rel_class(s.reference_length_mm, w.at("length_class")),
            abs_bin(s.temperature_c, w.at("temperature")),
            abs_bin(s.master_speed, w.at("machine_speed")),
            abs_bin(s.delta.dsp, dp),
            abs_bin(s.delta.dlp, dp),
            abs_bin(s.delta.dup, dp),
            abs_bin(s.target.dw / wref, w.at("weight_variation")),
            abs_bin(s.target.dl / lref, w.at("length_variation")),
            abs_bin(s.tube_rotation, w.at("tube_rotation_speed")),
            abs_bin(s.phase_deg, w.at("shear_plunger_phase"))};
}

struct DedupReport {
    std::size_t input_count = 0;
    std::size_t kept_count = 0;
    std::size_t bin_count = 0;
    std::size_t max_occupancy = 0;
    std::vector<std::size_t> occupancy;  // per bin, in order of first appearance
    double removal_fraction() const {
        return input_count == 0 ? 0.0 : 1.0 - static_cast<double>(kept_count) / static_cast<double>(input_count);
    }
};

struct DedupResult {
    std::vector<DifferentialSample> kept;
    DedupReport report;
};

// Keeps at most K samples per occupied bin; which ones is decided by a seeded shuffle. Order is preserved.
inline DedupResult dedup_histogram(const std::vector<DifferentialSample>& samples, const BinSpec& bins) {
    validate_bins(bins);
    DedupResult out;
    out.report.input_count = samples.size();
    std::vector<BinKey> keys(samples.size());
    std::unordered_map<BinKey, std::size_t, BinKeyHash> slot;
    std::vector<std::size_t> bin_of(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        keys[i] = bin_key(samples[i], bins);
        auto [it, inserted] = slot.try_emplace(keys[i], out.report.occupancy.size());
        if (inserted) out.report.occupancy.push_back(0);
        bin_of[i] = it->second;
        ++out.report.occupancy[it->second];
    }
    out.report.bin_count = out.report.occupancy.size();
    for (auto c : out.report.occupancy) out.report.max_occupancy = std::max(out.report.max_occupancy, c);

    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(bins.seed);
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
        std::swap(order[i - 1], order[j]);
    }
    std::vector<std::size_t> taken(out.report.bin_count, 0);
    std::vector<char> keep(samples.size(), 0);
    for (std::size_t i : order) {
        if (taken[bin_of[i]] < bins.max_per_bin) {
            ++taken[bin_of[i]];
            keep[i] = 1;
        }
    }
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (keep[i]) out.kept.push_back(samples[i]);
    out.report.kept_count = out.kept.size();
    return out;
}

// ---------------------------------------------------------------------------
// Temporal split

struct Split {
    std::vector<DifferentialSample> train;
    std::vector<DifferentialSample> validation;
    double split_timestamp = 0.0;
};

// Samples with timestamp >= split_timestamp go to validation; at least one validation sample is kept.
inline Split temporal_split(const std::vector<DifferentialSample>& samples, double validation_fraction = 0.25) {
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw std::invalid_argument("temporal_split: fraction must lie in (0, 1)");
    if (samples.size() < 2) throw std::invalid_argument("temporal_split: need at least 2 samples");
    std::vector<double> ts;
    ts.reserve(samples.size());
    for (const auto& s : samples) ts.push_back(s.timestamp);
    std::sort(ts.begin(), ts.end());
    if (ts.front() == ts.back()) throw std::invalid_argument("temporal_split: all samples share one timestamp");

    const auto n = samples.size();
    auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(n)));
    n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
    double split = ts[n - n_val];
    if (split == ts.front()) {
        split = *std::upper_bound(ts.begin(), ts.end(), ts.front());
    }
    Split out;
    out.split_timestamp = split;
    for (const auto& s : samples) (s.timestamp < split ? out.train : out.validation).push_back(s);
    return out;
}

// ---------------------------------------------------------------------------
// Direct sampling of the surrogate response

struct DeltaScale {
    double half_width_mm;
    double weight;
};

struct SamplerConfig {
    Range temperature_c{1150.0, 1250.0};
    Range master_speed{6.0, 10.0};
    Range tube_rotation{10.0, 30.0};
    Range phase_deg{0.0, 20.0};
    std::vector<DeltaScale> delta_scales{{10.0, 0.4}, {30.0, 0.4}, {60.0, 0.2}};  // each coordinate U(-w, w), w drawn per coordinate
    double noise_sigma_weight = 0.0;
    double noise_sigma_length = 0.0;
    double reference_weight_g = 420.0;
    double reference_length_mm = 240.0;
};

// Independent draws; timestamps are the draw index, so a temporal split is a plain holdout.
inline std::vector<DifferentialSample> sample_surrogate_dataset(const SamplerConfig& cfg, std::size_t n,
                                                                std::uint64_t seed) {
    if (cfg.delta_scales.empty()) throw std::invalid_argument("sampler: no delta scales");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> unit(0.0, 1.0);
    double total = 0.0;
    for (const auto& d : cfg.delta_scales) total += d.weight;
    auto lerp = [&](const Range& r) { return r.lo + u(rng) * (r.hi - r.lo); };
    std::vector<DifferentialSample> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& s = out[i];
        s.temperature_c = lerp(cfg.temperature_c);
        s.master_speed = lerp(cfg.master_speed);
        s.tube_rotation = lerp(cfg.tube_rotation);
        s.phase_deg = lerp(cfg.phase_deg);
        auto draw = [&] {
            double x = u(rng) * total, w = cfg.delta_scales.back().half_width_mm;
            for (const auto& d : cfg.delta_scales) {
                if (x < d.weight) {
                    w = d.half_width_mm;
                    break;
                }
                x -= d.weight;
            }
            return w * (2.0 * u(rng) - 1.0);
        };
        s.delta.dsp = draw();
        s.delta.dlp = draw();
        s.delta.dup = draw();
        s.target = surrogate_response(s.temperature_c, s.master_speed, s.delta);
        if (cfg.noise_sigma_weight > 0.0) s.target.dw += cfg.noise_sigma_weight * unit(rng);
        if (cfg.noise_sigma_length > 0.0) s.target.dl += cfg.noise_sigma_length * unit(rng);
        s.cycle_id = static_cast<std::int64_t>(i);
        s.timestamp = static_cast<double>(i);
        s.reference_weight_g = cfg.reference_weight_g;
        s.reference_length_mm = cfg.reference_length_mm;
    }
    return out;
}

}  // namespace gobfeed
