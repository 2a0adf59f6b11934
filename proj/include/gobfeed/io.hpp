#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cam_geometry.hpp"
#include "data_pipeline.hpp"
#include "forward_model.hpp"
#include "inversion.hpp"
#include "plant_surrogate.hpp"

namespace gobfeed {

using json = nlohmann::json;

inline constexpr int format_version = 1;

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace io_detail {

template <class T>
void read(const json& j, const char* key, T& out) {
    if (auto it = j.find(key); it != j.end() && !it->is_null()) it->get_to(out);
}

inline void reject_unknown(const json& j, const char* what, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw FormatError(std::string(what) + ": expected an object");
    std::set<std::string> known(keys.begin(), keys.end());
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw FormatError(std::string(what) + ": unknown field '" + it.key() + "'");
}

inline double nan_or(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace io_detail

// ---------------------------------------------------------------------------
// Geometry

inline void to_json(json& j, const MachineState& m) {
    j = {{"temperature_c", m.temperature_c}, {"master_speed", m.master_speed}, {"tube_rotation", m.tube_rotation},
         {"phase_deg", m.phase_deg},         {"tube_height_mm", m.tube_height_mm}, {"firing_order", m.firing_order},
         {"n_sections", m.n_sections}};
}
inline void from_json(const json& j, MachineState& m) {
    io_detail::reject_unknown(j, "machine_state",
                              {"temperature_c", "master_speed", "tube_rotation", "phase_deg", "tube_height_mm",
                               "firing_order", "n_sections"});
    io_detail::read(j, "temperature_c", m.temperature_c);
    io_detail::read(j, "master_speed", m.master_speed);
    io_detail::read(j, "tube_rotation", m.tube_rotation);
    io_detail::read(j, "phase_deg", m.phase_deg);
    io_detail::read(j, "tube_height_mm", m.tube_height_mm);
    io_detail::read(j, "firing_order", m.firing_order);
    io_detail::read(j, "n_sections", m.n_sections);
}

inline void to_json(json& j, const CamDeadpoints& c) { j = {{"sp", c.sp}, {"lp", c.lp}, {"up", c.up}}; }
inline void from_json(const json& j, CamDeadpoints& c) {
    io_detail::reject_unknown(j, "section", {"sp", "lp", "up"});
    j.at("sp").get_to(c.sp);
    j.at("lp").get_to(c.lp);
    j.at("up").get_to(c.up);
}

inline void to_json(json& j, const DeadpointDelta& d) { j = {{"dsp", d.dsp}, {"dlp", d.dlp}, {"dup", d.dup}}; }
inline void from_json(const json& j, DeadpointDelta& d) {
    j.at("dsp").get_to(d.dsp);
    j.at("dlp").get_to(d.dlp);
    j.at("dup").get_to(d.dup);
}

inline void to_json(json& j, const Cycle& c) { j = {{"machine_state", c.machine_state}, {"sections", c.sections}}; }
inline void from_json(const json& j, Cycle& c) {
    io_detail::reject_unknown(j, "cycle", {"machine_state", "sections"});
    io_detail::read(j, "machine_state", c.machine_state);
    j.at("sections").get_to(c.sections);
    if (!j.contains("machine_state") || !j.at("machine_state").contains("n_sections"))
        c.machine_state.n_sections = static_cast<int>(c.sections.size());
}

inline void to_json(json& j, const ValidationReport& r) {
    j = json::object();
    j["ok"] = r.ok();
    j["violations"] = json::array();
    for (const auto& v : r.violations)
        j["violations"].push_back({{"kind", to_string(v.kind)}, {"section", v.section}, {"magnitude_mm", v.magnitude}});
}

inline void to_json(json& j, const RelativeProfile& p) {
    j = {{"name", p.name}, {"knots", json::array()}};
    for (const auto& [x, y] : p.knots) j["knots"].push_back({x, y});
}
inline void from_json(const json& j, RelativeProfile& p) {
    const json* knots = &j;
    if (j.is_object()) {
        io_detail::read(j, "name", p.name);
        knots = &j.at("knots");
    }
    p.knots.clear();
    for (const auto& k : *knots) p.knots.emplace_back(k.at(0).get<double>(), k.at(1).get<double>());
}

inline void to_json(json& j, const MotionCurve& c) {
    j = json::array();
    for (const auto& s : c.samples) j.push_back({s.time_s, s.height_mm});
}

// ---------------------------------------------------------------------------
// Plant

inline void to_json(json& j, const GobDelta& g) { j = {{"dw", g.dw}, {"dl", g.dl}}; }
inline void from_json(const json& j, GobDelta& g) {
    if (j.is_array()) {
        g = {j.at(0).get<double>(), j.at(1).get<double>()};
        return;
    }
    io_detail::reject_unknown(j, "target", {"dw", "dl"});
    g = {};
    io_detail::read(j, "dw", g.dw);
    io_detail::read(j, "dl", g.dl);
}

inline void to_json(json& j, const Range& r) { j = json::array({r.lo, r.hi}); }
inline void from_json(const json& j, Range& r) {
    if (j.is_array()) {
        if (j.size() != 2) throw FormatError("range: expected [lo, hi]");
        r = {j[0].get<double>(), j[1].get<double>()};
    } else {
        r.lo = j.at("lo").get<double>();
        r.hi = j.at("hi").get<double>();
    }
}

inline void to_json(json& j, const WorkingPoint& w) {
    j = {{"weight_g", w.weight_g},
         {"length_mm", w.length_mm},
         {"dwell", w.dwell},
         {"nominal_junction_mm", w.nominal_junction_mm},
         {"nominal_upper_mm", w.nominal_upper_mm}};
}
inline void from_json(const json& j, WorkingPoint& w) {
    io_detail::reject_unknown(j, "working_point", {"weight_g", "length_mm", "dwell", "nominal_junction_mm", "nominal_upper_mm"});
    io_detail::read(j, "weight_g", w.weight_g);
    io_detail::read(j, "length_mm", w.length_mm);
    io_detail::read(j, "dwell", w.dwell);
    io_detail::read(j, "nominal_junction_mm", w.nominal_junction_mm);
    io_detail::read(j, "nominal_upper_mm", w.nominal_upper_mm);
}

inline void to_json(json& j, const PlantConfig& c) {
    j = {{"line_id", c.line_id},
         {"n_sections", c.n_sections},
         {"working_points", c.working_points},
         {"noise_sigma_weight", c.noise_sigma_weight},
         {"noise_sigma_length", c.noise_sigma_length},
         {"dirty_fraction", c.dirty_fraction},
         {"outlier_fraction", c.outlier_fraction},
         {"seed", c.seed},
         {"temperature_c", c.temperature_c},
         {"temperature_jitter_c", c.temperature_jitter_c},
         {"master_speeds", c.master_speeds},
         {"tube_rotation", c.tube_rotation},
         {"phase_deg", c.phase_deg},
         {"tube_gain_g_per_mm", c.tube_gain_g_per_mm},
         {"run_length_mean_cycles", c.run_length_mean_cycles},
         {"adjustment_mean_cycles", c.adjustment_mean_cycles},
         {"min_segment_cycles", c.min_segment_cycles},
         {"multi_weight_fraction", c.multi_weight_fraction},
         {"junction_offset_mm", c.junction_offset_mm},
         {"upper_offset_mm", c.upper_offset_mm},
         {"sensor_hold_cycles", c.sensor_hold_cycles},
         {"start_timestamp", c.start_timestamp}};
}
inline void from_json(const json& j, PlantConfig& c) {
    io_detail::reject_unknown(
        j, "plant",
        {"line_id", "n_sections", "working_points", "noise_sigma_weight", "noise_sigma_length", "dirty_fraction",
         "outlier_fraction", "seed", "temperature_c", "temperature_jitter_c", "master_speeds", "tube_rotation",
         "phase_deg", "tube_gain_g_per_mm", "run_length_mean_cycles", "adjustment_mean_cycles", "min_segment_cycles",
         "multi_weight_fraction", "junction_offset_mm", "upper_offset_mm", "sensor_hold_cycles", "start_timestamp"});
    using io_detail::read;
    read(j, "line_id", c.line_id);
    read(j, "n_sections", c.n_sections);
    read(j, "working_points", c.working_points);
    read(j, "noise_sigma_weight", c.noise_sigma_weight);
    read(j, "noise_sigma_length", c.noise_sigma_length);
    read(j, "dirty_fraction", c.dirty_fraction);
    read(j, "outlier_fraction", c.outlier_fraction);
    read(j, "seed", c.seed);
    read(j, "temperature_c", c.temperature_c);
    read(j, "temperature_jitter_c", c.temperature_jitter_c);
    read(j, "master_speeds", c.master_speeds);
    read(j, "tube_rotation", c.tube_rotation);
    read(j, "phase_deg", c.phase_deg);
    read(j, "tube_gain_g_per_mm", c.tube_gain_g_per_mm);
    read(j, "run_length_mean_cycles", c.run_length_mean_cycles);
    read(j, "adjustment_mean_cycles", c.adjustment_mean_cycles);
    read(j, "min_segment_cycles", c.min_segment_cycles);
    read(j, "multi_weight_fraction", c.multi_weight_fraction);
    read(j, "junction_offset_mm", c.junction_offset_mm);
    read(j, "upper_offset_mm", c.upper_offset_mm);
    read(j, "sensor_hold_cycles", c.sensor_hold_cycles);
    read(j, "start_timestamp", c.start_timestamp);
}

inline void to_json(json& j, const GobMeasurement& m) {
    j = {{"section", m.section_index},
         {"cycle_id", m.cycle_id},
         {"timestamp", m.timestamp},
         {"weight_g", io_detail::finite_or_null(m.weight_g)},
         {"length_mm", io_detail::finite_or_null(m.length_mm)},
         {"dirty", m.dirty}};
}
inline void from_json(const json& j, GobMeasurement& m) {
    m.section_index = j.at("section").get<int>();
    m.cycle_id = j.at("cycle_id").get<std::int64_t>();
    m.timestamp = j.at("timestamp").get<double>();
    m.weight_g = io_detail::nan_or(j.at("weight_g"));
    m.length_mm = io_detail::nan_or(j.at("length_mm"));
    io_detail::read(j, "dirty", m.dirty);
}

// ---------------------------------------------------------------------------
// Pipeline

inline void to_json(json& j, const CleanOptions& o) {
    j = {{"temperature_c", o.temperature_c},
         {"master_speed", o.master_speed},
         {"min_run_cycles", o.min_run_cycles},
         {"outlier_sigmas", o.outlier_sigmas},
         {"remove_outliers", o.remove_outliers}};
}
inline void from_json(const json& j, CleanOptions& o) {
    io_detail::reject_unknown(j, "clean", {"temperature_c", "master_speed", "min_run_cycles", "outlier_sigmas", "remove_outliers"});
    io_detail::read(j, "temperature_c", o.temperature_c);
    io_detail::read(j, "master_speed", o.master_speed);
    io_detail::read(j, "min_run_cycles", o.min_run_cycles);
    io_detail::read(j, "outlier_sigmas", o.outlier_sigmas);
    io_detail::read(j, "remove_outliers", o.remove_outliers);
}

inline void to_json(json& j, const ReferencePolicy& p) {
    j = {{"kind", p.kind == ReferencePolicy::Kind::fixed ? "fixed" : "random"},
         {"fixed_section", p.fixed_section},
         {"all_pairs", p.all_pairs},
         {"seed", p.seed}};
}
inline void from_json(const json& j, ReferencePolicy& p) {
    io_detail::reject_unknown(j, "reference", {"kind", "fixed_section", "all_pairs", "seed"});
    if (j.contains("kind")) {
        const auto k = j.at("kind").get<std::string>();
        if (k == "fixed") p.kind = ReferencePolicy::Kind::fixed;
        else if (k == "random") p.kind = ReferencePolicy::Kind::random;
        else throw FormatError("reference: kind must be 'fixed' or 'random'");
    }
    io_detail::read(j, "fixed_section", p.fixed_section);
    io_detail::read(j, "all_pairs", p.all_pairs);
    io_detail::read(j, "seed", p.seed);
}

inline void to_json(json& j, const BinSpec& b) {
    j = {{"widths", b.widths}, {"max_per_bin", b.max_per_bin}, {"seed", b.seed}};
}
inline void from_json(const json& j, BinSpec& b) {
    io_detail::reject_unknown(j, "bins", {"widths", "max_per_bin", "seed"});
    if (j.contains("widths")) {
        std::set<std::string> names(dedup_variables().begin(), dedup_variables().end());
        for (auto it = j.at("widths").begin(); it != j.at("widths").end(); ++it) {
            if (!names.count(it.key())) throw FormatError("bins: unknown variable '" + it.key() + "'");
            b.widths[it.key()] = it->get<double>();
        }
    }
    io_detail::read(j, "max_per_bin", b.max_per_bin);
    io_detail::read(j, "seed", b.seed);
}

inline void to_json(json& j, const DedupReport& r) {
    j = {{"input_count", r.input_count},
         {"kept_count", r.kept_count},
         {"bin_count", r.bin_count},
         {"max_occupancy", r.max_occupancy},
         {"removal_fraction", r.removal_fraction()},
         {"occupancy", r.occupancy}};
}

inline void to_json(json& j, const DeltaScale& d) { j = {{"half_width_mm", d.half_width_mm}, {"weight", d.weight}}; }
inline void from_json(const json& j, DeltaScale& d) {
    j.at("half_width_mm").get_to(d.half_width_mm);
    j.at("weight").get_to(d.weight);
}

inline void to_json(json& j, const SamplerConfig& c) {
    j = {{"temperature_c", c.temperature_c},
         {"master_speed", c.master_speed},
         {"tube_rotation", c.tube_rotation},
         {"phase_deg", c.phase_deg},
         {"delta_scales", c.delta_scales},
         {"noise_sigma_weight", c.noise_sigma_weight},
         {"noise_sigma_length", c.noise_sigma_length},
         {"reference_weight_g", c.reference_weight_g},
         {"reference_length_mm", c.reference_length_mm}};
}
inline void from_json(const json& j, SamplerConfig& c) {
    io_detail::reject_unknown(j, "sampler",
                              {"temperature_c", "master_speed", "tube_rotation", "phase_deg", "delta_scales",
                               "noise_sigma_weight", "noise_sigma_length", "reference_weight_g", "reference_length_mm"});
    using io_detail::read;
    read(j, "temperature_c", c.temperature_c);
    read(j, "master_speed", c.master_speed);
    read(j, "tube_rotation", c.tube_rotation);
    read(j, "phase_deg", c.phase_deg);
    read(j, "delta_scales", c.delta_scales);
    read(j, "noise_sigma_weight", c.noise_sigma_weight);
    read(j, "noise_sigma_length", c.noise_sigma_length);
    read(j, "reference_weight_g", c.reference_weight_g);
    read(j, "reference_length_mm", c.reference_length_mm);
}

// ---------------------------------------------------------------------------
// Forward model

inline void to_json(json& j, const NetworkSpec& s) {
    j = {{"input_dim", s.input_dim},
         {"hidden", s.hidden},
         {"activation", "relu"},
         {"batch_norm_after_first_hidden", s.batch_norm_after_first_hidden},
         {"dropout_rate", s.dropout_rate},
         {"output_dim", s.output_dim}};
}
inline void from_json(const json& j, NetworkSpec& s) {
    io_detail::reject_unknown(j, "network",
                              {"input_dim", "hidden", "activation", "batch_norm_after_first_hidden", "dropout_rate", "output_dim"});
    if (j.contains("activation") && j.at("activation").get<std::string>() != "relu")
        throw FormatError("network: only the 'relu' activation is available");
    io_detail::read(j, "input_dim", s.input_dim);
    io_detail::read(j, "hidden", s.hidden);
    io_detail::read(j, "batch_norm_after_first_hidden", s.batch_norm_after_first_hidden);
    io_detail::read(j, "dropout_rate", s.dropout_rate);
    io_detail::read(j, "output_dim", s.output_dim);
}

inline void to_json(json& j, const TrainConfig& c) {
    j = {{"learning_rate", c.learning_rate},
         {"weight_decay", c.weight_decay},
         {"batch_size", c.batch_size},
         {"max_epochs", c.max_epochs},
         {"patience", c.patience},
         {"seed", c.seed},
         {"optimizer", "adamw"},
         {"cosine_schedule", c.cosine_schedule},
         {"recalibrate_batch_norm", c.recalibrate_batch_norm}};
}
inline void from_json(const json& j, TrainConfig& c) {
    io_detail::reject_unknown(j, "train",
                              {"learning_rate", "weight_decay", "batch_size", "max_epochs", "patience", "seed",
                               "optimizer", "cosine_schedule", "recalibrate_batch_norm"});
    if (j.contains("optimizer") && j.at("optimizer").get<std::string>() != "adamw")
        throw FormatError("train: only the 'adamw' optimizer is available");
    using io_detail::read;
    read(j, "learning_rate", c.learning_rate);
    read(j, "weight_decay", c.weight_decay);
    read(j, "batch_size", c.batch_size);
    read(j, "max_epochs", c.max_epochs);
    read(j, "patience", c.patience);
    read(j, "seed", c.seed);
    read(j, "cosine_schedule", c.cosine_schedule);
    read(j, "recalibrate_batch_norm", c.recalibrate_batch_norm);
}

inline void to_json(json& j, const SearchSpace& s) {
    j = {{"log10_learning_rate", s.log10_learning_rate},
         {"log10_weight_decay", s.log10_weight_decay},
         {"dropout", s.dropout},
         {"batch_sizes", s.batch_sizes}};
}
inline void from_json(const json& j, SearchSpace& s) {
    io_detail::reject_unknown(j, "search", {"log10_learning_rate", "log10_weight_decay", "dropout", "batch_sizes"});
    io_detail::read(j, "log10_learning_rate", s.log10_learning_rate);
    io_detail::read(j, "log10_weight_decay", s.log10_weight_decay);
    io_detail::read(j, "dropout", s.dropout);
    io_detail::read(j, "batch_sizes", s.batch_sizes);
}

inline void to_json(json& j, const EpochRecord& r) {
    j = {{"epoch", r.epoch}, {"learning_rate", r.learning_rate}, {"train_mae", r.train_mae}, {"val_mae", r.val_mae}};
}
inline void from_json(const json& j, EpochRecord& r) {
    j.at("epoch").get_to(r.epoch);
    io_detail::read(j, "learning_rate", r.learning_rate);
    j.at("train_mae").get_to(r.train_mae);
    j.at("val_mae").get_to(r.val_mae);
}

inline void to_json(json& j, const Trial& t) {
    j = {{"index", t.index}, {"config", t.config}, {"dropout", t.dropout}, {"val_mae", t.val_mae}, {"score", t.score}};
}

inline json model_to_json(const TrainedModel& m) {
    const auto& net = m.net;
    json layers = json::array();
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
        const std::size_t in = net.in_dim(l), out = net.out_dim(l);
        json rows = json::array();
        for (std::size_t o = 0; o < out; ++o)
            rows.push_back(std::vector<double>(net.weight(l) + o * in, net.weight(l) + (o + 1) * in));
        layers.push_back({{"in", in},
                          {"out", out},
                          {"weights", rows},
                          {"bias", std::vector<double>(net.bias(l), net.bias(l) + out)}});
    }
    json j = {{"format", "gobfeed.model"},
              {"version", format_version},
              {"spec", net.spec()},
              {"parameter_count", net.parameter_count()},
              {"layers", layers},
              {"input_normalization", {{"mean", m.input_mean}, {"scale", m.input_std}}},
              {"output_normalization", {{"mean", m.output_mean}, {"scale", m.output_std}}},
              {"history", m.history},
              {"best_epoch", m.best_epoch}};
    if (net.has_batch_norm()) {
        const std::size_t d = net.bn_dim();
        j["batch_norm"] = {{"gamma", std::vector<double>(net.bn_gamma(), net.bn_gamma() + d)},
                           {"beta", std::vector<double>(net.bn_beta(), net.bn_beta() + d)},
                           {"running_mean", net.running_mean()},
                           {"running_var", net.running_var()},
                           {"momentum", Mlp::bn_momentum},
                           {"epsilon", Mlp::bn_eps}};
    }
    return j;
}

inline TrainedModel model_from_json(const json& j) {
    if (!j.contains("version")) throw FormatError("model: missing version field");
    if (j.at("version").get<int>() != format_version)
        throw FormatError("model: unsupported version " + j.at("version").dump());
    if (j.value("format", std::string()) != "gobfeed.model") throw FormatError("model: not a model document");
    TrainedModel m;
    m.net = Mlp(j.at("spec").get<NetworkSpec>());
    auto& net = m.net;
    const auto& layers = j.at("layers");
    if (layers.size() != net.layer_count()) throw FormatError("model: layer count does not match the spec");
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
        const std::size_t in = net.in_dim(l), out = net.out_dim(l);
        const auto& L = layers[l];
        const auto& rows = L.at("weights");
        if (rows.size() != out) throw FormatError("model: layer " + std::to_string(l) + " has the wrong row count");
        for (std::size_t o = 0; o < out; ++o) {
            const auto row = rows[o].get<std::vector<double>>();
            if (row.size() != in) throw FormatError("model: layer " + std::to_string(l) + " has the wrong column count");
            std::copy(row.begin(), row.end(), net.params().begin() + static_cast<std::ptrdiff_t>(net.weight_offset(l) + o * in));
        }
        const auto bias = L.at("bias").get<std::vector<double>>();
        if (bias.size() != out) throw FormatError("model: layer " + std::to_string(l) + " has the wrong bias size");
        std::copy(bias.begin(), bias.end(), net.params().begin() + static_cast<std::ptrdiff_t>(net.bias_offset(l)));
    }
    if (net.has_batch_norm()) {
        const auto& bn = j.at("batch_norm");
        const std::size_t d = net.bn_dim();
        const auto gamma = bn.at("gamma").get<std::vector<double>>();
        const auto beta = bn.at("beta").get<std::vector<double>>();
        auto rm = bn.at("running_mean").get<std::vector<double>>();
        auto rv = bn.at("running_var").get<std::vector<double>>();
        if (gamma.size() != d || beta.size() != d || rm.size() != d || rv.size() != d)
            throw FormatError("model: batch-norm statistics have the wrong size");
        std::copy(gamma.begin(), gamma.end(), net.params().begin() + static_cast<std::ptrdiff_t>(net.bn_offset()));
        std::copy(beta.begin(), beta.end(), net.params().begin() + static_cast<std::ptrdiff_t>(net.bn_offset() + d));
        net.running_mean() = std::move(rm);
        net.running_var() = std::move(rv);
    }
    net.refresh();
    j.at("input_normalization").at("mean").get_to(m.input_mean);
    j.at("input_normalization").at("scale").get_to(m.input_std);
    j.at("output_normalization").at("mean").get_to(m.output_mean);
    j.at("output_normalization").at("scale").get_to(m.output_std);
    if (m.input_mean.size() != net.spec().input_dim || m.input_std.size() != net.spec().input_dim ||
        m.output_mean.size() != net.spec().output_dim || m.output_std.size() != net.spec().output_dim)
        throw FormatError("model: normalization statistics have the wrong size");
    io_detail::read(j, "history", m.history);
    io_detail::read(j, "best_epoch", m.best_epoch);
    return m;
}

inline void to_json(json& j, const TargetMetrics& m) {
    j = {{"count", m.count},
         {"mae", m.mae},
         {"rmse", m.rmse},
         {"medae", m.medae},
         {"r2", m.r2 ? json(*m.r2) : json(nullptr)},
         {"evs", m.evs ? json(*m.evs) : json(nullptr)}};
}

inline void to_json(json& j, const MetricReport& r) {
    j = {{"version", format_version}, {"weight", r.weight}, {"length", r.length}, {"per_class", json::array()}};
    for (const auto& c : r.per_class)
        j["per_class"].push_back({{"target", c.target}, {"class_low", c.class_low}, {"count", c.count}, {"mae", c.mae}});
}

// ---------------------------------------------------------------------------
// Inversion

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::gradient ? "gradient" : "montecarlo"; }

inline void to_json(json& j, const InversionParams& p) {
    j = {{"learning_rate", p.learning_rate},
         {"max_steps", p.max_steps},
         {"tolerance_weight_g", p.tolerance_weight_g},
         {"tolerance_length_mm", p.tolerance_length_mm},
         {"optimizer", to_string(p.kind)},
         {"upper_preference", p.upper_preference},
         {"step_size_penalty", p.step_size_penalty},
         {"mc_proposal_scale_mm", p.mc_proposal_scale_mm},
         {"seed", p.seed},
         {"momentum", p.momentum},
         {"weight_scale_g", p.weight_scale_g},
         {"length_scale_mm", p.length_scale_mm},
         {"deadpoint_scale_mm", p.deadpoint_scale_mm},
         {"barrier_weight", p.barrier_weight},
         {"min_stroke_mm", p.min_stroke_mm},
         {"stall_window", p.stall_window},
         {"stall_improvement", p.stall_improvement},
         {"clamp_tolerance_mm", p.clamp_tolerance_mm},
         {"settle_steps", p.settle_steps}};
}
inline void from_json(const json& j, InversionParams& p) {
    io_detail::reject_unknown(j, "inversion",
                              {"learning_rate", "max_steps", "tolerance_weight_g", "tolerance_length_mm", "optimizer",
                               "upper_preference", "step_size_penalty", "mc_proposal_scale_mm", "seed", "momentum",
                               "weight_scale_g", "length_scale_mm", "deadpoint_scale_mm", "barrier_weight",
                               "min_stroke_mm", "stall_window", "stall_improvement", "clamp_tolerance_mm", "settle_steps"});
    using io_detail::read;
    read(j, "learning_rate", p.learning_rate);
    read(j, "max_steps", p.max_steps);
    read(j, "tolerance_weight_g", p.tolerance_weight_g);
    read(j, "tolerance_length_mm", p.tolerance_length_mm);
    if (j.contains("optimizer")) {
        const auto k = j.at("optimizer").get<std::string>();
        if (k == "gradient") p.kind = OptimizerKind::gradient;
        else if (k == "montecarlo") p.kind = OptimizerKind::montecarlo;
        else throw FormatError("inversion: optimizer must be 'gradient' or 'montecarlo'");
    }
    read(j, "upper_preference", p.upper_preference);
    read(j, "step_size_penalty", p.step_size_penalty);
    read(j, "mc_proposal_scale_mm", p.mc_proposal_scale_mm);
    read(j, "seed", p.seed);
    read(j, "momentum", p.momentum);
    read(j, "weight_scale_g", p.weight_scale_g);
    read(j, "length_scale_mm", p.length_scale_mm);
    read(j, "deadpoint_scale_mm", p.deadpoint_scale_mm);
    read(j, "barrier_weight", p.barrier_weight);
    read(j, "min_stroke_mm", p.min_stroke_mm);
    read(j, "stall_window", p.stall_window);
    read(j, "stall_improvement", p.stall_improvement);
    read(j, "clamp_tolerance_mm", p.clamp_tolerance_mm);
    read(j, "settle_steps", p.settle_steps);
}

inline void to_json(json& j, const InversionRequest& r) {
    j = {{"version", format_version},
         {"machine_state", r.machine_state},
         {"initial_cycle", r.initial_cycle},
         {"targets", r.targets},
         {"params", r.params}};
}
// Fields absent from the document keep the values already in r (defaults from the config).
inline void from_json(const json& j, InversionRequest& r) {
    io_detail::reject_unknown(j, "request", {"version", "machine_state", "initial_cycle", "targets", "params"});
    if (j.contains("version") && j.at("version").get<int>() != format_version)
        throw FormatError("request: unsupported version " + j.at("version").dump());
    j.at("initial_cycle").get_to(r.initial_cycle);
    if (j.contains("machine_state")) j.at("machine_state").get_to(r.machine_state);
    else r.machine_state = r.initial_cycle.machine_state;
    j.at("targets").get_to(r.targets);
    if (j.contains("params")) j.at("params").get_to(r.params);
}

inline void to_json(json& j, const TraceStep& s) {
    j = {{"step", s.step},
         {"dparams", s.dparams},
         {"predictions", s.predictions},
         {"loss", s.loss},
         {"accepted", s.accepted},
         {"learning_rate", s.learning_rate}};
}

// Wall time is left out unless asked for, so repeated runs give identical documents.
inline json result_to_json(const InversionResult& r, bool include_timing = false, bool include_steps = true) {
    json j = {{"version", format_version},
              {"verdict", to_string(r.trace.verdict)},
              {"reason", r.trace.reason},
              {"cycle", r.cycle},
              {"dparams", r.dparams},
              {"predictions", r.predictions},
              {"loss", r.loss},
              {"clamped_mm", r.clamped_mm},
              {"steps_taken", r.trace.steps.size()},
              {"accepted_moves", r.trace.accepted_moves},
              {"theta_max", r.trace.theta_max},
              {"loss_normalization", r.trace.loss_normalization}};
    if (include_steps) j["trace"] = r.trace.steps;
    if (include_timing) j["wall_time_s"] = r.trace.wall_time_s;
    return j;
}

inline void to_json(json& j, const CaseResult& c) {
    j = {{"index", c.index},
         {"verdict", to_string(c.verdict)},
         {"steps", c.steps},
         {"wall_time_s", c.wall_time_s},
         {"residuals", c.residuals},
         {"oracle_residuals", c.oracle_residuals},
         {"max_abs_residual_w", c.max_abs_residual_w},
         {"max_abs_residual_l", c.max_abs_residual_l},
         {"max_relative_error_w", c.max_relative_error_w},
         {"max_relative_error_l", c.max_relative_error_l},
         {"max_final_relative_error_w", c.max_final_relative_error_w},
         {"max_final_relative_error_l", c.max_final_relative_error_l},
         {"oracle_within_3tol", c.oracle_within_3tol},
         {"upper_error_mm", c.upper_error_mm ? json(*c.upper_error_mm) : json(nullptr)},
         {"junction_errors_mm", c.junction_errors_mm},
         {"continuity_residual", c.continuity_residual},
         {"min_deadpoint", c.min_deadpoint}};
}

inline json summary_to_json(const BatchSummary& s, bool include_timing = true) {
    json j = {{"version", format_version},
              {"count", s.count},
              {"converged_fraction", s.converged_fraction},
              {"oracle_within_3tol_fraction", s.oracle_within_3tol_fraction},
              {"median_upper_error_mm", s.median_upper_error_mm ? json(*s.median_upper_error_mm) : json(nullptr)},
              {"median_junction_error_mm", s.median_junction_error_mm ? json(*s.median_junction_error_mm) : json(nullptr)},
              {"cases", s.cases}};
    if (include_timing) {
        j["wall_time_median_s"] = s.wall_time_median_s;
        j["wall_time_p90_s"] = s.wall_time_p90_s;
        j["wall_time_max_s"] = s.wall_time_max_s;
    } else {
        for (auto& c : j["cases"]) c.erase("wall_time_s");
    }
    return j;
}

inline void to_json(json& j, const SweepCurve& c) {
    j = {{"axis", c.axis},
         {"truncated", c.truncated()},
         {"truncated_below", c.truncated_below ? json(*c.truncated_below) : json(nullptr)},
         {"truncated_above", c.truncated_above ? json(*c.truncated_above) : json(nullptr)},
         {"points", json::array()}};
    for (const auto& p : c.points)
        j["points"].push_back({{"requested", p.requested}, {"verdict", to_string(p.verdict)}, {"correction", p.correction}});
}

inline void to_json(json& j, const SweepResult& s) {
    j = {{"version", format_version}, {"section", s.section}, {"weight", s.weight}, {"length", s.length}};
}

inline void to_json(json& j, const GridAxis& a) {
    j = {{"section", a.section},
         {"variable", a.variable == AxisVariable::sp ? "sp" : "up"},
         {"lo", a.lo},
         {"hi", a.hi},
         {"count", a.count}};
}
inline void from_json(const json& j, GridAxis& a) {
    io_detail::reject_unknown(j, "axis", {"section", "variable", "lo", "hi", "count"});
    io_detail::read(j, "section", a.section);
    if (j.contains("variable")) {
        const auto v = j.at("variable").get<std::string>();
        if (v == "sp") a.variable = AxisVariable::sp;
        else if (v == "up") a.variable = AxisVariable::up;
        else throw FormatError("axis: variable must be 'sp' or 'up'");
    }
    io_detail::read(j, "lo", a.lo);
    io_detail::read(j, "hi", a.hi);
    io_detail::read(j, "count", a.count);
}

inline void to_json(json& j, const MinimaReport& r) {
    j = {{"count", r.minima.size()},
         {"origin_nearest", r.origin_nearest ? json(*r.origin_nearest) : json(nullptr)},
         {"minima", json::array()}};
    for (const auto& m : r.minima) j["minima"].push_back({{"index", m.index}, {"location", m.location}, {"loss", m.loss}});
}

inline void to_json(json& j, const BasinReport& r) {
    j = {{"count", r.basins.size()},
         {"origin_nearest", r.origin_nearest ? json(*r.origin_nearest) : json(nullptr)},
         {"basins", json::array()}};
    for (const auto& b : r.basins)
        j["basins"].push_back({{"location", b.location},
                               {"dparams", b.dparams},
                               {"loss", b.loss},
                               {"grid_minima", b.grid_minima},
                               {"predictions", b.predictions}});
}

// ---------------------------------------------------------------------------
// Files

inline std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << text;
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline json read_json(const std::string& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw FormatError("'" + path + "' is not valid JSON: " + e.what());
    }
}

inline void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline void save_model(const std::string& path, const TrainedModel& m) { write_json(path, model_to_json(m)); }
inline TrainedModel load_model(const std::string& path) { return model_from_json(read_json(path)); }

// ---------------------------------------------------------------------------
// CSV

namespace csv {

inline std::string num(double v) {
    if (std::isnan(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_double(const std::string& s, std::size_t line, const std::string& col) {
    if (s.empty() || s == "nan" || s == "NaN") return std::numeric_limits<double>::quiet_NaN();
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw FormatError("csv line " + std::to_string(line) + ": bad number '" + s + "' in column " + col);
    return v;
}

struct Table {
    std::vector<std::string> header;
    std::map<std::string, std::size_t> column;
    std::vector<std::vector<std::string>> rows;

    std::size_t index(const std::string& name) const {
        auto it = column.find(name);
        if (it == column.end()) throw FormatError("csv: missing column '" + name + "'");
        return it->second;
    }
    bool has(const std::string& name) const { return column.count(name) > 0; }
};

inline Table read_table(std::istream& in) {
    Table t;
    std::string line;
    if (!std::getline(in, line)) throw FormatError("csv: empty input");
    t.header = split(line);
    for (std::size_t i = 0; i < t.header.size(); ++i) t.column[t.header[i]] = i;
    std::size_t n = 1;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty() || line == "\r") continue;
        auto row = split(line);
        if (row.size() != t.header.size())
            throw FormatError("csv line " + std::to_string(n) + ": expected " + std::to_string(t.header.size()) +
                              " fields, found " + std::to_string(row.size()));
        t.rows.push_back(std::move(row));
    }
    return t;
}

}  // namespace csv

inline const char* history_header =
    "cycle_id,timestamp,section,sp_mm,lp_mm,up_mm,temperature_c,master_speed,tube_rotation,phase_deg,tube_height_mm,"
    "weight_g,length_mm,dirty_flag";

inline void write_history_csv(std::ostream& out, const std::vector<HistoryRecord>& records) {
    out << history_header << '\n';
    for (const auto& r : records) {
        out << r.cycle_id << ',' << csv::num(r.timestamp) << ',' << r.section << ',' << csv::num(r.cam.sp) << ','
            << csv::num(r.cam.lp) << ',' << csv::num(r.cam.up) << ',' << csv::num(r.temperature_c) << ','
            << csv::num(r.master_speed) << ',' << csv::num(r.tube_rotation) << ',' << csv::num(r.phase_deg) << ','
            << csv::num(r.tube_height_mm) << ',' << csv::num(r.weight_g) << ',' << csv::num(r.length_mm) << ','
            << (r.dirty ? 1 : 0) << '\n';
    }
}

inline std::vector<HistoryRecord> read_history_csv(std::istream& in) {
    const auto t = csv::read_table(in);
    const char* names[] = {"cycle_id",      "timestamp",    "section",       "sp_mm",     "lp_mm",
                           "up_mm",         "temperature_c", "master_speed", "tube_rotation", "phase_deg",
                           "tube_height_mm", "weight_g",     "length_mm",    "dirty_flag"};
    std::vector<std::size_t> c;
    for (auto n : names) c.push_back(t.index(n));
    std::vector<HistoryRecord> out;
    out.reserve(t.rows.size());
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& row = t.rows[i];
        auto d = [&](std::size_t k) { return csv::parse_double(row[c[k]], i + 2, names[k]); };
        HistoryRecord r;
        r.cycle_id = static_cast<std::int64_t>(d(0));
        r.timestamp = d(1);
        r.section = static_cast<int>(d(2));
        r.cam = {d(3), d(4), d(5)};
        r.temperature_c = d(6);
        r.master_speed = d(7);
        r.tube_rotation = d(8);
        r.phase_deg = d(9);
        r.tube_height_mm = d(10);
        r.weight_g = d(11);
        r.length_mm = d(12);
        r.dirty = row[c[13]] == "1" || row[c[13]] == "true";
        out.push_back(r);
    }
    return out;
}

inline const char* dataset_header =
    "temperature_c,master_speed,tube_rotation,phase_deg,dsp_mm,dlp_mm,dup_mm,dw_g,dl_mm,cycle_id,timestamp,"
    "ref_weight_g,ref_length_mm,ref_section,other_section";

inline void write_dataset_csv(std::ostream& out, const std::vector<DifferentialSample>& samples) {
    out << dataset_header << '\n';
    for (const auto& s : samples) {
        out << csv::num(s.temperature_c) << ',' << csv::num(s.master_speed) << ',' << csv::num(s.tube_rotation) << ','
            << csv::num(s.phase_deg) << ',' << csv::num(s.delta.dsp) << ',' << csv::num(s.delta.dlp) << ','
            << csv::num(s.delta.dup) << ',' << csv::num(s.target.dw) << ',' << csv::num(s.target.dl) << ','
            << s.cycle_id << ',' << csv::num(s.timestamp) << ',' << csv::num(s.reference_weight_g) << ','
            << csv::num(s.reference_length_mm) << ',' << s.reference_section << ',' << s.other_section << '\n';
    }
}

inline std::vector<DifferentialSample> read_dataset_csv(std::istream& in) {
    const auto t = csv::read_table(in);
    const char* names[] = {"temperature_c", "master_speed", "tube_rotation", "phase_deg", "dsp_mm", "dlp_mm",
                           "dup_mm",        "dw_g",         "dl_mm",         "cycle_id",  "timestamp"};
    std::vector<std::size_t> c;
    for (auto n : names) c.push_back(t.index(n));
    const char* extra[] = {"ref_weight_g", "ref_length_mm", "ref_section", "other_section"};
    std::vector<std::optional<std::size_t>> e;
    for (auto n : extra) e.push_back(t.has(n) ? std::optional<std::size_t>(t.index(n)) : std::nullopt);
    std::vector<DifferentialSample> out;
    out.reserve(t.rows.size());
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& row = t.rows[i];
        auto d = [&](std::size_t k) { return csv::parse_double(row[c[k]], i + 2, names[k]); };
        DifferentialSample s;
        s.temperature_c = d(0);
        s.master_speed = d(1);
        s.tube_rotation = d(2);
        s.phase_deg = d(3);
        s.delta = {d(4), d(5), d(6)};
        s.target = {d(7), d(8)};
        s.cycle_id = static_cast<std::int64_t>(d(9));
        s.timestamp = d(10);
        if (e[0]) s.reference_weight_g = csv::parse_double(row[*e[0]], i + 2, extra[0]);
        if (e[1]) s.reference_length_mm = csv::parse_double(row[*e[1]], i + 2, extra[1]);
        if (e[2]) s.reference_section = static_cast<int>(csv::parse_double(row[*e[2]], i + 2, extra[2]));
        if (e[3]) s.other_section = static_cast<int>(csv::parse_double(row[*e[3]], i + 2, extra[3]));
        for (double v : {s.temperature_c, s.master_speed, s.tube_rotation, s.phase_deg, s.delta.dsp, s.delta.dlp,
                         s.delta.dup, s.target.dw, s.target.dl})
            if (!std::isfinite(v)) throw FormatError("dataset line " + std::to_string(i + 2) + ": non-finite value");
        out.push_back(s);
    }
    return out;
}

inline void write_metrics_csv(std::ostream& out, const MetricReport& r) {
    out << "target,count,mae,rmse,medae,r2,evs\n";
    auto row = [&](const char* name, const TargetMetrics& m) {
        out << name << ',' << m.count << ',' << csv::num(m.mae) << ',' << csv::num(m.rmse) << ',' << csv::num(m.medae)
            << ',' << (m.r2 ? csv::num(*m.r2) : "") << ',' << (m.evs ? csv::num(*m.evs) : "") << '\n';
    };
    row("weight", r.weight);
    row("length", r.length);
}

inline void write_class_csv(std::ostream& out, const MetricReport& r) {
    out << "target,class_low,count,mae\n";
    for (const auto& c : r.per_class)
        out << c.target << ',' << csv::num(c.class_low) << ',' << c.count << ',' << csv::num(c.mae) << '\n';
}

inline void write_grid_csv(std::ostream& out, const LossGrid& g) {
    for (const auto& a : g.axes) out << a.label() << ',';
    out << "loss\n";
    std::vector<std::string> labels;
    for (std::size_t f = 0; f < g.size(); ++f) {
        const auto idx = g.unravel(f);
        for (std::size_t a = 0; a < g.axes.size(); ++a) out << csv::num(g.axes[a].value(idx[a])) << ',';
        out << csv::num(g.loss[f]) << '\n';
    }
}

inline void write_summary_csv(std::ostream& out, const BatchSummary& s, bool include_timing = true) {
    out << "index,verdict,steps,max_abs_residual_w,max_abs_residual_l,max_final_relative_error_w,"
           "max_final_relative_error_l,oracle_within_3tol,upper_error_mm,junction_error_mean_mm,continuity_residual";
    if (include_timing) out << ",wall_time_s";
    out << '\n';
    for (const auto& c : s.cases) {
        double je = 0.0;
        for (double v : c.junction_errors_mm) je += v;
        if (!c.junction_errors_mm.empty()) je /= static_cast<double>(c.junction_errors_mm.size());
        out << c.index << ',' << to_string(c.verdict) << ',' << c.steps << ',' << csv::num(c.max_abs_residual_w) << ','
            << csv::num(c.max_abs_residual_l) << ',' << csv::num(c.max_final_relative_error_w) << ','
            << csv::num(c.max_final_relative_error_l) << ',' << (c.oracle_within_3tol ? 1 : 0) << ','
            << (c.upper_error_mm ? csv::num(*c.upper_error_mm) : "") << ','
            << (c.junction_errors_mm.empty() ? "" : csv::num(je)) << ',' << csv::num(c.continuity_residual);
        if (include_timing) out << ',' << csv::num(c.wall_time_s);
        out << '\n';
    }
}

inline void write_sweep_csv(std::ostream& out, const SweepResult& s) {
    out << "axis,requested,verdict,dsp_mm,dlp_mm,dup_mm\n";
    for (const auto* c : {&s.weight, &s.length}) {
        for (const auto& p : c->points)
            out << c->axis << ',' << csv::num(p.requested) << ',' << to_string(p.verdict) << ','
                << csv::num(p.correction.dsp) << ',' << csv::num(p.correction.dlp) << ',' << csv::num(p.correction.dup)
                << '\n';
        if (c->truncated_below) out << c->axis << ',' << csv::num(*c->truncated_below) << ",truncated,,,\n";
        if (c->truncated_above) out << c->axis << ',' << csv::num(*c->truncated_above) << ",truncated,,,\n";
    }
}

}  // namespace gobfeed
