#pragma once

#include <cstdint>
#include <string>

#include "io.hpp"

namespace gobfeed {

struct DatasetConfig {
    double validation_fraction = 0.25;
    bool dedup = true;
};

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::size_t history_capacity = 1000;
    std::size_t working_point = 1;
    MachineState machine_state;
};

// Everything a CLI run can be configured with; one JSON document, every section optional.
struct AppConfig {
    PlantConfig plant;
    CleanOptions clean;
    ReferencePolicy reference;
    BinSpec bins;
    DatasetConfig dataset;
    NetworkSpec network;
    TrainConfig train;
    SearchSpace search;
    InversionParams inversion;
    SamplerConfig sampler;
    ServiceConfig service;
};

inline void to_json(json& j, const DatasetConfig& c) {
    j = {{"validation_fraction", c.validation_fraction}, {"dedup", c.dedup}};
}
inline void from_json(const json& j, DatasetConfig& c) {
    io_detail::reject_unknown(j, "dataset", {"validation_fraction", "dedup"});
    io_detail::read(j, "validation_fraction", c.validation_fraction);
    io_detail::read(j, "dedup", c.dedup);
}

inline void to_json(json& j, const ServiceConfig& c) {
    j = {{"host", c.host},
         {"port", c.port},
         {"history_capacity", c.history_capacity},
         {"working_point", c.working_point},
         {"machine_state", c.machine_state}};
}
inline void from_json(const json& j, ServiceConfig& c) {
    io_detail::reject_unknown(j, "service", {"host", "port", "history_capacity", "working_point", "machine_state"});
    io_detail::read(j, "host", c.host);
    io_detail::read(j, "port", c.port);
    io_detail::read(j, "history_capacity", c.history_capacity);
    io_detail::read(j, "working_point", c.working_point);
    io_detail::read(j, "machine_state", c.machine_state);
}

inline void to_json(json& j, const AppConfig& c) {
    j = {{"version", format_version}, {"plant", c.plant},     {"clean", c.clean},   {"reference", c.reference},
         {"bins", c.bins},            {"dataset", c.dataset}, {"network", c.network}, {"train", c.train},
         {"search", c.search},        {"inversion", c.inversion}, {"sampler", c.sampler}, {"service", c.service}};
}
inline void from_json(const json& j, AppConfig& c) {
    io_detail::reject_unknown(j, "config",
                              {"version", "plant", "clean", "reference", "bins", "dataset", "network", "train", "search",
                               "inversion", "sampler", "service"});
    if (j.contains("version") && j.at("version").get<int>() != format_version)
        throw FormatError("config: unsupported version " + j.at("version").dump());
    io_detail::read(j, "plant", c.plant);
    io_detail::read(j, "clean", c.clean);
    io_detail::read(j, "reference", c.reference);
    io_detail::read(j, "bins", c.bins);
    io_detail::read(j, "dataset", c.dataset);
    io_detail::read(j, "network", c.network);
    io_detail::read(j, "train", c.train);
    io_detail::read(j, "search", c.search);
    io_detail::read(j, "inversion", c.inversion);
    io_detail::read(j, "sampler", c.sampler);
    io_detail::read(j, "service", c.service);
}

inline void validate(const AppConfig& c) {
    validate_config(c.plant);
    validate_bins(c.bins);
    validate_spec(c.network);
    validate_train_config(c.train);
    validate_params(c.inversion);
    if (!(c.dataset.validation_fraction > 0.0 && c.dataset.validation_fraction < 1.0))
        throw std::invalid_argument("dataset: validation_fraction must lie in (0, 1)");
    if (c.service.history_capacity < 1) throw std::invalid_argument("service: history_capacity must be >= 1");
    if (c.service.working_point >= c.plant.working_points.size())
        throw std::invalid_argument("service: working_point out of range");
}

// Seeds passed on the command line override the per-section seeds of the file.
inline AppConfig load_config(const std::string& path, std::optional<std::uint64_t> seed = std::nullopt) {
    AppConfig c;
    if (!path.empty()) read_json(path).get_to(c);
    if (seed) {
        c.plant.seed = *seed;
        c.reference.seed = *seed;
        c.bins.seed = *seed;
        c.train.seed = *seed;
        c.inversion.seed = *seed;
    }
    validate(c);
    return c;
}

}  // namespace gobfeed
