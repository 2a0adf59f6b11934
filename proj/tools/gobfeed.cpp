#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gobfeed/config.hpp"
#include "gobfeed/experiments.hpp"
#include "gobfeed/io.hpp"
#include "gobfeed/service.hpp"

namespace fs = std::filesystem;
using namespace gobfeed;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    AppConfig load() const { return load_config(config, seed); }
    std::uint64_t seed_or(std::uint64_t fallback) const { return seed.value_or(fallback); }
};

struct ModelChoice {
    std::string path;
    bool surrogate = false;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "JSON config file (every section optional)")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "seed overriding the config seeds");
}

void add_model(CLI::App* sub, ModelChoice& m) {
    auto* a = sub->add_option("--model", m.path, "trained model JSON")->check(CLI::ExistingFile);
    auto* b = sub->add_flag("--surrogate", m.surrogate, "use the closed-form plant response as the model");
    a->excludes(b);
}

// Calls f with the chosen response model.
template <class F>
void with_model(const ModelChoice& m, F&& f) {
    if (m.surrogate) {
        f(SurrogateModel{});
        return;
    }
    if (m.path.empty()) throw CLI::ValidationError("--model", "one of --model or --surrogate is required");
    const auto model = load_model(m.path);
    f(model);
}

Range parse_range(const std::string& s, const char* what) {
    const auto colon = s.find(':', s[0] == '-' ? 1 : 0);
    if (colon == std::string::npos) throw CLI::ValidationError(what, "expected lo:hi");
    try {
        Range r{std::stod(s.substr(0, colon)), std::stod(s.substr(colon + 1))};
        if (!(r.lo <= r.hi)) throw CLI::ValidationError(what, "lo must not exceed hi");
        return r;
    } catch (const std::logic_error&) {
        throw CLI::ValidationError(what, "expected lo:hi, got '" + s + "'");
    }
}

std::vector<std::size_t> parse_grid(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        try {
            std::size_t used = 0;
            const auto v = std::stoul(part, &used);
            if (used != part.size()) throw std::invalid_argument(part);
            out.push_back(v);
        } catch (const std::logic_error&) {
            throw CLI::ValidationError("--grid", "expected counts like 30x30 or 30x30x30x30");
        }
    }
    if (out.size() != 2 && out.size() != 4) throw CLI::ValidationError("--grid", "2 or 4 axes");
    return out;
}

std::vector<HistoryRecord> load_history(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    return read_history_csv(in);
}

std::vector<DifferentialSample> load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    return read_dataset_csv(in);
}

template <class W>
void write_file(const fs::path& path, W&& writer) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    writer(out);
    if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

void ensure_dir(const std::string& dir) {
    if (!dir.empty()) fs::create_directories(dir);
}

// Nominal cycle of the configured service working point.
InversionRequest nominal_request(const AppConfig& cfg) {
    Plant plant(cfg.plant, cfg.service.working_point, cfg.service.machine_state, cfg.plant.seed);
    InversionRequest r;
    r.initial_cycle = plant.current_cycle();
    r.machine_state = r.initial_cycle.machine_state;
    r.targets.assign(r.initial_cycle.size(), GobDelta{});
    r.params = cfg.inversion;
    return r;
}

// Params missing from the file come from the config.
InversionRequest load_request(const std::string& path, const AppConfig& cfg) {
    InversionRequest r;
    r.params = cfg.inversion;
    read_json(path).get_to(r);
    validate_request(r);
    return r;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gob feeder forward model and cam inversion"};
    app.require_subcommand(1);

    // simulate
    Common c_sim;
    std::size_t sim_cycles = 50000;
    std::string sim_out;
    auto* sim = app.add_subcommand("simulate", "generate a plant history CSV");
    add_common(sim, c_sim);
    sim->add_option("--cycles", sim_cycles, "number of machine cycles")->check(CLI::Range(std::size_t{1}, std::size_t{10'000'000}));
    sim->add_option("--out", sim_out, "history CSV")->required();

    // sample
    Common c_smp;
    std::size_t smp_count = 50000;
    std::string smp_dir;
    auto* smp = app.add_subcommand("sample", "draw differential samples straight from the surrogate response");
    add_common(smp, c_smp);
    smp->add_option("--samples", smp_count, "number of samples")->check(CLI::PositiveNumber);
    smp->add_option("--out-dir", smp_dir, "directory for train.csv, validation.csv")->required();

    // build-dataset
    Common c_bd;
    std::string bd_history, bd_dir;
    auto* bd = app.add_subcommand("build-dataset", "clean, difference, split and dedup a history");
    add_common(bd, c_bd);
    bd->add_option("--history", bd_history, "history CSV")->required()->check(CLI::ExistingFile);
    bd->add_option("--out-dir", bd_dir, "directory for train.csv, validation.csv, report.json")->required();

    // train
    Common c_tr;
    std::string tr_train, tr_val, tr_model, tr_metrics, tr_search;
    std::size_t tr_budget = 0;
    std::optional<std::size_t> tr_epochs;
    auto* tr = app.add_subcommand("train", "fit the forward model");
    add_common(tr, c_tr);
    tr->add_option("--train", tr_train, "training CSV")->required()->check(CLI::ExistingFile);
    tr->add_option("--validation", tr_val, "validation CSV")->required()->check(CLI::ExistingFile);
    tr->add_option("--model-out", tr_model, "model JSON")->required();
    tr->add_option("--metrics-out", tr_metrics, "metric report JSON on the validation set");
    tr->add_option("--search-budget", tr_budget, "random hyperparameter trials before the final fit (0: none)");
    tr->add_option("--search-out", tr_search, "search leaderboard JSON");
    tr->add_option("--epochs", tr_epochs, "override max_epochs")->check(CLI::PositiveNumber);

    // evaluate
    Common c_ev;
    std::string ev_model, ev_data, ev_dir;
    auto* ev = app.add_subcommand("evaluate", "regression metrics and per-class MAE");
    add_common(ev, c_ev);
    ev->add_option("--model", ev_model, "model JSON")->required()->check(CLI::ExistingFile);
    ev->add_option("--data", ev_data, "dataset CSV")->required()->check(CLI::ExistingFile);
    ev->add_option("--out-dir", ev_dir, "directory for metrics.json, metrics.csv, classes.csv")->required();

    // invert
    Common c_inv;
    ModelChoice m_inv;
    std::string inv_req, inv_out;
    bool inv_timing = false, inv_no_trace = false;
    auto* inv = app.add_subcommand("invert", "solve one inversion request");
    add_common(inv, c_inv);
    add_model(inv, m_inv);
    inv->add_option("--request", inv_req, "request JSON")->required()->check(CLI::ExistingFile);
    inv->add_option("--out", inv_out, "result JSON")->required();
    inv->add_flag("--timing", inv_timing, "include wall time in the result");
    inv->add_flag("--no-trace", inv_no_trace, "leave the step trace out");

    // batch-eval
    Common c_be;
    ModelChoice m_be;
    std::string be_history, be_dir;
    CaseOptions be_opt;
    auto* be = app.add_subcommand("batch-eval", "invert single-section changes on held-out cycles");
    add_common(be, c_be);
    add_model(be, m_be);
    be->add_option("--history", be_history, "history CSV")->required()->check(CLI::ExistingFile);
    be->add_option("--count", be_opt.count, "number of cases")->check(CLI::PositiveNumber);
    be->add_option("--weight-range", be_opt.weight_range_g, "targets drawn in [-w, w] g");
    be->add_option("--length-range", be_opt.length_range_mm, "targets drawn in [-l, l] mm");
    be->add_option("--out-dir", be_dir, "directory for summary.json, cases.csv, timing.json")->required();

    // sweep
    Common c_sw;
    ModelChoice m_sw;
    std::string sw_req, sw_dir, sw_wr = "-50:50", sw_lr = "-50:50";
    std::size_t sw_section = 0, sw_points = 21;
    auto* sw = app.add_subcommand("sweep", "correction versus requested change on one section");
    add_common(sw, c_sw);
    add_model(sw, m_sw);
    sw->add_option("--request", sw_req, "base request JSON (default: nominal cycle)")->check(CLI::ExistingFile);
    sw->add_option("--section", sw_section, "swept section");
    sw->add_option("--points", sw_points, "points per axis")->check(CLI::Range(std::size_t{1}, std::size_t{201}));
    sw->add_option("--weight-range", sw_wr, "lo:hi in g (use --weight-range=-50:50)");
    sw->add_option("--length-range", sw_lr, "lo:hi in mm");
    sw->add_option("--out-dir", sw_dir, "directory for sweep.json, sweep.csv")->required();

    // landscape
    Common c_ls;
    ModelChoice m_ls;
    std::string ls_grid = "30x30", ls_req, ls_out, ls_minima, ls_path, ls_range = "-40:40";
    std::size_t ls_section = 0;
    double ls_weight = 50.0, ls_length = 0.0;
    bool ls_consolidate = false;
    auto* ls = app.add_subcommand("landscape", "loss on a grid of deadpoint deltas");
    add_common(ls, c_ls);
    add_model(ls, m_ls);
    ls->add_option("--grid", ls_grid, "NxM (SP, UP of one section) or AxBxCxD (two-section scenario)");
    ls->add_option("--request", ls_req, "request JSON for 2-axis grids (default: nominal cycle)")->check(CLI::ExistingFile);
    ls->add_option("--section", ls_section, "section of a 2-axis grid");
    ls->add_option("--weight", ls_weight, "weight target on that section without --request, g");
    ls->add_option("--length", ls_length, "length target on that section without --request, mm");
    ls->add_option("--range", ls_range, "lo:hi of both axes of a 2-axis grid, mm");
    ls->add_option("--out", ls_out, "grid CSV")->required();
    ls->add_option("--minima-out", ls_minima, "local minima JSON");
    ls->add_option("--path-out", ls_path, "zero-start optimizer path CSV");
    ls->add_flag("--consolidate", ls_consolidate, "descend from each grid minimum and merge end points");

    // dedup-study
    Common c_ds;
    std::string ds_history, ds_out, ds_factors = "0,0.5,1,2,4,8";
    std::optional<std::size_t> ds_epochs;
    auto* ds = app.add_subcommand("dedup-study", "retrain across dedup bin-width factors");
    add_common(ds, c_ds);
    ds->add_option("--history", ds_history, "history CSV")->required()->check(CLI::ExistingFile);
    ds->add_option("--factors", ds_factors, "comma separated bin-width factors; 0 means no dedup");
    ds->add_option("--epochs", ds_epochs, "override max_epochs")->check(CLI::PositiveNumber);
    ds->add_option("--out", ds_out, "study CSV")->required();

    // serve
    Common c_sv;
    ModelChoice m_sv;
    std::optional<int> sv_port;
    std::optional<std::string> sv_host;
    auto* sv = app.add_subcommand("serve", "HTTP service around a live simulated plant");
    add_common(sv, c_sv);
    add_model(sv, m_sv);
    sv->add_option("--port", sv_port, "listen port (0: any)")->check(CLI::Range(0, 65535));
    sv->add_option("--host", sv_host, "listen address");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*sim) {
            const auto cfg = c_sim.load();
            const auto records = flatten(generate_history(cfg.plant, sim_cycles));
            write_file(sim_out, [&](std::ostream& o) { write_history_csv(o, records); });
            std::cout << "wrote " << records.size() << " records to " << sim_out << "\n";
        } else if (*smp) {
            const auto cfg = c_smp.load();
            const auto samples = sample_surrogate_dataset(cfg.sampler, smp_count, c_smp.seed_or(cfg.plant.seed));
            const auto split = temporal_split(samples, cfg.dataset.validation_fraction);
            ensure_dir(smp_dir);
            write_file(fs::path(smp_dir) / "train.csv", [&](std::ostream& o) { write_dataset_csv(o, split.train); });
            write_file(fs::path(smp_dir) / "validation.csv",
                       [&](std::ostream& o) { write_dataset_csv(o, split.validation); });
            std::cout << split.train.size() << " train, " << split.validation.size() << " validation samples\n";
        } else if (*bd) {
            const auto cfg = c_bd.load();
            const auto b = build_dataset(load_history(bd_history), cfg);
            ensure_dir(bd_dir);
            write_file(fs::path(bd_dir) / "train.csv", [&](std::ostream& o) { write_dataset_csv(o, b.train); });
            write_file(fs::path(bd_dir) / "validation.csv", [&](std::ostream& o) { write_dataset_csv(o, b.validation); });
            write_json((fs::path(bd_dir) / "report.json").string(), build_report_json(b));
            std::cout << b.train.size() << " train (" << b.train_before_dedup << " before dedup), "
                      << b.validation.size() << " validation samples\n";
        } else if (*tr) {
            auto cfg = c_tr.load();
            if (tr_epochs) cfg.train.max_epochs = *tr_epochs;
            const auto train_ds = Dataset::from_samples(load_dataset(tr_train));
            const auto val_ds = Dataset::from_samples(load_dataset(tr_val));
            auto spec = cfg.network;
            auto tc = cfg.train;
            if (tr_budget > 0) {
                const auto sr = hyper_search(cfg.search, tr_budget, tc.seed, spec, train_ds, val_ds, tc);
                tc = sr.best.config;
                spec.dropout_rate = sr.best.dropout;
                if (!tr_search.empty()) {
                    json lb = json::array();
                    for (const auto& t : sr.leaderboard) lb.push_back(t);
                    write_json(tr_search, {{"version", format_version}, {"leaderboard", lb}});
                }
            }
            const auto model = train(Mlp::build(spec, tc.seed), train_ds, val_ds, tc);
            save_model(tr_model, model);
            const auto& best = model.history[model.best_epoch - 1];
            std::cout << "best epoch " << model.best_epoch << ", validation MAE " << best.val_mae[0] << " g, "
                      << best.val_mae[1] << " mm\n";
            if (!tr_metrics.empty()) write_json(tr_metrics, evaluate(model, load_dataset(tr_val)));
        } else if (*ev) {
            const auto cfg = c_ev.load();
            (void)cfg;
            const auto model = load_model(ev_model);
            const auto rep = evaluate(model, load_dataset(ev_data));
            ensure_dir(ev_dir);
            json j = rep;
            j["version"] = format_version;
            write_json((fs::path(ev_dir) / "metrics.json").string(), j);
            write_file(fs::path(ev_dir) / "metrics.csv", [&](std::ostream& o) { write_metrics_csv(o, rep); });
            write_file(fs::path(ev_dir) / "classes.csv", [&](std::ostream& o) { write_class_csv(o, rep); });
            std::cout << "weight MAE " << rep.weight.mae << " g, length MAE " << rep.length.mae << " mm\n";
        } else if (*inv) {
            const auto cfg = c_inv.load();
            auto req = load_request(inv_req, cfg);
            if (c_inv.seed) req.params.seed = *c_inv.seed;
            with_model(m_inv, [&](const auto& model) {
                const auto res = invert(model, req);
                write_json(inv_out, result_to_json(res, inv_timing, !inv_no_trace));
                std::cout << to_string(res.trace.verdict) << ": " << res.trace.reason << "\n";
            });
        } else if (*be) {
            const auto cfg = c_be.load();
            be_opt.seed = c_be.seed_or(cfg.inversion.seed);
            const auto cleaned = clean(load_history(be_history), cfg.clean);
            const auto cycles = complete_cycles(cleaned.records);
            const auto cases = transformation_cases(cycles, be_opt, cfg.inversion, cfg.bins);
            if (cases.empty()) throw std::runtime_error("batch-eval: no usable held-out cycles");
            with_model(m_be, [&](const auto& model) {
                const auto s = batch_evaluate(cases, model, surrogate_oracle());
                ensure_dir(be_dir);
                write_json((fs::path(be_dir) / "summary.json").string(), summary_to_json(s, false));
                write_file(fs::path(be_dir) / "cases.csv", [&](std::ostream& o) { write_summary_csv(o, s, false); });
                write_json((fs::path(be_dir) / "timing.json").string(),
                           {{"version", format_version},
                            {"wall_time_median_s", s.wall_time_median_s},
                            {"wall_time_p90_s", s.wall_time_p90_s},
                            {"wall_time_max_s", s.wall_time_max_s}});
                std::cout << s.count << " cases, converged " << s.converged_fraction << ", plant within 3x tolerance "
                          << s.oracle_within_3tol_fraction << "\n";
            });
        } else if (*sw) {
            const auto cfg = c_sw.load();
            auto req = sw_req.empty() ? nominal_request(cfg) : load_request(sw_req, cfg);
            const auto wr = parse_range(sw_wr, "--weight-range");
            const auto lr = parse_range(sw_lr, "--length-range");
            with_model(m_sw, [&](const auto& model) {
                const auto s = stability_sweep(model, req, sw_section, wr, lr, sw_points);
                ensure_dir(sw_dir);
                write_json((fs::path(sw_dir) / "sweep.json").string(), s);
                write_file(fs::path(sw_dir) / "sweep.csv", [&](std::ostream& o) { write_sweep_csv(o, s); });
                std::cout << "weight axis " << (s.weight.truncated() ? "truncated" : "complete") << ", length axis "
                          << (s.length.truncated() ? "truncated" : "complete") << "\n";
            });
        } else if (*ls) {
            const auto cfg = c_ls.load();
            const auto counts = parse_grid(ls_grid);
            InversionRequest req;
            GridSpec spec;
            if (counts.size() == 4) {
                req = two_cam_request(cfg.service.machine_state);
                req.params = cfg.inversion;
                spec = two_cam_grid();
                for (std::size_t a = 0; a < 4; ++a) spec.axes[a].count = counts[a];
            } else {
                if (ls_req.empty()) {
                    req = nominal_request(cfg);
                    if (ls_section >= req.targets.size()) throw CLI::ValidationError("--section", "no such section");
                    req.targets[ls_section] = {ls_weight, ls_length};
                } else {
                    req = load_request(ls_req, cfg);
                    if (ls_section >= req.targets.size()) throw CLI::ValidationError("--section", "no such section");
                }
                const auto r = parse_range(ls_range, "--range");
                spec.axes = {{ls_section, AxisVariable::sp, r.lo, r.hi, counts[0]},
                             {ls_section, AxisVariable::up, r.lo, r.hi, counts[1]}};
            }
            with_model(m_ls, [&](const auto& model) {
                std::vector<std::vector<double>> path;
                InversionResult zero;
                if (!ls_path.empty() || !ls_minima.empty()) {
                    zero = invert_gradient(model, req, [&](const TraceStep& s) { path.push_back(s.dparams); });
                }
                const auto grid = loss_landscape(model, req, spec, path);
                write_file(ls_out, [&](std::ostream& o) { write_grid_csv(o, grid); });
                if (!ls_path.empty()) {
                    write_file(ls_path, [&](std::ostream& o) {
                        o << "step";
                        for (const auto& a : grid.axes) o << ',' << a.label();
                        o << '\n';
                        for (std::size_t k = 0; k < grid.path.size(); ++k) {
                            o << k;
                            for (double v : grid.path[k]) o << ',' << csv::num(v);
                            o << '\n';
                        }
                    });
                }
                const auto minima = enumerate_minima(grid, 10.0);
                if (!ls_minima.empty()) {
                    json j = {{"version", format_version}, {"axes", grid.axes}, {"grid_minima", minima}};
                    std::vector<double> zloc;
                    for (const auto& a : grid.axes) zloc.push_back(zero.dparams[a.param_index(req.initial_cycle.size())]);
                    j["zero_start"] = {{"verdict", to_string(zero.trace.verdict)}, {"location", zloc}, {"loss", zero.loss}};
                    if (ls_consolidate) j["basins"] = consolidate_minima(model, req, grid, minima);
                    write_json(ls_minima, j);
                }
                std::cout << grid.size() << " grid points, " << minima.minima.size() << " local minima\n";
            });
        } else if (*ds) {
            auto cfg = c_ds.load();
            if (ds_epochs) cfg.train.max_epochs = *ds_epochs;
            std::vector<double> factors;
            {
                std::stringstream ss(ds_factors);
                std::string part;
                while (std::getline(ss, part, ',')) factors.push_back(std::stod(part));
            }
            if (factors.empty()) throw CLI::ValidationError("--factors", "at least one factor");
            auto dcfg = cfg;
            dcfg.dataset.dedup = false;
            const auto b = build_dataset(load_history(ds_history), dcfg);
            const auto study = dedup_study(b.train, b.validation, factors, cfg.bins, cfg.network, cfg.train);
            write_file(ds_out, [&](std::ostream& o) {
                o << "factor,train_size,removal_fraction,val_mae_weight_g,val_mae_length_mm,best_epoch\n";
                for (const auto& p : study)
                    o << csv::num(p.factor) << ',' << p.train_size << ',' << csv::num(p.removal_fraction) << ','
                      << (p.val_mae.size() > 0 ? csv::num(p.val_mae[0]) : "") << ','
                      << (p.val_mae.size() > 1 ? csv::num(p.val_mae[1]) : "") << ',' << p.best_epoch << '\n';
            });
            for (const auto& p : study)
                std::cout << "factor " << p.factor << ": " << p.train_size << " samples\n";
        } else if (*sv) {
            auto cfg = c_sv.load();
            if (sv_port) cfg.service.port = *sv_port;
            if (sv_host) cfg.service.host = *sv_host;
            std::optional<SharedModel> model;
            if (m_sv.surrogate) model = SharedModel::of(std::make_shared<const SurrogateModel>());
            else if (!m_sv.path.empty()) model = SharedModel::of(std::make_shared<const TrainedModel>(load_model(m_sv.path)));
            Session session(cfg.plant, cfg.service, model, cfg.inversion, cfg.plant.seed);
            Service service(session);
            int port = cfg.service.port;
            if (port == 0) {
                port = service.bind_any(cfg.service.host);
                if (port < 0) throw std::runtime_error("serve: cannot bind " + cfg.service.host);
            }
            std::cout << "listening on http://" << cfg.service.host << ':' << port << std::endl;
            const bool ok = cfg.service.port == 0 ? service.listen_after_bind() : service.listen(cfg.service.host, port);
            if (!ok) throw std::runtime_error("serve: cannot listen on " + cfg.service.host + ":" + std::to_string(port));
        }
    } catch (const CLI::Error& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
