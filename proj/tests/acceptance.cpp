// Acceptance checks. One PASS/FAIL line per primary criterion; exit status 1 if any fails.
#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gobfeed/config.hpp"
#include "gobfeed/experiments.hpp"
#include "gobfeed/io.hpp"

namespace fs = std::filesystem;
using namespace gobfeed;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances.
constexpr double grad_rel_tol = 1e-4;
constexpr double grad_runtime_s = 10.0;
// central-difference step, per input std: cbrt(machine epsilon)
const double fd_step = std::cbrt(std::numeric_limits<double>::epsilon());
constexpr double nf_mae_w = 0.5, nf_mae_l = 0.5, nf_runtime_s = 600.0;
constexpr double noisy_w_lo = 1.2, noisy_w_hi = 4.5, noisy_l_lo = 0.8, noisy_l_hi = 3.4, noisy_runtime_s = 900.0;
constexpr std::size_t params_lo = 8000, params_hi = 14000;
constexpr double converged_min = 0.95, oracle_min = 0.90, per_inversion_s = 10.0, batch_runtime_s = 2100.0;
constexpr double median_upper_mm = 1.0, median_junction_mm = 0.5;
constexpr double continuity_tol = 1e-9;
constexpr std::size_t min_minima = 2;
constexpr double landscape_runtime_s = 1800.0;
constexpr double dedup_size_max = 0.20, dedup_degradation_max = 0.25, dedup_runtime_s = 2700.0;

std::string cli;
fs::path work;
int failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
    std::cout << (ok ? "PASS " : "FAIL ") << name << " | " << detail << std::endl;
    if (!ok) ++failures;
}

void info(const std::string& name, const std::string& detail) { std::cout << "INFO " << name << " | " << detail << std::endl; }

int run(const std::string& args) {
    const std::string cmd = "\"" + cli + "\" " + args + " > /dev/null";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string p(const char* rel) { return (work / rel).string(); }

template <class... T>
std::string fmt(const T&... v) {
    std::ostringstream o;
    o << std::setprecision(4);
    (o << ... << v);
    return o.str();
}

std::vector<DifferentialSample> load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return read_dataset_csv(in);
}

double norm3(const DeadpointDelta& d) { return std::sqrt(d.dsp * d.dsp + d.dlp * d.dlp + d.dup * d.dup); }

double squared_loss(const TrainedModel& m, const Features& f, const GobDelta& t) {
    const auto y = m.predict(f);
    return (y.dw - t.dw) * (y.dw - t.dw) + (y.dl - t.dl) * (y.dl - t.dl);
}

// Every emitted cycle goes through here.
struct ContinuityLedger {
    std::size_t cycles = 0, bad = 0;
    double worst_residual = 0.0, lowest = std::numeric_limits<double>::infinity();
    void add(const std::vector<CamDeadpoints>& s) {
        ++cycles;
        const double r = continuity_residual(s);
        worst_residual = std::max(worst_residual, r);
        for (const auto& c : s) lowest = std::min({lowest, c.sp, c.lp, c.up});
        bool neg = false;
        for (const auto& c : s) neg |= !(std::min({c.sp, c.lp, c.up}) >= 0.0);
        if (!(r <= continuity_tol) || neg) ++bad;
    }
} continuity;

void gradient_check(const TrainedModel& model) {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> temp(1150, 1250), speed(6, 10), rot(10, 30), phase(0, 20), delta(-25, 25), tgt(-20, 20);
    double worst = 0.0;
    std::size_t n = 0;
    for (int k = 0; k < 100; ++k, ++n) {
        Features f{temp(rng), speed(rng), rot(rng), phase(rng), delta(rng), delta(rng), delta(rng)};
        const GobDelta target{tgt(rng), tgt(rng)};
        const auto g = model.input_gradient(f, target);
        DeadpointDelta fd{};
        for (std::size_t c = 0; c < 3; ++c) {
            const std::size_t idx = delta_offset + c;
            const double h = fd_step * model.input_std[idx];
            Features hi = f, lo = f;
            hi[idx] += h;
            lo[idx] -= h;
            const double v = (squared_loss(model, hi, target) - squared_loss(model, lo, target)) / (2 * h);
            (c == 0 ? fd.dsp : c == 1 ? fd.dlp : fd.dup) = v;
        }
        const DeadpointDelta e{g.dsp - fd.dsp, g.dlp - fd.dlp, g.dup - fd.dup};
        worst = std::max(worst, norm3(e) / std::max(norm3(fd), 1e-6));
    }
    const double dt = seconds_since(t0);
    report("gradient_correctness", n == 100 && worst <= grad_rel_tol && dt < grad_runtime_s,
           fmt(n, " cases, max relative error ", worst, " (<= ", grad_rel_tol, "), ", dt, " s (< ", grad_runtime_s, ")"));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string work_dir;
    app.add_option("--cli", cli, "gobfeed executable")->required()->check(CLI::ExistingFile);
    app.add_option("--work", work_dir, "scratch directory")->required();
    CLI11_PARSE(app, argc, argv);
    work = work_dir;
    fs::remove_all(work);
    fs::create_directories(work);

    try {
        // network size
        {
            const auto n = NetworkSpec{}.parameter_count();
            const auto built = Mlp::build(NetworkSpec{}, 1).params().size();
            report("network_size", n >= params_lo && n <= params_hi && built == n,
                   fmt(n, " trainable parameters (", built, " allocated), band [", params_lo, ", ", params_hi, "]"));
        }

        // noise-free fidelity
        write_text(p("noise_free.json"), R"({"network": {"dropout_rate": 0.0}})");
        bool nf_ok = false;
        {
            const auto t0 = Clock::now();
            const bool ran = run("sample --samples 50000 --seed 1 --out-dir " + p("nf")) == 0 &&
                             run("train --config " + p("noise_free.json") + " --train " + p("nf/train.csv") +
                                 " --validation " + p("nf/validation.csv") + " --model-out " + p("nf/model.json")) == 0;
            const double dt = seconds_since(t0);
            if (ran) {
                const auto model = load_model(p("nf/model.json"));
                const auto rep = evaluate(model, load_dataset(p("nf/validation.csv")));
                nf_ok = true;
                report("fidelity_noise_free",
                       rep.weight.mae <= nf_mae_w && rep.length.mae <= nf_mae_l && dt <= nf_runtime_s,
                       fmt("validation MAE ", rep.weight.mae, " g (<= ", nf_mae_w, "), ", rep.length.mae, " mm (<= ",
                           nf_mae_l, "), ", dt, " s (<= ", nf_runtime_s, ")"));
            } else {
                report("fidelity_noise_free", false, "pipeline command failed");
            }
        }

        // noisy fidelity
        {
            const auto t0 = Clock::now();
            const bool ran = run("simulate --cycles 50000 --seed 1 --out " + p("hist.csv")) == 0 &&
                             run("build-dataset --seed 1 --history " + p("hist.csv") + " --out-dir " + p("noisy")) == 0 &&
                             run("train --seed 1 --train " + p("noisy/train.csv") + " --validation " +
                                 p("noisy/validation.csv") + " --model-out " + p("noisy/model.json")) == 0;
            const double dt = seconds_since(t0);
            if (ran) {
                const auto rep = evaluate(load_model(p("noisy/model.json")), load_dataset(p("noisy/validation.csv")));
                const bool ok = rep.weight.mae >= noisy_w_lo && rep.weight.mae <= noisy_w_hi &&
                                rep.length.mae >= noisy_l_lo && rep.length.mae <= noisy_l_hi && dt <= noisy_runtime_s;
                report("fidelity_noisy", ok,
                       fmt("temporal-split validation MAE ", rep.weight.mae, " g in [", noisy_w_lo, ", ", noisy_w_hi, "], ",
                           rep.length.mae, " mm in [", noisy_l_lo, ", ", noisy_l_hi, "], ", dt, " s (<= ",
                           noisy_runtime_s, ")"));
            } else {
                report("fidelity_noisy", false, "pipeline command failed");
            }
        }

        if (!nf_ok) throw std::runtime_error("no noise-free model; remaining checks need it");
        const auto model = load_model(p("nf/model.json"));

        gradient_check(model);

        // batch inversion on held-out cycles of the noisy history
        {
            const auto t0 = Clock::now();
            const AppConfig cfg;
            std::ifstream hin(p("hist.csv"), std::ios::binary);
            const auto cleaned = clean(read_history_csv(hin), cfg.clean);
            CaseOptions opt;
            opt.count = 200;
            opt.weight_range_g = 40.0;
            opt.length_range_mm = 20.0;
            const auto cases = transformation_cases(complete_cycles(cleaned.records), opt, cfg.inversion, cfg.bins);
            const auto s = batch_evaluate(cases, model, surrogate_oracle());
            const double dt = seconds_since(t0);
            for (const auto& c : s.cases) continuity.add(c.cycle.sections);
            report("inversion_convergence",
                   s.count == 200 && s.converged_fraction >= converged_min && s.oracle_within_3tol_fraction >= oracle_min &&
                       s.wall_time_max_s <= per_inversion_s && dt <= batch_runtime_s,
                   fmt(s.count, " cases, converged ", s.converged_fraction, " (>= ", converged_min,
                       "), surrogate within 3x tolerance ", s.oracle_within_3tol_fraction, " (>= ", oracle_min,
                       "), slowest inversion ", s.wall_time_max_s, " s (<= ", per_inversion_s, "), total ", dt, " s"));
            const double up = s.median_upper_error_mm.value_or(INFINITY), jn = s.median_junction_error_mm.value_or(INFINITY);
            report("deadpoint_reconstruction", up <= median_upper_mm && jn <= median_junction_mm,
                   fmt("median |upper error| ", up, " mm (<= ", median_upper_mm, "), median |junction error| ", jn,
                       " mm (<= ", median_junction_mm, ")"));
        }

        // extra inversions for the continuity ledger: both optimizers, random requests
        {
            std::mt19937_64 rng(99);
            std::uniform_real_distribution<double> w(-40, 40), l(-20, 20);
            std::uniform_int_distribution<std::size_t> sec(0, 7);
            for (int k = 0; k < 40; ++k) {
                InversionRequest r;
                r.machine_state.temperature_c = 1150;
                r.machine_state.master_speed = 7;
                r.initial_cycle.machine_state = r.machine_state;
                r.initial_cycle.sections.assign(8, {65, 65, 148});
                r.targets.assign(8, {});
                r.targets[sec(rng)] = {w(rng), l(rng)};
                r.targets[sec(rng)] = {w(rng), l(rng)};
                r.params.kind = k % 4 == 0 ? OptimizerKind::montecarlo : OptimizerKind::gradient;
                r.params.seed = static_cast<std::uint64_t>(k);
                continuity.add(invert(model, r).cycle.sections);
                continuity.add(invert(SurrogateModel{}, r).cycle.sections);
            }
        }

        // multi-minima
        {
            const auto t0 = Clock::now();
            auto req = two_cam_request(AppConfig{}.service.machine_state);
            req.params = AppConfig{}.inversion;
            const auto spec = two_cam_grid(30);
            std::vector<std::vector<double>> path;
            const auto zero = invert_gradient(model, req, [&](const TraceStep& s) { path.push_back(s.dparams); });
            continuity.add(zero.cycle.sections);
            const auto grid = loss_landscape(model, req, spec, path);
            const auto minima = enumerate_minima(grid, 10.0);
            const double dt = seconds_since(t0);
            std::vector<double> zloc;
            for (const auto& a : grid.axes) zloc.push_back(zero.dparams[a.param_index(req.initial_cycle.size())]);
            auto cells_apart = [&](const std::vector<double>& loc) {
                double worst = 0.0;
                for (std::size_t a = 0; a < grid.axes.size(); ++a) {
                    const auto& ax = grid.axes[a];
                    const double cell = (ax.hi - ax.lo) / static_cast<double>(ax.count - 1);
                    worst = std::max(worst, std::abs(loc[a] - zloc[a]) / cell);
                }
                return worst;
            };
            double origin_cells = INFINITY;
            if (minima.origin_nearest) origin_cells = cells_apart(minima.minima[*minima.origin_nearest].location);
            const bool ok = grid.size() == 810000 && minima.minima.size() >= min_minima && origin_cells <= 1.0 &&
                            zero.trace.verdict == Verdict::converged && dt <= landscape_runtime_s;
            std::ostringstream loc;
            for (double v : zloc) loc << (loc.tellp() ? "," : "") << std::setprecision(3) << v;
            report("multi_minima", ok,
                   fmt(grid.size(), " grid points, ", minima.minima.size(), " axis-neighbour minima (>= ", min_minima,
                       "), zero-start ", to_string(zero.trace.verdict), " at (", loc.str(), ") loss ", zero.loss,
                       ", origin-nearest minimum ", origin_cells, " cells away (<= 1), ", dt, " s"));
            double nearest_cells = INFINITY;
            for (const auto& m : minima.minima) nearest_cells = std::min(nearest_cells, cells_apart(m.location));
            info("multi_minima", fmt("closest grid minimum to the zero-start solution is ", nearest_cells, " cells away"));
            const auto basins = consolidate_minima(model, req, grid, minima);
            if (basins.origin_nearest) {
                const auto& b = basins.basins[*basins.origin_nearest];
                info("multi_minima", fmt(basins.basins.size(), " basins after descent from every grid minimum; origin-nearest basin ",
                                         cells_apart(b.location), " cells from the zero-start solution, merges ",
                                         b.grid_minima, " grid minima"));
            }
        }

        // dedup robustness
        {
            const auto t0 = Clock::now();
            const bool ran = run("dedup-study --seed 1 --history " + p("hist.csv") + " --factors 0,0.5,1,2,4,8 --out " +
                                 p("dedup.csv")) == 0;
            const double dt = seconds_since(t0);
            if (!ran) {
                report("dedup_robustness", false, "dedup-study failed");
            } else {
                std::ifstream in(p("dedup.csv"));
                std::string line;
                std::getline(in, line);
                struct Row { double factor, size, w, l; };
                std::vector<Row> rows;
                while (std::getline(in, line)) {
                    std::stringstream ss(line);
                    std::string f[6];
                    for (auto& x : f) std::getline(ss, x, ',');
                    rows.push_back({std::stod(f[0]), std::stod(f[1]), std::stod(f[3]), std::stod(f[4])});
                }
                bool ok = rows.size() == 6 && rows.front().factor == 0.0 && dt <= dedup_runtime_s;
                std::ostringstream d;
                d << std::setprecision(3);
                double size_frac = INFINITY;
                if (ok) {
                    const auto& base = rows.front();
                    size_frac = rows.back().size / base.size;
                    ok = ok && size_frac <= dedup_size_max;
                    d << "8x keeps " << size_frac << " of " << base.size << " (<= " << dedup_size_max << ");";
                    for (std::size_t k = 1; k < rows.size(); ++k) {
                        const double dw = rows[k].w / base.w - 1.0, dl = rows[k].l / base.l - 1.0;
                        ok = ok && dw <= dedup_degradation_max && dl <= dedup_degradation_max;
                        d << " " << rows[k].factor << "x: weight " << std::showpos << 100 * dw << "% length " << 100 * dl
                          << "%" << std::noshowpos;
                    }
                    d << " (each <= +" << 100 * dedup_degradation_max << "%), " << dt << " s";
                }
                report("dedup_robustness", ok, d.str());
            }
        }

        // determinism
        {
            bool ok = true;
            std::vector<std::string> differing;
            std::ofstream(work / "req.json") << R"({
              "machine_state": {"temperature_c": 1150, "master_speed": 7},
              "initial_cycle": {"sections": [{"sp":65,"lp":65,"up":148},{"sp":65,"lp":65,"up":148},
                {"sp":65,"lp":65,"up":148},{"sp":65,"lp":65,"up":148},{"sp":65,"lp":65,"up":148},
                {"sp":65,"lp":65,"up":148},{"sp":65,"lp":65,"up":148},{"sp":65,"lp":65,"up":148}]},
              "targets": [{"dw":0,"dl":0},{"dw":12,"dl":-3},{"dw":0,"dl":0},{"dw":0,"dl":0},
                          {"dw":-8,"dl":4},{"dw":0,"dl":0},{"dw":0,"dl":0},{"dw":0,"dl":0}]
            })";
            for (const char* rep : {"d1", "d2"}) {
                const std::string d = p(rep);
                fs::create_directories(d);
                ok = ok && run("simulate --cycles 4000 --seed 7 --out " + d + "/hist.csv") == 0 &&
                     run("build-dataset --seed 7 --history " + d + "/hist.csv --out-dir " + d + "/ds") == 0 &&
                     run("train --seed 7 --epochs 5 --train " + d + "/ds/train.csv --validation " + d +
                         "/ds/validation.csv --model-out " + d + "/model.json") == 0 &&
                     run("invert --seed 7 --model " + d + "/model.json --request " + p("req.json") + " --out " + d +
                         "/result.json") == 0;
            }
            std::size_t compared = 0;
            for (const char* f : {"hist.csv", "ds/train.csv", "ds/validation.csv", "ds/report.json", "model.json", "result.json"}) {
                ++compared;
                const auto a = slurp(work / "d1" / f), b = slurp(work / "d2" / f);
                if (a.empty() || a != b) differing.push_back(f);
            }
            if (ok) {
                const auto r = nlohmann::json::parse(slurp(work / "d1" / "result.json"));
                continuity.add(r.at("cycle").get<Cycle>().sections);
            }
            std::string diff;
            for (const auto& f : differing) diff += " " + f;
            report("determinism", ok && differing.empty(),
                   fmt(compared, " artifacts compared across two runs, differing:", diff.empty() ? " none" : diff));
        }
        report("continuity_invariant", continuity.cycles > 0 && continuity.bad == 0,
               fmt(continuity.cycles, " emitted cycles, ", continuity.bad, " violating, worst residual ",
                   continuity.worst_residual, " mm (<= ", continuity_tol, "), lowest deadpoint ", continuity.lowest, " mm"));
    } catch (const std::exception& e) {
        report("harness", false, e.what());
    }
    std::cout << (failures == 0 ? "ALL PASS" : fmt(failures, " FAILED")) << std::endl;
    return failures == 0 ? 0 : 1;
}
