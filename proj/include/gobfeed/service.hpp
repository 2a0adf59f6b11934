#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "config.hpp"
#include "inversion.hpp"
#include "io.hpp"
#include "plant_surrogate.hpp"

namespace gobfeed {

// Type-erased, shared, read-only response model.
class SharedModel {
public:
    template <ResponseModel M>
    static SharedModel of(std::shared_ptr<const M> m) {
        SharedModel s;
        s.m_holder = m;
        s.m_predict = [m](const std::vector<Features>& rows) { return m->predict(rows); };
        s.m_vjp = [m](const std::vector<Features>& rows, const std::vector<GobDelta>& cot) { return m->delta_vjp(rows, cot); };
        return s;
    }
    std::vector<GobDelta> predict(const std::vector<Features>& rows) const { return m_predict(rows); }
    std::vector<DeadpointDelta> delta_vjp(const std::vector<Features>& rows, const std::vector<GobDelta>& cot) const {
        return m_vjp(rows, cot);
    }

private:
    std::shared_ptr<const void> m_holder;
    std::function<std::vector<GobDelta>(const std::vector<Features>&)> m_predict;
    std::function<std::vector<DeadpointDelta>(const std::vector<Features>&, const std::vector<GobDelta>&)> m_vjp;
};

static_assert(ResponseModel<SharedModel>);

// HTTP-facing failure with a status code and a JSON body.
class ApiError : public std::runtime_error {
public:
    ApiError(int status, const std::string& message, json detail = nullptr)
        : std::runtime_error(message), m_status(status), m_detail(std::move(detail)) {}
    int status() const noexcept { return m_status; }
    json body() const {
        json j = {{"version", format_version}, {"error", what()}, {"status", m_status}};
        if (!m_detail.is_null()) j["detail"] = m_detail;
        return j;
    }

private:
    int m_status;
    json m_detail;
};

// One inversion run: events are appended by the worker and read by any number of streams.
class InversionRun {
public:
    std::string id;

    void publish(json event, bool final = false) {
        {
            std::lock_guard lock(m_mutex);
            m_events.push_back(event.dump());
            if (final) m_done = true;
        }
        m_cv.notify_all();
    }

    // Blocks until events past `from` exist or the run is finished.
    std::vector<std::string> wait_events(std::size_t from, bool& finished) {
        std::unique_lock lock(m_mutex);
        m_cv.wait(lock, [&] { return m_events.size() > from || m_done; });
        finished = m_done && m_events.size() <= from;
        return {m_events.begin() + static_cast<std::ptrdiff_t>(std::min(from, m_events.size())), m_events.end()};
    }

    bool done() const {
        std::lock_guard lock(m_mutex);
        return m_done;
    }

    void set_result(InversionResult r) {
        std::lock_guard lock(m_mutex);
        m_result = std::move(r);
    }
    std::optional<InversionResult> result() const {
        std::lock_guard lock(m_mutex);
        return m_result;
    }

    std::thread worker;

private:
    mutable std::mutex m_mutex;
    std::condition_variable m_cv;
    std::vector<std::string> m_events;
    bool m_done = false;
    std::optional<InversionResult> m_result;
};

struct HistoryEntry {
    std::int64_t revision = 0;
    std::vector<GobMeasurement> gobs;
};

// The single plant session of a service process.
class Session {
public:
    Session(const PlantConfig& plant, const ServiceConfig& service, std::optional<SharedModel> model,
            InversionParams defaults, std::uint64_t seed)
        : m_plant(plant, service.working_point, service.machine_state, seed),
          m_capacity(service.history_capacity),
          m_model(std::move(model)),
          m_defaults(defaults) {
        record(m_plant.advance_one());
    }

    ~Session() {
        std::map<std::string, std::shared_ptr<InversionRun>> runs;
        {
            std::lock_guard lock(m_runs_mutex);
            runs.swap(m_runs);
        }
        for (auto& [id, r] : runs)
            if (r->worker.joinable()) r->worker.join();
    }

    Session(const Session&) = delete;
    Session& operator=(const Session&) = delete;

    bool has_model() const { return m_model.has_value(); }

    json state() const {
        std::lock_guard lock(m_plant_mutex);
        const auto& ps = m_plant.state();
        json recent = json::array();
        const std::size_t keep = std::min<std::size_t>(10, m_history.size());
        for (std::size_t k = m_history.size() - keep; k < m_history.size(); ++k) recent.push_back(m_history[k].gobs);
        return {{"version", format_version},
                {"revision", m_revision},
                {"machine_state", ps.cycle.machine_state},
                {"cycle", ps.cycle},
                {"cycle_id", ps.cycle_id},
                {"timestamp", ps.timestamp},
                {"working_point", ps.working_point},
                {"model_loaded", has_model()},
                {"last_measurements", m_history.empty() ? json::array() : json(m_history.back().gobs)},
                {"recent_measurements", recent}};
    }

    json history(std::size_t limit) const {
        std::lock_guard lock(m_plant_mutex);
        json out = json::array();
        const std::size_t keep = std::min(limit, m_history.size());
        for (std::size_t k = m_history.size() - keep; k < m_history.size(); ++k)
            out.push_back({{"revision", m_history[k].revision}, {"measurements", m_history[k].gobs}});
        return {{"version", format_version}, {"capacity", m_capacity}, {"count", out.size()}, {"entries", out}};
    }

    // body: {"cycle": {...}} or {"sections": [...]}, optional "base_revision".
    json apply(const json& body) {
        Cycle cycle;
        std::optional<std::int64_t> base;
        try {
            if (body.contains("base_revision")) base = body.at("base_revision").get<std::int64_t>();
            if (body.contains("cycle")) {
                body.at("cycle").get_to(cycle);
            } else if (body.contains("sections")) {
                body.at("sections").get_to(cycle.sections);
            } else {
                throw ApiError(400, "apply: body needs 'cycle' or 'sections'");
            }
        } catch (const json::exception& e) {
            throw ApiError(400, std::string("apply: malformed cycle: ") + e.what());
        } catch (const FormatError& e) {
            throw ApiError(400, std::string("apply: malformed cycle: ") + e.what());
        }
        std::lock_guard lock(m_plant_mutex);
        if (base && *base != m_revision)
            throw ApiError(409, "apply: plant changed since revision " + std::to_string(*base),
                           {{"current_revision", m_revision}});
        cycle.machine_state = m_plant.current_cycle().machine_state;
        if (cycle.size() != m_plant.current_cycle().size())
            throw ApiError(422, "apply: expected " + std::to_string(m_plant.current_cycle().size()) + " sections");
        auto report = validate_cycle(cycle);
        if (!report.ok()) throw ApiError(422, "apply: invalid cycle", report);
        auto gobs = m_plant.step(cycle);
        record(gobs);
        return {{"version", format_version}, {"revision", m_revision}, {"measurements", gobs}, {"cycle", cycle}};
    }

    json advance(std::size_t n) {
        if (n < 1 || n > 100000) throw ApiError(400, "advance: n must lie in [1, 100000]");
        std::lock_guard lock(m_plant_mutex);
        json all = json::array();
        for (std::size_t k = 0; k < n; ++k) {
            auto gobs = m_plant.advance_one();
            record(gobs);
            all.push_back(gobs);
        }
        return {{"version", format_version}, {"revision", m_revision}, {"measurements", all}};
    }

    // body: {"targets": [...], "params": {...}, "cycle": {...}}; returns the run id.
    std::shared_ptr<InversionRun> start_inversion(const json& body) {
        if (!m_model) throw ApiError(409, "inversion: no model loaded");
        InversionRequest req;
        req.params = m_defaults;
        std::int64_t revision = 0;
        {
            std::lock_guard lock(m_plant_mutex);
            req.initial_cycle = m_plant.current_cycle();
            revision = m_revision;
        }
        req.machine_state = req.initial_cycle.machine_state;
        try {
            if (!body.is_object() || !body.contains("targets")) throw ApiError(400, "inversion: body needs 'targets'");
            const auto& t = body.at("targets");
            if (!t.is_array()) throw ApiError(400, "inversion: 'targets' must be a list");
            for (const auto& x : t) {
                const auto g = x.get<GobDelta>();
                if (!std::isfinite(g.dw) || !std::isfinite(g.dl)) throw ApiError(400, "inversion: non-finite target");
                req.targets.push_back(g);
            }
            if (body.contains("params")) body.at("params").get_to(req.params);
            if (body.contains("cycle")) {
                body.at("cycle").get_to(req.initial_cycle);
                req.initial_cycle.machine_state = req.machine_state;
            }
        } catch (const json::exception& e) {
            throw ApiError(400, std::string("inversion: malformed request: ") + e.what());
        } catch (const FormatError& e) {
            throw ApiError(400, std::string("inversion: malformed request: ") + e.what());
        }
        if (req.targets.size() != req.initial_cycle.size())
            throw ApiError(400, "inversion: expected " + std::to_string(req.initial_cycle.size()) + " targets, got " +
                                    std::to_string(req.targets.size()));
        try {
            validate_params(req.params);
        } catch (const std::invalid_argument& e) {
            throw ApiError(400, e.what());
        }
        auto report = validate_cycle(req.initial_cycle);
        if (!report.ok()) throw ApiError(422, "inversion: invalid initial cycle", report);

        auto run = std::make_shared<InversionRun>();
        {
            std::lock_guard lock(m_runs_mutex);
            run->id = "run-" + std::to_string(++m_next_run);
            m_runs[run->id] = run;
        }
        auto model = *m_model;
        run->worker = std::thread([run, req, model, revision] {
            const auto base = to_free_parameters(req.initial_cycle);
            const std::size_t n = req.initial_cycle.size();
            auto on_step = [&](const TraceStep& s) {
                std::vector<double> abs(base.size());
                for (std::size_t k = 0; k < abs.size(); ++k) abs[k] = base[k] + s.dparams[k];
                run->publish({{"type", "progress"},
                              {"run", run->id},
                              {"step", s.step},
                              {"loss", s.loss},
                              {"accepted", s.accepted},
                              {"predictions", s.predictions},
                              {"sections", from_free_parameters(abs, n)}});
            };
            try {
                auto res = invert(model, req, on_step);
                json v = result_to_json(res, true, false);
                v["type"] = "verdict";
                v["run"] = run->id;
                v["base_revision"] = revision;
                run->set_result(std::move(res));
                run->publish(v, true);
            } catch (const std::exception& e) {
                run->publish({{"type", "verdict"}, {"run", run->id}, {"verdict", "error"}, {"reason", e.what()}}, true);
            }
        });
        return run;
    }

    std::shared_ptr<InversionRun> find_run(const std::string& id) const {
        std::lock_guard lock(m_runs_mutex);
        auto it = m_runs.find(id);
        return it == m_runs.end() ? nullptr : it->second;
    }

    json sweep(const json& body) {
        if (!m_model) throw ApiError(409, "sweep: no model loaded");
        InversionRequest req;
        req.params = m_defaults;
        {
            std::lock_guard lock(m_plant_mutex);
            req.initial_cycle = m_plant.current_cycle();
        }
        req.machine_state = req.initial_cycle.machine_state;
        req.targets.assign(req.initial_cycle.size(), {});
        std::size_t section = 0, points = 11;
        Range wr{-50.0, 50.0}, lr{-50.0, 50.0};
        try {
            io_detail::read(body, "section", section);
            io_detail::read(body, "points", points);
            io_detail::read(body, "weight_range", wr);
            io_detail::read(body, "length_range", lr);
            if (body.contains("params")) body.at("params").get_to(req.params);
        } catch (const std::exception& e) {
            throw ApiError(400, std::string("sweep: malformed request: ") + e.what());
        }
        if (section >= req.initial_cycle.size()) throw ApiError(400, "sweep: no such section");
        if (points < 1 || points > 201) throw ApiError(400, "sweep: points must lie in [1, 201]");
        json j = stability_sweep(*m_model, req, section, wr, lr, points);
        return j;
    }

    json profile(std::size_t samples) const {
        Cycle c;
        {
            std::lock_guard lock(m_plant_mutex);
            c = m_plant.current_cycle();
        }
        return {{"version", format_version}, {"profile", default_profile()},
                {"trace", cycle_trace(c, default_profile(), samples)}};
    }

private:
    void record(const std::vector<GobMeasurement>& gobs) {
        ++m_revision;
        m_history.push_back({m_revision, gobs});
        while (m_history.size() > m_capacity) m_history.pop_front();
    }

    mutable std::mutex m_plant_mutex;
    Plant m_plant;
    std::int64_t m_revision = 0;
    std::deque<HistoryEntry> m_history;
    std::size_t m_capacity;

    std::optional<SharedModel> m_model;
    InversionParams m_defaults;

    mutable std::mutex m_runs_mutex;
    std::map<std::string, std::shared_ptr<InversionRun>> m_runs;
    std::size_t m_next_run = 0;
};

// Routes of the HTTP API on top of a session.
class Service {
public:
    explicit Service(Session& session) : m_session(session) { routes(); }

    httplib::Server& server() { return m_server; }
    bool listen(const std::string& host, int port) { return m_server.listen(host, port); }
    int bind_any(const std::string& host) { return m_server.bind_to_any_port(host); }
    bool listen_after_bind() { return m_server.listen_after_bind(); }
    void stop() { m_server.stop(); }

private:
    static void send(httplib::Response& res, const json& body, int status = 200) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    template <class F>
    static void guarded(httplib::Response& res, F&& f) {
        try {
            f();
        } catch (const ApiError& e) {
            send(res, e.body(), e.status());
        } catch (const std::exception& e) {
            send(res, ApiError(500, e.what()).body(), 500);
        }
    }

    static json parse_body(const httplib::Request& req) {
        if (req.body.empty()) return json::object();
        try {
            return json::parse(req.body);
        } catch (const json::parse_error& e) {
            throw ApiError(400, std::string("body is not valid JSON: ") + e.what());
        }
    }

    void routes() {
        m_server.Get("/state", [this](const httplib::Request&, httplib::Response& res) {
            guarded(res, [&] { send(res, m_session.state()); });
        });
        m_server.Get("/history", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                std::size_t limit = 1000;
                if (req.has_param("limit")) limit = static_cast<std::size_t>(std::stoul(req.get_param_value("limit")));
                send(res, m_session.history(limit));
            });
        });
        m_server.Get("/profile", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                std::size_t n = 50;
                if (req.has_param("samples")) n = static_cast<std::size_t>(std::stoul(req.get_param_value("samples")));
                if (n < 2 || n > 10000) throw ApiError(400, "profile: samples must lie in [2, 10000]");
                send(res, m_session.profile(n));
            });
        });
        m_server.Post("/apply", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { send(res, m_session.apply(parse_body(req))); });
        });
        m_server.Post("/plant/advance", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const auto body = parse_body(req);
                std::size_t n = 1;
                try {
                    io_detail::read(body, "n", n);
                } catch (const json::exception& e) {
                    throw ApiError(400, std::string("advance: ") + e.what());
                }
                send(res, m_session.advance(n));
            });
        });
        m_server.Post("/inversion", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                auto run = m_session.start_inversion(parse_body(req));
                send(res, {{"version", format_version}, {"run", run->id}, {"events", "/inversion/" + run->id + "/events"}},
                     202);
            });
        });
        m_server.Get(R"(/inversion/([A-Za-z0-9\-]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                auto run = m_session.find_run(req.matches[1]);
                if (!run) throw ApiError(404, "no such run");
                auto next = std::make_shared<std::size_t>(0);
                res.set_chunked_content_provider("application/x-ndjson", [run, next](std::size_t, httplib::DataSink& sink) {
                    bool finished = false;
                    const auto events = run->wait_events(*next, finished);
                    if (finished) {
                        sink.done();
                        return true;
                    }
                    for (const auto& e : events) {
                        const std::string line = e + "\n";
                        if (!sink.write(line.data(), line.size())) return false;
                    }
                    *next += events.size();
                    return true;
                });
            });
        });
        m_server.Get(R"(/inversion/([A-Za-z0-9\-]+))", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                auto run = m_session.find_run(req.matches[1]);
                if (!run) throw ApiError(404, "no such run");
                auto r = run->result();
                json j = {{"version", format_version}, {"run", run->id}, {"done", run->done()}};
                if (r) j["result"] = result_to_json(*r, true, false);
                send(res, j);
            });
        });
        m_server.Post("/sweep", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { send(res, m_session.sweep(parse_body(req))); });
        });
    }

    Session& m_session;
    httplib::Server m_server;
};

}  // namespace gobfeed
