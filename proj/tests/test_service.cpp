#include <gtest/gtest.h>

#include <memory>
#include <sstream>
#include <thread>

#include "gobfeed/service.hpp"

using namespace gobfeed;

namespace {

PlantConfig clean_plant() {
    PlantConfig c;
    c.dirty_fraction = 0.0;
    c.outlier_fraction = 0.0;
    return c;
}

class Server {
public:
    explicit Server(bool with_model, PlantConfig plant = clean_plant()) {
        std::optional<SharedModel> model;
        if (with_model) model = SharedModel::of(std::make_shared<const SurrogateModel>());
        cfg.machine_state.temperature_c = 1150;
        cfg.machine_state.master_speed = 7;
        session = std::make_unique<Session>(plant, cfg, model, InversionParams{}, 5);
        service = std::make_unique<Service>(*session);
        port = service->bind_any("127.0.0.1");
        thread = std::thread([this] { service->listen_after_bind(); });
        client = std::make_unique<httplib::Client>("127.0.0.1", port);
        client->set_read_timeout(60, 0);
    }
    ~Server() {
        service->stop();
        thread.join();
    }

    json get(const std::string& path, int expect = 200) {
        auto r = client->Get(path);
        EXPECT_TRUE(r) << path;
        if (!r) return {};
        EXPECT_EQ(r->status, expect) << r->body;
        return json::parse(r->body);
    }
    json post(const std::string& path, const json& body, int expect = 200) {
        auto r = client->Post(path, body.dump(), "application/json");
        EXPECT_TRUE(r) << path;
        if (!r) return {};
        EXPECT_EQ(r->status, expect) << r->body;
        return json::parse(r->body);
    }
    std::vector<json> events(const std::string& run) {
        auto r = client->Get("/inversion/" + run + "/events");
        EXPECT_TRUE(r);
        std::vector<json> out;
        if (!r) return out;
        EXPECT_EQ(r->get_header_value("Content-Type"), "application/x-ndjson");
        std::istringstream in(r->body);
        for (std::string line; std::getline(in, line);)
            if (!line.empty()) out.push_back(json::parse(line));
        return out;
    }

    ServiceConfig cfg;
    std::unique_ptr<Session> session;
    std::unique_ptr<Service> service;
    std::unique_ptr<httplib::Client> client;
    std::thread thread;
    int port = 0;
};

json zero_targets(std::size_t n = 8) {
    json t = json::array();
    for (std::size_t i = 0; i < n; ++i) t.push_back({{"dw", 0.0}, {"dl", 0.0}});
    return t;
}

}  // namespace

TEST(Http, StateCarriesVersionAndCycle) {
    Server s(true);
    const auto st = s.get("/state");
    EXPECT_EQ(st.at("version"), format_version);
    EXPECT_EQ(st.at("cycle").at("sections").size(), 8u);
    EXPECT_EQ(st.at("last_measurements").size(), 8u);
    EXPECT_TRUE(st.at("model_loaded").get<bool>());
    const auto h = s.get("/history");
    EXPECT_EQ(h.at("count"), 1);
    const auto p = s.get("/profile?samples=20");
    EXPECT_FALSE(p.at("trace").is_null());
}

TEST(Http, ZeroTargetsStreamImmediateVerdict) {
    Server s(true);
    const auto started = s.post("/inversion", {{"targets", zero_targets()}}, 202);
    const auto ev = s.events(started.at("run"));
    ASSERT_FALSE(ev.empty());
    EXPECT_EQ(ev.back().at("type"), "verdict");
    EXPECT_EQ(ev.back().at("verdict"), "converged");
    for (double d : ev.back().at("dparams").get<std::vector<double>>()) EXPECT_EQ(d, 0.0);
    std::size_t verdicts = 0;
    for (const auto& e : ev) verdicts += e.at("type") == "verdict";
    EXPECT_EQ(verdicts, 1u);
}

TEST(Http, EventStreamIsOrderedWithOneFinalVerdict) {
    Server s(true);
    auto t = zero_targets();
    t[3] = {{"dw", 12.0}, {"dl", -4.0}};
    const auto started = s.post("/inversion", {{"targets", t}}, 202);
    const auto ev = s.events(started.at("run"));
    ASSERT_GT(ev.size(), 2u);
    long last = -1;
    for (std::size_t k = 0; k + 1 < ev.size(); ++k) {
        EXPECT_EQ(ev[k].at("type"), "progress");
        const long step = ev[k].at("step").get<long>();
        EXPECT_GT(step, last);
        last = step;
        EXPECT_EQ(ev[k].at("predictions").size(), 8u);
        EXPECT_EQ(ev[k].at("sections").size(), 8u);
    }
    EXPECT_EQ(ev.back().at("type"), "verdict");
    // a second reader sees the same stream
    EXPECT_EQ(s.events(started.at("run")).size(), ev.size());
    const auto final_state = s.get("/inversion/" + started.at("run").get<std::string>());
    EXPECT_TRUE(final_state.at("done").get<bool>());
}

TEST(Http, ClosedLoopRaisesSectionTwo) {
    const PlantConfig plant = clean_plant();
    Server s(true, plant);
    const auto before = s.get("/state");
    auto t = zero_targets();
    t[2] = {{"dw", 10.0}, {"dl", 0.0}};
    const auto started = s.post("/inversion", {{"targets", t}}, 202);
    const auto ev = s.events(started.at("run"));
    ASSERT_EQ(ev.back().at("verdict"), "converged");
    const auto cycle = ev.back().at("cycle");
    const auto applied = s.post("/apply", {{"cycle", cycle}});
    const auto after = s.get("/state");
    EXPECT_EQ(after.at("revision").get<long>(), before.at("revision").get<long>() + 1);

    const auto ms = before.at("machine_state").get<MachineState>();
    const auto wp = before.at("working_point").get<WorkingPoint>();
    const auto old_cam = before.at("cycle").at("sections")[2].get<CamDeadpoints>();
    const auto new_cam = cycle.at("sections")[2].get<CamDeadpoints>();
    const auto expect_old = deterministic_gob(ms, wp, old_cam), expect_new = deterministic_gob(ms, wp, new_cam);
    EXPECT_NEAR(expect_new.dw - expect_old.dw, 10.0, 1.0);
    const double w = after.at("last_measurements")[2].at("weight_g").get<double>();
    EXPECT_NEAR(w, expect_new.dw, 3 * plant.noise_sigma_weight);
    EXPECT_NEAR(w - expect_old.dw, 10.0, 3 * plant.noise_sigma_weight);
}

TEST(Http, ConcurrentAppliesAreSerialised) {
    Server s(true);
    const auto st = s.get("/state");
    const json body = {{"cycle", st.at("cycle")}};
    std::vector<long> revisions(2);
    std::vector<std::thread> ts;
    for (int k = 0; k < 2; ++k)
        ts.emplace_back([&, k] {
            httplib::Client c("127.0.0.1", s.port);
            auto r = c.Post("/apply", body.dump(), "application/json");
            ASSERT_TRUE(r);
            ASSERT_EQ(r->status, 200);
            revisions[static_cast<std::size_t>(k)] = json::parse(r->body).at("revision").get<long>();
        });
    for (auto& t : ts) t.join();
    const long r0 = st.at("revision").get<long>();
    EXPECT_EQ(std::min(revisions[0], revisions[1]), r0 + 1);
    EXPECT_EQ(std::max(revisions[0], revisions[1]), r0 + 2);
    EXPECT_EQ(s.get("/history").at("count"), 3);
}

TEST(Http, StaleRevisionConflicts) {
    Server s(true);
    const auto st = s.get("/state");
    const json body = {{"cycle", st.at("cycle")}, {"base_revision", st.at("revision")}};
    s.post("/apply", body);
    const auto err = s.post("/apply", body, 409);
    EXPECT_EQ(err.at("status"), 409);
}

TEST(Http, InversionWithoutModelIs409) {
    Server s(false);
    const auto err = s.post("/inversion", {{"targets", zero_targets()}}, 409);
    EXPECT_EQ(err.at("version"), format_version);
    EXPECT_FALSE(err.at("error").get<std::string>().empty());
    s.post("/sweep", json::object(), 409);
}

TEST(Http, MalformedTargetsAre400) {
    Server s(true);
    s.post("/inversion", {{"targets", zero_targets(3)}}, 400);
    s.post("/inversion", {{"targets", "ten grams"}}, 400);
    s.post("/inversion", json::object(), 400);
    auto r = s.client->Post("/inversion", "{not json", "application/json");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 400);
    s.post("/inversion", {{"targets", zero_targets()}, {"params", {{"max_steps", 0}}}}, 400);
    s.post("/plant/advance", {{"n", 0}}, 400);
}

TEST(Http, InvalidCycleIs422WithReport) {
    Server s(true);
    auto cycle = s.get("/state").at("cycle");
    cycle["sections"][1]["sp"] = cycle["sections"][1]["sp"].get<double>() + 3.0;
    const auto before = s.get("/state").at("revision");
    const auto err = s.post("/apply", {{"cycle", cycle}}, 422);
    ASSERT_TRUE(err.contains("detail"));
    EXPECT_FALSE(err.at("detail").at("violations").empty());
    EXPECT_EQ(s.get("/state").at("revision"), before);
}

TEST(Http, UnknownRunIs404) {
    Server s(true);
    s.get("/inversion/run-999", 404);
    auto r = s.client->Get("/inversion/run-999/events");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 404);
}

TEST(Http, AdvanceAndHistoryRing) {
    PlantConfig plant = clean_plant();
    Server s(true, plant);
    const auto adv = s.post("/plant/advance", {{"n", 5}});
    EXPECT_EQ(adv.at("measurements").size(), 5u);
    EXPECT_EQ(s.get("/history?limit=3").at("count"), 3);
    EXPECT_EQ(s.get("/history").at("count"), 6);
}

TEST(Http, SweepEndpoint) {
    Server s(true);
    const auto sw = s.post("/sweep", {{"section", 1}, {"points", 5}, {"weight_range", {-10, 10}}, {"length_range", {-5, 5}}});
    EXPECT_FALSE(sw.at("weight").at("points").empty());
    s.post("/sweep", {{"section", 20}}, 400);
}
