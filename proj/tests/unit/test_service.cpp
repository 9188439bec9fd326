#include <chrono>
#include <thread>

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <gtest/gtest.h>
#include <httplib.h>

#include "taskweave/service.hpp"
#include "test_support.hpp"

using namespace taskweave;
using nlohmann::json;
using taskweave::testing::fenced;
using taskweave::testing::shipped_cassette;
using taskweave::testing::TempDir;
using taskweave::testing::write_text;

namespace net = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;

namespace {

class ServiceFixture : public ::testing::Test {
protected:
    void SetUp() override {
        manager = std::make_shared<RunManager>(dir / "runs");
        service = std::make_unique<Service>(ServiceConfig{"127.0.0.1", 0}, manager);
        service->start();
        client = std::make_unique<httplib::Client>("127.0.0.1", service->port());
        client->set_read_timeout(30, 0);
    }

    void TearDown() override {
        service->stop();
        manager->shutdown();
    }

    json post(const std::string& path, const json& body, int expect) {
        auto res = client->Post(path, body.dump(), "application/json");
        EXPECT_TRUE(res) << path;
        if (!res) return json();
        EXPECT_EQ(res->status, expect) << path << " " << res->body;
        EXPECT_EQ(res->get_header_value("Content-Type"), "application/json");
        return json::parse(res->body);
    }

    json get(const std::string& path, int expect = 200) {
        auto res = client->Get(path);
        EXPECT_TRUE(res) << path;
        if (!res) return json();
        EXPECT_EQ(res->status, expect) << path << " " << res->body;
        return json::parse(res->body);
    }

    json config_for(const std::filesystem::path& cassette_file, std::string goal = "service goal") {
        return {{"goal", goal}, {"backend", "cassette:" + cassette_file.string()}, {"cell_timeout", 30}};
    }

    json wait_for(const std::string& run_id, std::initializer_list<const char*> statuses) {
        json summary;
        for (int i = 0; i < 600; ++i) {
            summary = get("/runs/" + run_id);
            for (const char* s : statuses) {
                if (summary["status"] == s) return summary;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
        ADD_FAILURE() << "run " << run_id << " stuck in " << summary.dump();
        return summary;
    }

    std::string error_code(const json& body) { return body["error"]["code"].get<std::string>(); }

    TempDir dir;
    std::shared_ptr<RunManager> manager;
    std::unique_ptr<Service> service;
    std::unique_ptr<httplib::Client> client;
};

// Each task sleeps, so a stream client can attach while the run is live.
std::filesystem::path slow_cassette(const TempDir& dir, int tasks, double sleep_seconds) {
    json plan = json::array();
    for (int i = 1; i <= tasks; ++i) {
        json deps = i == 1 ? json::array() : json::array({std::to_string(i - 1)});
        plan.push_back({{"task_id", std::to_string(i)}, {"dependent_task_ids", deps}, {"instruction", "Step " + std::to_string(i)},
                        {"task_type", "general"}});
    }
    std::string text = json{{"match", "# Planning"}, {"reply", fenced("json", plan.dump())}}.dump() + "\n";
    std::string code = "import time\ntime.sleep(" + std::to_string(sleep_seconds) + ")\nprint('done')";
    text += json{{"match", "# Current Task"}, {"reply", fenced("python", code)}, {"repeat", true}}.dump() + "\n";
    auto path = dir / "slow.jsonl";
    write_text(path, text);
    return path;
}

struct StreamResult {
    std::vector<json> messages;
    bool closed_normally = false;
};

StreamResult read_stream(unsigned short port, const std::string& target) {
    net::io_context ioc;
    net::ip::tcp::resolver resolver(ioc);
    websocket::stream<net::ip::tcp::socket> ws(ioc);
    net::connect(ws.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
    ws.handshake("127.0.0.1:" + std::to_string(port), target);
    StreamResult out;
    for (;;) {
        beast::flat_buffer buffer;
        beast::error_code ec;
        ws.read(buffer, ec);
        if (ec == websocket::error::closed) {
            out.closed_normally = ws.reason().code == websocket::close_code::normal;
            break;
        }
        if (ec) break;
        out.messages.push_back(json::parse(beast::buffers_to_string(buffer.data())));
    }
    return out;
}

}  // namespace

TEST(Routing, ErrorsWithoutASocket) {
    TempDir dir;
    RunManager runs(dir / "runs");
    auto unknown = route_request(runs, "GET", "/runs/nope", "");
    EXPECT_EQ(unknown.status, 404);
    EXPECT_EQ(unknown.body["error"]["code"], "UnknownRun");
    EXPECT_EQ(route_request(runs, "GET", "/elsewhere", "").status, 404);
    EXPECT_EQ(route_request(runs, "DELETE", "/runs", "").status, 405);
    auto bad_json = route_request(runs, "POST", "/runs", "{not json");
    EXPECT_EQ(bad_json.status, 400);
    auto no_goal = route_request(runs, "POST", "/runs", R"({"goal": ""})");
    EXPECT_EQ(no_goal.status, 400);
    EXPECT_EQ(no_goal.body["error"]["code"], "ConfigError");
    auto listed = route_request(runs, "GET", "/runs", "");
    EXPECT_EQ(listed.status, 200);
    EXPECT_EQ(listed.body, json::array());
    EXPECT_EQ(http_status_for(ErrorCode::RunNotHeld), 409);
    EXPECT_EQ(http_status_for(ErrorCode::UnknownTask), 404);
    EXPECT_EQ(http_status_for(ErrorCode::PlanGenerationFailed), 502);
}

TEST_F(ServiceFixture, RunLifecycleOverHttp) {
    json created = post("/runs", config_for(shipped_cassette("toy_run.jsonl"), "Predict house prices and report RMSE"), 201);
    std::string id = created["run_id"];
    EXPECT_EQ(created["version"], 1);

    json summary = wait_for(id, {"completed", "failed"});
    EXPECT_EQ(summary["status"], "completed");
    EXPECT_EQ(summary["llm_calls"], 6);
    EXPECT_EQ(summary["goal"], "Predict house prices and report RMSE");

    json listed = get("/runs");
    ASSERT_EQ(listed.size(), 1u);
    EXPECT_EQ(listed[0]["run_id"], id);

    json graph = get("/runs/" + id + "/graph");
    EXPECT_EQ(graph["status"], "completed");
    ASSERT_EQ(graph["tasks"].size(), 4u);
    for (const auto& t : graph["tasks"]) EXPECT_EQ(t["status"], "Success");
    EXPECT_EQ(graph["acv"]["4"]["chosen"], "54.17");

    json all = get("/runs/" + id + "/events");
    json tail = get("/runs/" + id + "/events?since=3");
    ASSERT_GT(all.size(), 3u);
    EXPECT_EQ(tail.size(), all.size() - 3);
    EXPECT_EQ(tail[0]["seq"], 4);
    EXPECT_EQ(all[0]["kind"], "plan_created");
    EXPECT_EQ(all.back()["kind"], "run_finished");
    EXPECT_EQ(error_code(get("/runs/" + id + "/events?since=-1", 400)), "PreconditionViolation");
    EXPECT_EQ(error_code(get("/runs/" + id + "/events?since=abc", 400)), "PreconditionViolation");

    EXPECT_EQ(error_code(post("/runs/" + id + "/abort", json::object(), 409)), "RunNotHeld");
    EXPECT_EQ(error_code(post("/runs/" + id + "/resume", json::object(), 409)), "RunNotHeld");
    EXPECT_EQ(error_code(post("/runs/" + id + "/tasks/2/edit", {{"code", "pass"}}, 409)), "RunNotHeld");
    EXPECT_EQ(error_code(get("/runs/missing", 404)), "UnknownRun");
    EXPECT_EQ(error_code(get("/runs/missing/graph", 404)), "UnknownRun");
}

TEST_F(ServiceFixture, HoldEditResumeOverHttp) {
    json cfg = config_for(shipped_cassette("always_failing.jsonl"), "Ratio of numbers");
    cfg["on_failure"] = "hold_for_human";
    cfg["max_debug_attempts"] = 1;
    std::string id = post("/runs", cfg, 201)["run_id"];
    EXPECT_EQ(wait_for(id, {"awaiting_human", "failed", "completed"})["status"], "awaiting_human");

    EXPECT_EQ(error_code(post("/runs/" + id + "/tasks/99/edit", {{"code", "pass"}}, 404)), "UnknownTask");
    EXPECT_EQ(error_code(post("/runs/" + id + "/tasks/1/edit", {{"code", "pass"}}, 409)), "IllegalTransition");
    EXPECT_EQ(error_code(post("/runs/" + id + "/tasks/2/edit", json::object(), 400)), "PreconditionViolation");

    json edited = post("/runs/" + id + "/tasks/2/edit", {{"code", "print(len([x for x in numbers if x < 0]))"}}, 200);
    EXPECT_EQ(edited["task_id"], "2");
    EXPECT_EQ(edited["version"], 2);
    json graph = get("/runs/" + id + "/graph");
    EXPECT_EQ(graph["tasks"][1]["status"], "Pending");
    EXPECT_EQ(graph["tasks"][1]["code"], "print(len([x for x in numbers if x < 0]))");

    post("/runs/" + id + "/resume", json::object(), 200);
    EXPECT_EQ(wait_for(id, {"completed", "failed"})["status"], "completed");
    json events = get("/runs/" + id + "/events");
    int edits = 0;
    for (const auto& e : events) edits += e["kind"] == "human_edit_applied";
    EXPECT_EQ(edits, 1);
}

TEST_F(ServiceFixture, AbortOverHttp) {
    std::string id = post("/runs", config_for(slow_cassette(dir, 6, 0.3)), 201)["run_id"];
    json aborted = post("/runs/" + id + "/abort", json::object(), 200);
    EXPECT_EQ(aborted["status"], "aborted");
    json graph = get("/runs/" + id + "/graph");
    int done = 0;
    for (const auto& t : graph["tasks"]) done += t["status"] == "Success";
    EXPECT_LT(done, 6);
    EXPECT_EQ(get("/runs/" + id + "/events").back()["kind"], "run_finished");
}

TEST_F(ServiceFixture, StreamDeliversGapFreeBacklogThenLiveEvents) {
    std::string id = post("/runs", config_for(slow_cassette(dir, 4, 0.25)), 201)["run_id"];
    for (int i = 0; i < 200; ++i) {
        json events = get("/runs/" + id + "/events");
        bool started = false;
        for (const auto& e : events) started = started || e["kind"] == "task_succeeded";
        if (started) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    EXPECT_EQ(get("/runs/" + id)["status"], "running");

    StreamResult stream = read_stream(service->port(), "/runs/" + id + "/stream");
    EXPECT_TRUE(stream.closed_normally);
    ASSERT_FALSE(stream.messages.empty());
    for (std::size_t i = 0; i < stream.messages.size(); ++i) EXPECT_EQ(stream.messages[i]["seq"], i + 1);
    EXPECT_EQ(stream.messages.back()["kind"], "run_finished");
    json events = get("/runs/" + id + "/events");
    EXPECT_EQ(stream.messages, std::vector<json>(events.begin(), events.end()));

    StreamResult late = read_stream(service->port(), "/runs/" + id + "/stream?since=5");
    ASSERT_EQ(late.messages.size(), events.size() - 5);
    EXPECT_EQ(late.messages.front()["seq"], 6);
    EXPECT_TRUE(late.closed_normally);
}

TEST_F(ServiceFixture, StreamRefusesUnknownRun) {
    EXPECT_THROW(read_stream(service->port(), "/runs/missing/stream"), boost::system::system_error);
    auto res = client->Get("/runs/missing/stream");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 404);
}

TEST(ServiceBind, PortInUseIsBindFailure) {
    TempDir dir;
    auto manager = std::make_shared<RunManager>(dir / "runs");
    Service first(ServiceConfig{"127.0.0.1", 0}, manager);
    first.start();
    Service second(ServiceConfig{"127.0.0.1", first.port()}, manager);
    try {
        second.start();
        ADD_FAILURE() << "second bind succeeded";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::BindFailure);
    }
    Service bad_host(ServiceConfig{"not an address", 0}, manager);
    EXPECT_THROW(bad_host.start(), Error);
    first.stop();
}
