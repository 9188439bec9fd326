#include <atomic>
#include <cstdlib>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "taskweave/llm_gateway.hpp"
#include "test_support.hpp"

using namespace taskweave;
using taskweave::testing::cassette;
using taskweave::testing::fenced;
using taskweave::testing::read_text;
using taskweave::testing::shipped_prompts;
using taskweave::testing::TempDir;
using taskweave::testing::write_text;

namespace {

std::vector<ChatMessage> user(const std::string& text) { return {{Role::User, text}}; }

class StubServer {
public:
    explicit StubServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server_.Post("/v1/chat/completions", std::move(handler));
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~StubServer() {
        server_.stop();
        thread_.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

}  // namespace

TEST(Cassette, EntriesAreConsumedInOrder) {
    auto llm = cassette({{std::nullopt, "one", false}, {std::nullopt, "two", false}});
    EXPECT_EQ(llm->complete(user("a"), {}), "one");
    EXPECT_EQ(llm->complete(user("b"), {}), "two");
    try {
        llm->complete(user("c"), {});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::CassetteExhausted);
    }
}

TEST(Cassette, MatchFilterSkipsAheadWithoutConsumingEarlierEntries) {
    auto llm = cassette({{std::string("alpha"), "A", false}, {std::string("beta"), "B", false}});
    EXPECT_EQ(llm->complete(user("say beta"), {}), "B");
    EXPECT_EQ(llm->cursor(), 0u);
    EXPECT_EQ(llm->remaining(), 1u);
    EXPECT_EQ(llm->complete(user("alpha now"), {}), "A");
    EXPECT_EQ(llm->remaining(), 0u);
}

TEST(Cassette, RepeatEntriesAreNeverConsumed) {
    auto llm = cassette({{std::string("x"), "first", false}, {std::string("x"), "again", true}});
    EXPECT_EQ(llm->complete(user("x"), {}), "first");
    for (int i = 0; i < 5; ++i) EXPECT_EQ(llm->complete(user("x"), {}), "again");
    EXPECT_THROW(llm->complete(user("y"), {}), Error);
}

TEST(Cassette, MatchSeesAllMessages) {
    auto llm = cassette({{std::string("sys\nusr"), "ok", false}});
    EXPECT_EQ(llm->complete({{Role::System, "sys"}, {Role::User, "usr"}}, {}), "ok");
}

TEST(Cassette, JsonlParsingAndErrors) {
    auto entries = CassetteBackend::parse_jsonl(
        "{\"reply\":\"r1\"}\n\n{\"match\":\"m\",\"reply\":\"r2\",\"repeat\":true}\n{\"messages\":[],\"note\":1}\n");
    ASSERT_EQ(entries.size(), 2u);
    EXPECT_FALSE(entries[0].match.has_value());
    EXPECT_EQ(*entries[1].match, "m");
    EXPECT_TRUE(entries[1].repeat);
    try {
        CassetteBackend::parse_jsonl("{\"reply\":\"ok\"}\nnot json\n");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ConfigError);
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
    EXPECT_THROW(CassetteBackend::from_file("/nonexistent/cassette.jsonl"), Error);
}

TEST(Cassette, TranscriptReloadsAsCassette) {
    TempDir dir;
    auto path = dir / "transcript.jsonl";
    auto inner = cassette({{std::nullopt, "hello", false}, {std::nullopt, "world", false}});
    RecordingBackend rec(inner, path);
    rec.complete(user("q1"), {});
    rec.complete(user("q2"), {0.7, 100});
    EXPECT_EQ(rec.calls(), 2u);
    auto lines = rec.transcript();
    EXPECT_EQ(lines[1]["params"]["temperature"], 0.7);
    EXPECT_EQ(lines[1]["messages"][0]["content"], "q2");
    EXPECT_EQ(lines[1]["seq"], 2);

    auto replay = CassetteBackend::from_file(path);
    EXPECT_EQ(replay->complete(user("anything"), {}), "hello");
    EXPECT_EQ(replay->complete(user("anything"), {}), "world");
}

TEST(Recording, FailuresAreRecordedAndRethrown) {
    auto inner = cassette({});
    RecordingBackend rec(inner);
    EXPECT_THROW(rec.complete(user("q"), {}), Error);
    ASSERT_EQ(rec.calls(), 1u);
    EXPECT_TRUE(rec.transcript()[0].contains("error"));
}

TEST(Templates, PlaceholdersAndEscapes) {
    PromptTemplate t("t", "Goal: {goal}\nJSON: {{\"a\": {n}}}\n{goal} again; {not closed");
    EXPECT_EQ(t.placeholders(), (std::vector<std::string>{"goal", "n"}));
    EXPECT_EQ(render(t, {{"goal", "G"}, {"n", "1"}}), "Goal: G\nJSON: {\"a\": 1}\nG again; {not closed");
}

TEST(Templates, SubstitutedValuesAreNotRescanned) {
    PromptTemplate t("t", "{a}");
    EXPECT_EQ(render(t, {{"a", "{b}"}}), "{b}");
}

TEST(Templates, MissingBindingNamesThePlaceholder) {
    PromptTemplate t("code", "{task} {tool_prompt}");
    try {
        render(t, {{"task", "x"}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::MissingBinding);
        EXPECT_NE(std::string(e.what()).find("{tool_prompt}"), std::string::npos);
    }
}

TEST(Templates, ShippedLibraryHasEveryTemplate) {
    auto lib = shipped_prompts();
    for (const char* name : {"plan", "plan_repair", "replan", "code_task", "tool_usage_zero_shot", "tool_usage_one_shot",
                             "debug", "classify", "tool_rank", "acv_validation", "tool_evolve", "tool_debug"}) {
        EXPECT_TRUE(lib.contains(name)) << name;
    }
    EXPECT_EQ(lib.get("plan").placeholders(), (std::vector<std::string>{"goal", "context"}));
    try {
        lib.get("nope");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ConfigError);
    }
    TempDir dir;
    write_text(dir / "p" / "hello.txt", "Hi {name}");
    write_text(dir / "p" / "notes.md", "ignored");
    auto custom = PromptLibrary::load(dir / "p");
    EXPECT_EQ(render(custom.get("hello"), {{"name", "you"}}), "Hi you");
    EXPECT_FALSE(custom.contains("notes"));
    EXPECT_THROW(PromptLibrary::load(dir / "missing"), Error);
}

TEST(CodeExtraction, FencedBlocks) {
    std::string reply = "Sure.\n```python\nx = 1\nprint(x)\n```\nand\n```yaml schema\nname: T\n```\n";
    auto blocks = fenced_blocks(reply);
    ASSERT_EQ(blocks.size(), 2u);
    EXPECT_EQ(blocks[0].info, "python");
    EXPECT_EQ(blocks[0].body, "x = 1\nprint(x)");
    EXPECT_EQ(blocks[1].info, "yaml schema");
    EXPECT_EQ(extract_code(reply), "x = 1\nprint(x)");
    EXPECT_EQ(extract_code("  y = 2\n"), "y = 2");
    EXPECT_EQ(extract_code("```\nz = 3```"), "z = 3");
    EXPECT_EQ(extract_code("```python\nunterminated\n"), "unterminated");
    EXPECT_EQ(extract_code(fenced("python", "a\r\nb")), "a\nb");
}

TEST(BackendSpec, Parsing) {
    EXPECT_EQ(parse_backend_spec("http").kind, "http");
    auto c = parse_backend_spec("cassette:/tmp/x.jsonl");
    EXPECT_EQ(c.kind, "cassette");
    EXPECT_EQ(c.cassette, "/tmp/x.jsonl");
    EXPECT_THROW(parse_backend_spec("cassette:"), Error);
    EXPECT_THROW(parse_backend_spec("ftp"), Error);
}

TEST(HttpBackend, SendsChatCompletionsRequest) {
    nlohmann::json seen;
    std::string auth;
    StubServer server([&](const httplib::Request& req, httplib::Response& res) {
        seen = nlohmann::json::parse(req.body);
        auth = req.get_header_value("Authorization");
        res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"pong"}}]})", "application/json");
    });
    ::setenv("TASKWEAVE_TEST_KEY", "secret", 1);
    HttpBackendConfig cfg;
    cfg.base_url = server.url();
    cfg.model = "stub-model";
    cfg.api_key_env = "TASKWEAVE_TEST_KEY";
    HttpChatBackend backend(cfg);
    EXPECT_EQ(backend.complete({{Role::System, "s"}, {Role::User, "ping"}}, {0.7, 64}), "pong");
    EXPECT_EQ(seen["model"], "stub-model");
    EXPECT_EQ(seen["temperature"], 0.7);
    EXPECT_EQ(seen["max_tokens"], 64);
    EXPECT_EQ(seen["messages"][0]["role"], "system");
    EXPECT_EQ(seen["messages"][1]["content"], "ping");
    EXPECT_EQ(auth, "Bearer secret");
}

TEST(HttpBackend, RateLimitBacksOffThenGivesUp) {
    std::atomic<int> hits{0};
    StubServer server([&](const httplib::Request&, httplib::Response& res) {
        ++hits;
        res.status = 429;
    });
    HttpBackendConfig cfg;
    cfg.base_url = server.url();
    cfg.max_retries = 3;
    cfg.backoff_base = std::chrono::milliseconds(5);
    HttpChatBackend backend(cfg);
    try {
        backend.complete(user("x"), {});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::RateLimited);
    }
    EXPECT_EQ(backend.backoffs(), 3);
    EXPECT_EQ(hits.load(), 4);
}

TEST(HttpBackend, RecoversAfterTransientRateLimit) {
    std::atomic<int> hits{0};
    StubServer server([&](const httplib::Request&, httplib::Response& res) {
        if (++hits < 3) {
            res.status = 429;
            return;
        }
        res.set_content(R"({"choices":[{"message":{"content":"done"}}]})", "application/json");
    });
    HttpBackendConfig cfg;
    cfg.base_url = server.url();
    cfg.backoff_base = std::chrono::milliseconds(5);
    HttpChatBackend backend(cfg);
    EXPECT_EQ(backend.complete(user("x"), {}), "done");
    EXPECT_EQ(backend.backoffs(), 2);
}

TEST(HttpBackend, TransportErrors) {
    StubServer server([&](const httplib::Request&, httplib::Response& res) {
        res.status = 500;
        res.set_content("boom", "text/plain");
    });
    HttpBackendConfig cfg;
    cfg.base_url = server.url();
    try {
        HttpChatBackend(cfg).complete(user("x"), {});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::TransportError);
        EXPECT_NE(std::string(e.what()).find("HTTP 500"), std::string::npos);
    }
    cfg.base_url = "http://127.0.0.1:1";
    cfg.timeout = std::chrono::seconds(2);
    try {
        HttpChatBackend(cfg).complete(user("x"), {});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::TransportError);
    }
}
