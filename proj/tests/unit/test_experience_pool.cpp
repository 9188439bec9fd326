#include <cmath>
#include <random>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "taskweave/experience_pool.hpp"
#include "test_support.hpp"

using namespace taskweave;
using taskweave::testing::read_text;
using taskweave::testing::TempDir;
using taskweave::testing::write_text;

namespace {

ExperienceRecord record(std::string description, std::string code = "pass", Outcome outcome = Outcome::Success) {
    ExperienceRecord r;
    r.task_description = std::move(description);
    r.final_code = std::move(code);
    r.outcome = outcome;
    return r;
}

const std::vector<std::string> kTasks{
    "Train a random forest on the housing data and report RMSE",
    "Fill missing values in the age column with the median",
    "Plot the distribution of passenger fares",
    "Compute the correlation between sensor readings",
    "Scrape the headlines from the news page",
    "Encode categorical columns with value counts",
    "Evaluate the classifier accuracy on the test split",
    "Summarize the last ten emails in the inbox",
};

}  // namespace

TEST(Embedding, HashedBowIsUnitNormAndDeterministic) {
    HashedBowEmbedder e(64);
    auto a = e.embed("Fill missing values");
    auto b = e.embed("fill   MISSING values!");
    ASSERT_EQ(a.size(), 64u);
    double norm = 0.0;
    for (double x : a) norm += x * x;
    EXPECT_NEAR(norm, 1.0, 1e-12);
    EXPECT_EQ(a, b);
    EXPECT_NEAR(cosine(a, HashedBowEmbedder(64).embed("Fill missing values")), 1.0, 1e-12);
    auto punct = e.embed("?!");
    EXPECT_NEAR(cosine(punct, punct), 1.0, 1e-12);
    EXPECT_THROW(cosine(a, HashedBowEmbedder(32).embed("x")), Error);
}

TEST(Pool, IdenticalDescriptionIsRankOneWithUnitSimilarity) {
    ExperiencePool pool;
    for (const auto& t : kTasks) pool.store(record(t));
    for (const auto& t : kTasks) {
        auto hits = pool.retrieve(t, 3);
        ASSERT_FALSE(hits.empty());
        EXPECT_EQ(hits[0].record.task_description, t);
        EXPECT_NEAR(hits[0].similarity, 1.0, 1e-6);
    }
}

TEST(Pool, RetrievalIsPrefixMonotoneInK) {
    ExperiencePool pool;
    std::mt19937 rng(3);
    for (int i = 0; i < 40; ++i) pool.store(record(kTasks[rng() % kTasks.size()] + " variant " + std::to_string(i % 7)));
    for (const auto& q : {"missing values median", "random forest RMSE", "emails", "nothing in common"}) {
        auto all = pool.retrieve(q, pool.size() + 5);
        EXPECT_EQ(all.size(), pool.size());
        for (std::size_t k = 0; k <= pool.size(); ++k) {
            auto top = pool.retrieve(q, k);
            ASSERT_EQ(top.size(), k);
            for (std::size_t i = 0; i < k; ++i) {
                EXPECT_EQ(top[i].record.id, all[i].record.id);
                if (i > 0) EXPECT_LE(top[i].similarity, top[i - 1].similarity);
            }
        }
    }
}

TEST(Pool, TiesPreferNewerRecords) {
    ExperiencePool pool;
    auto first = pool.store(record("same text"));
    auto second = pool.store(record("same text", "other"));
    auto hits = pool.retrieve("same text", 2);
    ASSERT_EQ(hits.size(), 2u);
    EXPECT_EQ(hits[0].record.id, second);
    EXPECT_EQ(hits[1].record.id, first);
}

TEST(Pool, PersistsAndReloadsIdentically) {
    TempDir dir;
    auto path = dir / "pool" / "experience.jsonl";
    std::vector<std::vector<std::string>> before;
    {
        ExperiencePool pool(path);
        for (const auto& t : kTasks) pool.store(record(t, "code for " + t, t.size() % 2 ? Outcome::Success : Outcome::Failure));
        for (const auto& t : kTasks) {
            std::vector<std::string> ids;
            for (const auto& h : pool.retrieve(t, 4)) ids.push_back(h.record.id);
            before.push_back(ids);
        }
    }
    ExperiencePool reopened(path);
    ASSERT_EQ(reopened.size(), kTasks.size());
    for (std::size_t i = 0; i < kTasks.size(); ++i) {
        std::vector<std::string> ids;
        for (const auto& h : reopened.retrieve(kTasks[i], 4)) ids.push_back(h.record.id);
        EXPECT_EQ(ids, before[i]);
    }
    auto recs = reopened.records();
    EXPECT_EQ(recs[0].id, "exp-1");
    EXPECT_EQ(recs[0].final_code, "code for " + kTasks[0]);
    EXPECT_FALSE(recs[0].created_at.empty());
}

TEST(Pool, SecondHandleSeesAppendsAndTornTailIsSkipped) {
    TempDir dir;
    auto path = dir / "experience.jsonl";
    ExperiencePool a(path);
    ExperiencePool b(path);
    EXPECT_EQ(a.store(record("first")), "exp-1");
    EXPECT_EQ(b.store(record("second")), "exp-2");
    EXPECT_EQ(b.size(), 2u);
    {
        std::ofstream out(path, std::ios::app);
        out << "{\"id\": \"exp-3\", \"task_desc";
    }
    ExperiencePool c(path);
    EXPECT_EQ(c.size(), 2u);
}

TEST(Pool, RecordJsonRoundTrip) {
    ExperienceRecord r = record("desc", "x = 1", Outcome::Failure);
    r.id = "exp-9";
    r.final_answer = "42";
    r.created_at = "2024-01-01T00:00:00Z";
    r.embedding = {0.6, 0.8};
    auto back = experience_from_json(to_json(r));
    EXPECT_EQ(back.id, r.id);
    EXPECT_EQ(back.task_description, r.task_description);
    EXPECT_EQ(back.final_code, r.final_code);
    EXPECT_EQ(back.final_answer, r.final_answer);
    EXPECT_EQ(back.outcome, r.outcome);
    EXPECT_EQ(back.created_at, r.created_at);
    EXPECT_EQ(back.embedding, r.embedding);
}

TEST(Pool, RejectsEmptyDescriptionAndUnwritablePath) {
    ExperiencePool pool;
    try {
        pool.store(record("   "));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::PreconditionViolation);
    }
    EXPECT_TRUE(pool.retrieve("x", 0).empty());
    EXPECT_TRUE(pool.retrieve("x", 3).empty());

    TempDir dir;
    write_text(dir / "blocker", "file, not directory");
    ExperiencePool bad(dir / "blocker" / "pool.jsonl");
    try {
        bad.store(record("x"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::StorageFailure);
    }
}

TEST(Context, FormatsBlocksWithinBudget) {
    ExperiencePool pool;
    pool.store(record("load csv", "import pandas as pd\ndf = pd.read_csv('x.csv')"));
    ExperienceRecord with_answer = record("compute mean", std::string(5000, 'x'), Outcome::Failure);
    with_answer.final_answer = "3.5";
    pool.store(with_answer);
    auto hits = pool.retrieve("compute mean of csv", 2);
    std::string ctx = format_context(hits, 100000);
    EXPECT_NE(ctx.find("### Experience 1"), std::string::npos);
    EXPECT_NE(ctx.find("Answer: 3.5"), std::string::npos);
    EXPECT_NE(ctx.find("outcome: failure"), std::string::npos);
    for (std::size_t budget : {0u, 50u, 120u, 200u, 400u, 1000u, 3000u}) {
        std::string cut = format_context(hits, budget);
        EXPECT_LE(cut.size(), budget) << budget;
    }
    std::string small = format_context(hits, 400);
    EXPECT_NE(small.find("[truncated]"), std::string::npos);
    EXPECT_TRUE(format_context({}, 100).empty());
}

TEST(Embedding, HttpEmbedderReadsFirstVector) {
    httplib::Server server;
    nlohmann::json seen;
    server.Post("/v1/embeddings", [&](const httplib::Request& req, httplib::Response& res) {
        seen = nlohmann::json::parse(req.body);
        res.set_content(R"({"data":[{"embedding":[3.0, 4.0]}]})", "application/json");
    });
    int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    HttpEmbedder e("http://127.0.0.1:" + std::to_string(port), "embed-model", 2);
    auto v = e.embed("hello");
    server.stop();
    t.join();
    EXPECT_EQ(seen["model"], "embed-model");
    EXPECT_EQ(seen["input"], "hello");
    ASSERT_EQ(v.size(), 2u);
    EXPECT_NEAR(v[0], 0.6, 1e-12);
    EXPECT_NEAR(v[1], 0.8, 1e-12);
}
