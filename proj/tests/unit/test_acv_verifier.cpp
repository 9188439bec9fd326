#include <cmath>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "taskweave/acv_verifier.hpp"
#include "test_support.hpp"

using namespace taskweave;
using taskweave::testing::cassette;
using taskweave::testing::fenced;
using taskweave::testing::split_vote_trials;
using taskweave::testing::quick_session;
using taskweave::testing::shipped_prompts;
using taskweave::testing::TempDir;

namespace {

Trial make_trial(int k, std::string answer, Verdict v) {
    Trial t;
    t.k = k;
    t.answer = std::move(answer);
    t.verdict = v;
    t.confidence = confidence(v);
    return t;
}

struct OracleChoice {
    std::string chosen;
    std::map<std::string, double> means;
};

OracleChoice oracle_choice(const std::vector<Trial>& trials) {
    std::vector<std::string> order;
    std::map<std::string, std::pair<double, int>> acc;
    for (const auto& t : trials) {
        if (!acc.contains(t.answer)) order.push_back(t.answer);
        acc[t.answer].first += t.confidence;
        acc[t.answer].second += 1;
    }
    OracleChoice out;
    double best = -1.0;
    for (const auto& a : order) {
        double mean = acc[a].first / acc[a].second;
        out.means[a] = mean;
        if (mean > best + 1e-9) {
            best = mean;
            out.chosen = a;
        }
    }
    return out;
}

}  // namespace

TEST(Acv, SplitVoteChoosesHigherMeanOverMajority) {
    auto report = aggregate(split_vote_trials(), 5);
    EXPECT_NEAR(report.mean_for("1/108"), 0.6, 1e-12);
    EXPECT_NEAR(report.mean_for("56/219"), 0.3, 1e-12);
    EXPECT_EQ(report.chosen, "1/108");
    EXPECT_EQ(report.majority_answer, "56/219");
    ASSERT_EQ(report.answers.size(), 2u);
    EXPECT_EQ(report.answers[0].count, 2u);
    EXPECT_EQ(report.answers[1].count, 3u);
    EXPECT_EQ(report.answers[1].first_trial, 1u);
    auto doc = to_json(report);
    EXPECT_EQ(doc["N"], 5);
    EXPECT_EQ(doc["chosen"], "1/108");
    EXPECT_EQ(doc["trials"][2]["result"], "Indeterminate");
}

TEST(Acv, ConfidenceMapping) {
    EXPECT_EQ(confidence(Verdict::True), 1.0);
    EXPECT_EQ(confidence(Verdict::False), 0.2);
    EXPECT_EQ(confidence(Verdict::Indeterminate), 0.5);
    EXPECT_EQ(to_string(Verdict::True), "True");
    EXPECT_EQ(to_string(Verdict::False), "False");
    EXPECT_EQ(to_string(Verdict::Indeterminate), "Indeterminate");
}

TEST(Acv, InterpretResultCoversEveryShape) {
    auto out = [](std::string text) {
        ExecutionResult r;
        r.stdout_text = std::move(text);
        return r;
    };
    EXPECT_EQ(interpret_result(out("True\n")), Verdict::True);
    EXPECT_EQ(interpret_result(out("checking...\nFalse\n\n")), Verdict::False);
    EXPECT_EQ(interpret_result(out("  True  \n")), Verdict::True);
    EXPECT_EQ(interpret_result(out("True\nmaybe\n")), Verdict::Indeterminate);
    EXPECT_EQ(interpret_result(out("true\n")), Verdict::Indeterminate);
    EXPECT_EQ(interpret_result(out("")), Verdict::Indeterminate);
    ExecutionResult raised = out("True\n");
    raised.exception = ExceptionInfo{"AssertionError", "", ""};
    EXPECT_EQ(interpret_result(raised), Verdict::Indeterminate);
}

TEST(Acv, CanonicalAnswers) {
    EXPECT_EQ(canonical_answer(" 1/108 "), "1/108");
    EXPECT_EQ(canonical_answer("2/216"), "1/108");
    EXPECT_EQ(canonical_answer("112 / 438"), "56/219");
    EXPECT_EQ(canonical_answer("\\frac{56}{219}"), "56/219");
    EXPECT_EQ(canonical_answer("$\\dfrac{2}{4}$"), "1/2");
    EXPECT_EQ(canonical_answer("4/2"), "2");
    EXPECT_EQ(canonical_answer("3/-6"), "-1/2");
    EXPECT_EQ(canonical_answer("1/0"), "1/0");
    EXPECT_EQ(canonical_answer("007"), "7");
    EXPECT_EQ(canonical_answer("-0"), "0");
    EXPECT_EQ(canonical_answer("3.50"), "3.5");
    EXPECT_EQ(canonical_answer("3.000"), "3");
    EXPECT_EQ(canonical_answer(".25"), "0.25");
    EXPECT_EQ(canonical_answer("-0.50"), "-0.5");
    EXPECT_EQ(canonical_answer("0.1 "), "0.1");
    EXPECT_NE(canonical_answer("0.1"), canonical_answer("1/10"));
    EXPECT_EQ(canonical_answer("  The   answer\tis 5 "), "The answer is 5");
}

TEST(Acv, CanonicalFormIsIdempotent) {
    for (const char* a : {"2/216", "\\frac{56}{219}", "3.50", "007", " x  y ", "-0.50", "12/4", "1e5"}) {
        std::string once = canonical_answer(a);
        EXPECT_EQ(canonical_answer(once), once) << a;
    }
}

TEST(Acv, EquivalentSpellingsPoolTogether) {
    auto report = aggregate({make_trial(1, "2/4", Verdict::True), make_trial(2, "1/2", Verdict::False),
                             make_trial(3, "0.5", Verdict::True)});
    ASSERT_EQ(report.answers.size(), 2u);
    EXPECT_EQ(report.answers[0].answer, "1/2");
    EXPECT_NEAR(report.answers[0].mean_confidence, 0.6, 1e-12);
    EXPECT_EQ(report.chosen, "0.5");
}

TEST(Acv, TiesGoToFirstSeen) {
    auto report = aggregate({make_trial(1, "b", Verdict::False), make_trial(2, "a", Verdict::False)});
    EXPECT_EQ(report.chosen, "b");
    EXPECT_EQ(report.majority_answer, "b");
}

TEST(Acv, RandomTrialsMatchIndependentOracle) {
    std::mt19937 rng(5);
    const std::vector<Verdict> verdicts{Verdict::True, Verdict::False, Verdict::Indeterminate};
    for (int round = 0; round < 2000; ++round) {
        int n = 1 + static_cast<int>(rng() % 9);
        std::vector<Trial> trials;
        for (int k = 1; k <= n; ++k) trials.push_back(make_trial(k, std::string(1, static_cast<char>('a' + rng() % 4)), verdicts[rng() % 3]));
        auto report = aggregate(trials, n);
        auto oracle = oracle_choice(trials);
        EXPECT_EQ(report.chosen, oracle.chosen);
        for (const auto& [answer, mean] : oracle.means) EXPECT_NEAR(report.mean_for(answer), mean, 1e-12);
        double chosen_mean = report.mean_for(report.chosen);
        for (const auto& a : report.answers) EXPECT_LE(a.mean_confidence, chosen_mean + 1e-12);
    }
}

TEST(Acv, ChoiceIsScaleFree) {
    std::mt19937 rng(11);
    const std::vector<Verdict> verdicts{Verdict::True, Verdict::False, Verdict::Indeterminate};
    for (int round = 0; round < 500; ++round) {
        std::vector<Trial> trials;
        int n = 1 + static_cast<int>(rng() % 6);
        for (int k = 1; k <= n; ++k) trials.push_back(make_trial(k, std::to_string(rng() % 3), verdicts[rng() % 3]));
        auto base = aggregate(trials);
        for (int m : {2, 3, 7}) {
            std::vector<Trial> scaled;
            for (int rep = 0; rep < m; ++rep) {
                for (const auto& t : trials) scaled.push_back(t);
            }
            auto big = aggregate(scaled);
            EXPECT_EQ(big.chosen, base.chosen);
            for (const auto& a : base.answers) EXPECT_NEAR(big.mean_for(a.answer), a.mean_confidence, 1e-12);
        }
    }
}

TEST(Acv, SingleTrialDegeneratesToThatAnswer) {
    for (Verdict v : {Verdict::True, Verdict::False, Verdict::Indeterminate}) {
        auto report = aggregate({make_trial(1, "42", v)}, 1);
        EXPECT_EQ(report.chosen, "42");
        EXPECT_EQ(report.mean_for("42"), confidence(v));
    }
}

TEST(Acv, AggregatePreconditions) {
    try {
        aggregate({});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NoTrials);
    }
    EXPECT_THROW(aggregate(split_vote_trials(), 3), Error);
}

TEST(Acv, RunsTrialsInScratchScopes) {
    TempDir dir;
    Session session(quick_session(dir.path()));
    session.execute({"setup", "base = 100", CellOrigin::Task});
    SolvedAttempt first{"print(base // 4)", session.execute({"solve-1", "print(base // 4)", CellOrigin::Task})};

    auto llm = cassette({{std::string("# Verification"), fenced("python", "base = -1\nprint(True)"), false},
                         {std::string("# Verification"), fenced("python", "print(False)"), false},
                         {std::string("# Verification"), fenced("python", "raise RuntimeError('x')"), false}});
    std::vector<int> solved_for;
    std::vector<int> observed;
    AcvRequest req;
    req.task = "quarter of base";
    req.n = 4;
    req.first = first;
    req.cell_prefix = "acv1-t";
    req.solve = [&](int k) {
        solved_for.push_back(k);
        if (k == 2) return std::string("print(base / 4)");
        if (k == 3) return std::string("base = 0\nprint(100 // 4)");
        return std::string("1/0");
    };
    req.on_trial = [&](const Trial& t) { observed.push_back(t.k); };
    auto report = run_acv(req, session, *llm, shipped_prompts());

    EXPECT_EQ(solved_for, (std::vector<int>{2, 3, 4}));
    EXPECT_EQ(observed, (std::vector<int>{1, 2, 3, 4}));
    ASSERT_EQ(report.trials.size(), 4u);
    EXPECT_EQ(report.trials[0].answer, "25");
    EXPECT_EQ(report.trials[0].verdict, Verdict::True);
    EXPECT_EQ(report.trials[1].answer, "25");
    EXPECT_EQ(report.trials[1].verdict, Verdict::False);
    EXPECT_EQ(report.trials[2].answer, "25");
    EXPECT_EQ(report.trials[2].verdict, Verdict::Indeterminate);
    EXPECT_EQ(report.trials[3].answer, std::string(kErrorAnswer));
    EXPECT_EQ(report.trials[3].verdict, Verdict::False);
    EXPECT_EQ(report.chosen, "25");
    EXPECT_NEAR(report.mean_for("25"), (1.0 + 0.2 + 0.5) / 3.0, 1e-12);
    EXPECT_EQ(llm->remaining(), 0u);

    EXPECT_EQ(session.execute({"after", "print(base)", CellOrigin::Task}).stdout_text, "100\n");
}

TEST(Acv, RejectsEmptyBudget) {
    TempDir dir;
    Session session(quick_session(dir.path()));
    auto llm = cassette({});
    AcvRequest req;
    req.n = 0;
    EXPECT_THROW(run_acv(req, session, *llm, shipped_prompts()), Error);
    EXPECT_THROW(generate_validation("t", "c", "  ", *llm, shipped_prompts()), Error);
}
