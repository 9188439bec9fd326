#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskweave/code_executor.hpp"
#include "taskweave/llm_gateway.hpp"
#include "taskweave/task_graph.hpp"

namespace taskweave {

enum class Verdict { True, False, Indeterminate };

std::string_view to_string(Verdict verdict) noexcept;

/// 1 for True, 0.2 for False, 0.5 otherwise.
constexpr double confidence(Verdict verdict) noexcept {
    switch (verdict) {
    case Verdict::True: return 1.0;
    case Verdict::False: return 0.2;
    case Verdict::Indeterminate: return 0.5;
    }
    return 0.5;
}

/// True/False from the last non-empty stdout line; exceptions, timeouts and
/// any other output are Indeterminate.
Verdict interpret_result(const ExecutionResult& result);

/// Trimmed, whitespace-collapsed; integer fractions reduced, decimals stripped
/// of trailing zeros, \frac{a}{b} read as a/b. No float coercion.
std::string canonical_answer(std::string_view answer);

inline constexpr std::string_view kErrorAnswer = "<error>";

struct Trial {
    int k = 1;
    std::string task;
    std::string code;
    std::string answer;  // canonical
    std::string validation_code;
    Verdict verdict = Verdict::Indeterminate;
    double confidence = 0.5;
};

struct AnswerSummary {
    std::string answer;
    double mean_confidence = 0.0;
    std::size_t count = 0;
    std::size_t first_trial = 0;  // index into trials
};

struct VerificationReport {
    int max_trials = 1;
    std::vector<Trial> trials;
    /// One entry per distinct answer, in order of first appearance.
    std::vector<AnswerSummary> answers;
    std::string chosen;
    std::string majority_answer;

    double mean_for(std::string_view answer) const;
};

/// Groups trials by canonical answer and picks the highest mean confidence;
/// ties (within 1e-12 relative) go to the answer seen first.
VerificationReport aggregate(const std::vector<Trial>& trials, int max_trials = 0);

std::string generate_validation(std::string_view task, std::string_view code, std::string_view answer, LlmBackend& llm,
                                const PromptLibrary& prompts, const CompletionParams& params = {});

/// A solution that already ran (e.g. the task's own accepted cell).
struct SolvedAttempt {
    std::string code;
    ExecutionResult result;
};

struct AcvRequest {
    std::string task;
    int n = 1;
    /// Produces solution code for trial k; not called for k = 1 when `first` is given.
    std::function<std::string(int k)> solve;
    std::optional<SolvedAttempt> first;
    /// Prefix for cell ids and scratch scopes, unique per verification.
    std::string cell_prefix = "acv";
    CompletionParams validation_params{};
    /// Observer for each finished trial.
    std::function<void(const Trial&)> on_trial;
};

/// Solve, validate and score N independent trials, then aggregate. Each
/// trial runs in its own scratch scope forked from the session namespace.
VerificationReport run_acv(const AcvRequest& request, Session& session, LlmBackend& llm, const PromptLibrary& prompts);

nlohmann::json to_json(const VerificationReport& report);

}  // namespace taskweave
