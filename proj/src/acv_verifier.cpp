#include "taskweave/acv_verifier.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <regex>

#include "taskweave/text.hpp"

namespace taskweave {

namespace {

std::string strip_integer(std::string_view digits) {
    bool negative = false;
    if (!digits.empty() && (digits.front() == '+' || digits.front() == '-')) {
        negative = digits.front() == '-';
        digits.remove_prefix(1);
    }
    while (digits.size() > 1 && digits.front() == '0') digits.remove_prefix(1);
    if (digits == "0") negative = false;
    return (negative ? "-" : "") + std::string(digits);
}

std::optional<long long> to_int(std::string_view text) {
    if (!text.empty() && text.front() == '+') text.remove_prefix(1);
    long long value = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr != text.data() + text.size()) return std::nullopt;
    return value;
}

std::string reduce_fraction(const std::string& num, const std::string& den) {
    auto n = to_int(num);
    auto d = to_int(den);
    if (!n || !d || *d == 0 || *n == std::numeric_limits<long long>::min() ||
        *d == std::numeric_limits<long long>::min()) {
        return strip_integer(num) + "/" + strip_integer(den);
    }
    long long a = *n, b = *d;
    if (b < 0) {
        a = -a;
        b = -b;
    }
    long long g = std::gcd(a < 0 ? -a : a, b);
    if (g > 1) {
        a /= g;
        b /= g;
    }
    if (b == 1) return std::to_string(a);
    return std::to_string(a) + "/" + std::to_string(b);
}

}  // namespace

std::string_view to_string(Verdict verdict) noexcept {
    switch (verdict) {
    case Verdict::True: return "True";
    case Verdict::False: return "False";
    case Verdict::Indeterminate: return "Indeterminate";
    }
    return "Indeterminate";
}

Verdict interpret_result(const ExecutionResult& result) {
    if (result.exception) return Verdict::Indeterminate;
    const std::string last = last_nonempty_line(result.stdout_text);
    if (last == "True") return Verdict::True;
    if (last == "False") return Verdict::False;
    return Verdict::Indeterminate;
}

std::string canonical_answer(std::string_view answer) {
    static const std::regex latex_frac(R"(^\\[dt]?frac\{\s*([+-]?\d+)\s*\}\{\s*([+-]?\d+)\s*\}$)");
    static const std::regex fraction(R"(^([+-]?\d+)\s*/\s*([+-]?\d+)$)");
    static const std::regex integer(R"(^[+-]?\d+$)");
    static const std::regex decimal(R"(^([+-]?)(\d*)\.(\d*)$)");

    std::string text = normalize_whitespace(answer);
    if (text.size() >= 2 && text.front() == '$' && text.back() == '$') text = normalize_whitespace(text.substr(1, text.size() - 2));
    std::smatch m;
    if (std::regex_match(text, m, latex_frac) || std::regex_match(text, m, fraction)) {
        return reduce_fraction(m[1].str(), m[2].str());
    }
    if (std::regex_match(text, integer)) return strip_integer(text);
    if (std::regex_match(text, m, decimal) && (m[2].length() > 0 || m[3].length() > 0)) {
        std::string whole = m[2].length() > 0 ? m[2].str() : "0";
        std::string frac = m[3].str();
        while (!frac.empty() && frac.back() == '0') frac.pop_back();
        std::string sign = m[1].str() == "-" ? "-" : "";
        std::string out = strip_integer(sign + whole);
        if (!frac.empty()) {
            if (out == "0" && sign == "-") out = "-0";
            out += "." + frac;
        }
        return out;
    }
    return text;
}

double VerificationReport::mean_for(std::string_view answer) const {
    for (const auto& a : answers) {
        if (a.answer == answer) return a.mean_confidence;
    }
    return 0.0;
}

VerificationReport aggregate(const std::vector<Trial>& trials, int max_trials) {
    if (trials.empty()) throw Error(ErrorCode::NoTrials, "nothing to aggregate");
    VerificationReport report;
    report.max_trials = max_trials > 0 ? max_trials : static_cast<int>(trials.size());
    if (trials.size() > static_cast<std::size_t>(report.max_trials)) {
        throw Error(ErrorCode::PreconditionViolation, "more trials than the verification budget");
    }
    report.trials = trials;

    std::vector<double> sums;
    for (std::size_t i = 0; i < trials.size(); ++i) {
        std::string key = canonical_answer(trials[i].answer);
        auto it = std::find_if(report.answers.begin(), report.answers.end(),
                               [&](const AnswerSummary& a) { return a.answer == key; });
        if (it == report.answers.end()) {
            report.answers.push_back({key, 0.0, 0, i});
            sums.push_back(0.0);
            it = std::prev(report.answers.end());
        }
        auto slot = static_cast<std::size_t>(it - report.answers.begin());
        sums[slot] += trials[i].confidence;
        ++it->count;
    }
    for (std::size_t i = 0; i < report.answers.size(); ++i) {
        report.answers[i].mean_confidence = sums[i] / static_cast<double>(report.answers[i].count);
    }

    // Groups are already in first-appearance order, so a strict improvement
    // test keeps the earliest answer on ties.
    const AnswerSummary* best = &report.answers.front();
    const AnswerSummary* most = &report.answers.front();
    for (const auto& a : report.answers) {
        double tol = 1e-12 * std::max(std::abs(a.mean_confidence), std::abs(best->mean_confidence));
        if (a.mean_confidence > best->mean_confidence + tol) best = &a;
        if (a.count > most->count) most = &a;
    }
    report.chosen = best->answer;
    report.majority_answer = most->answer;
    return report;
}

std::string generate_validation(std::string_view task, std::string_view code, std::string_view answer, LlmBackend& llm,
                                const PromptLibrary& prompts, const CompletionParams& params) {
    if (trim(answer).empty()) throw Error(ErrorCode::PreconditionViolation, "validation needs a candidate answer");
    std::string prompt = render(prompts.get("acv_validation"),
                                {{"task", std::string(task)}, {"code", std::string(code)}, {"answer", std::string(answer)}});
    return extract_code(llm.complete({{Role::User, prompt}}, params));
}

VerificationReport run_acv(const AcvRequest& request, Session& session, LlmBackend& llm, const PromptLibrary& prompts) {
    if (request.n < 1) throw Error(ErrorCode::PreconditionViolation, "ACV needs at least one trial");
    std::vector<Trial> trials;
    for (int k = 1; k <= request.n; ++k) {
        const std::string tag = request.cell_prefix + "-" + std::to_string(k);
        Trial trial;
        trial.k = k;
        trial.task = request.task;

        ExecutionResult solved;
        if (k == 1 && request.first) {
            trial.code = request.first->code;
            solved = request.first->result;
        } else {
            if (!request.solve) throw Error(ErrorCode::PreconditionViolation, "no solver for trial " + std::to_string(k));
            trial.code = request.solve(k);
            try {
                solved = session.execute({tag + "-solve", trial.code, CellOrigin::Task, tag});
            } catch (const CellTimeout& timeout) {
                solved = timeout.result();
            }
        }

        const std::string raw_answer = last_nonempty_line(solved.stdout_text);
        if (solved.exception || raw_answer.empty()) {
            trial.answer = std::string(kErrorAnswer);
            trial.verdict = Verdict::False;
            trial.confidence = confidence(Verdict::False);
            if (session.alive()) session.execute({tag + "-drop", "", CellOrigin::Validation, tag, true});
        } else {
            trial.answer = canonical_answer(raw_answer);
            trial.validation_code =
                generate_validation(request.task, trial.code, raw_answer, llm, prompts, request.validation_params);
            ExecutionResult checked;
            try {
                checked = session.execute({tag + "-validate", trial.validation_code, CellOrigin::Validation, tag, true});
            } catch (const CellTimeout& timeout) {
                checked = timeout.result();
            }
            trial.verdict = interpret_result(checked);
            trial.confidence = confidence(trial.verdict);
        }
        if (request.on_trial) request.on_trial(trial);
        trials.push_back(std::move(trial));
    }
    return aggregate(trials, request.n);
}

nlohmann::json to_json(const VerificationReport& report) {
    nlohmann::json trials = nlohmann::json::array();
    for (const auto& t : report.trials) {
        trials.push_back({{"k", t.k},
                          {"answer", t.answer},
                          {"code", t.code},
                          {"validation_code", t.validation_code},
                          {"result", to_string(t.verdict)},
                          {"confidence", t.confidence}});
    }
    nlohmann::json answers = nlohmann::json::array();
    for (const auto& a : report.answers) {
        answers.push_back({{"answer", a.answer}, {"mean_confidence", a.mean_confidence}, {"count", a.count}});
    }
    return {{"N", report.max_trials},
            {"trials", trials},
            {"answers", answers},
            {"chosen", report.chosen},
            {"majority_answer", report.majority_answer}};
}

}  // namespace taskweave
