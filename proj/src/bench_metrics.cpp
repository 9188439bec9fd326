#include "taskweave/bench_metrics.hpp"

#include <charconv>
#include <fstream>
#include <map>

namespace taskweave::bench {

using nlohmann::json;

namespace {

std::string format_number(double value) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, ptr);
}

// Suite means; NPS is averaged over the tasks that have one.
struct Means {
    double cr = 0.0, cs = 0.0;
    std::optional<double> nps;
};

Means suite_means(const std::vector<TaskReport>& reports) {
    Means m;
    double nps_sum = 0.0;
    std::size_t nps_count = 0;
    for (const auto& r : reports) {
        m.cr += r.cr;
        m.cs += r.cs;
        if (r.nps) {
            nps_sum += *r.nps;
            ++nps_count;
        }
    }
    m.cr /= static_cast<double>(reports.size());
    m.cs /= static_cast<double>(reports.size());
    if (nps_count > 0) m.nps = nps_sum / static_cast<double>(nps_count);
    return m;
}

}  // namespace

std::optional<int> step_score(StepStatus status) noexcept {
    switch (status) {
    case StepStatus::Missing: return 0;
    case StepStatus::Fail: return 0;
    case StepStatus::SuccessNonCompliant: return 1;
    case StepStatus::SuccessCompliant: return 2;
    case StepStatus::Optional: return std::nullopt;
    }
    return std::nullopt;
}

std::string_view to_string(StepStatus status) noexcept {
    switch (status) {
    case StepStatus::Missing: return "missing";
    case StepStatus::Fail: return "fail";
    case StepStatus::SuccessNonCompliant: return "success_non_compliant";
    case StepStatus::SuccessCompliant: return "success_compliant";
    case StepStatus::Optional: return "optional";
    }
    return "missing";
}

StepStatus step_status_from_string(std::string_view text) {
    for (auto s : {StepStatus::Missing, StepStatus::Fail, StepStatus::SuccessNonCompliant, StepStatus::SuccessCompliant,
                   StepStatus::Optional}) {
        if (to_string(s) == text) return s;
    }
    throw Error(ErrorCode::DomainError, "unknown step status '" + std::string(text) + "'");
}

double completion_rate(std::span<const StepStatus> steps) {
    int total = 0;
    int scored = 0;
    for (auto s : steps) {
        if (auto v = step_score(s)) {
            total += *v;
            ++scored;
        }
    }
    if (scored == 0) throw Error(ErrorCode::NoScoredSteps, "completion rate needs at least one scored step");
    return static_cast<double>(total) / static_cast<double>(kMaxStepScore * scored);
}

double normalized_performance(const MetricSpec& metric) {
    if (metric.value < 0.0 || !(metric.value == metric.value)) {
        throw Error(ErrorCode::DomainError, metric.name + ": raw value must be non-negative");
    }
    if (metric.smaller_is_better) return 1.0 / (1.0 + metric.value);
    if (metric.value > 1.0) throw Error(ErrorCode::DomainError, metric.name + ": larger-is-better value must be in [0,1]");
    return metric.value;
}

double comprehensive_score(double completion, std::optional<double> performance) {
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(completion) || (performance && !in_unit(*performance))) {
        throw Error(ErrorCode::DomainError, "scores must lie in [0,1]");
    }
    if (!performance) return completion;
    return 0.5 * completion + 0.5 * *performance;
}

TaskReport score_task(std::string task_id, std::vector<StepStatus> steps, std::optional<MetricSpec> metric) {
    TaskReport report;
    report.task_id = std::move(task_id);
    report.cr = completion_rate(steps);
    if (metric) report.nps = normalized_performance(*metric);
    report.cs = comprehensive_score(report.cr, report.nps);
    report.steps = std::move(steps);
    report.metric = std::move(metric);
    return report;
}

std::vector<Rubric> parse_rubrics(const json& doc) {
    std::vector<Rubric> rubrics;
    auto parse_one = [](const json& obj) {
        if (!obj.is_object() || !obj.contains("task_id") || !obj.contains("steps")) {
            throw Error(ErrorCode::DomainError, "rubric needs task_id and steps");
        }
        Rubric r;
        r.task_id = obj.at("task_id").get<std::string>();
        for (const auto& step : obj.at("steps")) {
            r.steps.push_back({step.at("name").get<std::string>(), step.value("optional", false)});
        }
        if (obj.contains("metric") && obj.at("metric").is_object()) {
            const auto& m = obj.at("metric");
            r.metric = RubricMetric{m.at("name").get<std::string>(), m.value("smaller_is_better", false)};
        }
        return r;
    };
    if (doc.is_array()) {
        for (const auto& obj : doc) rubrics.push_back(parse_one(obj));
    } else {
        rubrics.push_back(parse_one(doc));
    }
    return rubrics;
}

std::vector<TaskReport> score_results(const std::vector<Rubric>& rubrics, const json& results) {
    std::map<std::string, const json*> by_task;
    if (!results.is_array()) throw Error(ErrorCode::DomainError, "results must be an array");
    for (const auto& r : results) by_task[r.at("task_id").get<std::string>()] = &r;

    std::vector<TaskReport> reports;
    for (const auto& rubric : rubrics) {
        const json* result = by_task.contains(rubric.task_id) ? by_task.at(rubric.task_id) : nullptr;
        std::vector<StepStatus> steps;
        for (const auto& step : rubric.steps) {
            if (step.optional) {
                steps.push_back(StepStatus::Optional);
                continue;
            }
            StepStatus s = StepStatus::Missing;
            if (result != nullptr && result->contains("steps") && result->at("steps").contains(step.name)) {
                s = step_status_from_string(result->at("steps").at(step.name).get<std::string>());
            }
            steps.push_back(s);
        }
        std::optional<MetricSpec> metric;
        if (rubric.metric && result != nullptr && result->contains("metric_value") && !result->at("metric_value").is_null()) {
            metric = MetricSpec{rubric.metric->name, rubric.metric->smaller_is_better,
                                result->at("metric_value").get<double>()};
        }
        reports.push_back(score_task(rubric.task_id, std::move(steps), std::move(metric)));
    }
    return reports;
}

std::string report_csv(const std::vector<TaskReport>& reports) {
    std::string out = "task_id,CR,NPS,CS\n";
    for (const auto& r : reports) {
        out += r.task_id + "," + format_number(r.cr) + "," + (r.nps ? format_number(*r.nps) : "") + "," +
               format_number(r.cs) + "\n";
    }
    if (!reports.empty()) {
        Means m = suite_means(reports);
        out += "mean," + format_number(m.cr) + "," + (m.nps ? format_number(*m.nps) : "") + "," + format_number(m.cs) + "\n";
    }
    return out;
}

json report_json(const std::vector<TaskReport>& reports) {
    json tasks = json::array();
    for (const auto& r : reports) {
        json steps = json::array();
        for (auto s : r.steps) steps.push_back(to_string(s));
        json row{{"task_id", r.task_id}, {"steps", steps}, {"CR", r.cr}, {"NPS", nullptr}, {"CS", r.cs}};
        if (r.nps) row["NPS"] = *r.nps;
        if (r.metric) row["metric"] = {{"name", r.metric->name}, {"smaller_is_better", r.metric->smaller_is_better},
                                       {"value", r.metric->value}};
        tasks.push_back(std::move(row));
    }
    json doc{{"tasks", tasks}, {"mean", nullptr}};
    if (!reports.empty()) {
        Means m = suite_means(reports);
        doc["mean"] = {{"CR", m.cr}, {"NPS", m.nps ? json(*m.nps) : json(nullptr)}, {"CS", m.cs}};
    }
    return doc;
}

ReportFiles emit_report(const std::vector<TaskReport>& reports, const std::filesystem::path& prefix) {
    ReportFiles files{prefix.string() + ".json", prefix.string() + ".csv"};
    if (prefix.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(prefix.parent_path(), ec);
    }
    std::ofstream json_out(files.json);
    json_out << report_json(reports).dump(2) << '\n';
    std::ofstream csv_out(files.csv);
    csv_out << report_csv(reports);
    if (!json_out || !csv_out) throw Error(ErrorCode::IoError, "cannot write report at " + prefix.string());
    return files;
}

}  // namespace taskweave::bench
