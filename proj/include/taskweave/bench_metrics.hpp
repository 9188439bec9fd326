#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskweave/error.hpp"

namespace taskweave::bench {

/// Missing and Fail score 0, SuccessNonCompliant 1, SuccessCompliant 2;
/// Optional steps are left out of the completion rate entirely.
enum class StepStatus { Missing, Fail, SuccessNonCompliant, SuccessCompliant, Optional };

inline constexpr int kMaxStepScore = 2;
inline constexpr int kMinStepScore = 0;

std::optional<int> step_score(StepStatus status) noexcept;
StepStatus step_status_from_string(std::string_view text);
std::string_view to_string(StepStatus status) noexcept;

struct MetricSpec {
    std::string name;
    bool smaller_is_better = false;
    double value = 0.0;
};

/// Sum of step scores over (s_max * scored step count).
double completion_rate(std::span<const StepStatus> steps);
/// 1/(1+s) for smaller-is-better metrics, s itself otherwise.
double normalized_performance(const MetricSpec& metric);
/// 0.5*CR + 0.5*NPS, or CR alone when the task has no metric.
double comprehensive_score(double completion, std::optional<double> performance);

struct TaskReport {
    std::string task_id;
    std::vector<StepStatus> steps;
    std::optional<MetricSpec> metric;
    double cr = 0.0;
    std::optional<double> nps;
    double cs = 0.0;
};

TaskReport score_task(std::string task_id, std::vector<StepStatus> steps, std::optional<MetricSpec> metric);

struct RubricStep {
    std::string name;
    bool optional = false;
};

struct RubricMetric {
    std::string name;
    bool smaller_is_better = false;
};

struct Rubric {
    std::string task_id;
    std::vector<RubricStep> steps;
    std::optional<RubricMetric> metric;
};

/// A rubric file holds one rubric object or an array of them.
std::vector<Rubric> parse_rubrics(const nlohmann::json& doc);

/// Results: [{task_id, steps: {name: status}, metric_value?}]. Steps absent
/// from a result count as missing; rubric-optional steps are always excluded.
std::vector<TaskReport> score_results(const std::vector<Rubric>& rubrics, const nlohmann::json& results);

struct ReportFiles {
    std::filesystem::path json;
    std::filesystem::path csv;
};

/// Writes `<prefix>.json` and `<prefix>.csv`: one row per task plus a mean
/// row (omitted when there are no tasks).
ReportFiles emit_report(const std::vector<TaskReport>& reports, const std::filesystem::path& prefix);
std::string report_csv(const std::vector<TaskReport>& reports);
nlohmann::json report_json(const std::vector<TaskReport>& reports);

}  // namespace taskweave::bench
