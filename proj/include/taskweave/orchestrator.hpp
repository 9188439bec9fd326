#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskweave/acv_verifier.hpp"
#include "taskweave/code_executor.hpp"
#include "taskweave/experience_pool.hpp"
#include "taskweave/llm_gateway.hpp"
#include "taskweave/plan_manager.hpp"
#include "taskweave/task_graph.hpp"
#include "taskweave/tool_registry.hpp"

namespace taskweave {

enum class OnFailure { Replan, HoldForHuman, Abort };
std::string_view to_string(OnFailure policy) noexcept;
OnFailure on_failure_from_string(std::string_view text);

enum class RunStatus { Running, Completed, Failed, Aborted, AwaitingHuman };
std::string_view to_string(RunStatus status) noexcept;
bool is_terminal(RunStatus status) noexcept;

enum class EventKind {
    PlanCreated,
    PlanRefined,
    TaskStarted,
    CodeGenerated,
    Executed,
    DebugRetry,
    TaskSucceeded,
    TaskFailed,
    TaskHeld,
    HumanEditApplied,
    AcvTrial,
    AcvDecided,
    ExperienceStored,
    RunFinished,
};
std::string_view to_string(EventKind kind) noexcept;
EventKind event_kind_from_string(std::string_view text);

struct RunEvent {
    std::uint64_t seq = 0;
    std::string timestamp;
    EventKind kind = EventKind::RunFinished;
    nlohmann::json payload = nlohmann::json::object();
};

nlohmann::json to_json(const RunEvent& event);
RunEvent run_event_from_json(const nlohmann::json& doc);

struct RunConfig {
    std::string goal;
    int acv_n = 1;
    int max_debug_attempts = 3;
    int max_replans = 2;
    OnFailure on_failure = OnFailure::Replan;
    BackendSpec backend;
    /// Takes precedence over `backend` when set; not serialized.
    std::shared_ptr<LlmBackend> llm;
    /// Empty: the bundled reference library.
    std::filesystem::path tool_lib;
    /// Empty: a pool private to the run directory.
    std::filesystem::path experience_pool;
    std::size_t experience_k = kDefaultExperienceK;
    std::size_t tool_k = 3;
    /// Empty: `<run dir>/work`.
    std::filesystem::path workdir;
    std::filesystem::path runs_dir = "runs";
    std::vector<std::string> interpreter_cmd;
    double cell_timeout = 300.0;
    std::set<std::string> acv_task_types{"solve", "evaluate"};
    bool evolve_tools = false;
    /// Empty: generated.
    std::string run_id;
};

/// Throws ConfigError on out-of-range values.
void validate(const RunConfig& config);
nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& doc);

/// One goal being worked: plan, session, event log and on-disk record under
/// `<runs_dir>/<run_id>/`. Exactly one thread drives the loop at a time;
/// commands from other threads are applied between task steps.
class Run {
public:
    /// Opens the backend, tool library and pool and generates the first plan.
    static std::shared_ptr<Run> create(RunConfig config);
    ~Run();
    Run(const Run&) = delete;
    Run& operator=(const Run&) = delete;

    /// Steps ready tasks until the run stops being Running.
    RunStatus drive();
    /// drive(), then wait for resume, repeat until terminal or shutdown().
    void serve();
    void shutdown();

    /// Human edit of a task. Throws RunNotHeld on a finished run, UnknownTask,
    /// or IllegalTransition when the node is Running or Success.
    void edit(std::string_view task_id, std::optional<std::string> instruction, std::optional<std::string> code,
              bool replan = false);
    /// awaiting_human -> running. Throws RunNotHeld otherwise.
    void resume();
    /// Throws RunNotHeld when already finished.
    void abort();

    const std::string& id() const noexcept { return id_; }
    const RunConfig& config() const noexcept { return config_; }
    const std::filesystem::path& dir() const noexcept { return dir_; }
    RunStatus status() const;
    PlanGraph plan() const;
    std::vector<PlanGraph> plan_history() const;
    std::vector<RunEvent> events(std::uint64_t since = 0) const;
    /// Blocks until an event with seq > since exists, the run finishes, or timeout.
    std::vector<RunEvent> wait_events(std::uint64_t since, std::chrono::milliseconds timeout) const;
    std::uint64_t last_seq() const;
    std::map<std::string, VerificationReport> acv_reports() const;
    std::size_t llm_calls() const;
    int replans_used() const;

    nlohmann::json summary() const;
    /// Graph-with-state plus per-task verification reports.
    nlohmann::json graph_json() const;

private:
    explicit Run(RunConfig config);

    void emit(EventKind kind, nlohmann::json payload);
    void set_status_locked(RunStatus status, std::string reason = {});
    void record_plan(const PlanGraph& plan);
    void persist_record();

    void step();
    void step_task(const TaskId& id);
    void handle_failure(const TaskId& id);
    bool replan(const TaskId& focus, bool counts_against_budget);
    void replay_namespace();
    void run_acv_for(const TaskNode& node, const std::string& prompt);
    ExecutionResult execute_cell(const std::string& task_id, const std::string& code, CellOrigin origin);
    std::string code_prompt(const TaskNode& node);
    std::string finished_code() const;
    void store_experience(const TaskNode& node, const std::string& code, Outcome outcome, std::string answer);
    void update_plan(PlanGraph next);

    class CommandGuard;

    RunConfig config_;
    std::string id_;
    std::filesystem::path dir_;

    std::shared_ptr<RecordingBackend> llm_;
    PromptLibrary prompts_;
    std::optional<ToolLibrary> tools_;
    std::unique_ptr<ExperiencePool> pool_;
    std::unique_ptr<Session> session_;
    TaskTaxonomy taxonomy_ = TaskTaxonomy::defaults();

    // Writer side: held by the loop for one step, or by one command.
    std::mutex control_;
    std::condition_variable control_cv_;
    std::atomic<int> pending_commands_{0};
    std::atomic<bool> abort_requested_{false};
    std::atomic<bool> shutdown_{false};

    // Snapshot side: short critical sections only.
    mutable std::mutex state_mutex_;
    mutable std::condition_variable state_cv_;
    PlanGraph plan_;
    std::vector<PlanGraph> history_;
    std::vector<RunEvent> events_;
    RunStatus status_ = RunStatus::Running;
    std::string finish_reason_;
    std::map<std::string, VerificationReport> acv_;
    int replans_used_ = 0;

    std::uint64_t cell_counter_ = 0;
    bool need_replay_ = false;
};

/// Registry of runs owned by one process, each driven on its own thread.
class RunManager {
public:
    explicit RunManager(std::filesystem::path runs_dir = "runs");
    ~RunManager();
    RunManager(const RunManager&) = delete;
    RunManager& operator=(const RunManager&) = delete;

    /// Creates the run (plan generation happens here) and starts its loop.
    std::shared_ptr<Run> start(RunConfig config);
    /// Throws UnknownRun.
    std::shared_ptr<Run> get(std::string_view run_id) const;
    std::vector<std::shared_ptr<Run>> list() const;
    const std::filesystem::path& runs_dir() const noexcept { return runs_dir_; }
    void shutdown();

private:
    std::filesystem::path runs_dir_;
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<Run>, std::less<>> runs_;
    std::vector<std::thread> threads_;
};

}  // namespace taskweave
