#include "taskweave/orchestrator.hpp"

#include <algorithm>
#include <ctime>
#include <fstream>
#include <random>

#include "taskweave/text.hpp"

namespace taskweave {

using nlohmann::json;

namespace {

constexpr std::size_t kEventOutputCap = 4000;

const std::set<std::string, std::less<>> kOneShotToolTypes{"eda", "data preprocessing", "feature engineering",
                                                          "model train", "model evaluate"};

std::string timestamp_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::size_t n = std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    std::snprintf(buf + n, sizeof buf - n, ".%03dZ", static_cast<int>(ms));
    return buf;
}

std::string new_run_id() {
    static std::atomic<unsigned> counter{0};
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%S", &tm);
    std::random_device rd;
    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "%04x%02x", rd() & 0xffffu, counter++ & 0xffu);
    return std::string("run-") + stamp + "-" + suffix;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    out << text;
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

std::string clip(const std::string& text, std::size_t cap) {
    if (text.size() <= cap) return text;
    return text.substr(0, cap);
}

json exception_json(const std::optional<ExceptionInfo>& ex) {
    if (!ex) return nullptr;
    return {{"kind", ex->kind}, {"message", ex->message}};
}

void requeue(TaskNode& node) {
    node.status = TaskStatus::Pending;
    node.result.reset();
    node.code.clear();
    node.is_finished = false;
}

}  // namespace

std::string_view to_string(OnFailure policy) noexcept {
    switch (policy) {
    case OnFailure::Replan: return "replan";
    case OnFailure::HoldForHuman: return "hold_for_human";
    case OnFailure::Abort: return "abort";
    }
    return "replan";
}

OnFailure on_failure_from_string(std::string_view text) {
    for (auto p : {OnFailure::Replan, OnFailure::HoldForHuman, OnFailure::Abort}) {
        if (to_string(p) == text) return p;
    }
    throw Error(ErrorCode::ConfigError, "unknown on_failure policy '" + std::string(text) + "'");
}

std::string_view to_string(RunStatus status) noexcept {
    switch (status) {
    case RunStatus::Running: return "running";
    case RunStatus::Completed: return "completed";
    case RunStatus::Failed: return "failed";
    case RunStatus::Aborted: return "aborted";
    case RunStatus::AwaitingHuman: return "awaiting_human";
    }
    return "running";
}

bool is_terminal(RunStatus status) noexcept {
    return status == RunStatus::Completed || status == RunStatus::Failed || status == RunStatus::Aborted;
}

std::string_view to_string(EventKind kind) noexcept {
    switch (kind) {
    case EventKind::PlanCreated: return "plan_created";
    case EventKind::PlanRefined: return "plan_refined";
    case EventKind::TaskStarted: return "task_started";
    case EventKind::CodeGenerated: return "code_generated";
    case EventKind::Executed: return "executed";
    case EventKind::DebugRetry: return "debug_retry";
    case EventKind::TaskSucceeded: return "task_succeeded";
    case EventKind::TaskFailed: return "task_failed";
    case EventKind::TaskHeld: return "task_held";
    case EventKind::HumanEditApplied: return "human_edit_applied";
    case EventKind::AcvTrial: return "acv_trial";
    case EventKind::AcvDecided: return "acv_decided";
    case EventKind::ExperienceStored: return "experience_stored";
    case EventKind::RunFinished: return "run_finished";
    }
    return "run_finished";
}

EventKind event_kind_from_string(std::string_view text) {
    for (int i = 0; i <= static_cast<int>(EventKind::RunFinished); ++i) {
        auto kind = static_cast<EventKind>(i);
        if (to_string(kind) == text) return kind;
    }
    throw Error(ErrorCode::DomainError, "unknown event kind '" + std::string(text) + "'");
}

json to_json(const RunEvent& event) {
    return {{"seq", event.seq}, {"timestamp", event.timestamp}, {"kind", to_string(event.kind)}, {"payload", event.payload}};
}

RunEvent run_event_from_json(const json& doc) {
    RunEvent e;
    e.seq = doc.at("seq").get<std::uint64_t>();
    e.timestamp = doc.value("timestamp", "");
    e.kind = event_kind_from_string(doc.at("kind").get<std::string>());
    e.payload = doc.value("payload", json::object());
    return e;
}

void validate(const RunConfig& config) {
    if (trim(config.goal).empty()) throw Error(ErrorCode::ConfigError, "goal is empty");
    if (config.acv_n < 1) throw Error(ErrorCode::ConfigError, "acv_n must be at least 1");
    if (config.max_debug_attempts < 0) throw Error(ErrorCode::ConfigError, "max_debug_attempts must be non-negative");
    if (config.max_replans < 0) throw Error(ErrorCode::ConfigError, "max_replans must be non-negative");
    if (!(config.cell_timeout > 0.0)) throw Error(ErrorCode::ConfigError, "cell_timeout must be positive");
    if (!config.llm && config.backend.kind == "cassette" && !std::filesystem::exists(config.backend.cassette)) {
        throw Error(ErrorCode::ConfigError, "cassette not found: " + config.backend.cassette.string());
    }
}

json to_json(const RunConfig& c) {
    json backend = c.backend.kind == "cassette" ? json("cassette:" + c.backend.cassette.string()) : json("http");
    return {{"goal", c.goal},
            {"acv_n", c.acv_n},
            {"max_debug_attempts", c.max_debug_attempts},
            {"max_replans", c.max_replans},
            {"on_failure", to_string(c.on_failure)},
            {"backend", c.llm ? json("injected") : backend},
            {"http",
             {{"base_url", c.backend.http.base_url},
              {"path", c.backend.http.path},
              {"model", c.backend.http.model},
              {"api_key_env", c.backend.http.api_key_env},
              {"max_retries", c.backend.http.max_retries}}},
            {"tool_lib", c.tool_lib.string()},
            {"experience_pool", c.experience_pool.string()},
            {"experience_k", c.experience_k},
            {"tool_k", c.tool_k},
            {"workdir", c.workdir.string()},
            {"runs_dir", c.runs_dir.string()},
            {"interpreter_cmd", c.interpreter_cmd},
            {"cell_timeout", c.cell_timeout},
            {"acv_task_types", c.acv_task_types},
            {"evolve_tools", c.evolve_tools},
            {"run_id", c.run_id}};
}

RunConfig run_config_from_json(const json& doc) {
    if (!doc.is_object()) throw Error(ErrorCode::ConfigError, "run config must be an object");
    RunConfig c;
    try {
        c.goal = doc.value("goal", "");
        c.acv_n = doc.value("acv_n", c.acv_n);
        c.max_debug_attempts = doc.value("max_debug_attempts", c.max_debug_attempts);
        c.max_replans = doc.value("max_replans", c.max_replans);
        if (doc.contains("on_failure")) c.on_failure = on_failure_from_string(doc.at("on_failure").get<std::string>());
        if (doc.contains("backend")) c.backend = parse_backend_spec(doc.at("backend").get<std::string>());
        if (doc.contains("http")) {
            const auto& h = doc.at("http");
            c.backend.http.base_url = h.value("base_url", c.backend.http.base_url);
            c.backend.http.path = h.value("path", c.backend.http.path);
            c.backend.http.model = h.value("model", c.backend.http.model);
            c.backend.http.api_key_env = h.value("api_key_env", c.backend.http.api_key_env);
            c.backend.http.max_retries = h.value("max_retries", c.backend.http.max_retries);
        }
        c.tool_lib = doc.value("tool_lib", "");
        c.experience_pool = doc.value("experience_pool", "");
        c.experience_k = doc.value("experience_k", c.experience_k);
        c.tool_k = doc.value("tool_k", c.tool_k);
        c.workdir = doc.value("workdir", "");
        c.runs_dir = doc.value("runs_dir", c.runs_dir.string());
        if (doc.contains("interpreter_cmd")) {
            const auto& cmd = doc.at("interpreter_cmd");
            c.interpreter_cmd = cmd.is_string() ? split_command_line(cmd.get<std::string>())
                                                : cmd.get<std::vector<std::string>>();
        }
        c.cell_timeout = doc.value("cell_timeout", c.cell_timeout);
        if (doc.contains("acv_task_types")) c.acv_task_types = doc.at("acv_task_types").get<std::set<std::string>>();
        c.evolve_tools = doc.value("evolve_tools", false);
        c.run_id = doc.value("run_id", "");
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigError, e.what());
    }
    return c;
}

class Run::CommandGuard {
public:
    explicit CommandGuard(Run& run) : run_(run) {
        ++run_.pending_commands_;
        lock_ = std::unique_lock(run_.control_);
        --run_.pending_commands_;
    }
    ~CommandGuard() {
        lock_.unlock();
        run_.control_cv_.notify_all();
    }
    CommandGuard(const CommandGuard&) = delete;
    CommandGuard& operator=(const CommandGuard&) = delete;

private:
    Run& run_;
    std::unique_lock<std::mutex> lock_;
};

Run::Run(RunConfig config) : config_(std::move(config)) {
    id_ = config_.run_id.empty() ? new_run_id() : config_.run_id;
    dir_ = config_.runs_dir / id_;
    std::filesystem::create_directories(dir_ / "plans");
    if (config_.workdir.empty()) config_.workdir = dir_ / "work";
    std::filesystem::create_directories(config_.workdir);
    write_file(dir_ / "config.json", to_json(config_).dump(2) + "\n");
    // A rerun of the same id starts a fresh log.
    write_file(dir_ / "events.jsonl", "");
    write_file(dir_ / "transcript.jsonl", "");
}

Run::~Run() { shutdown(); }

std::shared_ptr<Run> Run::create(RunConfig config) {
    validate(config);
    std::shared_ptr<Run> run(new Run(std::move(config)));
    Run& r = *run;
    const RunConfig& c = r.config_;

    std::shared_ptr<LlmBackend> inner = c.llm ? c.llm : make_backend(c.backend);
    r.llm_ = std::make_shared<RecordingBackend>(inner, r.dir_ / "transcript.jsonl");
    r.prompts_ = PromptLibrary::load(data_dir() / "prompts");

    std::filesystem::path tool_dir = c.tool_lib.empty() ? data_dir() / "tools" : c.tool_lib;
    if (!c.tool_lib.empty() || std::filesystem::is_directory(tool_dir)) r.tools_ = ToolLibrary::load(tool_dir);

    std::filesystem::path pool_path = c.experience_pool.empty() ? r.dir_ / "experience.jsonl" : c.experience_pool;
    r.pool_ = std::make_unique<ExperiencePool>(pool_path);

    PlanGraph plan = generate_plan(c.goal, "", *r.llm_, r.prompts_);
    plan.goal = c.goal;
    plan.version = 1;

    SessionConfig sc;
    sc.interpreter_cmd = c.interpreter_cmd.empty() ? default_interpreter_cmd() : c.interpreter_cmd;
    sc.cell_timeout = std::chrono::duration<double>(c.cell_timeout);
    sc.workdir = c.workdir;
    if (r.tools_) sc.import_paths.push_back(r.tools_->dir());
    sc.worker_log = r.dir_ / "worker.log";
    r.session_ = std::make_unique<Session>(sc);

    {
        std::lock_guard lock(r.state_mutex_);
        r.plan_ = plan;
        r.record_plan(plan);
    }
    r.emit(EventKind::PlanCreated, {{"version", plan.version}, {"plan", serialize_plan(plan)}});
    r.persist_record();
    return run;
}

void Run::emit(EventKind kind, json payload) {
    RunEvent event;
    {
        std::lock_guard lock(state_mutex_);
        event.seq = events_.size() + 1;
        event.timestamp = timestamp_now();
        event.kind = kind;
        event.payload = std::move(payload);
        events_.push_back(event);
        std::ofstream out(dir_ / "events.jsonl", std::ios::app);
        out << to_json(event).dump() << '\n';
    }
    state_cv_.notify_all();
}

void Run::record_plan(const PlanGraph& plan) {
    history_.push_back(plan);
    write_file(dir_ / "plans" / ("v" + std::to_string(plan.version) + ".json"), serialize_state(plan).dump(2) + "\n");
}

void Run::update_plan(PlanGraph next) {
    std::lock_guard lock(state_mutex_);
    bool new_version = history_.empty() || next.version > history_.back().version;
    plan_ = std::move(next);
    if (new_version) record_plan(plan_);
}

void Run::set_status_locked(RunStatus status, std::string reason) {
    {
        std::lock_guard lock(state_mutex_);
        status_ = status;
        finish_reason_ = std::move(reason);
    }
    if (is_terminal(status)) emit(EventKind::RunFinished, {{"status", to_string(status)}, {"reason", finish_reason_}});
    state_cv_.notify_all();
    persist_record();
}

void Run::persist_record() {
    json doc = summary();
    json history = json::array();
    for (const auto& p : plan_history()) history.push_back(serialize_state(p));
    doc["plan_history"] = std::move(history);
    doc["reports"] = graph_json().at("acv");
    doc["events_file"] = "events.jsonl";
    write_file(dir_ / "record.json", doc.dump(2) + "\n");
}

RunStatus Run::drive() {
    while (!shutdown_) {
        std::unique_lock lock(control_);
        control_cv_.wait(lock, [&] { return pending_commands_ == 0 || shutdown_; });
        if (shutdown_ || abort_requested_ || status() != RunStatus::Running) break;
        try {
            step();
        } catch (const std::exception& e) {
            set_status_locked(RunStatus::Failed, e.what());
        }
    }
    return status();
}

void Run::serve() {
    while (!shutdown_) {
        drive();
        std::unique_lock lock(state_mutex_);
        state_cv_.wait(lock, [&] { return shutdown_ || status_ == RunStatus::Running || is_terminal(status_); });
        if (is_terminal(status_)) break;
    }
}

void Run::shutdown() {
    shutdown_ = true;
    control_cv_.notify_all();
    state_cv_.notify_all();
}

void Run::step() {
    if (need_replay_ || session_->namespace_lost()) replay_namespace();

    for (const auto& node : plan_.nodes()) {
        if (node.status == TaskStatus::Failure) {
            handle_failure(node.task_id);
            return;
        }
    }
    auto ready = ready_tasks(plan_);
    if (!ready.empty()) {
        step_task(ready.front());
        return;
    }
    const auto& nodes = plan_.nodes();
    if (std::all_of(nodes.begin(), nodes.end(), [](const TaskNode& n) { return n.status == TaskStatus::Success; })) {
        set_status_locked(RunStatus::Completed);
    } else if (std::any_of(nodes.begin(), nodes.end(), [](const TaskNode& n) { return n.status == TaskStatus::Held; })) {
        set_status_locked(RunStatus::AwaitingHuman, "task held for human edit");
    } else {
        set_status_locked(RunStatus::Failed, "no runnable task");
    }
}

ExecutionResult Run::execute_cell(const std::string& task_id, const std::string& code, CellOrigin origin) {
    if (origin != CellOrigin::Replay && (need_replay_ || session_->namespace_lost() || !session_->alive())) {
        replay_namespace();
    }
    const std::string cell_id = "c" + std::to_string(++cell_counter_) + "-" + task_id + "-" + std::string(to_string(origin));
    ExecutionResult result;
    try {
        result = session_->execute({cell_id, code, origin});
    } catch (const CellTimeout& timeout) {
        result = timeout.result();
        if (timeout.namespace_lost()) need_replay_ = true;
    } catch (const Error& e) {
        if (e.code() != ErrorCode::WorkerCrashed && e.code() != ErrorCode::HandshakeTimeout &&
            e.code() != ErrorCode::TransportError) {
            throw;
        }
        result.exception = ExceptionInfo{std::string(to_string(e.code())), e.what(), ""};
        session_->reset();
        need_replay_ = true;
    }
    json payload{{"task_id", task_id},
                 {"cell_id", cell_id},
                 {"origin", to_string(origin)},
                 {"ok", result.ok()},
                 {"exception", exception_json(result.exception)},
                 {"stdout", clip(result.stdout_text, kEventOutputCap)},
                 {"truncated", result.truncated},
                 {"files", result.files}};
    emit(EventKind::Executed, std::move(payload));
    return result;
}

void Run::replay_namespace() {
    need_replay_ = false;
    if (!session_->alive()) session_->reset();
    session_->acknowledge_namespace_loss();
    for (const auto& node : plan_.nodes()) {
        if (node.status != TaskStatus::Success) continue;
        execute_cell(node.task_id, node.code, CellOrigin::Replay);
        if (need_replay_) break;  // lost again mid-replay; retried on the next step
    }
}

std::string Run::finished_code() const {
    std::string out;
    for (const auto& node : plan_.nodes()) {
        if (node.status != TaskStatus::Success || node.code.empty()) continue;
        if (!out.empty()) out += "\n\n";
        out += node.code;
    }
    return out;
}

std::string Run::code_prompt(const TaskNode& node) {
    std::string experience = format_context(pool_->retrieve(node.instruction, config_.experience_k));

    std::string tool_prompt(kEmptyToolContext);
    if (tools_) {
        auto recs = recommend({node.instruction, node.task_type, config_.tool_k}, *tools_);
        if (!recs.empty()) {
            const char* name = kOneShotToolTypes.contains(node.task_type) ? "tool_usage_one_shot" : "tool_usage_zero_shot";
            tool_prompt = render(prompts_.get(name), {{"tool_type_usage_prompt", taxonomy_.usage_hint(node.task_type)},
                                                      {"tool_schemas", render_tool_context(recs)}});
        }
    }
    return render(prompts_.get("code_task"), {{"goal", config_.goal},
                                              {"finished_code", finished_code()},
                                              {"experience", experience},
                                              {"task", node.instruction},
                                              {"task_type", node.task_type},
                                              {"tool_prompt", tool_prompt}});
}

void Run::step_task(const TaskId& id) {
    {
        std::lock_guard lock(state_mutex_);
        set_status(plan_, id, TaskStatus::Running);
    }
    TaskNode node = plan_.at(id);
    if (node.task_type.empty()) {
        node.task_type = classify_task(node.instruction, *llm_, prompts_, taxonomy_);
        std::lock_guard lock(state_mutex_);
        plan_.at(id).task_type = node.task_type;
    }
    emit(EventKind::TaskStarted,
         {{"task_id", id}, {"instruction", node.instruction}, {"task_type", node.task_type}, {"version", plan_.version}});

    std::string prompt;
    std::string code;
    std::string source;
    if (!node.code.empty()) {
        code = node.code;
        source = "provided";
    } else {
        prompt = code_prompt(node);
        code = extract_code(llm_->complete({{Role::User, prompt}}, {}));
        source = "llm";
    }
    emit(EventKind::CodeGenerated, {{"task_id", id}, {"attempt", 0}, {"source", source}, {"code", code}});
    ExecutionResult result = execute_cell(id, code, CellOrigin::Task);

    int attempt = 0;
    while (result.exception && attempt < config_.max_debug_attempts) {
        ++attempt;
        emit(EventKind::DebugRetry, {{"task_id", id}, {"attempt", attempt}, {"error", exception_json(result.exception)}});
        std::string error = result.exception->traceback.empty()
                                ? result.exception->kind + ": " + result.exception->message
                                : result.exception->traceback;
        std::string debug_prompt = render(prompts_.get("debug"), {{"goal", config_.goal},
                                                                  {"finished_code", finished_code()},
                                                                  {"task", node.instruction},
                                                                  {"code", code},
                                                                  {"error", error}});
        code = extract_code(llm_->complete({{Role::User, debug_prompt}}, {}));
        emit(EventKind::CodeGenerated, {{"task_id", id}, {"attempt", attempt}, {"source", "debug"}, {"code", code}});
        result = execute_cell(id, code, CellOrigin::DebugRetry);
    }

    {
        std::lock_guard lock(state_mutex_);
        TaskNode& live = plan_.at(id);
        live.code = code;
        live.result = result;
        set_status(plan_, id, result.ok() ? TaskStatus::Success : TaskStatus::Failure);
        node = live;
    }

    if (!result.ok()) {
        emit(EventKind::TaskFailed, {{"task_id", id}, {"debug_attempts", attempt}, {"error", exception_json(result.exception)}});
        store_experience(node, code, Outcome::Failure, "");
        return;
    }

    emit(EventKind::TaskSucceeded, {{"task_id", id}, {"debug_attempts", attempt}});
    std::string answer = last_nonempty_line(result.stdout_text);
    if (config_.acv_task_types.contains(node.task_type)) {
        run_acv_for(node, prompt);
        std::lock_guard lock(state_mutex_);
        answer = acv_.at(id).chosen;
    }
    store_experience(node, code, Outcome::Success, answer);

    if (config_.evolve_tools && tools_) {
        try {
            EvolutionOptions options;
            options.session = session_->config();
            options.session.import_paths = {tools_->dir()};
            options.max_debug_attempts = config_.max_debug_attempts;
            evolve_tool(node, *llm_, prompts_, *tools_, options);
        } catch (const Error&) {
            // A rejected tool leaves the library unchanged.
        }
    }
}

void Run::run_acv_for(const TaskNode& node, const std::string& prompt) {
    AcvRequest request;
    request.task = node.instruction;
    request.n = config_.acv_n;
    request.first = SolvedAttempt{node.code, *node.result};
    request.cell_prefix = "acv" + std::to_string(++cell_counter_) + "-" + node.task_id;
    request.solve = [this, &node, &prompt](int) {
        std::string p = prompt.empty() ? code_prompt(node) : prompt;
        return extract_code(llm_->complete({{Role::User, p}}, {0.7, 2048}));
    };
    request.on_trial = [this, &node](const Trial& t) {
        emit(EventKind::AcvTrial, {{"task_id", node.task_id},
                                   {"k", t.k},
                                   {"answer", t.answer},
                                   {"result", to_string(t.verdict)},
                                   {"confidence", t.confidence}});
    };
    VerificationReport report = run_acv(request, *session_, *llm_, prompts_);
    {
        std::lock_guard lock(state_mutex_);
        acv_[node.task_id] = report;
    }
    json answers = json::array();
    for (const auto& a : report.answers) answers.push_back({{"answer", a.answer}, {"mean_confidence", a.mean_confidence}, {"count", a.count}});
    emit(EventKind::AcvDecided, {{"task_id", node.task_id},
                                 {"N", report.max_trials},
                                 {"chosen", report.chosen},
                                 {"mean_confidence", report.mean_for(report.chosen)},
                                 {"majority_answer", report.majority_answer},
                                 {"answers", answers}});
}

void Run::store_experience(const TaskNode& node, const std::string& code, Outcome outcome, std::string answer) {
    ExperienceRecord record;
    record.task_description = node.instruction;
    record.final_code = code;
    record.final_answer = std::move(answer);
    record.outcome = outcome;
    std::string exp_id = pool_->store(std::move(record));
    emit(EventKind::ExperienceStored, {{"task_id", node.task_id},
                                       {"experience_id", exp_id},
                                       {"outcome", outcome == Outcome::Success ? "success" : "failure"}});
}

void Run::handle_failure(const TaskId& id) {
    switch (config_.on_failure) {
    case OnFailure::Replan:
        if (replans_used_ >= config_.max_replans) {
            set_status_locked(RunStatus::Failed, "ReplanBudgetExhausted: task " + id + " failed after " +
                                                     std::to_string(replans_used_) + " replan(s)");
            return;
        }
        try {
            replan(id, true);
        } catch (const Error& e) {
            set_status_locked(RunStatus::Failed, e.what());
        }
        return;
    case OnFailure::HoldForHuman: {
        {
            std::lock_guard lock(state_mutex_);
            set_status(plan_, id, TaskStatus::Held);
        }
        emit(EventKind::TaskHeld, {{"task_id", id}});
        set_status_locked(RunStatus::AwaitingHuman, "task " + id + " held for human edit");
        return;
    }
    case OnFailure::Abort:
        set_status_locked(RunStatus::Failed, "task " + id + " failed");
        return;
    }
}

bool Run::replan(const TaskId& focus, bool counts_against_budget) {
    PlanGraph regenerated = generate_plan(config_.goal, replan_context(plan_, focus), *llm_, prompts_, "replan");
    PlanDelta delta;
    PlanGraph merged = merge_plans(plan_, regenerated, delta);
    merged.goal = plan_.goal;
    for (const auto& id : topological_order(merged)) {
        TaskNode& n = merged.at(id);
        if (n.status == TaskStatus::Failure) requeue(n);
    }
    if (counts_against_budget) ++replans_used_;
    update_plan(merged);
    emit(EventKind::PlanRefined, {{"version", merged.version},
                                  {"focus", focus},
                                  {"fork_index", delta.fork_index},
                                  {"kept_ids", delta.kept_ids},
                                  {"replaced_ids", delta.replaced_ids},
                                  {"added_ids", delta.added_ids},
                                  {"plan", serialize_plan(merged)}});
    return true;
}

void Run::edit(std::string_view task_id, std::optional<std::string> instruction, std::optional<std::string> code,
               bool replan_after) {
    CommandGuard guard(*this);
    if (is_terminal(status())) throw Error(ErrorCode::RunNotHeld, "run " + id_ + " is " + std::string(to_string(status())));
    auto before = downstream_of(plan_, task_id);
    PlanGraph next = apply_human_edit(plan_, task_id, instruction, code);
    json reset = json::array();
    for (const auto& d : before) {
        if (plan_.at(d).status == TaskStatus::Success) reset.push_back(d);
    }
    update_plan(next);
    json payload{{"task_id", task_id}, {"version", next.version}, {"reset_ids", reset}};
    payload["instruction"] = instruction ? json(*instruction) : json(nullptr);
    payload["code"] = code ? json(*code) : json(nullptr);
    emit(EventKind::HumanEditApplied, std::move(payload));
    if (replan_after) replan(std::string(task_id), false);
    persist_record();
}

void Run::resume() {
    CommandGuard guard(*this);
    {
        std::lock_guard lock(state_mutex_);
        if (status_ != RunStatus::AwaitingHuman) {
            throw Error(ErrorCode::RunNotHeld, "run " + id_ + " is " + std::string(to_string(status_)));
        }
        for (const auto& id : topological_order(plan_)) {
            TaskNode& n = plan_.at(id);
            if (n.status == TaskStatus::Held) requeue(n);
        }
        status_ = RunStatus::Running;
        finish_reason_.clear();
    }
    state_cv_.notify_all();
    persist_record();
}

void Run::abort() {
    abort_requested_ = true;
    CommandGuard guard(*this);
    if (is_terminal(status())) {
        throw Error(ErrorCode::RunNotHeld, "run " + id_ + " is " + std::string(to_string(status())));
    }
    set_status_locked(RunStatus::Aborted, "aborted on request");
}

RunStatus Run::status() const {
    std::lock_guard lock(state_mutex_);
    return status_;
}

PlanGraph Run::plan() const {
    std::lock_guard lock(state_mutex_);
    return plan_;
}

std::vector<PlanGraph> Run::plan_history() const {
    std::lock_guard lock(state_mutex_);
    return history_;
}

std::vector<RunEvent> Run::events(std::uint64_t since) const {
    std::lock_guard lock(state_mutex_);
    if (since >= events_.size()) return {};
    return {events_.begin() + static_cast<std::ptrdiff_t>(since), events_.end()};
}

std::vector<RunEvent> Run::wait_events(std::uint64_t since, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(state_mutex_);
    state_cv_.wait_for(lock, timeout, [&] { return events_.size() > since || shutdown_ || is_terminal(status_); });
    if (since >= events_.size()) return {};
    return {events_.begin() + static_cast<std::ptrdiff_t>(since), events_.end()};
}

std::uint64_t Run::last_seq() const {
    std::lock_guard lock(state_mutex_);
    return events_.size();
}

std::map<std::string, VerificationReport> Run::acv_reports() const {
    std::lock_guard lock(state_mutex_);
    return acv_;
}

std::size_t Run::llm_calls() const { return llm_ ? llm_->calls() : 0; }

int Run::replans_used() const {
    std::lock_guard lock(state_mutex_);
    return replans_used_;
}

json Run::summary() const {
    std::lock_guard lock(state_mutex_);
    json versions = json::array();
    for (const auto& p : history_) versions.push_back(p.version);
    return {{"run_id", id_},
            {"goal", config_.goal},
            {"status", to_string(status_)},
            {"reason", finish_reason_},
            {"version", plan_.version},
            {"plan_versions", versions},
            {"event_count", events_.size()},
            {"replans_used", replans_used_},
            {"llm_calls", llm_ ? llm_->calls() : 0},
            {"config", to_json(config_)}};
}

json Run::graph_json() const {
    std::lock_guard lock(state_mutex_);
    json doc = serialize_state(plan_);
    json acv = json::object();
    for (const auto& [id, report] : acv_) acv[id] = to_json(report);
    doc["acv"] = std::move(acv);
    doc["status"] = to_string(status_);
    return doc;
}

RunManager::RunManager(std::filesystem::path runs_dir) : runs_dir_(std::move(runs_dir)) {}

RunManager::~RunManager() { shutdown(); }

std::shared_ptr<Run> RunManager::start(RunConfig config) {
    config.runs_dir = runs_dir_;
    auto run = Run::create(std::move(config));
    std::lock_guard lock(mutex_);
    runs_[run->id()] = run;
    threads_.emplace_back([run] { run->serve(); });
    return run;
}

std::shared_ptr<Run> RunManager::get(std::string_view run_id) const {
    std::lock_guard lock(mutex_);
    auto it = runs_.find(run_id);
    if (it == runs_.end()) throw Error(ErrorCode::UnknownRun, "no run '" + std::string(run_id) + "'");
    return it->second;
}

std::vector<std::shared_ptr<Run>> RunManager::list() const {
    std::lock_guard lock(mutex_);
    std::vector<std::shared_ptr<Run>> out;
    for (const auto& [id, run] : runs_) out.push_back(run);
    return out;
}

void RunManager::shutdown() {
    std::vector<std::thread> threads;
    {
        std::lock_guard lock(mutex_);
        for (auto& [id, run] : runs_) run->shutdown();
        threads.swap(threads_);
    }
    for (auto& t : threads) {
        if (t.joinable()) t.join();
    }
}

}  // namespace taskweave
