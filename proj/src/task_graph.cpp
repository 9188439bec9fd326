#include "taskweave/task_graph.hpp"

#include <algorithm>
#include <functional>
#include <queue>
#include <unordered_set>

namespace taskweave {

using nlohmann::json;

namespace {

const std::unordered_set<std::string>& known_plan_fields() {
    static const std::unordered_set<std::string> fields{"task_id", "dependent_task_ids", "instruction",
                                                        "task_type"};
    return fields;
}

const std::unordered_set<std::string>& known_state_fields() {
    static const std::unordered_set<std::string> fields{"task_id", "dependent_task_ids", "instruction", "task_type",
                                                        "status",  "code",               "result",      "is_finished"};
    return fields;
}

// The planner sometimes emits ids as numbers; they are opaque strings here.
std::string id_from_json(const json& value, std::string_view what) {
    if (value.is_string()) return value.get<std::string>();
    if (value.is_number_integer()) return std::to_string(value.get<long long>());
    throw Error(ErrorCode::MalformedPlan, std::string(what) + " must be a string");
}

TaskNode node_from_json(const json& obj, const std::unordered_set<std::string>& known) {
    if (!obj.is_object()) throw Error(ErrorCode::MalformedPlan, "plan entries must be objects");
    for (const char* field : {"task_id", "dependent_task_ids", "instruction"}) {
        if (!obj.contains(field)) throw Error(ErrorCode::MalformedPlan, std::string("missing field '") + field + "'");
    }
    TaskNode node;
    node.task_id = id_from_json(obj.at("task_id"), "task_id");
    if (node.task_id.empty()) throw Error(ErrorCode::MalformedPlan, "task_id must be non-empty");
    const auto& deps = obj.at("dependent_task_ids");
    if (!deps.is_array()) throw Error(ErrorCode::MalformedPlan, "dependent_task_ids must be an array");
    for (const auto& dep : deps) node.dependent_task_ids.push_back(id_from_json(dep, "dependent_task_ids entry"));
    if (!obj.at("instruction").is_string()) throw Error(ErrorCode::MalformedPlan, "instruction must be a string");
    node.instruction = obj.at("instruction").get<std::string>();
    if (obj.contains("task_type") && !obj.at("task_type").is_null()) {
        if (!obj.at("task_type").is_string()) throw Error(ErrorCode::MalformedPlan, "task_type must be a string");
        node.task_type = obj.at("task_type").get<std::string>();
    }
    for (const auto& [key, value] : obj.items()) {
        if (!known.contains(key)) node.extra[key] = value;
    }
    return node;
}

json node_to_plan_json(const TaskNode& node) {
    json obj = json::object();
    obj["task_id"] = node.task_id;
    obj["dependent_task_ids"] = node.dependent_task_ids;
    obj["instruction"] = node.instruction;
    if (!node.task_type.empty()) obj["task_type"] = node.task_type;
    for (const auto& [key, value] : node.extra.items()) obj[key] = value;
    return obj;
}

// Reorders nodes into stable topological order and rebuilds the graph.
PlanGraph assemble(std::vector<TaskNode> nodes) {
    PlanGraph probe;
    for (auto& node : nodes) {
        if (probe.contains(node.task_id)) throw Error(ErrorCode::MalformedPlan, "duplicate task_id '" + node.task_id + "'");
        probe.add(node);
    }
    probe.validate();
    PlanGraph plan;
    for (std::size_t idx : stable_topological_indices(nodes)) plan.add(std::move(nodes[idx]));
    return plan;
}

}  // namespace

std::string_view to_string(TaskStatus status) noexcept {
    switch (status) {
    case TaskStatus::Pending: return "Pending";
    case TaskStatus::Running: return "Running";
    case TaskStatus::Success: return "Success";
    case TaskStatus::Failure: return "Failure";
    case TaskStatus::Held: return "Held";
    }
    return "Pending";
}

TaskStatus task_status_from_string(std::string_view text) {
    for (auto s : {TaskStatus::Pending, TaskStatus::Running, TaskStatus::Success, TaskStatus::Failure, TaskStatus::Held}) {
        if (to_string(s) == text) return s;
    }
    throw Error(ErrorCode::MalformedPlan, "unknown task status '" + std::string(text) + "'");
}

bool is_legal_transition(TaskStatus from, TaskStatus to) noexcept {
    using S = TaskStatus;
    switch (from) {
    case S::Pending: return to == S::Running;
    case S::Running: return to == S::Success || to == S::Failure;
    case S::Failure: return to == S::Running || to == S::Held;
    case S::Held: return to == S::Running;
    case S::Success: return false;
    }
    return false;
}

bool PlanGraph::contains(std::string_view id) const { return index_.contains(std::string(id)); }

const TaskNode* PlanGraph::find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &nodes_[it->second];
}

const TaskNode& PlanGraph::at(std::string_view id) const {
    const TaskNode* node = find(id);
    if (node == nullptr) throw Error(ErrorCode::UnknownTask, "no task '" + std::string(id) + "'");
    return *node;
}

TaskNode& PlanGraph::at(std::string_view id) {
    return const_cast<TaskNode&>(static_cast<const PlanGraph&>(*this).at(id));
}

void PlanGraph::add(TaskNode node) {
    if (node.task_id.empty()) throw Error(ErrorCode::MalformedPlan, "task_id must be non-empty");
    if (contains(node.task_id)) throw Error(ErrorCode::MalformedPlan, "duplicate task_id '" + node.task_id + "'");
    index_.emplace(node.task_id, nodes_.size());
    nodes_.push_back(std::move(node));
}

void PlanGraph::validate() const {
    for (const auto& node : nodes_) {
        for (const auto& dep : node.dependent_task_ids) {
            if (!contains(dep)) {
                throw Error(ErrorCode::DanglingDependency,
                            "task '" + node.task_id + "' depends on missing task '" + dep + "'");
            }
        }
    }
    if (stable_topological_indices(nodes_).size() != nodes_.size()) {
        throw Error(ErrorCode::CyclicPlan, "dependency cycle detected");
    }
}

std::vector<std::size_t> stable_topological_indices(const std::vector<TaskNode>& nodes) {
    std::unordered_map<std::string_view, std::size_t> position;
    for (std::size_t i = 0; i < nodes.size(); ++i) position.emplace(nodes[i].task_id, i);

    std::vector<std::size_t> pending(nodes.size(), 0);
    std::vector<std::vector<std::size_t>> dependents(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        // Repeated ids in one dependency list count once.
        std::unordered_set<std::size_t> seen;
        for (const auto& dep : nodes[i].dependent_task_ids) {
            auto it = position.find(dep);
            if (it == position.end() || !seen.insert(it->second).second) continue;
            ++pending[i];
            dependents[it->second].push_back(i);
        }
    }

    std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (pending[i] == 0) ready.push(i);
    }
    std::vector<std::size_t> order;
    order.reserve(nodes.size());
    while (!ready.empty()) {
        std::size_t current = ready.top();
        ready.pop();
        order.push_back(current);
        for (std::size_t next : dependents[current]) {
            if (--pending[next] == 0) ready.push(next);
        }
    }
    return order;  // shorter than nodes.size() iff there is a cycle
}

std::vector<TaskId> topological_order(const PlanGraph& plan) {
    auto indices = stable_topological_indices(plan.nodes());
    if (indices.size() != plan.size()) throw Error(ErrorCode::CyclicPlan, "dependency cycle detected");
    std::vector<TaskId> ids;
    ids.reserve(indices.size());
    for (std::size_t idx : indices) ids.push_back(plan.nodes()[idx].task_id);
    return ids;
}

std::vector<TaskId> ready_tasks(const PlanGraph& plan) {
    std::vector<TaskId> ready;
    for (std::size_t idx : stable_topological_indices(plan.nodes())) {
        const auto& node = plan.nodes()[idx];
        if (node.status != TaskStatus::Pending) continue;
        bool deps_done = std::all_of(node.dependent_task_ids.begin(), node.dependent_task_ids.end(),
                                     [&](const TaskId& dep) {
                                         const TaskNode* d = plan.find(dep);
                                         return d != nullptr && d->status == TaskStatus::Success;
                                     });
        if (deps_done) ready.push_back(node.task_id);
    }
    return ready;
}

void set_status(PlanGraph& plan, std::string_view id, TaskStatus status) {
    TaskNode& node = plan.at(id);
    if (!is_legal_transition(node.status, status)) {
        throw Error(ErrorCode::IllegalTransition, "task '" + node.task_id + "': " + std::string(to_string(node.status)) +
                                                      " -> " + std::string(to_string(status)));
    }
    if (status == TaskStatus::Success && (node.code.empty() || !node.result)) {
        throw Error(ErrorCode::IllegalTransition, "task '" + node.task_id + "' cannot succeed without code and result");
    }
    node.status = status;
    node.is_finished = status == TaskStatus::Success;
}

PlanGraph plan_from_json(const json& array) {
    if (!array.is_array()) throw Error(ErrorCode::MalformedPlan, "plan must be a JSON array");
    std::vector<TaskNode> nodes;
    nodes.reserve(array.size());
    for (const auto& entry : array) nodes.push_back(node_from_json(entry, known_plan_fields()));
    PlanGraph plan = assemble(std::move(nodes));
    plan.version = 1;
    return plan;
}

PlanGraph parse_plan(std::string_view json_text) {
    json doc = json::parse(json_text, nullptr, /*allow_exceptions=*/false);
    if (doc.is_discarded()) throw Error(ErrorCode::MalformedPlan, "plan is not valid JSON");
    return plan_from_json(doc);
}

json serialize_plan(const PlanGraph& plan) {
    json array = json::array();
    for (const auto& node : plan.nodes()) array.push_back(node_to_plan_json(node));
    return array;
}

json to_json(const ExecutionResult& result) {
    json obj{{"stdout", result.stdout_text},
             {"stderr", result.stderr_text},
             {"exception", nullptr},
             {"wall_time", result.wall_time},
             {"truncated", result.truncated},
             {"files", result.files}};
    if (result.exception) {
        obj["exception"] = {{"kind", result.exception->kind},
                            {"message", result.exception->message},
                            {"traceback", result.exception->traceback}};
    }
    return obj;
}

ExecutionResult execution_result_from_json(const json& doc) {
    ExecutionResult result;
    result.stdout_text = doc.value("stdout", "");
    result.stderr_text = doc.value("stderr", "");
    result.wall_time = doc.value("wall_time", 0.0);
    result.truncated = doc.value("truncated", false);
    if (doc.contains("files")) result.files = doc.at("files").get<std::vector<std::string>>();
    if (doc.contains("exception") && doc.at("exception").is_object()) {
        const auto& ex = doc.at("exception");
        result.exception = ExceptionInfo{ex.value("kind", ""), ex.value("message", ""), ex.value("traceback", "")};
    }
    return result;
}

json serialize_state(const PlanGraph& plan) {
    json tasks = json::array();
    for (const auto& node : plan.nodes()) {
        json obj = node_to_plan_json(node);
        obj["task_type"] = node.task_type;
        obj["status"] = std::string(to_string(node.status));
        obj["code"] = node.code;
        obj["result"] = node.result ? to_json(*node.result) : json(nullptr);
        obj["is_finished"] = node.is_finished;
        tasks.push_back(std::move(obj));
    }
    return json{{"goal", plan.goal}, {"version", plan.version}, {"tasks", std::move(tasks)}};
}

PlanGraph deserialize_state(const json& doc) {
    if (!doc.is_object() || !doc.contains("tasks")) throw Error(ErrorCode::MalformedPlan, "state document needs 'tasks'");
    std::vector<TaskNode> nodes;
    for (const auto& entry : doc.at("tasks")) {
        TaskNode node = node_from_json(entry, known_state_fields());
        node.status = task_status_from_string(entry.value("status", "Pending"));
        node.code = entry.value("code", "");
        node.is_finished = entry.value("is_finished", false);
        if (entry.contains("result") && entry.at("result").is_object()) {
            node.result = execution_result_from_json(entry.at("result"));
        }
        nodes.push_back(std::move(node));
    }
    PlanGraph plan = assemble(std::move(nodes));
    plan.goal = doc.value("goal", "");
    plan.version = doc.value("version", std::uint64_t{1});
    return plan;
}

}  // namespace taskweave
