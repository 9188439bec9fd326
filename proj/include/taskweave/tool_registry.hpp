#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskweave/code_executor.hpp"
#include "taskweave/llm_gateway.hpp"
#include "taskweave/task_graph.hpp"

namespace taskweave {

enum class ToolKind { Class, Function };

struct ToolParameter {
    std::string name;
    std::string type;
    std::string description;
    bool operator==(const ToolParameter&) const = default;
};

struct ToolReturn {
    std::string type;
    std::string description;
    bool operator==(const ToolReturn&) const = default;
};

struct ToolMethod {
    std::string name;
    std::string description;
    std::vector<ToolParameter> parameters;
    std::vector<std::string> required;
    std::optional<std::vector<ToolReturn>> returns;
    bool operator==(const ToolMethod&) const = default;
};

/// A tool schema document. For class tools `methods` lists the methods in
/// file order; a function tool has exactly one entry describing the call.
struct ToolSchema {
    ToolKind kind = ToolKind::Class;
    std::string description;
    std::vector<ToolMethod> methods;
    std::vector<std::string> tags;
    /// Importable symbol when it differs from the file name (set on renames).
    std::optional<std::string> symbol;
    /// Top-level keys not interpreted here.
    nlohmann::ordered_json extra = nlohmann::ordered_json::object();
    bool operator==(const ToolSchema&) const = default;
};

/// Throws DomainError with a reason when the document is not a valid schema.
ToolSchema parse_tool_schema(std::string_view yaml_text, std::string_view tool_name);
std::string write_tool_schema(const ToolSchema& schema, std::string_view tool_name);
/// Same document as JSON, which is how schemas are shown to the code writer.
nlohmann::ordered_json tool_schema_json(const ToolSchema& schema, std::string_view tool_name);

struct ToolRecord {
    std::string name;
    std::string module_path;
    std::string symbol;
    ToolSchema schema;
    std::vector<std::string> task_tags;
    std::filesystem::path source_file;
};

/// `<lib>/<name>.<ext>` sources with `<lib>/schemas/<name>.yml` documents.
class ToolLibrary {
public:
    /// Throws LibraryMissing when `dir` does not exist. Bad schema files are
    /// skipped and reported through diagnostics().
    static ToolLibrary load(const std::filesystem::path& dir);

    const std::filesystem::path& dir() const noexcept { return dir_; }
    const std::vector<ToolRecord>& records() const noexcept { return records_; }
    const std::vector<std::string>& diagnostics() const noexcept { return diagnostics_; }
    const ToolRecord* find(std::string_view name) const;

    /// Writes source + schema under the library lock and registers the tool.
    /// A taken name is suffixed _v2, _v3, ...
    ToolRecord add(std::string name, std::string_view source, ToolSchema schema, std::string_view extension = ".py");

private:
    std::filesystem::path dir_;
    std::vector<ToolRecord> records_;
    std::vector<std::string> diagnostics_;
};

std::vector<ToolRecord> load_library(const std::filesystem::path& dir);

struct TaskTaxonomy {
    std::vector<std::string> labels;
    /// Per-type guidance spliced into the code prompt.
    std::map<std::string, std::string, std::less<>> usage_hints;

    static TaskTaxonomy defaults();
    bool contains(std::string_view label) const;
    std::string usage_hint(std::string_view label) const;
};

inline constexpr std::string_view kGeneralTaskType = "general";

std::string classify_task(std::string_view instruction, LlmBackend& llm, const PromptLibrary& prompts,
                          const TaskTaxonomy& taxonomy = TaskTaxonomy::defaults());

struct RecommendationQuery {
    std::string task_instruction;
    std::string task_type;
    std::size_t k = 5;
};

/// Overlap of the instruction's and description's token sets.
std::size_t lexical_score(std::string_view instruction, const ToolRecord& record);

/// Tag-filtered candidates, ranked by the LLM when one is given (falling back
/// on an unusable reply) or else by lexical_score with ties broken by name.
std::vector<ToolRecord> recommend(const RecommendationQuery& query, const ToolLibrary& library,
                                  LlmBackend* llm = nullptr, const PromptLibrary* prompts = nullptr);

inline constexpr std::string_view kEmptyToolContext = "(can be empty) No pre-defined tools match this task.";

std::string render_tool_context(const std::vector<ToolRecord>& records);

struct EvolutionOptions {
    SessionConfig session;  // template for the isolated test sessions
    int max_debug_attempts = 3;
};

/// Distills a successful task's code into a library tool. The generated unit
/// test has to pass in a fresh session before anything is registered.
ToolRecord evolve_tool(const TaskNode& task, LlmBackend& llm, const PromptLibrary& prompts, ToolLibrary& library,
                       const EvolutionOptions& options);

}  // namespace taskweave
