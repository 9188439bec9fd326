#include "taskweave/tool_registry.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <yaml-cpp/yaml.h>

#include "taskweave/text.hpp"

namespace taskweave {

using ojson = nlohmann::ordered_json;

namespace {

[[noreturn]] void invalid(const std::string& why) { throw Error(ErrorCode::DomainError, why); }

std::string scalar(const YAML::Node& node, const char* key) {
    const YAML::Node value = node[key];
    if (!value) return {};
    if (!value.IsScalar()) invalid(std::string("'") + key + "' must be a scalar");
    return value.as<std::string>();
}

ojson yaml_to_json(const YAML::Node& node) {
    switch (node.Type()) {
    case YAML::NodeType::Scalar: return node.as<std::string>();
    case YAML::NodeType::Sequence: {
        ojson arr = ojson::array();
        for (const auto& item : node) arr.push_back(yaml_to_json(item));
        return arr;
    }
    case YAML::NodeType::Map: {
        ojson obj = ojson::object();
        for (const auto& kv : node) obj[kv.first.as<std::string>()] = yaml_to_json(kv.second);
        return obj;
    }
    default: return nullptr;
    }
}

void emit_json(YAML::Emitter& out, const ojson& value) {
    if (value.is_object()) {
        out << YAML::BeginMap;
        for (const auto& [k, v] : value.items()) {
            out << YAML::Key << k << YAML::Value;
            emit_json(out, v);
        }
        out << YAML::EndMap;
    } else if (value.is_array()) {
        if (value.empty()) {
            out << YAML::Flow << YAML::BeginSeq << YAML::EndSeq;
            return;
        }
        out << YAML::BeginSeq;
        for (const auto& v : value) emit_json(out, v);
        out << YAML::EndSeq;
    } else if (value.is_string()) {
        out << value.get<std::string>();
    } else if (value.is_null()) {
        out << YAML::Null;
    } else {
        out << value.dump();
    }
}

ToolMethod parse_callable(const YAML::Node& node, std::string name) {
    ToolMethod method;
    method.name = std::move(name);
    method.description = scalar(node, "description");
    if (trim(method.description).empty()) invalid("method '" + method.name + "' has no description");
    if (const YAML::Node params = node["parameters"]) {
        if (const YAML::Node props = params["properties"]) {
            if (!props.IsMap()) invalid("parameters.properties of '" + method.name + "' must be a mapping");
            for (const auto& kv : props) {
                method.parameters.push_back(
                    {kv.first.as<std::string>(), scalar(kv.second, "type"), scalar(kv.second, "description")});
            }
        }
        if (const YAML::Node req = params["required"]) {
            if (!req.IsSequence()) invalid("parameters.required of '" + method.name + "' must be a list");
            for (const auto& r : req) method.required.push_back(r.as<std::string>());
        }
    }
    for (const auto& r : method.required) {
        bool known = std::any_of(method.parameters.begin(), method.parameters.end(),
                                 [&](const ToolParameter& p) { return p.name == r; });
        if (!known) invalid("method '" + method.name + "' requires unknown parameter '" + r + "'");
    }
    if (const YAML::Node ret = node["returns"]) {
        if (!ret.IsSequence()) invalid("returns of '" + method.name + "' must be a list");
        std::vector<ToolReturn> returns;
        for (const auto& r : ret) returns.push_back({scalar(r, "type"), scalar(r, "description")});
        method.returns = std::move(returns);
    }
    return method;
}

ojson callable_json(const ToolMethod& method) {
    ojson obj = ojson::object();
    obj["type"] = "function";
    obj["description"] = method.description;
    if (!method.parameters.empty() || !method.required.empty()) {
        ojson props = ojson::object();
        for (const auto& p : method.parameters) props[p.name] = ojson{{"type", p.type}, {"description", p.description}};
        obj["parameters"] = ojson{{"properties", props}, {"required", method.required}};
    }
    if (method.returns) {
        ojson ret = ojson::array();
        for (const auto& r : *method.returns) ret.push_back(ojson{{"type", r.type}, {"description", r.description}});
        obj["returns"] = ret;
    }
    return obj;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

std::optional<std::filesystem::path> find_source(const std::filesystem::path& dir, const std::string& name) {
    std::optional<std::filesystem::path> found;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().stem() != name) continue;
        if (entry.path().extension() == ".py") return entry.path();
        if (!found) found = entry.path();
    }
    return found;
}

ToolRecord make_record(std::string name, ToolSchema schema, std::filesystem::path source) {
    ToolRecord record;
    record.name = name;
    record.module_path = name;
    record.symbol = schema.symbol.value_or(name);
    record.task_tags = schema.tags;
    record.schema = std::move(schema);
    record.source_file = std::move(source);
    return record;
}

class LibraryLock {
public:
    explicit LibraryLock(const std::filesystem::path& dir) {
        fd_ = ::open((dir / ".lock").c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
        if (fd_ < 0) throw Error(ErrorCode::IoError, "cannot open library lock in " + dir.string());
        flock(fd_, LOCK_EX);
    }
    ~LibraryLock() {
        flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    LibraryLock(const LibraryLock&) = delete;
    LibraryLock& operator=(const LibraryLock&) = delete;

private:
    int fd_ = -1;
};

std::string clean_label(std::string_view reply) {
    std::string first = split_lines(trim(reply)).front();
    std::string_view t = trim(first);
    while (!t.empty() && (t.front() == '"' || t.front() == '\'' || t.front() == '`')) t.remove_prefix(1);
    while (!t.empty() && (t.back() == '"' || t.back() == '\'' || t.back() == '`' || t.back() == '.')) t.remove_suffix(1);
    return normalize_whitespace(to_lower(t));
}

std::filesystem::path scratch_dir(std::string_view tag) {
    static std::atomic<unsigned> counter{0};
    auto dir = std::filesystem::temp_directory_path() /
               ("taskweave-" + std::string(tag) + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(dir);
    return dir;
}

const FencedBlock* block_tagged(const std::vector<FencedBlock>& blocks, std::string_view tag) {
    for (const auto& b : blocks) {
        if (b.info.find(tag) != std::string::npos) return &b;
    }
    return nullptr;
}

std::optional<std::string> defined_symbol(const std::string& source) {
    static const std::regex def(R"(^(?:class|def)\s+([A-Za-z_][A-Za-z0-9_]*))", std::regex::multiline);
    std::smatch m;
    if (std::regex_search(source, m, def)) return m[1].str();
    return std::nullopt;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schema documents

ToolSchema parse_tool_schema(std::string_view yaml_text, std::string_view tool_name) {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(yaml_text));
    } catch (const YAML::Exception& e) {
        invalid(std::string("YAML error: ") + e.what());
    }
    if (!root.IsMap()) invalid("schema document must be a mapping");

    ToolSchema schema;
    const std::string type = scalar(root, "type");
    if (type == "class") {
        schema.kind = ToolKind::Class;
    } else if (type == "function") {
        schema.kind = ToolKind::Function;
    } else {
        invalid("type must be 'class' or 'function', got '" + type + "'");
    }
    schema.description = scalar(root, "description");
    if (trim(schema.description).empty()) invalid("schema has no description");

    if (schema.kind == ToolKind::Class) {
        const YAML::Node methods = root["methods"];
        if (methods) {
            if (!methods.IsMap()) invalid("methods must be a mapping");
            for (const auto& kv : methods) schema.methods.push_back(parse_callable(kv.second, kv.first.as<std::string>()));
        }
    } else {
        schema.methods.push_back(parse_callable(root, std::string(tool_name)));
    }

    if (const YAML::Node tags = root["tags"]) {
        if (!tags.IsSequence()) invalid("tags must be a list");
        for (const auto& t : tags) schema.tags.push_back(t.as<std::string>());
    }
    if (root["symbol"]) schema.symbol = scalar(root, "symbol");

    static const std::set<std::string> known{"type", "description", "methods", "parameters", "returns", "tags", "symbol"};
    for (const auto& kv : root) {
        std::string key = kv.first.as<std::string>();
        if (!known.contains(key)) schema.extra[key] = yaml_to_json(kv.second);
    }
    return schema;
}

ojson tool_schema_json(const ToolSchema& schema, std::string_view tool_name) {
    ojson doc = ojson::object();
    if (schema.kind == ToolKind::Class) {
        doc["type"] = "class";
        doc["description"] = schema.description;
        ojson methods = ojson::object();
        for (const auto& m : schema.methods) methods[m.name] = callable_json(m);
        doc["methods"] = methods;
    } else {
        ToolMethod call = schema.methods.empty() ? ToolMethod{std::string(tool_name), schema.description, {}, {}, {}}
                                                 : schema.methods.front();
        call.description = schema.description;
        doc = callable_json(call);
    }
    if (!schema.tags.empty()) doc["tags"] = schema.tags;
    if (schema.symbol) doc["symbol"] = *schema.symbol;
    for (const auto& [k, v] : schema.extra.items()) doc[k] = v;
    return doc;
}

std::string write_tool_schema(const ToolSchema& schema, std::string_view tool_name) {
    YAML::Emitter out;
    out.SetIndent(2);
    emit_json(out, tool_schema_json(schema, tool_name));
    return std::string(out.c_str()) + "\n";
}

// ---------------------------------------------------------------------------
// Library

ToolLibrary ToolLibrary::load(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::LibraryMissing, "no tool library at " + dir.string());
    ToolLibrary lib;
    lib.dir_ = dir;
    const auto schemas = dir / "schemas";
    if (!std::filesystem::is_directory(schemas)) return lib;

    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(schemas)) {
        auto ext = entry.path().extension();
        if (entry.is_regular_file() && (ext == ".yml" || ext == ".yaml")) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
        const std::string name = file.stem().string();
        try {
            ToolSchema schema = parse_tool_schema(read_file(file), name);
            auto source = find_source(dir, name);
            if (!source) {
                lib.diagnostics_.push_back(file.string() + ": no source file " + name + ".* next to the schemas directory");
                continue;
            }
            lib.records_.push_back(make_record(name, std::move(schema), *source));
        } catch (const Error& e) {
            lib.diagnostics_.push_back(file.string() + ": " + e.what());
        }
    }
    return lib;
}

const ToolRecord* ToolLibrary::find(std::string_view name) const {
    for (const auto& r : records_) {
        if (r.name == name) return &r;
    }
    return nullptr;
}

ToolRecord ToolLibrary::add(std::string name, std::string_view source, ToolSchema schema, std::string_view extension) {
    std::filesystem::create_directories(dir_ / "schemas");
    LibraryLock lock(dir_);

    auto taken = [&](const std::string& candidate) {
        return find(candidate) != nullptr || std::filesystem::exists(dir_ / "schemas" / (candidate + ".yml")) ||
               find_source(dir_, candidate).has_value();
    };
    std::string final_name = name;
    for (int v = 2; taken(final_name); ++v) final_name = name + "_v" + std::to_string(v);
    if (final_name != name && !schema.symbol) schema.symbol = name;

    const auto source_path = dir_ / (final_name + std::string(extension));
    const auto schema_path = dir_ / "schemas" / (final_name + ".yml");
    {
        std::ofstream out(source_path, std::ios::binary);
        out << source;
        if (!source.empty() && source.back() != '\n') out << '\n';
        if (!out) throw Error(ErrorCode::IoError, "cannot write " + source_path.string());
    }
    {
        std::ofstream out(schema_path, std::ios::binary);
        out << write_tool_schema(schema, final_name);
        if (!out) throw Error(ErrorCode::IoError, "cannot write " + schema_path.string());
    }
    ToolRecord record = make_record(final_name, std::move(schema), source_path);
    records_.push_back(record);
    return record;
}

std::vector<ToolRecord> load_library(const std::filesystem::path& dir) { return ToolLibrary::load(dir).records(); }

// ---------------------------------------------------------------------------
// Classification and recommendation

TaskTaxonomy TaskTaxonomy::defaults() {
    TaskTaxonomy t;
    t.labels = {"eda",           "data preprocessing", "feature engineering", "model train", "model evaluate",
                "image processing", "text processing", "email processing",  "web scraping"};
    t.usage_hints = {
        {"eda", "For exploratory data analysis, inspect shape, dtypes, missing values and basic statistics."},
        {"data preprocessing",
         "For preprocessing, handle missing values and outliers on a copy of the data and keep train/test consistent."},
        {"feature engineering",
         "For feature engineering, derive new features with fit on train and transform on both train and test."},
        {"model train", "For model training, fit a model on the processed features and keep the fitted model in a variable."},
        {"model evaluate", "For model evaluation, score the trained model on held-out data and print the metric."},
        {"image processing", "For image tasks, write outputs to files in the working directory."},
        {"text processing", "For text tasks, normalize and tokenize text before analysis."},
        {"email processing", "For email tasks, parse messages and keep credentials out of the code."},
        {"web scraping", "For web tasks, fetch pages politely and extract the requested content."},
    };
    return t;
}

bool TaskTaxonomy::contains(std::string_view label) const {
    return std::find(labels.begin(), labels.end(), label) != labels.end();
}

std::string TaskTaxonomy::usage_hint(std::string_view label) const {
    auto it = usage_hints.find(label);
    return it == usage_hints.end() ? std::string{} : it->second;
}

std::string classify_task(std::string_view instruction, LlmBackend& llm, const PromptLibrary& prompts,
                          const TaskTaxonomy& taxonomy) {
    if (trim(instruction).empty()) return std::string(kGeneralTaskType);
    std::string labels;
    for (const auto& l : taxonomy.labels) labels += "- " + l + "\n";
    std::string prompt = render(prompts.get("classify"), {{"instruction", std::string(instruction)}, {"taxonomy", labels}});
    std::string label = clean_label(llm.complete({{Role::User, prompt}}, {}));
    return taxonomy.contains(label) ? label : std::string(kGeneralTaskType);
}

std::size_t lexical_score(std::string_view instruction, const ToolRecord& record) {
    auto a = word_tokens(instruction);
    auto b = word_tokens(record.schema.description);
    std::set<std::string> lhs(a.begin(), a.end());
    std::set<std::string> rhs(b.begin(), b.end());
    std::size_t overlap = 0;
    for (const auto& t : lhs) overlap += rhs.count(t);
    return overlap;
}

std::vector<ToolRecord> recommend(const RecommendationQuery& query, const ToolLibrary& library, LlmBackend* llm,
                                  const PromptLibrary* prompts) {
    if (query.k < 1) throw Error(ErrorCode::PreconditionViolation, "k must be at least 1");
    std::vector<const ToolRecord*> candidates;
    for (const auto& r : library.records()) {
        if (std::find(r.task_tags.begin(), r.task_tags.end(), query.task_type) != r.task_tags.end()) candidates.push_back(&r);
    }
    if (candidates.empty()) return {};

    if (llm != nullptr && prompts != nullptr) {
        std::string listing;
        for (const auto* r : candidates) listing += "- " + r->name + ": " + r->schema.description + "\n";
        std::string prompt = render(prompts->get("tool_rank"), {{"task", query.task_instruction},
                                                                {"candidates", listing},
                                                                {"k", std::to_string(query.k)}});
        auto reply = nlohmann::json::parse(extract_code(llm->complete({{Role::User, prompt}}, {})), nullptr, false);
        if (reply.is_array()) {
            std::vector<ToolRecord> picked;
            for (const auto& name : reply) {
                if (!name.is_string() || picked.size() >= query.k) continue;
                for (const auto* r : candidates) {
                    bool dup = std::any_of(picked.begin(), picked.end(), [&](const ToolRecord& p) { return p.name == r->name; });
                    if (r->name == name.get<std::string>() && !dup) picked.push_back(*r);
                }
            }
            if (!picked.empty()) return picked;
        }
    }

    std::vector<std::pair<std::size_t, const ToolRecord*>> scored;
    for (const auto* r : candidates) scored.emplace_back(lexical_score(query.task_instruction, *r), r);
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second->name < b.second->name;
    });
    std::vector<ToolRecord> out;
    for (std::size_t i = 0; i < scored.size() && i < query.k; ++i) out.push_back(*scored[i].second);
    return out;
}

std::string render_tool_context(const std::vector<ToolRecord>& records) {
    if (records.empty()) return std::string(kEmptyToolContext);
    std::string out;
    for (const auto& r : records) {
        if (!out.empty()) out += "\n";
        out += "## " + r.symbol + "\n";
        out += "Import: from " + r.module_path + " import " + r.symbol + "\n";
        out += tool_schema_json(r.schema, r.name).dump(2) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evolution

ToolRecord evolve_tool(const TaskNode& task, LlmBackend& llm, const PromptLibrary& prompts, ToolLibrary& library,
                       const EvolutionOptions& options) {
    if (task.status != TaskStatus::Success || task.code.empty()) {
        throw Error(ErrorCode::PreconditionViolation, "only successful tasks with code can be distilled into tools");
    }
    std::string reply = llm.complete(
        {{Role::User, render(prompts.get("tool_evolve"), {{"task", task.instruction}, {"code", task.code}})}}, {});
    auto blocks = fenced_blocks(reply);
    const FencedBlock* tool = block_tagged(blocks, "tool");
    const FencedBlock* schema_block = block_tagged(blocks, "schema");
    const FencedBlock* test = block_tagged(blocks, "test");
    if (tool == nullptr || schema_block == nullptr || test == nullptr) {
        throw Error(ErrorCode::EvolutionRejected, "reply lacks the tool, schema and test blocks");
    }
    std::string source = tool->body;
    const std::string test_code = test->body;
    auto symbol = defined_symbol(source);
    if (!symbol) throw Error(ErrorCode::EvolutionRejected, "tool source defines no top-level class or function");
    ToolSchema schema;
    try {
        schema = parse_tool_schema(schema_block->body, *symbol);
    } catch (const Error& e) {
        throw Error(ErrorCode::EvolutionRejected, std::string("generated schema invalid: ") + e.what());
    }
    if (schema.tags.empty()) schema.tags.push_back(task.task_type.empty() ? std::string(kGeneralTaskType) : task.task_type);

    for (int attempt = 0;; ++attempt) {
        std::optional<ExceptionInfo> failure;
        {
            SessionConfig cfg = options.session;
            cfg.workdir = scratch_dir("tooltest");
            Session session(cfg);
            auto tag = std::to_string(attempt);
            ExecutionResult defined = session.execute({"tool-src-" + tag, source, CellOrigin::ToolTest});
            if (defined.exception) {
                failure = defined.exception;
            } else {
                ExecutionResult tested = session.execute({"tool-test-" + tag, test_code, CellOrigin::ToolTest});
                failure = tested.exception;
            }
            std::error_code ec;
            std::filesystem::remove_all(cfg.workdir, ec);
        }
        if (!failure) break;
        if (attempt >= options.max_debug_attempts) {
            throw Error(ErrorCode::EvolutionRejected,
                        "unit test still failing after " + std::to_string(attempt) + " debug rounds: " + failure->kind);
        }
        std::string fix = llm.complete({{Role::User, render(prompts.get("tool_debug"),
                                                            {{"code", source},
                                                             {"test", test_code},
                                                             {"error", failure->kind + ": " + failure->message + "\n" +
                                                                           failure->traceback}})}},
                                       {});
        source = extract_code(fix);
    }
    return library.add(*symbol, source, std::move(schema));
}

}  // namespace taskweave
