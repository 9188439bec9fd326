#include "taskweave/llm_gateway.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "taskweave/text.hpp"

#ifndef TASKWEAVE_DEFAULT_DATA_DIR
#define TASKWEAVE_DEFAULT_DATA_DIR "share/taskweave"
#endif

namespace taskweave {

using nlohmann::json;

std::string_view to_string(Role role) noexcept {
    switch (role) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
    }
    return "user";
}

Role role_from_string(std::string_view text) {
    if (text == "system") return Role::System;
    if (text == "user") return Role::User;
    if (text == "assistant") return Role::Assistant;
    throw Error(ErrorCode::ConfigError, "unknown chat role '" + std::string(text) + "'");
}

std::string render_prompt(const std::vector<ChatMessage>& messages) {
    std::string out;
    for (const auto& message : messages) {
        if (!out.empty()) out += '\n';
        out += message.content;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cassette

CassetteBackend::CassetteBackend(std::vector<CassetteEntry> entries)
    : entries_(std::move(entries)), consumed_(entries_.size(), false) {}

std::vector<CassetteEntry> CassetteBackend::parse_jsonl(std::string_view text) {
    std::vector<CassetteEntry> entries;
    std::size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json doc = json::parse(line, nullptr, false);
        if (doc.is_discarded() || !doc.is_object()) {
            throw Error(ErrorCode::ConfigError, "cassette line " + std::to_string(line_no) + " is not a JSON object");
        }
        if (!doc.contains("reply") || !doc.at("reply").is_string()) continue;
        CassetteEntry entry;
        entry.reply = doc.at("reply").get<std::string>();
        if (doc.contains("match") && doc.at("match").is_string()) entry.match = doc.at("match").get<std::string>();
        entry.repeat = doc.value("repeat", false);
        entries.push_back(std::move(entry));
    }
    return entries;
}

std::shared_ptr<CassetteBackend> CassetteBackend::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ConfigError, "cannot open cassette " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return std::make_shared<CassetteBackend>(parse_jsonl(buffer.str()));
}

std::string CassetteBackend::complete(const std::vector<ChatMessage>& messages, const CompletionParams&) {
    const std::string prompt = render_prompt(messages);
    std::lock_guard lock(mutex_);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (consumed_[i]) continue;
        const auto& entry = entries_[i];
        if (entry.match && prompt.find(*entry.match) == std::string::npos) continue;
        if (!entry.repeat) consumed_[i] = true;
        return entry.reply;
    }
    throw Error(ErrorCode::CassetteExhausted,
                "no cassette entry left for prompt starting with: " + prompt.substr(0, 120));
}

std::size_t CassetteBackend::cursor() const {
    std::lock_guard lock(mutex_);
    auto it = std::find(consumed_.begin(), consumed_.end(), false);
    return static_cast<std::size_t>(it - consumed_.begin());
}

std::size_t CassetteBackend::remaining() const {
    std::lock_guard lock(mutex_);
    return static_cast<std::size_t>(std::count(consumed_.begin(), consumed_.end(), false));
}

// ---------------------------------------------------------------------------
// HTTP

HttpChatBackend::HttpChatBackend(HttpBackendConfig config) : config_(std::move(config)) {}

namespace {

struct SplitUrl {
    std::string scheme_host_port;
    std::string path_prefix;
};

SplitUrl split_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error(ErrorCode::ConfigError, "base URL needs a scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, ""};
    std::string prefix = url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {url.substr(0, path_start), prefix};
}

}  // namespace

std::string HttpChatBackend::complete(const std::vector<ChatMessage>& messages, const CompletionParams& params) {
    auto [origin, prefix] = split_url(config_.base_url);
    httplib::Client client(origin);
    client.set_connection_timeout(config_.timeout);
    client.set_read_timeout(config_.timeout);
    client.set_write_timeout(config_.timeout);

    httplib::Headers headers;
    if (const char* token = std::getenv(config_.api_key_env.c_str()); token != nullptr && *token != '\0') {
        headers.emplace("Authorization", std::string("Bearer ") + token);
    }

    json body{{"model", config_.model}, {"temperature", params.temperature}, {"max_tokens", params.max_tokens}};
    body["messages"] = json::array();
    for (const auto& m : messages) body["messages"].push_back({{"role", to_string(m.role)}, {"content", m.content}});
    const std::string payload = body.dump();
    const std::string path = prefix + config_.path;

    for (int attempt = 0;; ++attempt) {
        auto res = client.Post(path, headers, payload, "application/json");
        if (!res) throw Error(ErrorCode::TransportError, "request failed: " + httplib::to_string(res.error()));
        if (res->status == 429) {
            if (attempt >= config_.max_retries) {
                throw Error(ErrorCode::RateLimited, "still rate limited after " + std::to_string(attempt) + " retries");
            }
            ++backoffs_;
            std::this_thread::sleep_for(config_.backoff_base * (1 << attempt));
            continue;
        }
        if (res->status != 200) {
            throw Error(ErrorCode::TransportError,
                        "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 300));
        }
        json doc = json::parse(res->body, nullptr, false);
        if (doc.is_discarded()) throw Error(ErrorCode::TransportError, "reply is not JSON");
        try {
            return doc.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception& e) {
            throw Error(ErrorCode::TransportError, std::string("unexpected reply shape: ") + e.what());
        }
    }
}

// ---------------------------------------------------------------------------
// Recording

RecordingBackend::RecordingBackend(std::shared_ptr<LlmBackend> inner, std::optional<std::filesystem::path> transcript)
    : inner_(std::move(inner)), path_(std::move(transcript)) {}

std::string RecordingBackend::complete(const std::vector<ChatMessage>& messages, const CompletionParams& params) {
    json line{{"messages", json::array()}, {"params", {{"temperature", params.temperature}, {"max_tokens", params.max_tokens}}}};
    for (const auto& m : messages) line["messages"].push_back({{"role", to_string(m.role)}, {"content", m.content}});

    std::string reply;
    std::optional<Error> failure;
    try {
        reply = inner_->complete(messages, params);
        line["reply"] = reply;
    } catch (const Error& e) {
        line["error"] = e.what();
        failure = e;
    }

    {
        std::lock_guard lock(mutex_);
        line["seq"] = lines_.size() + 1;
        if (path_) {
            std::ofstream out(*path_, std::ios::app);
            out << line.dump() << '\n';
        }
        lines_.push_back(std::move(line));
    }
    if (failure) throw *failure;
    return reply;
}

std::size_t RecordingBackend::calls() const {
    std::lock_guard lock(mutex_);
    return lines_.size();
}

std::vector<json> RecordingBackend::transcript() const {
    std::lock_guard lock(mutex_);
    return lines_;
}

BackendSpec parse_backend_spec(std::string_view text) {
    BackendSpec spec;
    if (text == "http") {
        spec.kind = "http";
        return spec;
    }
    constexpr std::string_view prefix = "cassette:";
    if (text.substr(0, prefix.size()) == prefix && text.size() > prefix.size()) {
        spec.kind = "cassette";
        spec.cassette = std::string(text.substr(prefix.size()));
        return spec;
    }
    throw Error(ErrorCode::ConfigError, "backend must be 'http' or 'cassette:<file>', got '" + std::string(text) + "'");
}

std::shared_ptr<LlmBackend> make_backend(const BackendSpec& spec) {
    if (spec.kind == "http") return std::make_shared<HttpChatBackend>(spec.http);
    if (spec.kind == "cassette") return CassetteBackend::from_file(spec.cassette);
    throw Error(ErrorCode::ConfigError, "unknown backend kind '" + spec.kind + "'");
}

// ---------------------------------------------------------------------------
// Templates

PromptTemplate::PromptTemplate(std::string name, std::string body) : name_(std::move(name)), body_(std::move(body)) {}

namespace {

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

// Calls on_text for literal runs and on_placeholder for `{name}` tokens.
template <typename OnText, typename OnPlaceholder>
void scan_template(std::string_view body, OnText on_text, OnPlaceholder on_placeholder) {
    std::size_t i = 0;
    while (i < body.size()) {
        char c = body[i];
        if ((c == '{' || c == '}') && i + 1 < body.size() && body[i + 1] == c) {
            on_text(std::string_view(&body[i], 1));
            i += 2;
            continue;
        }
        if (c == '{' && i + 1 < body.size() && ident_start(body[i + 1])) {
            std::size_t j = i + 1;
            while (j < body.size() && ident_char(body[j])) ++j;
            if (j < body.size() && body[j] == '}') {
                on_placeholder(body.substr(i + 1, j - i - 1));
                i = j + 1;
                continue;
            }
        }
        on_text(std::string_view(&body[i], 1));
        ++i;
    }
}

}  // namespace

std::vector<std::string> PromptTemplate::placeholders() const {
    std::vector<std::string> names;
    scan_template(body_, [](std::string_view) {}, [&](std::string_view name) {
        if (std::find(names.begin(), names.end(), name) == names.end()) names.emplace_back(name);
    });
    return names;
}

std::string render(const PromptTemplate& tmpl, const Bindings& bindings) {
    std::string out;
    out.reserve(tmpl.body().size());
    scan_template(tmpl.body(), [&](std::string_view text) { out += text; }, [&](std::string_view name) {
        auto it = bindings.find(name);
        if (it == bindings.end()) {
            throw Error(ErrorCode::MissingBinding,
                        "template '" + tmpl.name() + "' needs {" + std::string(name) + "}");
        }
        out += it->second;
    });
    return out;
}

std::vector<FencedBlock> fenced_blocks(std::string_view reply) {
    std::vector<FencedBlock> blocks;
    std::optional<FencedBlock> open;
    for (const auto& raw : split_lines(reply)) {
        std::string_view line = raw;
        std::string_view stripped = trim(line);
        if (!open) {
            if (stripped.substr(0, 3) == "```") open = FencedBlock{std::string(trim(stripped.substr(3))), ""};
            continue;
        }
        if (stripped.substr(0, 3) == "```") {
            blocks.push_back(std::move(*open));
            open.reset();
            continue;
        }
        if (stripped.size() >= 3 && stripped.substr(stripped.size() - 3) == "```") {
            // Closing fence glued to the last code line.
            auto cut = line.rfind("```");
            open->body += std::string(line.substr(0, cut));
            blocks.push_back(std::move(*open));
            open.reset();
            continue;
        }
        open->body += std::string(line);
        open->body += '\n';
    }
    if (open) blocks.push_back(std::move(*open));
    for (auto& block : blocks) {
        while (!block.body.empty() && (block.body.back() == '\n' || block.body.back() == '\r')) block.body.pop_back();
    }
    return blocks;
}

std::string extract_code(std::string_view reply) {
    auto blocks = fenced_blocks(reply);
    if (!blocks.empty()) return blocks.front().body;
    return std::string(trim(reply));
}

PromptLibrary PromptLibrary::load(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::ConfigError, "prompt directory missing: " + dir.string());
    PromptLibrary lib;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
        std::ifstream in(entry.path());
        std::stringstream buffer;
        buffer << in.rdbuf();
        lib.add(PromptTemplate(entry.path().stem().string(), buffer.str()));
    }
    return lib;
}

void PromptLibrary::add(PromptTemplate tmpl) {
    std::string key = tmpl.name();
    templates_.insert_or_assign(std::move(key), std::move(tmpl));
}

const PromptTemplate& PromptLibrary::get(std::string_view name) const {
    auto it = templates_.find(name);
    if (it == templates_.end()) throw Error(ErrorCode::ConfigError, "no prompt template '" + std::string(name) + "'");
    return it->second;
}

bool PromptLibrary::contains(std::string_view name) const { return templates_.find(name) != templates_.end(); }

std::filesystem::path data_dir() {
    if (const char* env = std::getenv("TASKWEAVE_DATA_DIR"); env != nullptr && *env != '\0') return env;
    return TASKWEAVE_DEFAULT_DATA_DIR;
}

}  // namespace taskweave
