#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskweave/error.hpp"

namespace taskweave {

enum class Role { System, User, Assistant };

std::string_view to_string(Role role) noexcept;
Role role_from_string(std::string_view text);

struct ChatMessage {
    Role role = Role::User;
    std::string content;
};

struct CompletionParams {
    double temperature = 0.0;
    int max_tokens = 2048;
};

class LlmBackend {
public:
    virtual ~LlmBackend() = default;
    virtual std::string complete(const std::vector<ChatMessage>& messages, const CompletionParams& params) = 0;
};

/// Message contents joined by newlines; cassette match filters run over this.
std::string render_prompt(const std::vector<ChatMessage>& messages);

struct CassetteEntry {
    std::optional<std::string> match;
    std::string reply;
    /// A repeating entry is never consumed.
    bool repeat = false;
};

/// Scripted replay. Each request takes the first unconsumed entry whose match
/// filter (if any) occurs in the rendered prompt.
class CassetteBackend final : public LlmBackend {
public:
    explicit CassetteBackend(std::vector<CassetteEntry> entries);

    /// JSONL of {match?, reply, repeat?}; other keys are ignored, so a run
    /// transcript loads as a cassette directly.
    static std::shared_ptr<CassetteBackend> from_file(const std::filesystem::path& path);
    static std::vector<CassetteEntry> parse_jsonl(std::string_view text);

    std::string complete(const std::vector<ChatMessage>& messages, const CompletionParams& params) override;

    std::size_t cursor() const;
    std::size_t remaining() const;

private:
    mutable std::mutex mutex_;
    std::vector<CassetteEntry> entries_;
    std::vector<bool> consumed_;
};

struct HttpBackendConfig {
    std::string base_url = "http://127.0.0.1:8000";
    std::string path = "/v1/chat/completions";
    std::string model = "gpt-4-1106-preview";
    /// Name of the environment variable holding the bearer token.
    std::string api_key_env = "TASKWEAVE_API_KEY";
    int max_retries = 3;
    std::chrono::milliseconds backoff_base{500};
    std::chrono::seconds timeout{120};
};

/// Chat-completions over HTTP: {model, messages, temperature, max_tokens} in,
/// choices[0].message.content out. 429 replies are retried with exponential
/// backoff up to max_retries times.
class HttpChatBackend final : public LlmBackend {
public:
    explicit HttpChatBackend(HttpBackendConfig config);
    std::string complete(const std::vector<ChatMessage>& messages, const CompletionParams& params) override;

    int backoffs() const noexcept { return backoffs_; }

private:
    HttpBackendConfig config_;
    int backoffs_ = 0;
};

/// Decorator that appends every exchange to a JSONL transcript and counts calls.
class RecordingBackend final : public LlmBackend {
public:
    explicit RecordingBackend(std::shared_ptr<LlmBackend> inner, std::optional<std::filesystem::path> transcript = {});

    std::string complete(const std::vector<ChatMessage>& messages, const CompletionParams& params) override;

    std::size_t calls() const;
    /// In-memory copy of the transcript lines written so far.
    std::vector<nlohmann::json> transcript() const;

private:
    std::shared_ptr<LlmBackend> inner_;
    std::optional<std::filesystem::path> path_;
    mutable std::mutex mutex_;
    std::vector<nlohmann::json> lines_;
};

/// "http" or "cassette:<file>".
struct BackendSpec {
    std::string kind = "cassette";
    std::filesystem::path cassette;
    HttpBackendConfig http;
};

BackendSpec parse_backend_spec(std::string_view text);
std::shared_ptr<LlmBackend> make_backend(const BackendSpec& spec);

/// Body text with `{name}` placeholders; `{{` and `}}` are literal braces.
class PromptTemplate {
public:
    PromptTemplate() = default;
    PromptTemplate(std::string name, std::string body);

    const std::string& name() const noexcept { return name_; }
    const std::string& body() const noexcept { return body_; }
    std::vector<std::string> placeholders() const;

private:
    std::string name_;
    std::string body_;
};

using Bindings = std::map<std::string, std::string, std::less<>>;

/// Single pass: substituted values are not rescanned for placeholders.
std::string render(const PromptTemplate& tmpl, const Bindings& bindings);

/// Contents of the first fenced block, or the trimmed reply when unfenced.
std::string extract_code(std::string_view reply);

struct FencedBlock {
    std::string info;  // text after the opening fence, e.g. "python tool"
    std::string body;
};

std::vector<FencedBlock> fenced_blocks(std::string_view reply);

/// Prompt templates loaded from `<dir>/*.txt`, keyed by file stem.
class PromptLibrary {
public:
    PromptLibrary() = default;
    static PromptLibrary load(const std::filesystem::path& dir);

    void add(PromptTemplate tmpl);
    const PromptTemplate& get(std::string_view name) const;
    bool contains(std::string_view name) const;

private:
    std::map<std::string, PromptTemplate, std::less<>> templates_;
};

/// Root of the shipped data tree (prompts, worker shim, reference tools,
/// cassettes). Honors TASKWEAVE_DATA_DIR, else the build-time location.
std::filesystem::path data_dir();

}  // namespace taskweave
