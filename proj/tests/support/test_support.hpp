#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "taskweave/acv_verifier.hpp"
#include "taskweave/code_executor.hpp"
#include "taskweave/llm_gateway.hpp"

#ifndef TASKWEAVE_TEST_FIXTURES
#define TASKWEAVE_TEST_FIXTURES "tests/fixtures"
#endif

namespace taskweave::testing {

inline std::filesystem::path fixture(const std::string& name) { return std::filesystem::path(TASKWEAVE_TEST_FIXTURES) / name; }

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    out << text;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag = "tw") {
        std::string pattern = (std::filesystem::temp_directory_path() / (tag + "-XXXXXX")).string();
        std::vector<char> buf(pattern.begin(), pattern.end());
        buf.push_back('\0');
        char* made = ::mkdtemp(buf.data());
        path_ = made != nullptr ? made : pattern;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline SessionConfig quick_session(const std::filesystem::path& workdir, double cell_timeout = 30.0) {
    SessionConfig cfg;
    cfg.interpreter_cmd = default_interpreter_cmd();
    cfg.workdir = workdir;
    cfg.cell_timeout = std::chrono::duration<double>(cell_timeout);
    cfg.interrupt_grace = std::chrono::duration<double>(1.0);
    return cfg;
}

inline std::string fenced(const std::string& lang, const std::string& body) { return "```" + lang + "\n" + body + "\n```"; }

inline std::shared_ptr<CassetteBackend> cassette(std::vector<CassetteEntry> entries) {
    return std::make_shared<CassetteBackend>(std::move(entries));
}

inline PromptLibrary shipped_prompts() { return PromptLibrary::load(data_dir() / "prompts"); }

inline std::filesystem::path shipped_cassette(const std::string& name) { return data_dir() / "cassettes" / name; }

/// Five trials: 1/108 at trials 1 and 5, 56/219 at trials 2 to 4.
inline std::vector<Trial> split_vote_trials() {
    auto trial = [](int k, const char* answer, Verdict v) {
        Trial t;
        t.k = k;
        t.answer = answer;
        t.verdict = v;
        t.confidence = confidence(v);
        return t;
    };
    return {trial(1, "1/108", Verdict::False), trial(2, "56/219", Verdict::False), trial(3, "56/219", Verdict::Indeterminate),
            trial(4, "56/219", Verdict::False), trial(5, "1/108", Verdict::True)};
}

}  // namespace taskweave::testing
