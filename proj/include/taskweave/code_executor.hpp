#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <sys/types.h>

#include "taskweave/error.hpp"
#include "taskweave/task_graph.hpp"

namespace taskweave {

struct SessionConfig {
    /// argv of the worker runtime; the default runs the bundled Python shim.
    std::vector<std::string> interpreter_cmd;
    std::chrono::duration<double> cell_timeout{300.0};
    std::size_t max_output_bytes = 65536;
    std::filesystem::path workdir = ".";
    /// Prepended to PYTHONPATH for the worker (tool libraries live here).
    std::vector<std::filesystem::path> import_paths;
    std::chrono::duration<double> handshake_timeout{5.0};
    /// Time between the interrupt and the kill-and-restart on timeout.
    std::chrono::duration<double> interrupt_grace{5.0};
    /// Worker diagnostics (its own stderr); discarded when empty.
    std::filesystem::path worker_log;
};

/// `python3 <data>/worker/taskweave_worker.py`
std::vector<std::string> default_interpreter_cmd();
/// Whitespace split, with single and double quotes grouping.
std::vector<std::string> split_command_line(std::string_view text);

enum class CellOrigin { Task, DebugRetry, Validation, ToolTest, Replay };

std::string_view to_string(CellOrigin origin) noexcept;

struct Cell {
    std::string cell_id;
    std::string code;
    CellOrigin origin = CellOrigin::Task;
    /// When set, the cell runs in a scratch namespace forked from the main
    /// one on first use, so the main namespace is left alone.
    std::optional<std::string> scope;
    /// Discard the scratch scope after this cell.
    bool drop_scope = false;
};

/// Raised when a cell overruns cell_timeout. The session has either been
/// interrupted in place (namespace intact) or killed and restarted.
class CellTimeout : public Error {
public:
    CellTimeout(ExecutionResult partial, bool namespace_lost)
        : Error(ErrorCode::Timeout, namespace_lost ? "cell timed out; worker restarted, namespace lost"
                                                   : "cell timed out; worker interrupted"),
          result_(std::move(partial)),
          namespace_lost_(namespace_lost) {}

    const ExecutionResult& result() const noexcept { return result_; }
    bool namespace_lost() const noexcept { return namespace_lost_; }

private:
    ExecutionResult result_;
    bool namespace_lost_;
};

/// A persistent interpreter worker. Variables bound by one cell stay visible
/// to later cells until reset() or a restart. execute() calls are serialized.
class Session {
public:
    explicit Session(SessionConfig config);
    ~Session();

    Session(const Session&) = delete;
    Session& operator=(const Session&) = delete;

    ExecutionResult execute(const Cell& cell);
    /// Empty-code round trip; throws HandshakeTimeout when the worker is unresponsive.
    void ping();
    /// Fresh worker, fresh namespace, same config.
    void reset();

    bool alive() const;
    /// Set when a restart discarded the namespace; cleared by acknowledge_namespace_loss() or reset().
    bool namespace_lost() const;
    void acknowledge_namespace_loss();
    /// Bumped on every worker (re)start.
    std::uint64_t generation() const;
    pid_t worker_pid() const;

    const SessionConfig& config() const noexcept { return config_; }

private:

    void spawn();
    void terminate();
    std::optional<std::string> read_line(std::chrono::steady_clock::time_point deadline);
    void send_request(const Cell& cell);
    ExecutionResult await_done(const std::string& cell_id, std::chrono::steady_clock::time_point deadline,
                               bool& timed_out);
    void handshake();

    SessionConfig config_;
    mutable std::mutex mutex_;
    pid_t pid_ = -1;
    int to_worker_ = -1;
    int from_worker_ = -1;
    std::string read_buffer_;
    bool namespace_lost_ = false;
    bool dead_ = false;
    std::uint64_t generation_ = 0;
    std::uint64_t ping_counter_ = 0;
    std::set<std::string> used_cell_ids_;
};

}  // namespace taskweave
