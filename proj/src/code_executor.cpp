#include "taskweave/code_executor.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "taskweave/llm_gateway.hpp"

extern char** environ;

namespace taskweave {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

void ignore_sigpipe_once() {
    static const bool done = [] {
        std::signal(SIGPIPE, SIG_IGN);
        return true;
    }();
    (void)done;
}

Clock::time_point deadline_after(std::chrono::duration<double> d) {
    return Clock::now() + std::chrono::duration_cast<Clock::duration>(d);
}

// Marker used to unwind out of the read loop when the worker goes away.
struct WorkerEof {};

void append_capped(std::string& sink, std::string_view data, std::size_t cap, bool& truncated) {
    if (sink.size() >= cap) {
        if (!data.empty()) truncated = true;
        return;
    }
    std::size_t room = cap - sink.size();
    if (data.size() > room) {
        sink.append(data.substr(0, room));
        truncated = true;
    } else {
        sink.append(data);
    }
}

std::string format_seconds(double seconds) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", seconds);
    return buf;
}

}  // namespace

std::string_view to_string(CellOrigin origin) noexcept {
    switch (origin) {
    case CellOrigin::Task: return "task";
    case CellOrigin::DebugRetry: return "debug_retry";
    case CellOrigin::Validation: return "validation";
    case CellOrigin::ToolTest: return "tool_test";
    case CellOrigin::Replay: return "replay";
    }
    return "task";
}

std::vector<std::string> default_interpreter_cmd() {
    return {"python3", (data_dir() / "worker" / "taskweave_worker.py").string()};
}

std::vector<std::string> split_command_line(std::string_view text) {
    std::vector<std::string> args;
    std::string current;
    bool in_token = false;
    char quote = 0;
    for (char c : text) {
        if (quote != 0) {
            if (c == quote) {
                quote = 0;
            } else {
                current += c;
            }
            continue;
        }
        if (c == '\'' || c == '"') {
            quote = c;
            in_token = true;
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            if (in_token) args.push_back(std::move(current));
            current.clear();
            in_token = false;
        } else {
            current += c;
            in_token = true;
        }
    }
    if (in_token) args.push_back(std::move(current));
    return args;
}

Session::Session(SessionConfig config) : config_(std::move(config)) {
    if (config_.interpreter_cmd.empty()) config_.interpreter_cmd = default_interpreter_cmd();
    if (config_.cell_timeout.count() <= 0) throw Error(ErrorCode::ConfigError, "cell_timeout must be positive");
    ignore_sigpipe_once();
    std::lock_guard lock(mutex_);
    spawn();
}

Session::~Session() {
    std::lock_guard lock(mutex_);
    terminate();
}

void Session::spawn() {
    std::error_code ec;
    std::filesystem::create_directories(config_.workdir, ec);
    const std::string workdir = std::filesystem::absolute(config_.workdir).string();

    // Everything the child needs is built before fork; only async-signal-safe
    // calls happen between fork and exec.
    std::vector<std::string> env_storage;
    std::string python_path;
    for (const auto& p : config_.import_paths) {
        if (!python_path.empty()) python_path += ':';
        python_path += std::filesystem::absolute(p).string();
    }
    for (char** e = environ; *e != nullptr; ++e) {
        std::string_view entry(*e);
        if (entry.substr(0, 11) == "PYTHONPATH=") {
            if (!python_path.empty()) python_path += ':';
            python_path += std::string(entry.substr(11));
            continue;
        }
        if (entry.substr(0, 17) == "PYTHONUNBUFFERED=") continue;
        env_storage.emplace_back(entry);
    }
    if (!python_path.empty()) env_storage.push_back("PYTHONPATH=" + python_path);
    env_storage.emplace_back("PYTHONUNBUFFERED=1");
    std::vector<char*> envp;
    for (auto& s : env_storage) envp.push_back(s.data());
    envp.push_back(nullptr);

    std::vector<std::string> argv_storage = config_.interpreter_cmd;
    std::vector<char*> argv;
    for (auto& s : argv_storage) argv.push_back(s.data());
    argv.push_back(nullptr);

    const std::string log_path = config_.worker_log.empty() ? "/dev/null" : config_.worker_log.string();

    int in_pipe[2], out_pipe[2], err_pipe[2];
    if (pipe2(in_pipe, O_CLOEXEC) != 0) throw Error(ErrorCode::SpawnFailed, std::strerror(errno));
    if (pipe2(out_pipe, O_CLOEXEC) != 0) {
        close(in_pipe[0]);
        close(in_pipe[1]);
        throw Error(ErrorCode::SpawnFailed, std::strerror(errno));
    }
    if (pipe2(err_pipe, O_CLOEXEC) != 0) {
        for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1]}) close(fd);
        throw Error(ErrorCode::SpawnFailed, std::strerror(errno));
    }

    pid_t pid = fork();
    if (pid < 0) {
        for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1]}) close(fd);
        throw Error(ErrorCode::SpawnFailed, std::strerror(errno));
    }
    if (pid == 0) {
        setpgid(0, 0);
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        int log_fd = open(log_path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
        if (log_fd >= 0) dup2(log_fd, STDERR_FILENO);
        if (chdir(workdir.c_str()) != 0) {
            int err = errno;
            (void)!write(err_pipe[1], &err, sizeof err);
            _exit(127);
        }
        execvpe(argv[0], argv.data(), envp.data());
        int err = errno;
        (void)!write(err_pipe[1], &err, sizeof err);
        _exit(127);
    }

    close(in_pipe[0]);
    close(out_pipe[1]);
    close(err_pipe[1]);
    int child_errno = 0;
    ssize_t n;
    do {
        n = read(err_pipe[0], &child_errno, sizeof child_errno);
    } while (n < 0 && errno == EINTR);
    close(err_pipe[0]);
    if (n > 0) {
        close(in_pipe[1]);
        close(out_pipe[0]);
        waitpid(pid, nullptr, 0);
        throw Error(ErrorCode::SpawnFailed, "cannot start '" + config_.interpreter_cmd.front() +
                                                "': " + std::strerror(child_errno));
    }

    pid_ = pid;
    to_worker_ = in_pipe[1];
    from_worker_ = out_pipe[0];
    read_buffer_.clear();
    dead_ = false;
    ++generation_;
    try {
        handshake();
    } catch (...) {
        terminate();
        throw;
    }
}

void Session::terminate() {
    if (to_worker_ >= 0) close(to_worker_);
    to_worker_ = -1;
    if (pid_ > 0) {
        // Closing stdin lets the worker exit on its own; the group kill below
        // also reaps anything the user code spawned.
        for (int i = 0; i < 20; ++i) {
            if (waitpid(pid_, nullptr, WNOHANG) == pid_) {
                pid_ = -1;
                break;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
        }
        if (pid_ > 0) {
            kill(-pid_, SIGKILL);
            kill(pid_, SIGKILL);
            waitpid(pid_, nullptr, 0);
        }
    }
    pid_ = -1;
    if (from_worker_ >= 0) close(from_worker_);
    from_worker_ = -1;
    read_buffer_.clear();
    dead_ = true;
}

std::optional<std::string> Session::read_line(Clock::time_point deadline) {
    for (;;) {
        auto nl = read_buffer_.find('\n');
        if (nl != std::string::npos) {
            std::string line = read_buffer_.substr(0, nl);
            read_buffer_.erase(0, nl + 1);
            return line;
        }
        auto now = Clock::now();
        if (now >= deadline) return std::nullopt;
        auto wait_ms = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count() + 1;
        pollfd pfd{from_worker_, POLLIN, 0};
        int rc = poll(&pfd, 1, static_cast<int>(std::min<long long>(wait_ms, 1000)));
        if (rc < 0) {
            if (errno == EINTR) continue;
            throw WorkerEof{};
        }
        if (rc == 0) continue;
        char chunk[8192];
        ssize_t n = read(from_worker_, chunk, sizeof chunk);
        if (n < 0 && (errno == EINTR || errno == EAGAIN)) continue;
        if (n <= 0) throw WorkerEof{};
        read_buffer_.append(chunk, static_cast<std::size_t>(n));
    }
}

void Session::send_request(const Cell& cell) {
    json request{{"cell_id", cell.cell_id}, {"code", cell.code}};
    if (cell.scope) request["scope"] = *cell.scope;
    if (cell.drop_scope) request["drop_scope"] = true;
    std::string line = request.dump() + "\n";
    std::size_t offset = 0;
    while (offset < line.size()) {
        ssize_t n = write(to_worker_, line.data() + offset, line.size() - offset);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) throw WorkerEof{};
        offset += static_cast<std::size_t>(n);
    }
}

ExecutionResult Session::await_done(const std::string& cell_id, Clock::time_point deadline, bool& timed_out) {
    ExecutionResult result;
    timed_out = false;
    for (;;) {
        auto line = read_line(deadline);
        if (!line) {
            timed_out = true;
            return result;
        }
        json frame = json::parse(*line, nullptr, false);
        if (frame.is_discarded() || !frame.is_object()) continue;
        if (frame.value("cell_id", "") != cell_id) continue;  // left over from an interrupted cell
        if (frame.contains("stream")) {
            const std::string stream = frame.value("stream", "");
            const std::string data = frame.value("data", "");
            if (stream == "stdout") append_capped(result.stdout_text, data, config_.max_output_bytes, result.truncated);
            if (stream == "stderr") append_capped(result.stderr_text, data, config_.max_output_bytes, result.truncated);
            continue;
        }
        if (frame.value("done", false)) {
            if (frame.contains("exception") && frame.at("exception").is_object()) {
                const auto& ex = frame.at("exception");
                result.exception = ExceptionInfo{ex.value("kind", ""), ex.value("message", ""), ex.value("traceback", "")};
            }
            if (frame.contains("files") && frame.at("files").is_array()) {
                result.files = frame.at("files").get<std::vector<std::string>>();
            }
            return result;
        }
    }
}

void Session::handshake() {
    Cell ping{"__ping_" + std::to_string(generation_) + "_" + std::to_string(++ping_counter_), "", CellOrigin::Task};
    try {
        send_request(ping);
        bool timed_out = false;
        await_done(ping.cell_id, deadline_after(config_.handshake_timeout), timed_out);
        if (timed_out) throw Error(ErrorCode::HandshakeTimeout, "worker did not answer the handshake");
    } catch (const WorkerEof&) {
        throw Error(ErrorCode::SpawnFailed, "worker exited during handshake");
    }
}

void Session::ping() {
    std::lock_guard lock(mutex_);
    if (dead_) throw Error(ErrorCode::WorkerCrashed, "worker is not running");
    try {
        handshake();
    } catch (const Error& e) {
        if (e.code() == ErrorCode::SpawnFailed) {
            terminate();
            namespace_lost_ = true;
            throw Error(ErrorCode::WorkerCrashed, e.what());
        }
        throw;
    }
}

ExecutionResult Session::execute(const Cell& cell) {
    std::lock_guard lock(mutex_);
    if (dead_) throw Error(ErrorCode::WorkerCrashed, "worker is not running; reset the session");
    if (cell.cell_id.empty() || !used_cell_ids_.insert(cell.cell_id).second) {
        throw Error(ErrorCode::PreconditionViolation, "cell id '" + cell.cell_id + "' is empty or already used");
    }

    const auto start = Clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(Clock::now() - start).count(); };
    try {
        send_request(cell);
        bool timed_out = false;
        ExecutionResult result = await_done(cell.cell_id, deadline_after(config_.cell_timeout), timed_out);
        if (!timed_out) {
            result.wall_time = elapsed();
            return result;
        }

        kill(pid_, SIGINT);
        bool still_running = false;
        ExecutionResult interrupted = await_done(cell.cell_id, deadline_after(config_.interrupt_grace), still_running);
        result.stdout_text += interrupted.stdout_text;
        result.stderr_text += interrupted.stderr_text;
        result.truncated = result.truncated || interrupted.truncated;
        result.exception = ExceptionInfo{"Timeout", "cell exceeded " + format_seconds(config_.cell_timeout.count()) + " s",
                                         ""};
        result.wall_time = elapsed();
        if (!still_running) throw CellTimeout(std::move(result), false);

        terminate();
        namespace_lost_ = true;
        spawn();
        throw CellTimeout(std::move(result), true);
    } catch (const WorkerEof&) {
        terminate();
        namespace_lost_ = true;
        throw Error(ErrorCode::WorkerCrashed, "worker exited while running cell '" + cell.cell_id + "'");
    }
}

void Session::reset() {
    std::lock_guard lock(mutex_);
    terminate();
    spawn();
    namespace_lost_ = false;
}

bool Session::alive() const {
    std::lock_guard lock(mutex_);
    return !dead_;
}

bool Session::namespace_lost() const {
    std::lock_guard lock(mutex_);
    return namespace_lost_;
}

void Session::acknowledge_namespace_loss() {
    std::lock_guard lock(mutex_);
    namespace_lost_ = false;
}

std::uint64_t Session::generation() const {
    std::lock_guard lock(mutex_);
    return generation_;
}

pid_t Session::worker_pid() const {
    std::lock_guard lock(mutex_);
    return pid_;
}

}  // namespace taskweave
