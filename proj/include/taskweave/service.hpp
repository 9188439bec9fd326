#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskweave/orchestrator.hpp"

namespace taskweave {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    /// 0 picks a free port; read it back with Service::port().
    unsigned short port = 8080;
};

struct HttpReply {
    int status = 200;
    nlohmann::json body;
};

/// Request routing without the socket layer: method, target (path plus
/// query), request body. Errors come back as {"error": {code, message}}.
HttpReply route_request(RunManager& runs, std::string_view method, std::string_view target, std::string_view body);

int http_status_for(ErrorCode code) noexcept;

/// HTTP/1.1 JSON API and WebSocket event stream over a RunManager.
///
///   POST /runs                          body: run config
///   GET  /runs
///   GET  /runs/{id}
///   GET  /runs/{id}/graph
///   GET  /runs/{id}/events?since=N
///   POST /runs/{id}/tasks/{tid}/edit    body: {instruction?, code?, replan?}
///   POST /runs/{id}/resume
///   POST /runs/{id}/abort
///   WS   /runs/{id}/stream?since=N      backlog after N, then live events
class Service {
public:
    Service(ServiceConfig config, std::shared_ptr<RunManager> runs);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Binds and starts accepting. Throws BindFailure.
    void start();
    void stop();
    unsigned short port() const noexcept { return port_; }
    /// Blocks until stop() is called from another thread.
    void wait();

private:
    struct Impl;
    void accept_loop();
    void handle_connection(int fd);

    ServiceConfig config_;
    std::shared_ptr<RunManager> runs_;
    std::unique_ptr<Impl> impl_;
    unsigned short port_ = 0;
    std::atomic<bool> stopping_{false};
    std::thread acceptor_;
    std::mutex conn_mutex_;
    std::set<int> open_fds_;
    std::vector<std::thread> connections_;
};

}  // namespace taskweave
