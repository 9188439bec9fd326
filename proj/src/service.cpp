#include "taskweave/service.hpp"

#include <charconv>

#include <sys/socket.h>

#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

namespace taskweave {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;
using nlohmann::json;

namespace {

struct Target {
    std::vector<std::string> segments;
    std::map<std::string, std::string, std::less<>> query;
};

Target parse_target(std::string_view target) {
    Target t;
    std::string_view path = target;
    std::string_view query;
    if (auto q = target.find('?'); q != std::string_view::npos) {
        path = target.substr(0, q);
        query = target.substr(q + 1);
    }
    std::size_t start = 0;
    while (start <= path.size()) {
        std::size_t end = path.find('/', start);
        if (end == std::string_view::npos) end = path.size();
        if (end > start) t.segments.emplace_back(path.substr(start, end - start));
        start = end + 1;
    }
    while (!query.empty()) {
        std::size_t amp = query.find('&');
        std::string_view pair = query.substr(0, amp);
        std::size_t eq = pair.find('=');
        if (eq == std::string_view::npos) {
            t.query.emplace(std::string(pair), "");
        } else {
            t.query.emplace(std::string(pair.substr(0, eq)), std::string(pair.substr(eq + 1)));
        }
        if (amp == std::string_view::npos) break;
        query.remove_prefix(amp + 1);
    }
    return t;
}

std::uint64_t since_param(const Target& t) {
    auto it = t.query.find("since");
    if (it == t.query.end() || it->second.empty()) return 0;
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
    if (ec != std::errc{} || ptr != it->second.data() + it->second.size()) {
        throw Error(ErrorCode::PreconditionViolation, "since must be a non-negative integer");
    }
    return v;
}

HttpReply error_reply(int status, std::string_view code, std::string_view message) {
    return {status, {{"error", {{"code", code}, {"message", message}}}}};
}

json events_json(const std::vector<RunEvent>& events) {
    json out = json::array();
    for (const auto& e : events) out.push_back(to_json(e));
    return out;
}

json parse_body(std::string_view body) {
    if (body.empty()) return json::object();
    json doc = json::parse(body, nullptr, false);
    if (doc.is_discarded()) throw Error(ErrorCode::PreconditionViolation, "request body is not JSON");
    return doc;
}

}  // namespace

int http_status_for(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::UnknownRun:
    case ErrorCode::UnknownTask: return 404;
    case ErrorCode::RunNotHeld:
    case ErrorCode::IllegalTransition: return 409;
    case ErrorCode::TransportError:
    case ErrorCode::RateLimited:
    case ErrorCode::CassetteExhausted:
    case ErrorCode::PlanGenerationFailed: return 502;
    case ErrorCode::ConfigError:
    case ErrorCode::DomainError:
    case ErrorCode::PreconditionViolation:
    case ErrorCode::MalformedPlan:
    case ErrorCode::LibraryMissing:
    case ErrorCode::MergeProducedCycle: return 400;
    default: return 500;
    }
}

HttpReply route_request(RunManager& runs, std::string_view method, std::string_view target, std::string_view body) {
    try {
        Target t = parse_target(target);
        const auto& seg = t.segments;
        if (seg.empty() || seg[0] != "runs") return error_reply(404, "NotFound", "no such route");

        if (seg.size() == 1) {
            if (method == "GET") {
                json out = json::array();
                for (const auto& run : runs.list()) {
                    json s = run->summary();
                    out.push_back({{"run_id", s["run_id"]}, {"goal", s["goal"]}, {"status", s["status"]}, {"version", s["version"]}});
                }
                return {200, out};
            }
            if (method == "POST") {
                RunConfig config = run_config_from_json(parse_body(body));
                auto run = runs.start(std::move(config));
                return {201, {{"run_id", run->id()}, {"status", to_string(run->status())}, {"version", run->plan().version}}};
            }
            return error_reply(405, "MethodNotAllowed", "use GET or POST");
        }

        auto run = runs.get(seg[1]);
        if (seg.size() == 2 && method == "GET") return {200, run->summary()};
        if (seg.size() == 3 && seg[2] == "graph" && method == "GET") return {200, run->graph_json()};
        if (seg.size() == 3 && seg[2] == "events" && method == "GET") return {200, events_json(run->events(since_param(t)))};
        if (seg.size() == 3 && seg[2] == "resume" && method == "POST") {
            run->resume();
            return {200, {{"run_id", run->id()}, {"status", to_string(run->status())}}};
        }
        if (seg.size() == 3 && seg[2] == "abort" && method == "POST") {
            run->abort();
            return {200, {{"run_id", run->id()}, {"status", to_string(run->status())}}};
        }
        if (seg.size() == 5 && seg[2] == "tasks" && seg[4] == "edit" && method == "POST") {
            json doc = parse_body(body);
            std::optional<std::string> instruction;
            std::optional<std::string> code;
            if (doc.contains("instruction") && !doc["instruction"].is_null()) instruction = doc["instruction"].get<std::string>();
            if (doc.contains("code") && !doc["code"].is_null()) code = doc["code"].get<std::string>();
            if (!instruction && !code) throw Error(ErrorCode::PreconditionViolation, "edit needs instruction or code");
            run->edit(seg[3], instruction, code, doc.value("replan", false));
            return {200, {{"run_id", run->id()}, {"task_id", seg[3]}, {"version", run->plan().version},
                          {"status", to_string(run->status())}}};
        }
        return error_reply(404, "NotFound", "no such route");
    } catch (const Error& e) {
        return error_reply(http_status_for(e.code()), to_string(e.code()), e.what());
    } catch (const json::exception& e) {
        return error_reply(400, "MalformedRequest", e.what());
    }
}

struct Service::Impl {
    net::io_context ioc;
    tcp::acceptor acceptor{ioc};
    tcp protocol = tcp::v4();
};

Service::Service(ServiceConfig config, std::shared_ptr<RunManager> runs)
    : config_(std::move(config)), runs_(std::move(runs)), impl_(std::make_unique<Impl>()) {}

Service::~Service() { stop(); }

void Service::start() {
    boost::system::error_code ec;
    auto address = net::ip::make_address(config_.host, ec);
    if (ec) throw Error(ErrorCode::BindFailure, "bad host '" + config_.host + "': " + ec.message());
    tcp::endpoint endpoint(address, config_.port);
    auto& acceptor = impl_->acceptor;
    impl_->protocol = endpoint.protocol();
    acceptor.open(endpoint.protocol(), ec);
    if (!ec) acceptor.set_option(net::socket_base::reuse_address(true), ec);
    if (!ec) acceptor.bind(endpoint, ec);
    if (!ec) acceptor.listen(net::socket_base::max_listen_connections, ec);
    if (ec) {
        throw Error(ErrorCode::BindFailure, config_.host + ":" + std::to_string(config_.port) + ": " + ec.message());
    }
    port_ = acceptor.local_endpoint().port();
    acceptor_ = std::thread([this] { accept_loop(); });
}

void Service::accept_loop() {
    while (!stopping_) {
        tcp::socket socket(impl_->ioc);
        boost::system::error_code ec;
        impl_->acceptor.accept(socket, ec);
        if (ec) {
            if (stopping_) break;
            continue;
        }
        int fd = socket.release(ec);
        if (ec) continue;
        std::lock_guard lock(conn_mutex_);
        if (stopping_) {
            ::close(fd);
            break;
        }
        open_fds_.insert(fd);
        connections_.emplace_back([this, fd] { handle_connection(fd); });
    }
}

void Service::handle_connection(int fd) {
    tcp::socket socket(impl_->ioc);
    boost::system::error_code ec;
    socket.assign(impl_->protocol, fd, ec);
    auto forget = [&] {
        std::lock_guard lock(conn_mutex_);
        open_fds_.erase(fd);
    };
    if (ec) {
        ::close(fd);
        forget();
        return;
    }

    beast::flat_buffer buffer;
    while (!stopping_) {
        http::request<http::string_body> req;
        http::read(socket, buffer, req, ec);
        if (ec) break;

        if (websocket::is_upgrade(req)) {
            Target t = parse_target(std::string_view(req.target().data(), req.target().size()));
            std::shared_ptr<Run> run;
            std::uint64_t since = 0;
            HttpReply refusal;
            try {
                if (t.segments.size() != 3 || t.segments[0] != "runs" || t.segments[2] != "stream") {
                    throw Error(ErrorCode::UnknownRun, "no stream at this path");
                }
                run = runs_->get(t.segments[1]);
                since = since_param(t);
            } catch (const Error& e) {
                refusal = error_reply(http_status_for(e.code()), to_string(e.code()), e.what());
            }
            if (!run) {
                http::response<http::string_body> res{static_cast<http::status>(refusal.status), req.version()};
                res.set(http::field::content_type, "application/json");
                res.body() = refusal.body.dump();
                res.prepare_payload();
                http::write(socket, res, ec);
                break;
            }
            websocket::stream<tcp::socket> ws(std::move(socket));
            ws.accept(req, ec);
            if (ec) break;
            ws.text(true);
            while (!stopping_) {
                auto events = run->wait_events(since, std::chrono::milliseconds(250));
                for (const auto& e : events) {
                    ws.write(net::buffer(to_json(e).dump()), ec);
                    if (ec) break;
                    since = e.seq;
                }
                if (ec) break;
                if (events.empty() && is_terminal(run->status()) && since >= run->last_seq()) {
                    ws.close(websocket::close_code::normal, ec);
                    break;
                }
            }
            forget();
            return;
        }

        HttpReply reply = route_request(*runs_, std::string_view(req.method_string().data(), req.method_string().size()),
                                        std::string_view(req.target().data(), req.target().size()), req.body());
        http::response<http::string_body> res{static_cast<http::status>(reply.status), req.version()};
        res.set(http::field::content_type, "application/json");
        res.keep_alive(req.keep_alive());
        res.body() = reply.body.dump();
        res.prepare_payload();
        http::write(socket, res, ec);
        if (ec || !req.keep_alive()) break;
    }
    socket.shutdown(tcp::socket::shutdown_both, ec);
    forget();
}

void Service::stop() {
    if (stopping_.exchange(true)) return;
    boost::system::error_code ec;
    if (impl_->acceptor.is_open()) {
        ::shutdown(impl_->acceptor.native_handle(), SHUT_RDWR);
    }
    if (acceptor_.joinable()) acceptor_.join();
    impl_->acceptor.close(ec);
    std::vector<std::thread> threads;
    {
        std::lock_guard lock(conn_mutex_);
        for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
        threads.swap(connections_);
    }
    for (auto& t : threads) {
        if (t.joinable()) t.join();
    }
}

void Service::wait() {
    while (!stopping_) std::this_thread::sleep_for(std::chrono::milliseconds(200));
}

}  // namespace taskweave
