#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "taskweave/bench_metrics.hpp"
#include "taskweave/orchestrator.hpp"
#include "taskweave/service.hpp"
#include "taskweave/tool_registry.hpp"

using namespace taskweave;
using nlohmann::json;

namespace {

sigset_t block_stop_signals() {
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
    return set;
}

void wait_for_stop_signal(const sigset_t& set) {
    int sig = 0;
    sigwait(&set, &sig);
}

int exit_code_for(RunStatus status) {
    switch (status) {
    case RunStatus::Completed: return 0;
    case RunStatus::AwaitingHuman: return 2;
    default: return 1;
    }
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot read " + path);
    return json::parse(in);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"taskweave: plan, code and verify data-analysis goals with an LLM"};
    app.require_subcommand(1);

    RunConfig cfg;
    std::string backend = "http";
    std::string on_failure = "replan";
    std::string tool_lib;
    std::string pool;
    std::string workdir;
    std::string runs_dir = "runs";
    std::string interpreter;
    std::string base_url;
    std::string model;
    bool serve_run = false;
    std::string host = "127.0.0.1";
    unsigned short port = 8080;

    auto* run = app.add_subcommand("run", "Work one goal to completion");
    run->add_option("--goal", cfg.goal, "Goal in natural language")->required();
    run->add_option("--backend", backend, "http or cassette:<file>");
    run->add_option("--base-url", base_url, "Chat-completions server for the http backend");
    run->add_option("--model", model, "Model name for the http backend");
    run->add_option("--acv-n", cfg.acv_n, "Verification trials per answer-bearing task")->check(CLI::PositiveNumber);
    run->add_option("--max-debug-attempts", cfg.max_debug_attempts, "Self-debug rounds per task")->check(CLI::NonNegativeNumber);
    run->add_option("--max-replans", cfg.max_replans, "Plan refinements per run")->check(CLI::NonNegativeNumber);
    run->add_option("--on-failure", on_failure, "replan, hold_for_human or abort")
        ->check(CLI::IsMember({"replan", "hold_for_human", "abort"}));
    run->add_option("--tool-lib", tool_lib, "Tool library directory");
    run->add_option("--experience-pool", pool, "Experience pool file (JSONL)");
    run->add_option("--experience-k", cfg.experience_k, "Experiences retrieved per task");
    run->add_option("--workdir", workdir, "Working directory for generated code");
    run->add_option("--runs-dir", runs_dir, "Where run records are written");
    run->add_option("--interpreter-cmd", interpreter, "Worker command line");
    run->add_option("--cell-timeout", cfg.cell_timeout, "Seconds per cell");
    run->add_flag("--evolve-tools", cfg.evolve_tools, "Distill successful tasks into library tools");
    run->add_flag("--serve", serve_run, "Keep serving the HTTP/WS API for this run");
    run->add_option("--host", host, "API bind address");
    run->add_option("--port", port, "API port");

    auto* serve = app.add_subcommand("serve", "Serve the HTTP/WS API");
    serve->add_option("--runs-dir", runs_dir, "Where run records are written");
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--port", port, "Port (0 picks one)");

    auto* tools = app.add_subcommand("tools", "Inspect a tool library");
    tools->require_subcommand(1);
    std::string lib_dir = (data_dir() / "tools").string();
    auto* tools_list = tools->add_subcommand("list", "List tools and schema diagnostics");
    tools_list->add_option("--tool-lib", lib_dir, "Tool library directory");
    std::string show_name;
    auto* tools_show = tools->add_subcommand("show", "Print a tool's schema");
    tools_show->add_option("name", show_name)->required();
    tools_show->add_option("--tool-lib", lib_dir, "Tool library directory");

    std::string rubric_path;
    std::string results_path;
    std::string out_prefix = "report";
    auto* score = app.add_subcommand("score", "Score benchmark results against rubrics");
    score->add_option("--rubric", rubric_path, "Rubric JSON")->required();
    score->add_option("--results", results_path, "Results JSON")->required();
    score->add_option("--out", out_prefix, "Report prefix; writes <prefix>.json and <prefix>.csv");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            cfg.backend = parse_backend_spec(backend);
            if (!base_url.empty()) cfg.backend.http.base_url = base_url;
            if (!model.empty()) cfg.backend.http.model = model;
            cfg.on_failure = on_failure_from_string(on_failure);
            cfg.tool_lib = tool_lib;
            cfg.experience_pool = pool;
            cfg.workdir = workdir;
            cfg.runs_dir = runs_dir;
            if (!interpreter.empty()) cfg.interpreter_cmd = split_command_line(interpreter);

            if (serve_run) {
                auto signals = block_stop_signals();
                auto manager = std::make_shared<RunManager>(runs_dir);
                Service service({host, port}, manager);
                service.start();
                auto r = manager->start(cfg);
                std::cout << "run " << r->id() << " serving on http://" << host << ":" << service.port() << std::endl;
                wait_for_stop_signal(signals);
                service.stop();
                manager->shutdown();
                return exit_code_for(r->status());
            }

            auto r = Run::create(cfg);
            std::cerr << "run " << r->id() << " in " << r->dir().string() << "\n";
            RunStatus status = r->drive();
            std::cout << r->summary().dump(2) << std::endl;
            return exit_code_for(status);
        }

        if (*serve) {
            auto signals = block_stop_signals();
            auto manager = std::make_shared<RunManager>(runs_dir);
            Service service({host, port}, manager);
            service.start();
            std::cout << "serving on http://" << host << ":" << service.port() << std::endl;
            wait_for_stop_signal(signals);
            service.stop();
            manager->shutdown();
            return 0;
        }

        if (*tools_list) {
            auto lib = ToolLibrary::load(lib_dir);
            for (const auto& t : lib.records()) {
                std::cout << t.name << "\t" << t.module_path << "\t" << t.schema.description << "\n";
            }
            for (const auto& d : lib.diagnostics()) std::cerr << "warning: " << d << "\n";
            return 0;
        }

        if (*tools_show) {
            auto lib = ToolLibrary::load(lib_dir);
            const ToolRecord* t = lib.find(show_name);
            if (t == nullptr) {
                std::cerr << "no tool named " << show_name << "\n";
                return 1;
            }
            std::cout << write_tool_schema(t->schema, t->name);
            return 0;
        }

        if (*score) {
            auto rubrics = bench::parse_rubrics(read_json_file(rubric_path));
            auto reports = bench::score_results(rubrics, read_json_file(results_path));
            auto files = bench::emit_report(reports, out_prefix);
            std::cout << bench::report_csv(reports);
            std::cerr << "wrote " << files.json.string() << " and " << files.csv.string() << "\n";
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
