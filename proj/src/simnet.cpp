#include "vcluster/simnet.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include "vcluster/agent.hpp"
#include "vcluster/launcher.hpp"
#include "vcluster/net.hpp"
#include "vcluster/renderer.hpp"

namespace vcluster::sim {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// HostModel

std::string HostModel::allocate() {
    constexpr int kMax = 65534;
    if (live_count() >= kMax)
        throw SubnetExhausted("subnet 10." + std::to_string(host_id_) + ".0.0/16 is full");
    int n;
    if (!released_.empty()) {
        n = *released_.begin(); // lowest free wins
        released_.erase(released_.begin());
    } else {
        n = ++high_water_;
    }
    return "10." + std::to_string(host_id_) + "." + std::to_string(n / 256) + "." +
           std::to_string(n % 256);
}

void HostModel::release(const std::string& address) {
    auto ip = net::parse_ipv4(address);
    if (!ip) return;
    if (int((*ip >> 16) & 0xff) != host_id_ || int(*ip >> 24) != 10) return;
    int n = int(*ip & 0xffff);
    if (n >= 1 && n <= high_water_) released_.insert(n);
}

bool HostModel::owns(const std::string& address) const {
    auto ip = net::parse_ipv4(address);
    return ip && int(*ip >> 24) == 10 && int((*ip >> 16) & 0xff) == host_id_;
}

// ---------------------------------------------------------------------------
// Process helpers

pid_t spawn_process(const std::vector<std::string>& argv,
                    const std::filesystem::path& log_path) {
    std::vector<char*> cargv;
    std::vector<std::string> copy = argv;
    for (auto& s : copy) cargv.push_back(s.data());
    cargv.push_back(nullptr);

    pid_t pid = ::fork();
    if (pid < 0) throw std::runtime_error("fork failed");
    if (pid == 0) {
        int null_fd = ::open("/dev/null", O_RDONLY);
        if (null_fd >= 0) ::dup2(null_fd, STDIN_FILENO);
        int log_fd = ::open(log_path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
        if (log_fd >= 0) {
            ::dup2(log_fd, STDOUT_FILENO);
            ::dup2(log_fd, STDERR_FILENO);
        }
        ::execv(cargv[0], cargv.data());
        ::perror("execv");
        ::_exit(127);
    }
    return pid;
}

void terminate_process(pid_t pid, int grace_ms) {
    if (pid <= 0) return;
    ::kill(pid, SIGTERM);
    auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(grace_ms);
    for (;;) {
        int status = 0;
        pid_t r = ::waitpid(pid, &status, WNOHANG);
        if (r == pid || r < 0) return;
        if (std::chrono::steady_clock::now() >= deadline) {
            ::kill(pid, SIGKILL);
            ::waitpid(pid, &status, 0);
            return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
}

bool port_free(uint16_t port) {
    try {
        net::TcpListener::bind({"127.0.0.1", port});
        return true;
    } catch (const net::BindError&) {
        return false;
    }
}

namespace {

std::string self_exe() {
    char buf[4096];
    ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
    if (n <= 0) throw std::runtime_error("cannot resolve /proc/self/exe");
    buf[n] = '\0';
    return buf;
}

std::filesystem::path fresh_workdir() {
    auto base = std::filesystem::temp_directory_path() / "vcluster-sim-XXXXXX";
    std::string tmpl = base.string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    return tmpl;
}

std::string node_name(int number) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "node%02d", number);
    return buf;
}

bool process_alive(pid_t pid) {
    if (pid <= 0) return false;
    int status = 0;
    pid_t r = ::waitpid(pid, &status, WNOHANG);
    return r == 0;
}

} // namespace

// ---------------------------------------------------------------------------
// SimCluster

SimCluster SimCluster::spawn(SimOptions opts) {
    if (opts.n_hosts < 1) throw std::invalid_argument("n_hosts must be >= 1");
    if (opts.agents_per_host < 0) throw std::invalid_argument("agents_per_host must be >= 0");
    if (opts.slots < 1) throw std::invalid_argument("slots must be >= 1");
    if (opts.clusterctl_bin.empty()) opts.clusterctl_bin = self_exe();

    SimCluster sim;
    sim.opts_ = opts;
    sim.workdir_ = opts.workdir.empty() ? fresh_workdir() : opts.workdir;
    std::filesystem::create_directories(sim.workdir_);

    int total = opts.n_hosts * opts.agents_per_host;
    if (!port_free(static_cast<uint16_t>(opts.base_port)))
        throw PortExhausted("registry port " + std::to_string(opts.base_port) + " is busy");
    for (int k = 0; k < total; ++k) {
        int port = opts.base_port + 2 + k; // nodeNN listens on base+NN
        if (!port_free(static_cast<uint16_t>(port)))
            throw PortExhausted("agent port " + std::to_string(port) + " is busy");
    }

    std::vector<std::string> registry_argv{opts.clusterctl_bin, "registry", "--bind", "127.0.0.1",
                                           "--port", std::to_string(opts.base_port)};
    if (opts.mock_clock) registry_argv.push_back("--mock-clock");
    sim.registry_pid_ = spawn_process(registry_argv, sim.workdir_ / "registry.log");

    // registry must answer before agents try to register
    {
        auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::milliseconds(opts.startup_timeout_ms);
        for (;;) {
            try {
                registry::Client probe(sim.registry_addr());
                probe.catalog(opts.service, true, 0, 0);
                break;
            } catch (const std::exception&) {
                if (!process_alive(sim.registry_pid_)) {
                    sim.registry_pid_ = -1;
                    throw StartupTimeout("registry process died during startup; see " +
                                         (sim.workdir_ / "registry.log").string());
                }
                if (std::chrono::steady_clock::now() >= deadline)
                    throw StartupTimeout("registry did not answer within " +
                                         std::to_string(opts.startup_timeout_ms) + " ms");
                std::this_thread::sleep_for(std::chrono::milliseconds(25));
            }
        }
    }

    for (int h = 0; h < opts.n_hosts; ++h) sim.hosts_.emplace_back(2 + h);

    std::vector<std::string> spawned;
    for (int h = 0; h < opts.n_hosts; ++h) {
        for (int a = 0; a < opts.agents_per_host; ++a) {
            auto handle = sim.spawn_agent(h, sim.next_node_number_++);
            spawned.push_back(handle.node_id);
            sim.agents_.push_back(std::move(handle));
        }
    }
    sim.await_registered(spawned, opts.startup_timeout_ms);
    return sim;
}

AgentHandle SimCluster::spawn_agent(int host_index, int node_number) {
    AgentHandle handle;
    handle.node_id = node_name(node_number);
    handle.host_id = hosts_[static_cast<size_t>(host_index)].host_id();
    handle.logical_address = hosts_[static_cast<size_t>(host_index)].allocate();
    handle.exec_port = static_cast<uint16_t>(opts_.base_port + node_number);
    handle.spawn_order = node_number;

    agent::NodeSpec spec;
    spec.node_id = handle.node_id;
    spec.service_name = opts_.service;
    spec.slots = opts_.slots;
    spec.ttl_s = opts_.ttl_s;
    spec.heartbeat_interval_s = opts_.ttl_s / 3.0;
    spec.registry_addr = registry_addr();
    spec.listen_addr = "127.0.0.1:" + std::to_string(handle.exec_port);
    spec.logical_address = handle.logical_address;
    spec.exec_allow = opts_.exec_allow;

    auto spec_path = workdir_ / (handle.node_id + ".spec");
    {
        std::ofstream out(spec_path, std::ios::trunc);
        out << agent::to_text(spec);
    }
    handle.pid = spawn_process({opts_.clusterctl_bin, "agent", "--spec", spec_path.string()},
                               workdir_ / (handle.node_id + ".log"));
    handle.alive = true;
    return handle;
}

void SimCluster::await_registered(const std::vector<std::string>& node_ids, int budget_ms) {
    auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(budget_ms);
    registry::Client client(registry_addr());
    for (;;) {
        std::set<std::string> present;
        try {
            auto snap = client.catalog(opts_.service, /*passing_only=*/true, 0, 0);
            for (const auto& inst : snap.instances) present.insert(inst.node_id);
        } catch (const std::exception&) {
            // registry hiccup: retry until the deadline
        }
        std::vector<std::string> missing;
        for (const auto& id : node_ids)
            if (!present.count(id)) missing.push_back(id);
        if (missing.empty()) return;
        if (std::chrono::steady_clock::now() >= deadline) {
            std::string detail;
            for (const auto& id : missing) {
                detail += " " + id;
                for (const auto& a : agents_)
                    if (a.node_id == id && !process_alive(a.pid)) detail += "(process died)";
            }
            throw StartupTimeout("agents absent from catalog after " + std::to_string(budget_ms) +
                                 " ms:" + detail + "; logs in " + workdir_.string());
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(40));
    }
}

std::string SimCluster::registry_addr() const {
    return "127.0.0.1:" + std::to_string(opts_.base_port);
}

std::vector<AgentHandle> SimCluster::live_agents() const {
    std::vector<AgentHandle> out;
    for (const auto& a : agents_)
        if (a.alive) out.push_back(a);
    return out;
}

registry::Snapshot SimCluster::catalog(bool passing_only) const {
    registry::Client client(registry_addr());
    return client.catalog(opts_.service, passing_only, 0, 0);
}

std::vector<std::string> SimCluster::scale(int delta) {
    if (delta == 0) throw std::invalid_argument("delta must be nonzero");
    std::vector<std::string> affected;
    if (delta > 0) {
        for (int i = 0; i < delta; ++i) {
            int host_id = hosts_.empty() ? 2 : hosts_.back().host_id() + 1;
            hosts_.emplace_back(host_id); // a freshly powered-up machine
            int node_number = next_node_number_++;
            int port = opts_.base_port + node_number;
            if (!port_free(static_cast<uint16_t>(port)))
                throw PortExhausted("agent port " + std::to_string(port) + " is busy");
            auto handle = spawn_agent(static_cast<int>(hosts_.size()) - 1, node_number);
            affected.push_back(handle.node_id);
            agents_.push_back(std::move(handle));
        }
        await_registered(affected, opts_.startup_timeout_ms);
        return affected;
    }

    int to_remove = -delta;
    auto live = live_agents();
    if (to_remove > static_cast<int>(live.size()))
        throw NothingToRemove("asked to remove " + std::to_string(to_remove) + " agents, only " +
                              std::to_string(live.size()) + " live");
    for (int i = 0; i < to_remove; ++i) {
        // newest first
        AgentHandle* newest = nullptr;
        for (auto& a : agents_)
            if (a.alive && (!newest || a.spawn_order > newest->spawn_order)) newest = &a;
        kill_agent(newest->node_id, /*graceful=*/true);
        affected.push_back(newest->node_id);
    }
    return affected;
}

void SimCluster::kill_agent(const std::string& node_id, bool graceful) {
    AgentHandle* handle = nullptr;
    for (auto& a : agents_)
        if (a.node_id == node_id && a.alive) handle = &a;
    if (!handle) throw UnknownNode(node_id + " is not a live agent");

    if (graceful) {
        terminate_process(handle->pid, 5000); // SIGTERM path deregisters
        for (auto& h : hosts_)
            if (h.host_id() == handle->host_id) h.release(handle->logical_address);
    } else {
        ::kill(handle->pid, SIGKILL);
        int status = 0;
        ::waitpid(handle->pid, &status, 0);
        // address stays allocated: the catalog still references it until expiry
    }
    handle->alive = false;
}

void SimCluster::shutdown() {
    if (torn_down_) return;
    torn_down_ = true;
    for (auto& a : agents_) {
        if (!a.alive) continue;
        ::kill(a.pid, SIGTERM);
    }
    for (auto& a : agents_) {
        if (!a.alive) continue;
        terminate_process(a.pid, 2000);
        a.alive = false;
    }
    if (registry_pid_ > 0) {
        terminate_process(registry_pid_, 2000);
        registry_pid_ = -1;
    }
}

SimCluster::~SimCluster() { shutdown(); }

SimCluster::SimCluster(SimCluster&& o) noexcept
    : opts_(std::move(o.opts_)),
      workdir_(std::move(o.workdir_)),
      registry_pid_(o.registry_pid_),
      hosts_(std::move(o.hosts_)),
      agents_(std::move(o.agents_)),
      next_node_number_(o.next_node_number_),
      torn_down_(o.torn_down_) {
    o.registry_pid_ = -1;
    o.agents_.clear();
    o.torn_down_ = true;
}

// ---------------------------------------------------------------------------
// Scenario

namespace {

const std::set<std::string>& known_ops() {
    static const std::set<std::string> ops{"spawn",           "render", "scale",
                                           "kill",            "run_job", "assert_hostfile",
                                           "assert_catalog",  "sleep",   "advance"};
    return ops;
}

} // namespace

Scenario parse_scenario(const json& doc) {
    if (!doc.is_array()) throw ScenarioParseError("scenario must be a JSON array of steps");
    Scenario scenario;
    int i = 0;
    for (const auto& item : doc) {
        ++i;
        if (!item.is_object())
            throw ScenarioParseError("step " + std::to_string(i) + " is not an object");
        ScenarioStep step;
        if (!item.contains("op") || !item["op"].is_string())
            throw ScenarioParseError("step " + std::to_string(i) + " lacks an op");
        step.op = item["op"].get<std::string>();
        if (!known_ops().count(step.op))
            throw ScenarioParseError("step " + std::to_string(i) + ": unknown op '" + step.op + "'");
        if (item.contains("at_ms")) {
            if (!item["at_ms"].is_number_integer() || item["at_ms"].get<int64_t>() < 0)
                throw ScenarioParseError("step " + std::to_string(i) + ": at_ms must be >= 0");
            step.at_ms = item["at_ms"].get<int64_t>();
        }
        step.params = item;
        scenario.steps.push_back(std::move(step));
    }
    return scenario;
}

Scenario parse_scenario_text(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ScenarioParseError(std::string("bad scenario JSON: ") + e.what());
    }
    return parse_scenario(doc);
}

nlohmann::ordered_json report_to_json(const ScenarioReport& report) {
    ordered_json out;
    out["seed"] = report.seed;
    out["wall_ms"] = report.wall_ms;
    out["assertions"] = {{"passed", report.assertions_passed},
                         {"failed", report.assertions_failed}};
    out["events"] = ordered_json::array();
    for (const auto& e : report.events) {
        ordered_json ev;
        if (e.at_ms >= 0) ev["at_ms"] = e.at_ms;
        ev["op"] = e.op;
        ev["ok"] = e.ok;
        if (!e.detail.empty()) ev["detail"] = e.detail;
        out["events"].push_back(std::move(ev));
    }
    return out;
}

namespace {

std::string replace_all(std::string text, const std::string& needle, const std::string& value) {
    size_t pos = 0;
    while ((pos = text.find(needle, pos)) != std::string::npos) {
        text.replace(pos, needle.size(), value);
        pos += value.size();
    }
    return text;
}

// Mutable state threaded through scenario execution.
struct ScenarioContext {
    ScenarioRunOptions opts;
    std::filesystem::path workdir;
    std::optional<SimCluster> cluster;
    std::vector<pid_t> renderers;
    std::filesystem::path default_hostfile;
    ScenarioReport report;

    void record(const ScenarioStep& step, bool ok, std::string detail) {
        report.events.push_back({step.at_ms, step.op, ok, std::move(detail)});
    }
    void record_assertion(const ScenarioStep& step, bool ok, std::string detail) {
        (ok ? report.assertions_passed : report.assertions_failed)++;
        record(step, ok, std::move(detail));
    }
};

std::optional<std::string> read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int count_lines(const std::string& text) {
    int lines = 0;
    for (char c : text)
        if (c == '\n') ++lines;
    if (!text.empty() && text.back() != '\n') ++lines;
    return lines;
}

// live addresses must stay unique and inside their host's subnet
void check_address_invariants(ScenarioContext& ctx, const ScenarioStep& step) {
    if (!ctx.cluster) return;
    std::set<std::string> seen;
    for (const auto& a : ctx.cluster->live_agents()) {
        if (!seen.insert(a.logical_address).second) {
            ctx.record_assertion(step, false,
                                 "invariant: duplicate live address " + a.logical_address);
            return;
        }
        auto ip = net::parse_ipv4(a.logical_address);
        if (!ip || int((*ip >> 16) & 0xff) != a.host_id) {
            ctx.record_assertion(step, false,
                                 "invariant: " + a.logical_address + " outside host subnet 10." +
                                     std::to_string(a.host_id) + ".0.0/16");
            return;
        }
    }
}

void do_spawn(ScenarioContext& ctx, const ScenarioStep& step) {
    if (ctx.cluster) {
        ctx.record(step, false, "cluster already spawned");
        return;
    }
    SimOptions so;
    so.n_hosts = step.params.value("hosts", 2);
    so.agents_per_host = step.params.value("agents_per_host", 1);
    so.slots = step.params.value("slots", 12);
    so.base_port = step.params.value("base_port", 7100);
    so.ttl_s = step.params.value("ttl_s", 15);
    so.service = step.params.value("service", "hpc");
    so.mock_clock = ctx.opts.mock_clock;
    so.clusterctl_bin = ctx.opts.clusterctl_bin;
    so.workdir = ctx.workdir / "cluster";
    ctx.cluster.emplace(SimCluster::spawn(std::move(so)));
    ctx.record(step, true,
               std::to_string(ctx.cluster->live_agents().size()) + " agents registered");
}

void do_render(ScenarioContext& ctx, const ScenarioStep& step) {
    if (!ctx.cluster) {
        ctx.record(step, false, "no cluster");
        return;
    }
    std::filesystem::path out = step.params.contains("out")
                                    ? ctx.workdir / step.params["out"].get<std::string>()
                                    : ctx.default_hostfile;
    std::filesystem::path tmpl = ctx.workdir / "hostfile.tmpl";
    if (step.params.contains("template_text")) {
        std::ofstream t(tmpl, std::ios::trunc | std::ios::binary);
        t << step.params["template_text"].get<std::string>();
    } else if (step.params.contains("template")) {
        tmpl = step.params["template"].get<std::string>();
    } else {
        std::ofstream t(tmpl, std::ios::trunc | std::ios::binary);
        t << "%{each " << ctx.cluster->options().service << "}%{address}\n%{end}";
    }
    int wait_ms = step.params.value("wait_ms", 1000);
    std::vector<std::string> argv{ctx.opts.clusterctl_bin,
                                  "render",
                                  "--registry",
                                  ctx.cluster->registry_addr(),
                                  "--service",
                                  ctx.cluster->options().service,
                                  "--template",
                                  tmpl.string(),
                                  "--out",
                                  out.string(),
                                  "--watch",
                                  "--wait-ms",
                                  std::to_string(wait_ms)};
    if (step.params.contains("trigger")) {
        argv.push_back("--exec");
        argv.push_back(replace_all(step.params["trigger"].get<std::string>(), "{workdir}",
                                   ctx.workdir.string()));
    }
    pid_t pid = spawn_process(argv, ctx.workdir / "renderer.log");
    ctx.renderers.push_back(pid);
    ctx.record(step, true, "watching -> " + out.filename().string());
}

void do_scale(ScenarioContext& ctx, const ScenarioStep& step) {
    if (!ctx.cluster) {
        ctx.record(step, false, "no cluster");
        return;
    }
    int delta = step.params.value("delta", 0);
    try {
        auto affected = ctx.cluster->scale(delta);
        std::string names;
        for (const auto& n : affected) names += n + " ";
        ctx.record(step, true, names);
    } catch (const std::exception& e) {
        ctx.record(step, false, e.what());
    }
}

void do_kill(ScenarioContext& ctx, const ScenarioStep& step) {
    if (!ctx.cluster) {
        ctx.record(step, false, "no cluster");
        return;
    }
    try {
        ctx.cluster->kill_agent(step.params.value("node", ""), step.params.value("graceful", false));
        ctx.record(step, true, step.params.value("node", ""));
    } catch (const std::exception& e) {
        ctx.record(step, false, e.what());
    }
}

void do_run_job(ScenarioContext& ctx, const ScenarioStep& step) {
    if (!ctx.cluster) {
        ctx.record(step, false, "no cluster");
        return;
    }
    std::filesystem::path hostfile_path = step.params.contains("hostfile")
                                              ? ctx.workdir / step.params["hostfile"].get<std::string>()
                                              : ctx.default_hostfile;
    auto bytes = read_file(hostfile_path);
    if (!bytes) {
        ctx.record(step, false, "hostfile missing: " + hostfile_path.string());
        return;
    }
    try {
        launch::JobSpec js;
        js.np = step.params.value("np", 1);
        js.cmd = step.params.value("cmd", "");
        if (step.params.contains("args"))
            for (const auto& a : step.params["args"]) js.args.push_back(a.get<std::string>());
        js.map_by = launch::map_by_from_string(step.params.value("map_by", "slot"))
                        .value_or(launch::MapBy::slot);
        js.oversubscribe = step.params.value("oversubscribe", false);
        js.slots_from_registry = step.params.value("slots_from_registry", true);
        js.timeout_s = step.params.value("timeout_s", 60);
        js.service = ctx.cluster->options().service;

        auto result = launch::run_job(js, launch::parse_hostfile(*bytes),
                                      ctx.cluster->registry_addr());

        int total_stdout = 0;
        for (const auto& r : result.per_rank) total_stdout += int(r.stdout_lines.size());
        std::string detail = "job_exit=" + std::to_string(result.job_exit) +
                             " stdout_lines=" + std::to_string(total_stdout);

        bool has_expectations = false;
        bool ok = true;
        if (step.params.contains("expect_exit")) {
            has_expectations = true;
            ok = ok && result.job_exit == step.params["expect_exit"].get<int>();
        }
        if (step.params.contains("expect_stdout_lines")) {
            has_expectations = true;
            ok = ok && total_stdout == step.params["expect_stdout_lines"].get<int>();
        }
        if (step.params.contains("expect_node_counts")) {
            has_expectations = true;
            for (const auto& [node, want] : step.params["expect_node_counts"].items()) {
                int count = 0;
                for (const auto& r : result.per_rank)
                    for (const auto& l : r.stdout_lines)
                        if (l.find("host " + node) != std::string::npos) ++count;
                if (count != want.get<int>()) {
                    ok = false;
                    detail += " " + node + "=" + std::to_string(count);
                }
            }
        }
        if (has_expectations)
            ctx.record_assertion(step, ok, detail);
        else
            ctx.record(step, true, detail);
    } catch (const std::exception& e) {
        if (step.params.contains("expect_exit") || step.params.contains("expect_stdout_lines") ||
            step.params.contains("expect_node_counts"))
            ctx.record_assertion(step, false, e.what());
        else
            ctx.record(step, false, e.what());
    }
}

void do_assert_hostfile(ScenarioContext& ctx, const ScenarioStep& step) {
    std::filesystem::path path = step.params.contains("path")
                                     ? ctx.workdir / step.params["path"].get<std::string>()
                                     : ctx.default_hostfile;
    int budget = step.params.value("within_ms", 3000);
    auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(budget);
    std::string last;
    for (;;) {
        auto content = read_file(path);
        last = content.value_or("<missing>");
        bool ok = content.has_value();
        if (ok && step.params.contains("lines")) {
            std::string want;
            for (const auto& l : step.params["lines"]) want += l.get<std::string>() + "\n";
            ok = *content == want;
        }
        if (ok && step.params.contains("line_count"))
            ok = count_lines(*content) == step.params["line_count"].get<int>();
        if (ok) {
            ctx.record_assertion(step, true, path.filename().string());
            return;
        }
        if (std::chrono::steady_clock::now() >= deadline) {
            ctx.record_assertion(step, false, "hostfile state: " + last);
            return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(30));
    }
}

void do_assert_catalog(ScenarioContext& ctx, const ScenarioStep& step) {
    if (!ctx.cluster) {
        ctx.record_assertion(step, false, "no cluster");
        return;
    }
    int budget = step.params.value("within_ms", 3000);
    auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(budget);
    std::string detail;
    for (;;) {
        int passing = 0, critical = 0;
        bool ok = true;
        try {
            auto snap = ctx.cluster->catalog(false);
            for (const auto& inst : snap.instances)
                (inst.health == registry::Health::passing ? passing : critical)++;
        } catch (const std::exception& e) {
            ok = false;
            detail = e.what();
        }
        if (ok && step.params.contains("passing"))
            ok = passing == step.params["passing"].get<int>();
        if (ok && step.params.contains("critical"))
            ok = critical == step.params["critical"].get<int>();
        if (ok && step.params.contains("total"))
            ok = passing + critical == step.params["total"].get<int>();
        if (ok) {
            ctx.record_assertion(step, true,
                                 "passing=" + std::to_string(passing) +
                                     " critical=" + std::to_string(critical));
            return;
        }
        detail = "passing=" + std::to_string(passing) + " critical=" + std::to_string(critical);
        if (std::chrono::steady_clock::now() >= deadline) {
            ctx.record_assertion(step, false, detail);
            return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(30));
    }
}

void do_advance(ScenarioContext& ctx, const ScenarioStep& step) {
    if (!ctx.cluster) {
        ctx.record(step, false, "no cluster");
        return;
    }
    if (!ctx.opts.mock_clock) {
        ctx.record(step, false, "advance requires --mock-clock");
        return;
    }
    int64_t total = step.params.value("ms", 0);
    int64_t step_ms = step.params.value("step_ms", 1000);
    // real pause between virtual steps so live agents can heartbeat
    int settle_ms = step.params.value("settle_ms", 0);
    try {
        registry::Client client(ctx.cluster->registry_addr());
        int64_t advanced = 0;
        while (advanced < total) {
            int64_t chunk = std::min(step_ms, total - advanced);
            client.advance_ms(chunk);
            advanced += chunk;
            if (settle_ms > 0 && advanced < total)
                std::this_thread::sleep_for(std::chrono::milliseconds(settle_ms));
        }
        ctx.record(step, true, "virtual now " + std::to_string(client.now_ms()) + " ms");
    } catch (const std::exception& e) {
        ctx.record(step, false, e.what());
    }
}

} // namespace

ScenarioReport run_scenario(const Scenario& scenario, const ScenarioRunOptions& opts) {
    ScenarioContext ctx;
    ctx.opts = opts;
    if (ctx.opts.clusterctl_bin.empty()) ctx.opts.clusterctl_bin = self_exe();
    ctx.workdir = opts.workdir.empty() ? fresh_workdir() : opts.workdir;
    std::filesystem::create_directories(ctx.workdir);
    ctx.default_hostfile = ctx.workdir / "hostfile";
    ctx.report.seed = opts.seed;

    auto t0 = std::chrono::steady_clock::now();
    for (const auto& step : scenario.steps) {
        if (step.at_ms >= 0) {
            auto target = t0 + std::chrono::milliseconds(step.at_ms);
            auto now = std::chrono::steady_clock::now();
            if (target > now) std::this_thread::sleep_for(target - now);
        }
        if (step.op == "spawn") do_spawn(ctx, step);
        else if (step.op == "render") do_render(ctx, step);
        else if (step.op == "scale") do_scale(ctx, step);
        else if (step.op == "kill") do_kill(ctx, step);
        else if (step.op == "run_job") do_run_job(ctx, step);
        else if (step.op == "assert_hostfile") do_assert_hostfile(ctx, step);
        else if (step.op == "assert_catalog") do_assert_catalog(ctx, step);
        else if (step.op == "sleep") {
            std::this_thread::sleep_for(std::chrono::milliseconds(step.params.value("ms", 0)));
            ctx.record(step, true, "");
        } else if (step.op == "advance") do_advance(ctx, step);
        check_address_invariants(ctx, step);
    }

    for (pid_t pid : ctx.renderers) terminate_process(pid, 2000);
    if (ctx.cluster) ctx.cluster->shutdown();
    ctx.report.wall_ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0)
            .count();
    return ctx.report;
}

} // namespace vcluster::sim
