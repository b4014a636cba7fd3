#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "vcluster/agent.hpp"
#include "vcluster/launcher.hpp"
#include "vcluster/net.hpp"
#include "vcluster/registry.hpp"
#include "vcluster/renderer.hpp"
#include "vcluster/simnet.hpp"

using namespace vcluster;

namespace {

volatile std::sig_atomic_t g_signal = 0;

void on_signal(int sig) { g_signal = sig; }

void install_signal_handlers() {
    std::signal(SIGTERM, on_signal);
    std::signal(SIGINT, on_signal);
}

void wait_for_signal() {
    while (g_signal == 0) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int cmd_registry(const std::string& bind, int port, int sweep_ms, bool mock) {
    registry::Server server({bind, static_cast<uint16_t>(port), sweep_ms, mock});
    server.start();
    std::cerr << "registry listening on " << bind << ":" << server.port()
              << (mock ? " (mock clock)" : "") << "\n";
    install_signal_handlers();
    wait_for_signal();
    server.stop();
    return 0;
}

int cmd_agent(const std::string& spec_path) {
    auto spec = agent::load_nodespec_file(spec_path);
    agent::Agent node(spec);
    node.start();
    std::cerr << "agent " << spec.node_id << " (" << spec.logical_address << ") exec on "
              << node.endpoint() << "\n";
    install_signal_handlers();
    wait_for_signal();
    node.shutdown(/*graceful=*/true);
    return 0;
}

int cmd_render(const std::string& registry_addr, const std::string& service,
               const std::string& template_path, const std::string& out_path, bool watch,
               int wait_ms, const std::string& trigger, uint64_t max_cycles) {
    auto tmpl = render::parse_template(slurp(template_path));
    if (!watch) {
        std::string bytes = render::render_once(tmpl, registry_addr, service);
        if (out_path.empty()) {
            std::cout << bytes;
        } else {
            render::atomic_write(out_path, bytes);
        }
        return 0;
    }
    if (out_path.empty()) throw std::runtime_error("--watch requires --out");
    render::WatchOptions wo;
    wo.registry_addr = registry_addr;
    wo.service = service;
    wo.out_path = out_path;
    wo.trigger_cmd = trigger;
    wo.wait_ms = wait_ms;
    wo.max_cycles = max_cycles;
    render::Watcher watcher(std::move(tmpl), std::move(wo));
    install_signal_handlers();
    std::thread runner([&] { watcher.run(); });
    while (g_signal == 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
        if (max_cycles != 0 && watcher.stats().cycles >= max_cycles) break;
    }
    watcher.stop();
    runner.join();
    return 0;
}

int cmd_run(const std::string& registry_addr, const std::string& hostfile_path, int np,
            const std::string& map_by, bool oversubscribe, bool slots_from_registry,
            const std::string& service, int timeout_s, int max_in_flight,
            const std::vector<std::string>& command) {
    if (command.empty()) {
        std::cerr << "run: missing command after --\n";
        return 2;
    }
    if (np < 1) {
        std::cerr << "run: --np must be >= 1\n";
        return 2;
    }
    auto mb = launch::map_by_from_string(map_by);
    if (!mb) {
        std::cerr << "run: --map-by must be 'slot' or 'node'\n";
        return 2;
    }
    launch::JobSpec spec;
    spec.np = np;
    spec.cmd = command.front();
    spec.args.assign(command.begin() + 1, command.end());
    spec.map_by = *mb;
    spec.oversubscribe = oversubscribe;
    spec.slots_from_registry = slots_from_registry;
    spec.service = service;
    spec.timeout_s = timeout_s;
    spec.max_in_flight = max_in_flight;

    auto hostfile = launch::parse_hostfile(slurp(hostfile_path));
    auto result = launch::run_job(spec, hostfile, registry_addr);

    for (size_t rank = 0; rank < result.per_rank.size(); ++rank) {
        for (const auto& line : result.per_rank[rank].stdout_lines)
            std::cout << "[" << rank << "] " << line << "\n";
        for (const auto& line : result.per_rank[rank].stderr_lines)
            std::cerr << "[" << rank << "] " << line << "\n";
    }
    if (result.job_exit < 0) return 255;
    return result.job_exit & 0xff;
}

int cmd_status(const std::string& registry_addr, const std::string& service, bool as_json) {
    registry::Client client(registry_addr);
    auto snap = client.catalog(service, /*passing_only=*/false, 0, 0);
    if (as_json) {
        std::cout << registry::snapshot_to_json(snap).dump() << "\n";
        return 0;
    }
    if (snap.instances.empty()) {
        std::cout << "no instances (service '" << service << "', index " << snap.index << ")\n";
        return 0;
    }
    size_t node_w = 4, addr_w = 7, ep_w = 8;
    for (const auto& i : snap.instances) {
        node_w = std::max(node_w, i.node_id.size());
        addr_w = std::max(addr_w, i.address.size());
        ep_w = std::max(ep_w, i.endpoint.size());
    }
    auto pad = [](const std::string& s, size_t w) {
        return s + std::string(w - s.size() + 2, ' ');
    };
    std::cout << pad("NODE", node_w) << pad("ADDRESS", addr_w) << pad("ENDPOINT", ep_w)
              << pad("SLOTS", 5) << "HEALTH\n";
    for (const auto& i : snap.instances)
        std::cout << pad(i.node_id, node_w) << pad(i.address, addr_w) << pad(i.endpoint, ep_w)
                  << pad(std::to_string(i.slots), 5) << registry::to_string(i.health) << "\n";
    return 0;
}

int cmd_sim(const std::string& scenario_path, uint64_t seed, bool mock_clock,
            const std::string& workdir) {
    auto scenario = sim::parse_scenario_text(slurp(scenario_path));
    sim::ScenarioRunOptions opts;
    opts.seed = seed;
    opts.mock_clock = mock_clock;
    opts.workdir = workdir;
    auto report = sim::run_scenario(scenario, opts);
    std::cout << sim::report_to_json(report).dump(2) << "\n";
    return report.all_assertions_passed() ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    net::ignore_sigpipe();

    // accept the mpirun-style single-dash spelling; CLI11's vector overload
    // wants the arguments reversed
    std::vector<std::string> args;
    for (int i = argc - 1; i >= 1; --i) {
        std::string a = argv[i];
        if (a == "-np") a = "--np";
        args.push_back(std::move(a));
    }

    CLI::App app{"virtual HPC cluster toolkit: registry, node agents, hostfile renderer, "
                 "SPMD launcher and a desk-scale simulator"};
    app.require_subcommand(1);

    const char* kRegistryEnv = "VCLUSTER_REGISTRY";
    std::string default_registry = "127.0.0.1:8500";

    // registry
    auto* reg = app.add_subcommand("registry", "run the service-discovery registry");
    std::string reg_bind = "0.0.0.0";
    int reg_port = 8500, reg_sweep = 1000;
    bool reg_mock = false;
    reg->add_option("--bind", reg_bind, "listen address")->capture_default_str();
    reg->add_option("--port", reg_port, "listen port")->capture_default_str();
    reg->add_option("--sweep-interval-ms", reg_sweep, "TTL expiry sweep tick")
        ->capture_default_str();
    reg->add_flag("--mock-clock", reg_mock,
                  "virtual clock driven by the 'advance' wire op (for deterministic tests)");

    // agent
    auto* ag = app.add_subcommand("agent", "run a node agent from a NodeSpec file");
    std::string ag_spec;
    ag->add_option("--spec", ag_spec, "NodeSpec file")->required();

    // render
    auto* rd = app.add_subcommand("render", "render the hostfile from the registry catalog");
    std::string rd_registry = default_registry, rd_service = "hpc", rd_template, rd_out, rd_trigger;
    bool rd_watch = false;
    int rd_wait = 5000;
    uint64_t rd_max_cycles = 0;
    rd->add_option("--registry", rd_registry, "registry host:port")
        ->envname(kRegistryEnv)
        ->capture_default_str();
    rd->add_option("--service", rd_service, "service name")->capture_default_str();
    rd->add_option("--template", rd_template, "template file")->required();
    rd->add_option("--out", rd_out, "output file (stdout when omitted in one-shot mode)");
    rd->add_flag("--watch", rd_watch, "keep watching the catalog and re-render on change");
    rd->add_option("--wait-ms", rd_wait, "blocking-query budget per watch cycle")
        ->capture_default_str();
    rd->add_option("--exec", rd_trigger, "command run after the hostfile changes");
    rd->add_option("--max-cycles", rd_max_cycles, "stop after N watch cycles (0 = forever)")
        ->capture_default_str();

    // run
    auto* rn = app.add_subcommand("run", "launch an SPMD job across the cluster");
    std::string rn_registry = default_registry, rn_hostfile, rn_map_by = "slot", rn_service = "hpc";
    int rn_np = 0, rn_timeout = 300, rn_max_in_flight = 256;
    bool rn_oversub = false, rn_slots_reg = false;
    std::vector<std::string> rn_command;
    rn->add_option("--registry", rn_registry, "registry host:port")
        ->envname(kRegistryEnv)
        ->capture_default_str();
    rn->add_option("--hostfile", rn_hostfile, "hostfile path")->required();
    rn->add_option("-n,--np", rn_np, "number of ranks (also accepts -np)")->required();
    rn->add_option("--map-by", rn_map_by, "rank placement: slot | node")->capture_default_str();
    rn->add_flag("--oversubscribe", rn_oversub, "allow more ranks than declared slots");
    rn->add_flag("--slots-from-registry", rn_slots_reg,
                 "bare hostfile entries take their slot count from the catalog");
    rn->add_option("--service", rn_service, "service name for the catalog lookup")
        ->capture_default_str();
    rn->add_option("--timeout-s", rn_timeout, "per-rank timeout")->capture_default_str();
    rn->add_option("--max-in-flight", rn_max_in_flight, "dispatch concurrency cap")
        ->capture_default_str();
    rn->add_option("command", rn_command, "job command and arguments (after --)")
        ->expected(-1);
    rn->positionals_at_end();

    // status
    auto* st = app.add_subcommand("status", "show registered instances");
    std::string st_registry = default_registry, st_service = "hpc";
    bool st_json = false;
    st->add_option("--registry", st_registry, "registry host:port")
        ->envname(kRegistryEnv)
        ->capture_default_str();
    st->add_option("--service", st_service, "service name")->capture_default_str();
    st->add_flag("--json", st_json, "emit the raw catalog snapshot as JSON");

    // sim
    auto* sm = app.add_subcommand("sim", "run a scripted cluster scenario");
    std::string sm_scenario, sm_workdir;
    uint64_t sm_seed = 0;
    bool sm_mock = false;
    sm->add_option("--scenario", sm_scenario, "scenario JSON file")->required();
    sm->add_option("--seed", sm_seed, "rng seed recorded in the report")->capture_default_str();
    sm->add_flag("--mock-clock", sm_mock, "run the registry with a virtual clock");
    sm->add_option("--workdir", sm_workdir, "working directory (default: fresh temp dir)");

    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e); // prints the (sub)command help, exits 0
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        std::cerr << "usage: clusterctl {registry|agent|render|run|status|sim} [flags] "
                     "(see 'clusterctl SUBCOMMAND --help')\n";
        return 2;
    }

    try {
        if (reg->parsed()) return cmd_registry(reg_bind, reg_port, reg_sweep, reg_mock);
        if (ag->parsed()) return cmd_agent(ag_spec);
        if (rd->parsed())
            return cmd_render(rd_registry, rd_service, rd_template, rd_out, rd_watch, rd_wait,
                              rd_trigger, rd_max_cycles);
        if (rn->parsed())
            return cmd_run(rn_registry, rn_hostfile, rn_np, rn_map_by, rn_oversub, rn_slots_reg,
                           rn_service, rn_timeout, rn_max_in_flight, rn_command);
        if (st->parsed()) return cmd_status(st_registry, st_service, st_json);
        if (sm->parsed()) return cmd_sim(sm_scenario, sm_seed, sm_mock, sm_workdir);
    } catch (const std::exception& e) {
        std::cerr << "clusterctl: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
