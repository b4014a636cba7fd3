#pragma once

#include <sys/types.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "vcluster/registry.hpp"

#include "json.hpp"

namespace vcluster::sim {

struct SubnetExhausted : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PortExhausted : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct StartupTimeout : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NothingToRemove : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UnknownNode : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ScenarioParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One simulated physical machine owning the 10.<host_id>.0.0/16 subnet.
// Allocation hands out the lowest free n >= 1 as 10.<host_id>.<n/256>.<n%256>;
// addresses are not reused until released.
class HostModel {
public:
    explicit HostModel(int host_id) : host_id_(host_id) {}

    int host_id() const { return host_id_; }
    std::string allocate(); // throws SubnetExhausted
    void release(const std::string& address);
    size_t live_count() const { return size_t(high_water_) - released_.size(); }
    bool owns(const std::string& address) const;

private:
    int host_id_;
    int high_water_ = 0;     // all n in [1, high_water_] were handed out
    std::set<int> released_; // gaps below the high-water mark, reused lowest-first
};

// Spawns argv[0] with stdout/stderr appended to log_path. Returns the pid.
pid_t spawn_process(const std::vector<std::string>& argv,
                    const std::filesystem::path& log_path);
// SIGTERM, wait up to grace_ms, SIGKILL fallback; reaps the child.
void terminate_process(pid_t pid, int grace_ms = 5000);
bool port_free(uint16_t port);

struct AgentHandle {
    std::string node_id;
    pid_t pid = -1;
    std::string logical_address;
    uint16_t exec_port = 0;
    int host_id = 0;
    int spawn_order = 0;
    bool alive = false;
};

struct SimOptions {
    int n_hosts = 2;          // agent-bearing hosts; host 1 is the head's
    int agents_per_host = 1;
    int slots = 12;
    int base_port = 7100;     // registry port; agent nodeNN listens on base+NN
    int ttl_s = 15;
    bool mock_clock = false;
    std::string service = "hpc";
    std::string clusterctl_bin;    // defaults to /proc/self/exe
    std::filesystem::path workdir; // defaults to a fresh temp dir
    int startup_timeout_ms = 10000;
    std::vector<std::string> exec_allow{"/bin/", "/usr/bin/"};
};

// A virtual cluster of real child processes: one registry, many agents.
// Host 1 stands for the head's machine, so the first agent lands on host 2
// with address 10.2.0.1.
class SimCluster {
public:
    ~SimCluster();
    SimCluster(SimCluster&& o) noexcept;
    SimCluster& operator=(SimCluster&&) = delete;
    SimCluster(const SimCluster&) = delete;
    SimCluster& operator=(const SimCluster&) = delete;

    // throws PortExhausted / StartupTimeout
    static SimCluster spawn(SimOptions opts);

    std::string registry_addr() const;
    const SimOptions& options() const { return opts_; }
    const std::filesystem::path& workdir() const { return workdir_; }

    // delta > 0: new agents on freshly powered-up hosts. delta < 0: the
    // newest |delta| agents shut down gracefully. Returns affected node ids.
    std::vector<std::string> scale(int delta);

    // graceful: SIGTERM (the agent deregisters). abrupt: SIGKILL (the
    // registry only finds out via TTL expiry).
    void kill_agent(const std::string& node_id, bool graceful);

    std::vector<AgentHandle> live_agents() const;
    registry::Snapshot catalog(bool passing_only = true) const;
    void shutdown();

private:
    SimCluster() = default;
    AgentHandle spawn_agent(int host_index, int node_number);
    void await_registered(const std::vector<std::string>& node_ids, int budget_ms);

    SimOptions opts_;
    std::filesystem::path workdir_;
    pid_t registry_pid_ = -1;
    std::vector<HostModel> hosts_; // index 0 == host_id 2
    std::vector<AgentHandle> agents_;
    int next_node_number_ = 2;
    bool torn_down_ = false;
};

// ---------------------------------------------------------------------------
// Scenario runner

struct ScenarioStep {
    int64_t at_ms = -1; // -1: immediately after the previous step
    std::string op;
    nlohmann::json params;
};

struct Scenario {
    std::vector<ScenarioStep> steps;
};

// Steps: spawn, render, scale, kill, run_job, assert_hostfile,
// assert_catalog, sleep, advance. Unknown ops fail parsing.
Scenario parse_scenario(const nlohmann::json& doc); // throws ScenarioParseError
Scenario parse_scenario_text(std::string_view text);

struct ScenarioEvent {
    int64_t at_ms = -1; // declared schedule, not wall time
    std::string op;
    bool ok = true;
    std::string detail;
};

struct ScenarioReport {
    uint64_t seed = 0;
    int64_t wall_ms = 0; // excluded from determinism comparisons
    int assertions_passed = 0;
    int assertions_failed = 0;
    std::vector<ScenarioEvent> events;

    bool all_assertions_passed() const { return assertions_failed == 0; }
};

nlohmann::ordered_json report_to_json(const ScenarioReport& report);

struct ScenarioRunOptions {
    uint64_t seed = 0;
    bool mock_clock = false;
    std::string clusterctl_bin;
    std::filesystem::path workdir; // empty: fresh temp dir
};

ScenarioReport run_scenario(const Scenario& scenario, const ScenarioRunOptions& opts);

} // namespace vcluster::sim
