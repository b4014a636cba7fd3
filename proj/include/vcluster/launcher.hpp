#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vcluster/agent.hpp"

namespace vcluster::launch {

class HostfileParseError : public std::runtime_error {
public:
    HostfileParseError(int line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

struct Oversubscription : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UnknownHost : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct AgentUnreachable : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct HostEntry {
    std::string address;
    int slots = 1;
    bool explicit_slots = false; // ` slots=N` suffix was present
};

struct Hostfile {
    std::vector<HostEntry> entries; // file order, addresses unique
};

// One address per line, optional ` slots=N` suffix, `#` comments, blank lines
// ignored. Bare addresses get slots=1.
Hostfile parse_hostfile(std::string_view source); // throws HostfileParseError

enum class MapBy { slot, node };
std::optional<MapBy> map_by_from_string(std::string_view s);

struct Placement {
    std::string address;
    std::string node_id;  // filled when mapped against a catalog
    int local_index = 0;  // 0-based slot on that host
};

struct RankAssignment {
    std::vector<Placement> placements; // index == rank
};

// map_by=slot fills hosts to capacity in hostfile order; map_by=node
// round-robins across hosts, skipping full ones. With oversubscribe the
// capacity bound is lifted: slot mode repeats its fill cycle proportionally
// to the declared slots, node mode becomes a pure round-robin.
RankAssignment map_ranks(int np, const Hostfile& hostfile, MapBy map_by,
                         bool oversubscribe); // throws Oversubscription

struct JobSpec {
    int np = 1;
    std::string cmd;
    std::vector<std::string> args;
    MapBy map_by = MapBy::slot;
    bool oversubscribe = false;
    int timeout_s = 300;
    bool slots_from_registry = false; // bare hostfile entries take catalog slots
    std::string service = "hpc";
    std::map<std::string, std::string> env;
    int max_in_flight = 256;
};

struct JobResult {
    std::vector<agent::ExecResult> per_rank; // ordered by rank, always np long
    // 0 iff every rank exited 0; -1 when any rank timed out or was lost;
    // otherwise the first nonzero exit in rank order.
    int job_exit = 0;
};

// Resolves every hostfile address to a passing instance (UnknownHost
// otherwise), probes each agent endpoint (AgentUnreachable before any
// dispatch), then launches all ranks concurrently and aggregates by rank.
// Each rank's environment carries HPC_RANK, HPC_SIZE, HPC_NODE, HPC_LOCAL
// and HPC_HOSTLIST. An agent lost mid-job marks its rank exit -1.
JobResult run_job(const JobSpec& spec, const Hostfile& hostfile,
                  const std::string& registry_addr);

} // namespace vcluster::launch
