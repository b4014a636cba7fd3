#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "vcluster/net.hpp"
#include "vcluster/registry.hpp"

namespace vcluster::agent {

struct SpecParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class SpecInvalid : public std::runtime_error {
public:
    SpecInvalid(std::string field, const std::string& what)
        : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

struct ExecDenied : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SpawnError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RegistryUnreachable : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Declarative per-node configuration; the file format is flat `key = value`
// lines with `#` comments and comma-separated lists.
struct NodeSpec {
    std::string node_id;                       // required
    std::string service_name = "hpc";
    int slots = 0;                             // required, >= 1
    int ttl_s = 15;
    double heartbeat_interval_s = 0;           // default ttl_s / 3; must be < ttl_s
    std::string registry_addr = "127.0.0.1:8500";
    std::string listen_addr = "127.0.0.1:0";   // port 0 binds ephemeral
    std::string logical_address;               // required dotted quad
    std::vector<std::string> exec_allow;       // required non-empty path prefixes
};

NodeSpec load_nodespec(std::string_view source); // throws SpecParseError / SpecInvalid
NodeSpec load_nodespec_file(const std::filesystem::path& path);
std::string to_text(const NodeSpec& spec); // round-trips through load_nodespec

struct ExecRequest {
    std::string cmd;
    std::vector<std::string> args;
    std::map<std::string, std::string> env; // merged over a minimal environment
    int timeout_s = 300;
};

struct ExecResult {
    int exit_code = 0; // -1 reserved for timeout/kill
    std::vector<std::string> stdout_lines;
    std::vector<std::string> stderr_lines;
    uint64_t duration_ms = 0;
};

// cmd must normalize (lexically) to a path starting with one of the allowed
// prefixes. Deny-by-default: empty prefix list allows nothing.
bool exec_allowed(const std::string& cmd, const std::vector<std::string>& allow);

using LineSink = std::function<void(std::string_view stream_name, std::string_view line)>;

// Spawns the child with req.env merged over a minimal environment, relays
// stdout/stderr lines as produced, kills the whole process group when
// timeout_s lapses (exit_code -1) or when *cancel flips. Throws SpawnError
// when the executable cannot be started; the sink is untouched in that case.
// after_burst fires once per drained batch of output, letting a buffering
// sink flush without a syscall per line.
ExecResult run_exec(const ExecRequest& req, const LineSink& sink = {},
                    const std::atomic<bool>* cancel = nullptr,
                    const std::function<void()>& after_burst = {});

// Client side of the exec protocol. on_line (optional) observes events in
// arrival order; the returned result holds the full per-stream transcripts.
// Throws ExecDenied / SpawnError / net::TransportError.
ExecResult exec_remote(const std::string& endpoint, const ExecRequest& req,
                       const LineSink& on_line = {});

// Per-node daemon: registers with the registry, heartbeats, re-registers
// after a registry restart, and serves the exec protocol.
class Agent {
public:
    explicit Agent(NodeSpec spec);
    ~Agent();

    Agent(const Agent&) = delete;
    Agent& operator=(const Agent&) = delete;

    // Binds the exec listener, then registers (with retry/backoff), then
    // starts the heartbeat loop. Throws net::BindError before anything is
    // registered, RegistryUnreachable once the retry budget is exhausted.
    void start();

    // graceful: deregister then close. Abrupt: close only; the registry
    // notices via TTL expiry. Safe to call twice.
    void shutdown(bool graceful);

    uint16_t exec_port() const;
    std::string endpoint() const;
    const NodeSpec& spec() const { return spec_; }

    uint64_t registrations() const { return registrations_.load(); }
    void set_spawn_hook(std::function<void(const std::string& cmd)> hook); // test seam
    void set_retry_policy(int attempts, int initial_backoff_ms); // defaults 10, 100

private:
    void heartbeat_loop();
    void accept_loop();
    void serve_session(net::TcpStream& stream);
    void register_once(registry::Client& client);

    NodeSpec spec_;
    net::TcpListener listener_;
    std::string endpoint_;
    std::thread heartbeater_;
    std::thread acceptor_;
    net::ThreadHerd sessions_;
    std::atomic<bool> stopping_{false};
    std::atomic<bool> started_{false};
    std::atomic<bool> shut_down_{false};
    std::atomic<uint64_t> registrations_{0};
    std::function<void(const std::string&)> spawn_hook_;
    int retry_attempts_ = 10;
    int retry_initial_backoff_ms_ = 100;
    std::mutex hb_mu_;
    std::condition_variable hb_cv_;
};

} // namespace vcluster::agent
