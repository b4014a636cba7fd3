#pragma once

#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "vcluster/clock.hpp"
#include "vcluster/net.hpp"

#include "json.hpp"

namespace vcluster::registry {

enum class Health { passing, critical };

const char* to_string(Health h);
std::optional<Health> health_from_string(std::string_view s);

struct InvalidInstance : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UnknownInstance : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// What a node sends when it registers.
struct Registration {
    std::string node_id;
    std::string service_name;
    std::string address;  // logical dotted-quad IPv4
    std::string endpoint; // host:port of the node's exec listener
    int slots = 1;
    int ttl_s = 15;
};

// Full catalog record, one per (node_id, service_name).
struct Instance {
    std::string node_id;
    std::string service_name;
    std::string address;
    std::string endpoint;
    int slots = 1;
    int ttl_s = 15;
    Health health = Health::passing;
    int64_t last_heartbeat_ms = 0;
    int64_t registered_at_ms = 0;
};

// The wire-visible slice of an instance.
struct InstanceView {
    std::string node_id;
    std::string address;
    std::string endpoint;
    int slots = 1;
    Health health = Health::passing;

    bool operator==(const InstanceView&) const = default;
};

struct Snapshot {
    uint64_t index = 0;
    std::string service_name;
    std::vector<InstanceView> instances; // sorted ascending by address octets

    bool operator==(const Snapshot&) const = default;
};

nlohmann::ordered_json snapshot_to_json(const Snapshot& s);
Snapshot snapshot_from_json(const nlohmann::json& j, std::string service_name);

struct RegisterAck {
    uint64_t index = 0;
    Health health = Health::passing;
};

// The catalog state machine. All mutations serialize through one mutex;
// blocked catalog reads park on a condition variable and are woken by any
// index bump. Thread-safe by construction.
class Catalog {
public:
    explicit Catalog(Clock& clock) : clock_(clock) {}

    RegisterAck register_instance(const Registration& r); // throws InvalidInstance
    Health heartbeat(const std::string& node_id, const std::string& service_name); // throws UnknownInstance
    uint64_t deregister(const std::string& node_id, const std::string& service_name); // throws UnknownInstance

    // Immediate snapshot of one service (empty service list is not an error).
    Snapshot snapshot(const std::string& service_name, bool passing_only) const;

    // Blocking query: returns once index() > min_index or after wait_ms.
    // nullopt only when shut down while parked.
    std::optional<Snapshot> wait_snapshot(const std::string& service_name, bool passing_only,
                                          uint64_t min_index, int wait_ms);

    // Marks every passing instance whose TTL lapsed as critical. One index
    // bump covers the whole batch. Returns the transitioned keys.
    std::vector<std::pair<std::string, std::string>> sweep_expired();

    uint64_t index() const;
    std::vector<Instance> all_instances() const; // test/introspection aid
    void shutdown_waiters();

private:
    using Key = std::pair<std::string, std::string>; // node_id, service_name

    Snapshot snapshot_locked(const std::string& service_name, bool passing_only) const;

    Clock& clock_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    uint64_t index_ = 0;
    bool stopping_ = false;
    std::map<Key, Instance> instances_;
};

// Newline-delimited-JSON TCP front end plus the periodic expiry sweep.
class Server {
public:
    struct Options {
        std::string bind_host = "0.0.0.0";
        uint16_t port = 8500;
        int sweep_interval_ms = 1000;
        // Virtual clock mode: time only moves via the "advance" wire op and
        // each advance runs a sweep; the periodic sweeper is disabled.
        bool mock_clock = false;
    };

    explicit Server(Options opts);
    ~Server();

    void start(); // throws net::BindError
    void stop();

    uint16_t port() const { return listener_.local_port(); }
    Catalog& catalog() { return *catalog_; }

private:
    void accept_loop();
    void serve_connection(net::TcpStream& stream);
    void sweep_loop();
    nlohmann::ordered_json handle_request(const nlohmann::json& req);

    Options opts_;
    std::unique_ptr<Clock> clock_; // owning; mock_ aliases it in mock mode
    ManualClock* mock_ = nullptr;
    std::unique_ptr<Catalog> catalog_;
    net::TcpListener listener_;
    std::thread acceptor_;
    std::thread sweeper_;
    net::ThreadHerd conns_;
    std::atomic<bool> stopping_{false};
    std::condition_variable sweep_cv_;
    std::mutex sweep_mu_;
};

// Client for the registry wire protocol. Reconnects on demand; any transport
// failure closes the connection and surfaces net::TransportError.
class Client {
public:
    explicit Client(const std::string& registry_addr); // "host:port"

    RegisterAck register_instance(const Registration& r); // throws InvalidInstance
    Health heartbeat(const std::string& node_id, const std::string& service_name); // throws UnknownInstance
    uint64_t deregister(const std::string& node_id, const std::string& service_name); // throws UnknownInstance
    Snapshot catalog(const std::string& service_name, bool passing_only,
                     uint64_t min_index = 0, int wait_ms = 0);

    // Mock-clock helpers (registry must run with --mock-clock).
    int64_t advance_ms(int64_t ms);
    int64_t now_ms();

    nlohmann::json request(const nlohmann::json& req);

private:
    net::SockAddr addr_;
    net::TcpStream stream_;
};

} // namespace vcluster::registry
