#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

namespace vcluster::net {

struct TransportError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BindError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SockAddr {
    std::string host;
    uint16_t port = 0;
};

// "host:port" -> SockAddr. Throws std::invalid_argument on malformed input.
SockAddr parse_hostport(std::string_view s);

// Dotted-quad IPv4 -> numeric value for octet-wise comparison. nullopt if malformed.
std::optional<uint32_t> parse_ipv4(std::string_view s);

// Ensures SIGPIPE is ignored process-wide; safe to call repeatedly.
void ignore_sigpipe();

// Bytestream over a connected TCP socket with line-oriented reads.
class TcpStream {
public:
    TcpStream() = default;
    explicit TcpStream(int fd) : fd_(fd) {}
    TcpStream(TcpStream&& o) noexcept;
    TcpStream& operator=(TcpStream&& o) noexcept;
    TcpStream(const TcpStream&) = delete;
    TcpStream& operator=(const TcpStream&) = delete;
    ~TcpStream();

    // Throws TransportError when the peer is unreachable or times out.
    static TcpStream connect(const SockAddr& addr, int timeout_ms = 3000);

    bool valid() const { return fd_ >= 0; }
    int fd() const { return fd_; }

    void send_all(std::string_view data); // throws TransportError
    // Next '\n'-terminated line, without the terminator. nullopt on orderly EOF.
    std::optional<std::string> read_line(); // throws TransportError
    // Same, but wakes every poll_interval_ms to check the stop flag; nullopt
    // on EOF or once stop is set. Lets server threads exit without another
    // thread touching this socket.
    std::optional<std::string> read_line_until(const std::atomic<bool>& stop,
                                               int poll_interval_ms = 200);

    void shutdown() noexcept; // unblocks a reader in another thread
    void close() noexcept;

private:
    int fd_ = -1;
    std::string buf_;
};

class TcpListener {
public:
    TcpListener() = default;
    TcpListener(TcpListener&& o) noexcept;
    TcpListener& operator=(TcpListener&& o) noexcept;
    TcpListener(const TcpListener&) = delete;
    TcpListener& operator=(const TcpListener&) = delete;
    ~TcpListener();

    // Throws BindError if the address is occupied or invalid. port 0 binds
    // an ephemeral port; local_port() reports the actual one.
    static TcpListener bind(const SockAddr& addr);

    bool valid() const { return fd_ >= 0; }
    uint16_t local_port() const { return port_; }

    // Blocks; nullopt once stop() has been called.
    std::optional<TcpStream> accept();
    void stop() noexcept;

private:
    int fd_ = -1;
    uint16_t port_ = 0;
};

// Tracks per-connection handler threads. Each handler signals completion when
// it returns; reap() joins those promptly so finished stacks do not pile up
// in a long-lived daemon.
class ThreadHerd {
public:
    ~ThreadHerd() { join_all(); }

    void spawn(std::function<void()> fn);
    void reap();     // joins every thread whose handler already returned
    void join_all(); // joins everything; callers must have unblocked them first

private:
    void mark_done(uint64_t id);

    std::mutex mu_;
    std::unordered_map<uint64_t, std::thread> threads_;
    std::vector<uint64_t> done_;
    uint64_t next_id_ = 0;
};

} // namespace vcluster::net
