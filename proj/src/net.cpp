#include "vcluster/net.hpp"

#include <arpa/inet.h>
#include <errno.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <signal.h>
#include <string.h>
#include <sys/socket.h>
#include <unistd.h>

#include <charconv>
#include <mutex>

namespace vcluster::net {

namespace {

std::string errno_msg(const std::string& what) {
    return what + ": " + strerror(errno);
}

void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

sockaddr_in make_sockaddr(const SockAddr& addr) {
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(addr.port);
    if (::inet_pton(AF_INET, addr.host.c_str(), &sa.sin_addr) != 1)
        throw std::invalid_argument("bad IPv4 address: " + addr.host);
    return sa;
}

} // namespace

SockAddr parse_hostport(std::string_view s) {
    auto colon = s.rfind(':');
    if (colon == std::string_view::npos || colon == 0 || colon + 1 == s.size())
        throw std::invalid_argument("expected host:port, got '" + std::string(s) + "'");
    SockAddr out;
    out.host = std::string(s.substr(0, colon));
    auto ps = s.substr(colon + 1);
    unsigned long port = 0;
    auto [p, ec] = std::from_chars(ps.data(), ps.data() + ps.size(), port);
    if (ec != std::errc{} || p != ps.data() + ps.size() || port > 65535)
        throw std::invalid_argument("bad port in '" + std::string(s) + "'");
    out.port = static_cast<uint16_t>(port);
    return out;
}

std::optional<uint32_t> parse_ipv4(std::string_view s) {
    uint32_t value = 0;
    int octets = 0;
    size_t i = 0;
    while (i <= s.size()) {
        size_t start = i;
        while (i < s.size() && s[i] != '.') ++i;
        auto part = s.substr(start, i - start);
        if (part.empty() || part.size() > 3) return std::nullopt;
        unsigned v = 0;
        for (char c : part) {
            if (c < '0' || c > '9') return std::nullopt;
            v = v * 10 + static_cast<unsigned>(c - '0');
        }
        if (v > 255) return std::nullopt;
        value = (value << 8) | v;
        if (++octets > 4) return std::nullopt;
        if (i == s.size()) break;
        ++i; // skip '.'
        if (i == s.size()) return std::nullopt; // trailing dot
    }
    if (octets != 4) return std::nullopt;
    return value;
}

void ignore_sigpipe() {
    static std::once_flag once;
    std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

TcpStream::TcpStream(TcpStream&& o) noexcept : fd_(o.fd_), buf_(std::move(o.buf_)) {
    o.fd_ = -1;
}

TcpStream& TcpStream::operator=(TcpStream&& o) noexcept {
    if (this != &o) {
        close();
        fd_ = o.fd_;
        buf_ = std::move(o.buf_);
        o.fd_ = -1;
    }
    return *this;
}

TcpStream::~TcpStream() { close(); }

TcpStream TcpStream::connect(const SockAddr& addr, int timeout_ms) {
    ignore_sigpipe();
    sockaddr_in sa;
    try {
        sa = make_sockaddr(addr);
    } catch (const std::invalid_argument& e) {
        throw TransportError(e.what());
    }
    int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) throw TransportError(errno_msg("socket"));

    int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa));
    if (rc < 0 && errno == EINPROGRESS) {
        pollfd pfd{fd, POLLOUT, 0};
        rc = ::poll(&pfd, 1, timeout_ms);
        if (rc == 0) {
            ::close(fd);
            throw TransportError("connect timeout to " + addr.host + ":" + std::to_string(addr.port));
        }
        int err = 0;
        socklen_t len = sizeof(err);
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        if (rc < 0 || err != 0) {
            ::close(fd);
            errno = err ? err : errno;
            throw TransportError(errno_msg("connect"));
        }
    } else if (rc < 0) {
        ::close(fd);
        throw TransportError(errno_msg("connect"));
    }
    ::fcntl(fd, F_SETFL, flags);
    set_nodelay(fd);
    return TcpStream(fd);
}

void TcpStream::send_all(std::string_view data) {
    if (fd_ < 0) throw TransportError("send on closed stream");
    size_t off = 0;
    while (off < data.size()) {
        ssize_t n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw TransportError(errno_msg("send"));
        }
        off += static_cast<size_t>(n);
    }
}

std::optional<std::string> TcpStream::read_line() {
    for (;;) {
        auto nl = buf_.find('\n');
        if (nl != std::string::npos) {
            std::string line = buf_.substr(0, nl);
            buf_.erase(0, nl + 1);
            return line;
        }
        if (fd_ < 0) return std::nullopt;
        char chunk[4096];
        ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw TransportError(errno_msg("recv"));
        }
        if (n == 0) {
            if (!buf_.empty()) {
                // peer closed mid-line; surface what we have
                std::string line = std::move(buf_);
                buf_.clear();
                return line;
            }
            return std::nullopt;
        }
        buf_.append(chunk, static_cast<size_t>(n));
    }
}

std::optional<std::string> TcpStream::read_line_until(const std::atomic<bool>& stop,
                                                      int poll_interval_ms) {
    for (;;) {
        auto nl = buf_.find('\n');
        if (nl != std::string::npos) {
            std::string line = buf_.substr(0, nl);
            buf_.erase(0, nl + 1);
            return line;
        }
        if (fd_ < 0) return std::nullopt;
        if (stop.load()) return std::nullopt;
        pollfd pfd{fd_, POLLIN, 0};
        int rc = ::poll(&pfd, 1, poll_interval_ms);
        if (rc < 0) {
            if (errno == EINTR) continue;
            throw TransportError(errno_msg("poll"));
        }
        if (rc == 0) continue; // timeout: re-check stop flag
        char chunk[4096];
        ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw TransportError(errno_msg("recv"));
        }
        if (n == 0) {
            if (!buf_.empty()) {
                std::string line = std::move(buf_);
                buf_.clear();
                return line;
            }
            return std::nullopt;
        }
        buf_.append(chunk, static_cast<size_t>(n));
    }
}

void TcpStream::shutdown() noexcept {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void TcpStream::close() noexcept {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

TcpListener::TcpListener(TcpListener&& o) noexcept : fd_(o.fd_), port_(o.port_) {
    o.fd_ = -1;
}

TcpListener& TcpListener::operator=(TcpListener&& o) noexcept {
    if (this != &o) {
        stop();
        if (fd_ >= 0) ::close(fd_);
        fd_ = o.fd_;
        port_ = o.port_;
        o.fd_ = -1;
    }
    return *this;
}

TcpListener::~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
}

TcpListener TcpListener::bind(const SockAddr& addr) {
    ignore_sigpipe();
    sockaddr_in sa;
    try {
        sa = make_sockaddr(addr);
    } catch (const std::invalid_argument& e) {
        throw BindError(e.what());
    }
    int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) throw BindError(errno_msg("socket"));
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) < 0) {
        std::string msg = errno_msg("bind " + addr.host + ":" + std::to_string(addr.port));
        ::close(fd);
        throw BindError(msg);
    }
    if (::listen(fd, 128) < 0) {
        std::string msg = errno_msg("listen");
        ::close(fd);
        throw BindError(msg);
    }
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &len);
    TcpListener l;
    l.fd_ = fd;
    l.port_ = ntohs(bound.sin_port);
    return l;
}

std::optional<TcpStream> TcpListener::accept() {
    for (;;) {
        if (fd_ < 0) return std::nullopt;
        int cfd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
        if (cfd < 0) {
            if (errno == EINTR) continue;
            return std::nullopt; // stopped or fatal; either way we are done
        }
        set_nodelay(cfd);
        return TcpStream(cfd);
    }
}

void TcpListener::stop() noexcept {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void ThreadHerd::spawn(std::function<void()> fn) {
    std::lock_guard lk(mu_);
    uint64_t id = next_id_++;
    threads_.emplace(id, std::thread([this, id, fn = std::move(fn)] {
                         fn();
                         mark_done(id);
                     }));
}

void ThreadHerd::mark_done(uint64_t id) {
    std::lock_guard lk(mu_);
    done_.push_back(id);
}

void ThreadHerd::reap() {
    std::vector<std::thread> joinable;
    {
        std::lock_guard lk(mu_);
        for (uint64_t id : done_) {
            auto it = threads_.find(id);
            if (it != threads_.end()) {
                joinable.push_back(std::move(it->second));
                threads_.erase(it);
            }
        }
        done_.clear();
    }
    for (auto& t : joinable)
        if (t.joinable()) t.join();
}

void ThreadHerd::join_all() {
    std::unordered_map<uint64_t, std::thread> all;
    {
        std::lock_guard lk(mu_);
        all.swap(threads_);
        done_.clear();
    }
    for (auto& [id, t] : all)
        if (t.joinable()) t.join();
}

} // namespace vcluster::net
