#include "vcluster/agent.hpp"

#include <errno.h>
#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <string.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace vcluster::agent {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// NodeSpec

namespace {

std::string trim(std::string_view s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    size_t e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

int parse_int(const std::string& v, int lineno, const std::string& key) {
    int out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw SpecParseError("line " + std::to_string(lineno) + ": " + key +
                             " expects an integer, got '" + v + "'");
    return out;
}

double parse_double(const std::string& v, int lineno, const std::string& key) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw SpecParseError("line " + std::to_string(lineno) + ": " + key +
                             " expects a number, got '" + v + "'");
    }
}

void check_hostport(const std::string& v, const char* field) {
    try {
        net::parse_hostport(v);
    } catch (const std::invalid_argument& e) {
        throw SpecInvalid(field, e.what());
    }
}

} // namespace

NodeSpec load_nodespec(std::string_view source) {
    NodeSpec spec;
    bool have_heartbeat = false;
    std::set<std::string> seen;

    int lineno = 0;
    size_t pos = 0;
    while (pos <= source.size()) {
        size_t nl = source.find('\n', pos);
        std::string_view raw = source.substr(pos, nl == std::string_view::npos ? std::string_view::npos
                                                                               : nl - pos);
        pos = nl == std::string_view::npos ? source.size() + 1 : nl + 1;
        ++lineno;

        std::string line = trim(raw.substr(0, raw.find('#')));
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw SpecParseError("line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(std::string_view(line).substr(0, eq));
        std::string value = trim(std::string_view(line).substr(eq + 1));
        if (key.empty())
            throw SpecParseError("line " + std::to_string(lineno) + ": empty key");
        if (!seen.insert(key).second)
            throw SpecParseError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");

        if (key == "node_id") spec.node_id = value;
        else if (key == "service_name") spec.service_name = value;
        else if (key == "slots") spec.slots = parse_int(value, lineno, key);
        else if (key == "ttl_s") spec.ttl_s = parse_int(value, lineno, key);
        else if (key == "heartbeat_interval_s") {
            spec.heartbeat_interval_s = parse_double(value, lineno, key);
            have_heartbeat = true;
        } else if (key == "registry_addr") spec.registry_addr = value;
        else if (key == "listen_addr") spec.listen_addr = value;
        else if (key == "logical_address") spec.logical_address = value;
        else if (key == "exec_allow") {
            spec.exec_allow.clear();
            std::stringstream ss(value);
            std::string item;
            while (std::getline(ss, item, ',')) {
                item = trim(item);
                if (!item.empty()) spec.exec_allow.push_back(item);
            }
        } else {
            throw SpecParseError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
    }

    if (!have_heartbeat) spec.heartbeat_interval_s = spec.ttl_s / 3.0;

    if (spec.node_id.empty()) throw SpecInvalid("node_id", "required");
    if (spec.service_name.empty()) throw SpecInvalid("service_name", "must be non-empty");
    if (spec.slots < 1) throw SpecInvalid("slots", "must be >= 1");
    if (spec.ttl_s < 1) throw SpecInvalid("ttl_s", "must be >= 1");
    if (spec.heartbeat_interval_s <= 0 || spec.heartbeat_interval_s >= spec.ttl_s)
        throw SpecInvalid("heartbeat_interval_s",
                          "must be positive and below ttl_s, or the node flaps critical");
    if (!net::parse_ipv4(spec.logical_address))
        throw SpecInvalid("logical_address", "'" + spec.logical_address +
                                                 "' is not a dotted-quad IPv4");
    if (spec.exec_allow.empty()) throw SpecInvalid("exec_allow", "must list at least one prefix");
    check_hostport(spec.registry_addr, "registry_addr");
    check_hostport(spec.listen_addr, "listen_addr");
    return spec;
}

NodeSpec load_nodespec_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SpecParseError("cannot read nodespec file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return load_nodespec(ss.str());
}

std::string to_text(const NodeSpec& spec) {
    std::ostringstream out;
    out << "node_id = " << spec.node_id << "\n";
    out << "service_name = " << spec.service_name << "\n";
    out << "slots = " << spec.slots << "\n";
    out << "ttl_s = " << spec.ttl_s << "\n";
    out << "heartbeat_interval_s = " << spec.heartbeat_interval_s << "\n";
    out << "registry_addr = " << spec.registry_addr << "\n";
    out << "listen_addr = " << spec.listen_addr << "\n";
    out << "logical_address = " << spec.logical_address << "\n";
    out << "exec_allow = ";
    for (size_t i = 0; i < spec.exec_allow.size(); ++i) {
        if (i) out << ", ";
        out << spec.exec_allow[i];
    }
    out << "\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// Exec engine

bool exec_allowed(const std::string& cmd, const std::vector<std::string>& allow) {
    if (cmd.empty()) return false;
    std::string normal = std::filesystem::path(cmd).lexically_normal().string();
    for (const auto& prefix : allow) {
        if (!prefix.empty() && normal.rfind(prefix, 0) == 0) return true;
    }
    return false;
}

namespace {

struct Fd {
    int fd = -1;
    Fd() = default;
    explicit Fd(int f) : fd(f) {}
    Fd(Fd&& o) noexcept : fd(o.fd) { o.fd = -1; }
    Fd& operator=(Fd&& o) noexcept {
        if (this != &o) {
            reset();
            fd = o.fd;
            o.fd = -1;
        }
        return *this;
    }
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;
    ~Fd() { reset(); }
    void reset() {
        if (fd >= 0) {
            ::close(fd);
            fd = -1;
        }
    }
};

// Kills the child's whole process group unless disarmed.
struct ChildGuard {
    pid_t pid;
    bool armed = true;
    ~ChildGuard() {
        if (armed) {
            ::kill(-pid, SIGKILL);
            ::kill(pid, SIGKILL);
            ::waitpid(pid, nullptr, 0);
        }
    }
};

struct StreamReader {
    Fd fd;
    const char* name;
    std::vector<std::string>* lines;
    std::string partial;
    bool open = true;
};

void deliver(StreamReader& r, std::string_view chunk, const LineSink& sink) {
    r.partial.append(chunk);
    size_t start = 0;
    for (;;) {
        size_t nl = r.partial.find('\n', start);
        if (nl == std::string::npos) break;
        std::string line = r.partial.substr(start, nl - start);
        if (sink) sink(r.name, line);
        r.lines->push_back(std::move(line));
        start = nl + 1;
    }
    r.partial.erase(0, start);
}

void finish_stream(StreamReader& r, const LineSink& sink) {
    r.open = false;
    r.fd.reset();
    if (!r.partial.empty()) {
        if (sink) sink(r.name, r.partial);
        r.lines->push_back(std::move(r.partial));
        r.partial.clear();
    }
}

} // namespace

ExecResult run_exec(const ExecRequest& req, const LineSink& sink,
                    const std::atomic<bool>* cancel, const std::function<void()>& after_burst) {
    // CLOEXEC everywhere: a concurrently forked sibling must not inherit
    // these write ends, or this child's EOF would wait on that child's exit.
    // dup2 onto stdout/stderr clears the flag for the copies the child keeps.
    int out_pipe[2], err_pipe[2], exec_pipe[2];
    if (::pipe2(out_pipe, O_CLOEXEC) < 0 || ::pipe2(err_pipe, O_CLOEXEC) < 0 ||
        ::pipe2(exec_pipe, O_CLOEXEC) < 0)
        throw SpawnError(std::string("pipe: ") + strerror(errno));

    // minimal environment, request entries win
    std::map<std::string, std::string> env{{"PATH", "/usr/local/bin:/usr/bin:/bin"}};
    for (const auto& [k, v] : req.env) env[k] = v;
    std::vector<std::string> env_strings;
    env_strings.reserve(env.size());
    for (const auto& [k, v] : env) env_strings.push_back(k + "=" + v);
    std::vector<char*> envp;
    for (auto& s : env_strings) envp.push_back(s.data());
    envp.push_back(nullptr);

    std::vector<std::string> argv_strings{req.cmd};
    argv_strings.insert(argv_strings.end(), req.args.begin(), req.args.end());
    std::vector<char*> argv;
    for (auto& s : argv_strings) argv.push_back(s.data());
    argv.push_back(nullptr);

    auto t0 = std::chrono::steady_clock::now();
    pid_t pid = ::fork();
    if (pid < 0) {
        for (int f : {out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1], exec_pipe[0], exec_pipe[1]})
            ::close(f);
        throw SpawnError(std::string("fork: ") + strerror(errno));
    }
    if (pid == 0) {
        ::setpgid(0, 0);
        ::dup2(out_pipe[1], STDOUT_FILENO);
        ::dup2(err_pipe[1], STDERR_FILENO);
        for (int f : {out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1], exec_pipe[0]})
            ::close(f);
        ::execve(argv_strings[0].c_str(), argv.data(), envp.data());
        int err = errno;
        [[maybe_unused]] ssize_t n = ::write(exec_pipe[1], &err, sizeof(err));
        ::_exit(127);
    }

    ::setpgid(pid, pid); // either side may win; both set the same group
    ::close(out_pipe[1]);
    ::close(err_pipe[1]);
    ::close(exec_pipe[1]);
    Fd exec_read(exec_pipe[0]);

    ExecResult result;
    StreamReader readers[2] = {
        {Fd(out_pipe[0]), "stdout", &result.stdout_lines, {}, true},
        {Fd(err_pipe[0]), "stderr", &result.stderr_lines, {}, true},
    };
    ChildGuard guard{pid};

    // exec outcome: pipe closes silently on success, carries errno on failure
    int exec_errno = 0;
    ssize_t n;
    do {
        n = ::read(exec_read.fd, &exec_errno, sizeof(exec_errno));
    } while (n < 0 && errno == EINTR);
    exec_read.reset();
    if (n > 0) {
        ::waitpid(pid, nullptr, 0);
        guard.armed = false;
        throw SpawnError(req.cmd + ": " + strerror(exec_errno));
    }

    auto deadline = t0 + std::chrono::seconds(req.timeout_s);
    bool killed = false;
    while (readers[0].open || readers[1].open) {
        if (cancel && cancel->load()) {
            killed = true;
            break;
        }
        auto now = std::chrono::steady_clock::now();
        if (now >= deadline) {
            killed = true;
            break;
        }
        int64_t remaining =
            std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
        pollfd pfds[2];
        nfds_t nfds = 0;
        for (auto& r : readers)
            if (r.open) pfds[nfds++] = {r.fd.fd, POLLIN, 0};
        int rc = ::poll(pfds, nfds, static_cast<int>(std::clamp<int64_t>(remaining, 0, 200)));
        if (rc < 0) {
            if (errno == EINTR) continue;
            killed = true;
            break;
        }
        if (rc == 0) continue;
        bool burst = false;
        for (nfds_t i = 0; i < nfds; ++i) {
            if (!(pfds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
            for (auto& r : readers) {
                if (!r.open || r.fd.fd != pfds[i].fd) continue;
                char chunk[65536];
                ssize_t got = ::read(r.fd.fd, chunk, sizeof(chunk));
                if (got > 0) {
                    deliver(r, std::string_view(chunk, static_cast<size_t>(got)), sink);
                    burst = true;
                } else if (got == 0 || (got < 0 && errno != EINTR)) {
                    finish_stream(r, sink);
                    burst = true;
                }
            }
        }
        if (burst && after_burst) after_burst();
    }

    int status = 0;
    if (killed) {
        ::kill(-pid, SIGKILL);
        ::kill(pid, SIGKILL);
        ::waitpid(pid, &status, 0);
        guard.armed = false;
        result.exit_code = -1;
    } else {
        ::waitpid(pid, &status, 0);
        guard.armed = false;
        if (WIFEXITED(status)) result.exit_code = WEXITSTATUS(status);
        else if (WIFSIGNALED(status)) result.exit_code = 128 + WTERMSIG(status);
        else result.exit_code = -1;
    }
    result.duration_ms = static_cast<uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                                   std::chrono::steady_clock::now() - t0)
                                                   .count());
    return result;
}

// ---------------------------------------------------------------------------
// Exec protocol client

ExecResult exec_remote(const std::string& endpoint, const ExecRequest& req,
                       const LineSink& on_line) {
    auto stream = net::TcpStream::connect(net::parse_hostport(endpoint));
    json j;
    j["op"] = "exec";
    j["cmd"] = req.cmd;
    j["args"] = req.args;
    j["env"] = req.env;
    j["timeout_s"] = req.timeout_s;
    stream.send_all(j.dump() + "\n");

    ExecResult result;
    for (;;) {
        auto line = stream.read_line();
        if (!line) throw net::TransportError("agent connection lost mid-exec");
        if (line->empty()) continue;
        json evt = json::parse(*line);
        if (evt.contains("exit")) {
            result.exit_code = evt.at("exit").get<int>();
            result.duration_ms = evt.value("duration_ms", 0ULL);
            return result;
        }
        if (evt.contains("stream")) {
            std::string name = evt.at("stream").get<std::string>();
            std::string text = evt.at("line").get<std::string>();
            if (on_line) on_line(name, text);
            (name == "stderr" ? result.stderr_lines : result.stdout_lines).push_back(std::move(text));
            continue;
        }
        if (evt.contains("ok") && evt["ok"] == false) {
            std::string err = evt.value("error", "unknown");
            std::string msg = evt.value("msg", err);
            if (err == "exec_denied") throw ExecDenied(req.cmd + " not in exec_allow");
            if (err == "spawn_error") throw SpawnError(msg);
            throw std::runtime_error("exec failed: " + msg);
        }
        throw std::runtime_error("unexpected exec event: " + *line);
    }
}

// ---------------------------------------------------------------------------
// Agent daemon

Agent::Agent(NodeSpec spec) : spec_(std::move(spec)) {}

Agent::~Agent() { shutdown(false); }

void Agent::set_spawn_hook(std::function<void(const std::string&)> hook) {
    spawn_hook_ = std::move(hook);
}

void Agent::set_retry_policy(int attempts, int initial_backoff_ms) {
    retry_attempts_ = std::max(1, attempts);
    retry_initial_backoff_ms_ = std::max(1, initial_backoff_ms);
}

uint16_t Agent::exec_port() const { return listener_.local_port(); }

std::string Agent::endpoint() const { return endpoint_; }

void Agent::register_once(registry::Client& client) {
    registry::Registration r;
    r.node_id = spec_.node_id;
    r.service_name = spec_.service_name;
    r.address = spec_.logical_address;
    r.endpoint = endpoint_;
    r.slots = spec_.slots;
    r.ttl_s = spec_.ttl_s;
    client.register_instance(r);
    registrations_.fetch_add(1);
}

void Agent::start() {
    if (started_.exchange(true)) throw std::logic_error("agent already started");

    auto listen = net::parse_hostport(spec_.listen_addr);
    listener_ = net::TcpListener::bind(listen); // BindError: nothing registered yet
    endpoint_ = listen.host + ":" + std::to_string(listener_.local_port());

    registry::Client client(spec_.registry_addr);
    int backoff = retry_initial_backoff_ms_;
    for (int attempt = 1;; ++attempt) {
        try {
            register_once(client);
            break;
        } catch (const net::TransportError& e) {
            if (attempt >= retry_attempts_) {
                listener_ = {};
                throw RegistryUnreachable("registry " + spec_.registry_addr + " unreachable after " +
                                          std::to_string(attempt) + " attempts: " + e.what());
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
            backoff = std::min(backoff * 2, 5000);
        }
    }

    acceptor_ = std::thread([this] { accept_loop(); });
    heartbeater_ = std::thread([this] { heartbeat_loop(); });
}

void Agent::shutdown(bool graceful) {
    if (!started_.load()) return;
    if (shut_down_.exchange(true)) return;
    stopping_.store(true);
    {
        std::lock_guard lk(hb_mu_);
        hb_cv_.notify_all();
    }
    if (heartbeater_.joinable()) heartbeater_.join();
    if (graceful) {
        try {
            registry::Client client(spec_.registry_addr);
            client.deregister(spec_.node_id, spec_.service_name);
        } catch (const std::exception& e) {
            std::cerr << "agent " << spec_.node_id << ": deregister failed: " << e.what() << "\n";
        }
    }
    listener_.stop();
    if (acceptor_.joinable()) acceptor_.join();
    sessions_.join_all(); // running execs are killed via the cancel flag
}

void Agent::heartbeat_loop() {
    registry::Client client(spec_.registry_addr);
    auto interval = std::chrono::milliseconds(
        std::max<int64_t>(1, static_cast<int64_t>(spec_.heartbeat_interval_s * 1000)));
    std::unique_lock lk(hb_mu_);
    while (!stopping_.load()) {
        hb_cv_.wait_for(lk, interval, [&] { return stopping_.load(); });
        if (stopping_.load()) break;
        lk.unlock();
        try {
            client.heartbeat(spec_.node_id, spec_.service_name);
        } catch (const registry::UnknownInstance&) {
            // registry restarted and lost us
            try {
                register_once(client);
            } catch (const std::exception&) {
            }
        } catch (const std::exception&) {
            // transport trouble: reconnect happens inside the client; try to
            // re-assert membership as soon as the registry answers again
            try {
                register_once(client);
            } catch (const std::exception&) {
            }
        }
        lk.lock();
    }
}

void Agent::accept_loop() {
    while (!stopping_.load()) {
        auto stream = listener_.accept();
        if (!stream) break;
        sessions_.reap();
        sessions_.spawn([this, s = std::make_shared<net::TcpStream>(std::move(*stream))] {
            serve_session(*s);
        });
    }
}

namespace {

ordered_json exec_error(const char* code, const std::string& msg = {}) {
    ordered_json out;
    out["ok"] = false;
    out["error"] = code;
    if (!msg.empty()) out["msg"] = msg;
    return out;
}

std::string dump_lossy(const ordered_json& j) {
    return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

// Coalesces event lines so a chatty child does not cost one syscall per line.
struct BufferedWriter {
    net::TcpStream& stream;
    std::string buf;
    void append(std::string_view data) {
        buf += data;
        if (buf.size() >= 32768) flush();
    }
    void flush() {
        if (!buf.empty()) {
            stream.send_all(buf);
            buf.clear();
        }
    }
};

} // namespace

void Agent::serve_session(net::TcpStream& stream) {
    for (;;) {
        std::optional<std::string> line;
        try {
            line = stream.read_line_until(stopping_);
        } catch (const net::TransportError&) {
            return;
        }
        if (!line) return;
        if (line->empty()) continue;

        ordered_json err;
        ExecRequest req;
        try {
            json msg = json::parse(*line);
            if (msg.value("op", "") != "exec") throw std::invalid_argument("op must be \"exec\"");
            if (!msg.contains("cmd") || !msg["cmd"].is_string())
                throw std::invalid_argument("cmd must be a string");
            req.cmd = msg["cmd"].get<std::string>();
            if (msg.contains("args")) {
                if (!msg["args"].is_array()) throw std::invalid_argument("args must be an array");
                for (const auto& a : msg["args"]) {
                    if (!a.is_string()) throw std::invalid_argument("args must be strings");
                    req.args.push_back(a.get<std::string>());
                }
            }
            if (msg.contains("env")) {
                if (!msg["env"].is_object()) throw std::invalid_argument("env must be an object");
                for (const auto& [k, v] : msg["env"].items()) {
                    if (!v.is_string()) throw std::invalid_argument("env values must be strings");
                    if (k.empty() || k.find('=') != std::string::npos)
                        throw std::invalid_argument("env key '" + k + "' is invalid");
                    req.env[k] = v.get<std::string>();
                }
            }
            if (msg.contains("timeout_s")) {
                if (!msg["timeout_s"].is_number_integer())
                    throw std::invalid_argument("timeout_s must be an integer");
                req.timeout_s = msg["timeout_s"].get<int>();
                if (req.timeout_s < 1) throw std::invalid_argument("timeout_s must be >= 1");
            }
        } catch (const std::exception& e) {
            err = exec_error("bad_request", e.what());
        }

        try {
            if (!err.empty()) {
                stream.send_all(err.dump() + "\n");
                continue;
            }
            if (!exec_allowed(req.cmd, spec_.exec_allow)) {
                stream.send_all(exec_error("exec_denied").dump() + "\n");
                continue;
            }
            if (spawn_hook_) spawn_hook_(req.cmd);

            ExecResult result;
            try {
                BufferedWriter writer{stream, {}};
                result = run_exec(
                    req,
                    [&](std::string_view name, std::string_view text) {
                        ordered_json evt;
                        evt["stream"] = name;
                        evt["line"] = text;
                        writer.append(dump_lossy(evt) + "\n");
                    },
                    &stopping_, [&] { writer.flush(); });
                ordered_json fin;
                fin["exit"] = result.exit_code;
                fin["duration_ms"] = result.duration_ms;
                writer.append(fin.dump() + "\n");
                writer.flush();
            } catch (const SpawnError& e) {
                stream.send_all(exec_error("spawn_error", e.what()).dump() + "\n");
            }
        } catch (const net::TransportError&) {
            return; // client went away; any child was killed by the guard
        }
    }
}

} // namespace vcluster::agent
