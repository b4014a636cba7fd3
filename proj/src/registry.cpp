#include "vcluster/registry.hpp"

#include <algorithm>
#include <chrono>
#include <limits>

namespace vcluster::registry {

using nlohmann::json;
using nlohmann::ordered_json;

const char* to_string(Health h) {
    return h == Health::passing ? "passing" : "critical";
}

std::optional<Health> health_from_string(std::string_view s) {
    if (s == "passing") return Health::passing;
    if (s == "critical") return Health::critical;
    return std::nullopt;
}

namespace {

constexpr int kMaxWaitMs = 60000;

// Sort key: address octets numerically, then node id for determinism.
bool view_less(const InstanceView& a, const InstanceView& b) {
    uint32_t av = net::parse_ipv4(a.address).value_or(0);
    uint32_t bv = net::parse_ipv4(b.address).value_or(0);
    if (av != bv) return av < bv;
    return a.node_id < b.node_id;
}

void validate(const Registration& r) {
    if (r.node_id.empty()) throw InvalidInstance("node_id must be non-empty");
    if (r.service_name.empty()) throw InvalidInstance("service_name must be non-empty");
    if (!net::parse_ipv4(r.address))
        throw InvalidInstance("address '" + r.address + "' is not a dotted-quad IPv4");
    if (r.slots < 1) throw InvalidInstance("slots must be >= 1");
    if (r.ttl_s < 1) throw InvalidInstance("ttl_s must be >= 1");
}

} // namespace

nlohmann::ordered_json snapshot_to_json(const Snapshot& s) {
    ordered_json out;
    out["index"] = s.index;
    out["instances"] = ordered_json::array();
    for (const auto& inst : s.instances) {
        ordered_json j;
        j["node"] = inst.node_id;
        j["address"] = inst.address;
        j["endpoint"] = inst.endpoint;
        j["slots"] = inst.slots;
        j["health"] = to_string(inst.health);
        out["instances"].push_back(std::move(j));
    }
    return out;
}

Snapshot snapshot_from_json(const nlohmann::json& j, std::string service_name) {
    Snapshot s;
    s.service_name = std::move(service_name);
    s.index = j.at("index").get<uint64_t>();
    for (const auto& e : j.at("instances")) {
        InstanceView v;
        v.node_id = e.at("node").get<std::string>();
        v.address = e.at("address").get<std::string>();
        v.endpoint = e.at("endpoint").get<std::string>();
        v.slots = e.at("slots").get<int>();
        auto h = health_from_string(e.at("health").get<std::string>());
        if (!h) throw std::runtime_error("bad health value in snapshot");
        v.health = *h;
        s.instances.push_back(std::move(v));
    }
    return s;
}

RegisterAck Catalog::register_instance(const Registration& r) {
    validate(r);
    std::lock_guard lk(mu_);
    int64_t now = clock_.now_ms();
    Instance inst;
    inst.node_id = r.node_id;
    inst.service_name = r.service_name;
    inst.address = r.address;
    inst.endpoint = r.endpoint;
    inst.slots = r.slots;
    inst.ttl_s = r.ttl_s;
    inst.health = Health::passing;
    inst.last_heartbeat_ms = now;
    inst.registered_at_ms = now;
    instances_[{r.node_id, r.service_name}] = std::move(inst);
    ++index_;
    cv_.notify_all();
    return {index_, Health::passing};
}

Health Catalog::heartbeat(const std::string& node_id, const std::string& service_name) {
    std::lock_guard lk(mu_);
    auto it = instances_.find({node_id, service_name});
    if (it == instances_.end())
        throw UnknownInstance(node_id + "/" + service_name + " is not registered");
    it->second.last_heartbeat_ms = clock_.now_ms();
    if (it->second.health == Health::critical) {
        // membership visibly changed; a passing->passing heartbeat must not re-render
        it->second.health = Health::passing;
        ++index_;
        cv_.notify_all();
    }
    return it->second.health;
}

uint64_t Catalog::deregister(const std::string& node_id, const std::string& service_name) {
    std::lock_guard lk(mu_);
    auto it = instances_.find({node_id, service_name});
    if (it == instances_.end())
        throw UnknownInstance(node_id + "/" + service_name + " is not registered");
    instances_.erase(it);
    ++index_;
    cv_.notify_all();
    return index_;
}

Snapshot Catalog::snapshot_locked(const std::string& service_name, bool passing_only) const {
    Snapshot s;
    s.index = index_;
    s.service_name = service_name;
    for (const auto& [key, inst] : instances_) {
        if (inst.service_name != service_name) continue;
        if (passing_only && inst.health != Health::passing) continue;
        s.instances.push_back({inst.node_id, inst.address, inst.endpoint, inst.slots, inst.health});
    }
    std::sort(s.instances.begin(), s.instances.end(), view_less);
    return s;
}

Snapshot Catalog::snapshot(const std::string& service_name, bool passing_only) const {
    std::lock_guard lk(mu_);
    return snapshot_locked(service_name, passing_only);
}

std::optional<Snapshot> Catalog::wait_snapshot(const std::string& service_name, bool passing_only,
                                               uint64_t min_index, int wait_ms) {
    std::unique_lock lk(mu_);
    int capped = std::clamp(wait_ms, 0, kMaxWaitMs);
    auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(capped);
    cv_.wait_until(lk, deadline, [&] { return stopping_ || index_ > min_index; });
    if (stopping_ && index_ <= min_index) return std::nullopt;
    return snapshot_locked(service_name, passing_only);
}

std::vector<std::pair<std::string, std::string>> Catalog::sweep_expired() {
    std::lock_guard lk(mu_);
    int64_t now = clock_.now_ms();
    std::vector<std::pair<std::string, std::string>> transitioned;
    for (auto& [key, inst] : instances_) {
        if (inst.health != Health::passing) continue;
        if (now - inst.last_heartbeat_ms > int64_t(inst.ttl_s) * 1000) {
            inst.health = Health::critical;
            transitioned.push_back(key);
        }
    }
    if (!transitioned.empty()) {
        ++index_; // one bump for the whole batch
        cv_.notify_all();
    }
    return transitioned;
}

uint64_t Catalog::index() const {
    std::lock_guard lk(mu_);
    return index_;
}

std::vector<Instance> Catalog::all_instances() const {
    std::lock_guard lk(mu_);
    std::vector<Instance> out;
    out.reserve(instances_.size());
    for (const auto& [key, inst] : instances_) out.push_back(inst);
    return out;
}

void Catalog::shutdown_waiters() {
    std::lock_guard lk(mu_);
    stopping_ = true;
    cv_.notify_all();
}

// ---------------------------------------------------------------------------
// Server

namespace {

struct BadRequest : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string req_string(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_string())
        throw BadRequest(std::string("field '") + key + "' must be a string");
    return j[key].get<std::string>();
}

int64_t req_int(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_number_integer())
        throw BadRequest(std::string("field '") + key + "' must be an integer");
    int64_t v = j[key].get<int64_t>();
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
        throw BadRequest(std::string("field '") + key + "' is out of range");
    return v;
}

uint64_t opt_uint(const json& j, const char* key, uint64_t fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_number_unsigned() && !j[key].is_number_integer())
        throw BadRequest(std::string("field '") + key + "' must be an integer");
    int64_t v = j[key].get<int64_t>();
    if (v < 0) throw BadRequest(std::string("field '") + key + "' must be >= 0");
    return static_cast<uint64_t>(v);
}

bool opt_bool(const json& j, const char* key, bool fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_boolean())
        throw BadRequest(std::string("field '") + key + "' must be a boolean");
    return j[key].get<bool>();
}

ordered_json error_response(const char* code, const std::string& msg = {}) {
    ordered_json out;
    out["ok"] = false;
    out["error"] = code;
    if (!msg.empty()) out["msg"] = msg;
    return out;
}

} // namespace

Server::Server(Options opts) : opts_(std::move(opts)) {
    if (opts_.mock_clock) {
        auto mock = std::make_unique<ManualClock>();
        mock_ = mock.get();
        clock_ = std::move(mock);
    } else {
        clock_ = std::make_unique<SteadyClock>();
    }
    catalog_ = std::make_unique<Catalog>(*clock_);
}

Server::~Server() { stop(); }

void Server::start() {
    listener_ = net::TcpListener::bind({opts_.bind_host, opts_.port});
    acceptor_ = std::thread([this] { accept_loop(); });
    if (!opts_.mock_clock)
        sweeper_ = std::thread([this] { sweep_loop(); });
}

void Server::stop() {
    bool expected = false;
    if (!stopping_.compare_exchange_strong(expected, true)) return;
    listener_.stop();
    {
        std::lock_guard lk(sweep_mu_);
        sweep_cv_.notify_all();
    }
    if (acceptor_.joinable()) acceptor_.join();
    if (sweeper_.joinable()) sweeper_.join();
    catalog_->shutdown_waiters();
    conns_.join_all(); // handlers notice stopping_ within one poll interval
}

void Server::accept_loop() {
    while (!stopping_.load()) {
        auto stream = listener_.accept();
        if (!stream) break;
        conns_.reap();
        conns_.spawn([this, s = std::make_shared<net::TcpStream>(std::move(*stream))] {
            serve_connection(*s);
        });
    }
}

void Server::serve_connection(net::TcpStream& stream) {
    for (;;) {
        std::optional<std::string> line;
        try {
            line = stream.read_line_until(stopping_);
        } catch (const net::TransportError&) {
            break;
        }
        if (!line) break;
        if (line->empty()) continue;
        ordered_json resp;
        try {
            json req = json::parse(*line);
            resp = handle_request(req);
        } catch (const json::parse_error&) {
            resp = error_response("bad_request");
        }
        if (resp.is_null()) break; // shutdown while parked: close without replying
        try {
            stream.send_all(resp.dump() + "\n");
        } catch (const net::TransportError&) {
            break;
        }
    }
}

nlohmann::ordered_json Server::handle_request(const json& req) {
    try {
        if (!req.is_object()) return error_response("bad_request");
        std::string op = req_string(req, "op");
        if (op == "register") {
            Registration r;
            r.node_id = req_string(req, "node");
            r.service_name = req_string(req, "service");
            r.address = req_string(req, "address");
            r.endpoint = req_string(req, "endpoint");
            r.slots = static_cast<int>(req_int(req, "slots"));
            r.ttl_s = static_cast<int>(req_int(req, "ttl_s"));
            try {
                RegisterAck ack = catalog_->register_instance(r);
                ordered_json out;
                out["ok"] = true;
                out["index"] = ack.index;
                out["health"] = to_string(ack.health);
                return out;
            } catch (const InvalidInstance& e) {
                return error_response("invalid_instance", e.what());
            }
        }
        if (op == "heartbeat") {
            std::string node = req_string(req, "node");
            std::string service = req_string(req, "service");
            try {
                Health h = catalog_->heartbeat(node, service);
                ordered_json out;
                out["ok"] = true;
                out["health"] = to_string(h);
                return out;
            } catch (const UnknownInstance&) {
                return error_response("unknown_instance");
            }
        }
        if (op == "deregister") {
            std::string node = req_string(req, "node");
            std::string service = req_string(req, "service");
            try {
                uint64_t index = catalog_->deregister(node, service);
                ordered_json out;
                out["ok"] = true;
                out["index"] = index;
                return out;
            } catch (const UnknownInstance&) {
                return error_response("unknown_instance");
            }
        }
        if (op == "catalog") {
            std::string service = req_string(req, "service");
            bool passing_only = opt_bool(req, "passing_only", false);
            uint64_t min_index = opt_uint(req, "min_index", 0);
            uint64_t wait_ms = opt_uint(req, "wait_ms", 0);
            auto snap = catalog_->wait_snapshot(service, passing_only, min_index,
                                                static_cast<int>(std::min<uint64_t>(wait_ms, 60000)));
            if (!snap) return ordered_json(); // server stopping
            ordered_json out;
            out["ok"] = true;
            out["index"] = snap->index;
            out["instances"] = snapshot_to_json(*snap)["instances"];
            return out;
        }
        if (op == "advance") {
            if (!mock_) return error_response("bad_request", "registry is not in mock-clock mode");
            int64_t ms = req_int(req, "ms");
            if (ms < 0) return error_response("bad_request", "ms must be >= 0");
            mock_->advance_ms(ms);
            catalog_->sweep_expired();
            ordered_json out;
            out["ok"] = true;
            out["now_ms"] = mock_->now_ms();
            return out;
        }
        if (op == "now") {
            ordered_json out;
            out["ok"] = true;
            out["now_ms"] = mock_ ? mock_->now_ms() : clock_->now_ms();
            return out;
        }
        return error_response("bad_request");
    } catch (const BadRequest& e) {
        return error_response("bad_request", e.what());
    }
}

void Server::sweep_loop() {
    std::unique_lock lk(sweep_mu_);
    while (!stopping_.load()) {
        sweep_cv_.wait_for(lk, std::chrono::milliseconds(opts_.sweep_interval_ms));
        if (stopping_.load()) break;
        catalog_->sweep_expired();
    }
}

// ---------------------------------------------------------------------------
// Client

Client::Client(const std::string& registry_addr) : addr_(net::parse_hostport(registry_addr)) {}

json Client::request(const json& req) {
    if (!stream_.valid()) stream_ = net::TcpStream::connect(addr_);
    try {
        stream_.send_all(req.dump() + "\n");
        auto line = stream_.read_line();
        if (!line) throw net::TransportError("registry closed connection");
        return json::parse(*line);
    } catch (...) {
        stream_.close();
        throw;
    }
}

RegisterAck Client::register_instance(const Registration& r) {
    json req{{"op", "register"}, {"node", r.node_id},     {"service", r.service_name},
             {"address", r.address}, {"endpoint", r.endpoint}, {"slots", r.slots},
             {"ttl_s", r.ttl_s}};
    json resp = request(req);
    if (!resp.value("ok", false)) {
        std::string err = resp.value("error", "unknown");
        if (err == "invalid_instance") throw InvalidInstance(resp.value("msg", "invalid instance"));
        throw std::runtime_error("register failed: " + resp.dump());
    }
    auto h = health_from_string(resp.at("health").get<std::string>());
    return {resp.at("index").get<uint64_t>(), h.value_or(Health::passing)};
}

Health Client::heartbeat(const std::string& node_id, const std::string& service_name) {
    json resp = request(json{{"op", "heartbeat"}, {"node", node_id}, {"service", service_name}});
    if (!resp.value("ok", false)) {
        if (resp.value("error", "") == "unknown_instance")
            throw UnknownInstance(node_id + "/" + service_name);
        throw std::runtime_error("heartbeat failed: " + resp.dump());
    }
    auto h = health_from_string(resp.at("health").get<std::string>());
    return h.value_or(Health::passing);
}

uint64_t Client::deregister(const std::string& node_id, const std::string& service_name) {
    json resp = request(json{{"op", "deregister"}, {"node", node_id}, {"service", service_name}});
    if (!resp.value("ok", false)) {
        if (resp.value("error", "") == "unknown_instance")
            throw UnknownInstance(node_id + "/" + service_name);
        throw std::runtime_error("deregister failed: " + resp.dump());
    }
    return resp.at("index").get<uint64_t>();
}

Snapshot Client::catalog(const std::string& service_name, bool passing_only, uint64_t min_index,
                         int wait_ms) {
    json req{{"op", "catalog"},
             {"service", service_name},
             {"passing_only", passing_only},
             {"min_index", min_index},
             {"wait_ms", wait_ms}};
    json resp = request(req);
    if (!resp.value("ok", false)) throw std::runtime_error("catalog failed: " + resp.dump());
    return snapshot_from_json(resp, service_name);
}

int64_t Client::advance_ms(int64_t ms) {
    json resp = request(json{{"op", "advance"}, {"ms", ms}});
    if (!resp.value("ok", false)) throw std::runtime_error("advance failed: " + resp.dump());
    return resp.at("now_ms").get<int64_t>();
}

int64_t Client::now_ms() {
    json resp = request(json{{"op", "now"}});
    if (!resp.value("ok", false)) throw std::runtime_error("now failed: " + resp.dump());
    return resp.at("now_ms").get<int64_t>();
}

} // namespace vcluster::registry
