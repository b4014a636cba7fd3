#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "vcluster/agent.hpp"
#include "vcluster/registry.hpp"

#include <atomic>
#include <memory>
#include <thread>

#include "test_support.hpp"

using namespace vcluster;
using namespace vcluster::agent;

namespace {

constexpr const char* kMinimalSpec =
    "node_id = node02\n"
    "slots = 12\n"
    "ttl_s = 15\n"
    "logical_address = 10.2.0.1\n"
    "exec_allow = /bin/, /usr/bin/\n";

NodeSpec test_spec(const std::string& node, const std::string& address,
                   const std::string& registry_addr, int slots = 12, int ttl_s = 15) {
    NodeSpec spec;
    spec.node_id = node;
    spec.slots = slots;
    spec.ttl_s = ttl_s;
    spec.heartbeat_interval_s = 0.2;
    spec.registry_addr = registry_addr;
    spec.listen_addr = "127.0.0.1:0";
    spec.logical_address = address;
    spec.exec_allow = {"/bin/", "/usr/bin/"};
    return spec;
}

uint16_t probe_free_port() {
    auto l = net::TcpListener::bind({"127.0.0.1", 0});
    return l.local_port();
}

} // namespace

// ---------------------------------------------------------------------------
// NodeSpec

TEST_CASE("nodespec defaults: hpc service, heartbeat = ttl/3") {
    auto spec = load_nodespec(kMinimalSpec);
    CHECK(spec.node_id == "node02");
    CHECK(spec.slots == 12);
    CHECK(spec.ttl_s == 15);
    CHECK(spec.service_name == "hpc");
    CHECK(spec.heartbeat_interval_s == doctest::Approx(5.0));
    CHECK(spec.registry_addr == "127.0.0.1:8500");
    CHECK(spec.listen_addr == "127.0.0.1:0");
    REQUIRE(spec.exec_allow.size() == 2);
    CHECK(spec.exec_allow[0] == "/bin/");
    CHECK(spec.exec_allow[1] == "/usr/bin/");
}

TEST_CASE("nodespec accepts comments, blank lines and explicit fields") {
    auto spec = load_nodespec(
        "# compute node\n"
        "\n"
        "node_id = node03   # trailing comment\n"
        "service_name = gpu\n"
        "slots = 4\n"
        "ttl_s = 9\n"
        "heartbeat_interval_s = 1.5\n"
        "registry_addr = 127.0.0.1:9000\n"
        "listen_addr = 127.0.0.1:7103\n"
        "logical_address = 10.3.0.1\n"
        "exec_allow = /opt/apps/\n");
    CHECK(spec.node_id == "node03");
    CHECK(spec.service_name == "gpu");
    CHECK(spec.slots == 4);
    CHECK(spec.heartbeat_interval_s == doctest::Approx(1.5));
    CHECK(spec.exec_allow == std::vector<std::string>{"/opt/apps/"});
}

TEST_CASE("nodespec rejects a heartbeat interval at or above the ttl") {
    try {
        load_nodespec(
            "node_id = n\nslots = 1\nttl_s = 15\nheartbeat_interval_s = 20\n"
            "logical_address = 10.2.0.1\nexec_allow = /bin/\n");
        FAIL("expected SpecInvalid");
    } catch (const SpecInvalid& e) {
        CHECK(e.field() == "heartbeat_interval_s");
    }
}

TEST_CASE("nodespec invariant violations name the field") {
    auto expect_field = [](const std::string& text, const std::string& field) {
        try {
            load_nodespec(text);
            FAIL_CHECK("expected SpecInvalid for ", field);
        } catch (const SpecInvalid& e) {
            CHECK(e.field() == field);
        }
    };
    expect_field("slots = 1\nlogical_address = 10.2.0.1\nexec_allow = /bin/\n", "node_id");
    expect_field("node_id = n\nlogical_address = 10.2.0.1\nexec_allow = /bin/\n", "slots");
    expect_field("node_id = n\nslots = 0\nlogical_address = 10.2.0.1\nexec_allow = /bin/\n",
                 "slots");
    expect_field("node_id = n\nslots = 1\nttl_s = 0\nlogical_address = 10.2.0.1\nexec_allow = /bin/\n",
                 "ttl_s");
    expect_field("node_id = n\nslots = 1\nexec_allow = /bin/\n", "logical_address");
    expect_field("node_id = n\nslots = 1\nlogical_address = 500.1.1.1\nexec_allow = /bin/\n",
                 "logical_address");
    expect_field("node_id = n\nslots = 1\nlogical_address = 10.2.0.1\n", "exec_allow");
    expect_field(
        "node_id = n\nslots = 1\nlogical_address = 10.2.0.1\nexec_allow = /bin/\nregistry_addr = nope\n",
        "registry_addr");
}

TEST_CASE("nodespec parse errors carry line numbers") {
    CHECK_THROWS_AS(load_nodespec("node_id = n\nwhat is this\n"), SpecParseError);
    CHECK_THROWS_AS(load_nodespec("bogus_key = 1\n"), SpecParseError);
    CHECK_THROWS_AS(load_nodespec("slots = twelve\n"), SpecParseError);
    CHECK_THROWS_AS(load_nodespec("node_id = a\nnode_id = b\n"), SpecParseError);
    try {
        load_nodespec("node_id = n\n\nslots = oops\n");
        FAIL("expected SpecParseError");
    } catch (const SpecParseError& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
}

TEST_CASE("nodespec round-trips through to_text") {
    auto spec = load_nodespec(kMinimalSpec);
    auto again = load_nodespec(to_text(spec));
    CHECK(again.node_id == spec.node_id);
    CHECK(again.slots == spec.slots);
    CHECK(again.ttl_s == spec.ttl_s);
    CHECK(again.heartbeat_interval_s == doctest::Approx(spec.heartbeat_interval_s));
    CHECK(again.exec_allow == spec.exec_allow);
    CHECK(again.logical_address == spec.logical_address);
}

// ---------------------------------------------------------------------------
// exec engine

TEST_CASE("exec_allowed is a normalized prefix check") {
    std::vector<std::string> allow{"/bin/", "/usr/bin/"};
    CHECK(exec_allowed("/bin/echo", allow));
    CHECK(exec_allowed("/usr/bin/seq", allow));
    CHECK_FALSE(exec_allowed("/usr/sbin/anything", allow));
    CHECK_FALSE(exec_allowed("/usr/bin/forbidden", {"/bin/"}));
    CHECK_FALSE(exec_allowed("/bin/../usr/sbin/sshd", allow)); // traversal normalizes away
    CHECK_FALSE(exec_allowed("bin/echo", allow));
    CHECK_FALSE(exec_allowed("", allow));
    CHECK_FALSE(exec_allowed("/bin/echo", {}));
}

TEST_CASE("run_exec: echo") {
    ExecRequest req;
    req.cmd = "/bin/echo";
    req.args = {"hi"};
    auto result = run_exec(req);
    CHECK(result.exit_code == 0);
    CHECK(result.stdout_lines == std::vector<std::string>{"hi"});
    CHECK(result.stderr_lines.empty());
}

TEST_CASE("run_exec: env reaches the child, hello line matches") {
    ExecRequest req;
    req.cmd = "/bin/sh";
    req.args = {"-c", "echo \"Hello world! I am process number: $HPC_RANK on host $HPC_NODE\""};
    req.env = {{"HPC_RANK", "3"}, {"HPC_NODE", "node02"}};
    auto result = run_exec(req);
    CHECK(result.exit_code == 0);
    REQUIRE(result.stdout_lines.size() == 1);
    CHECK(result.stdout_lines[0] == "Hello world! I am process number: 3 on host node02");
}

TEST_CASE("run_exec: exit codes and stderr propagate") {
    ExecRequest req;
    req.cmd = "/bin/sh";
    req.args = {"-c", "echo oops >&2; exit 3"};
    auto result = run_exec(req);
    CHECK(result.exit_code == 3);
    CHECK(result.stderr_lines == std::vector<std::string>{"oops"});
}

TEST_CASE("run_exec: missing executable is a SpawnError") {
    ExecRequest req;
    req.cmd = "/bin/does-not-exist-xyz";
    bool sink_called = false;
    CHECK_THROWS_AS(run_exec(req, [&](auto, auto) { sink_called = true; }), SpawnError);
    CHECK_FALSE(sink_called);
}

TEST_CASE("run_exec: timeout kills the child and reports -1") {
    ExecRequest req;
    req.cmd = "/bin/sh";
    req.args = {"-c", "sleep 30"};
    req.timeout_s = 1;
    auto t0 = std::chrono::steady_clock::now();
    auto result = run_exec(req);
    CHECK(result.exit_code == -1);
    CHECK(test_support::elapsed_ms_since(t0) < 5000);
    CHECK(result.duration_ms >= 1000);
}

TEST_CASE("run_exec: final line without newline still arrives") {
    ExecRequest req;
    req.cmd = "/bin/sh";
    req.args = {"-c", "printf 'a\\nb'"};
    auto result = run_exec(req);
    CHECK(result.stdout_lines == std::vector<std::string>{"a", "b"});
}

TEST_CASE("run_exec: 10 MB of output arrives intact and in order") {
    const long kLines = 1500000; // ~10.2 MB of digits and newlines
    ExecRequest req;
    req.cmd = "/usr/bin/seq";
    req.args = {"1", std::to_string(kLines)};
    req.timeout_s = 120;
    auto result = run_exec(req);
    REQUIRE(result.exit_code == 0);
    REQUIRE(long(result.stdout_lines.size()) == kLines);
    bool all_match = true;
    for (long i = 0; i < kLines; ++i) {
        if (result.stdout_lines[size_t(i)] != std::to_string(i + 1)) {
            all_match = false;
            break;
        }
    }
    CHECK(all_match);
}

// ---------------------------------------------------------------------------
// Agent daemon against a live registry

namespace {

struct AgentFixture {
    registry::Server server{registry::Server::Options{"127.0.0.1", 0, 50, false}};
    AgentFixture() { server.start(); }
    std::string addr() { return "127.0.0.1:" + std::to_string(server.port()); }
};

} // namespace

TEST_CASE("agent registers on start and the catalog sees its endpoint") {
    AgentFixture fx;
    Agent node(test_spec("node03", "10.3.0.1", fx.addr()));
    node.start();
    auto snap = fx.server.catalog().snapshot("hpc", true);
    REQUIRE(snap.instances.size() == 1);
    CHECK(snap.instances[0].node_id == "node03");
    CHECK(snap.instances[0].address == "10.3.0.1");
    CHECK(snap.instances[0].endpoint == node.endpoint());
    CHECK(snap.instances[0].slots == 12);
    node.shutdown(true);
    CHECK(fx.server.catalog().snapshot("hpc", true).instances.empty());
}

TEST_CASE("agent start fails with BindError when the port is taken, nothing registered") {
    AgentFixture fx;
    auto occupier = net::TcpListener::bind({"127.0.0.1", 0});
    auto spec = test_spec("node03", "10.3.0.1", fx.addr());
    spec.listen_addr = "127.0.0.1:" + std::to_string(occupier.local_port());
    Agent node(spec);
    CHECK_THROWS_AS(node.start(), net::BindError);
    CHECK(fx.server.catalog().snapshot("hpc", true).instances.empty());
}

TEST_CASE("agent gives up with RegistryUnreachable after its retry budget") {
    auto spec = test_spec("node03", "10.3.0.1", "127.0.0.1:1");
    Agent node(spec);
    node.set_retry_policy(3, 10);
    auto t0 = std::chrono::steady_clock::now();
    CHECK_THROWS_AS(node.start(), RegistryUnreachable);
    CHECK(test_support::elapsed_ms_since(t0) < 5000);
}

TEST_CASE("agent heartbeats keep the instance passing") {
    AgentFixture fx;
    auto spec = test_spec("node03", "10.3.0.1", fx.addr(), 12, /*ttl_s=*/1);
    spec.heartbeat_interval_s = 0.25;
    Agent node(spec);
    node.start();
    // ttl 1 s with 50 ms sweeps: any missed heartbeat window would flip it
    auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(2500);
    while (std::chrono::steady_clock::now() < deadline) {
        auto snap = fx.server.catalog().snapshot("hpc", false);
        REQUIRE(snap.instances.size() == 1);
        REQUIRE(snap.instances[0].health == registry::Health::passing);
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    node.shutdown(true);
}

TEST_CASE("abrupt shutdown leaves the instance to expire via TTL") {
    AgentFixture fx;
    auto spec = test_spec("node03", "10.3.0.1", fx.addr(), 12, /*ttl_s=*/1);
    spec.heartbeat_interval_s = 0.25;
    Agent node(spec);
    node.start();
    node.shutdown(false); // no deregister
    auto snap = fx.server.catalog().snapshot("hpc", false);
    REQUIRE(snap.instances.size() == 1); // still present...
    CHECK(test_support::eventually(3000, [&] {
        auto s = fx.server.catalog().snapshot("hpc", false);
        return s.instances.size() == 1 && s.instances[0].health == registry::Health::critical;
    }));
    node.shutdown(true); // second call is a no-op
}

TEST_CASE("graceful shutdown with the registry gone logs and returns") {
    auto server = std::make_unique<registry::Server>(
        registry::Server::Options{"127.0.0.1", 0, 1000, false});
    server->start();
    std::string addr = "127.0.0.1:" + std::to_string(server->port());
    Agent node(test_spec("node03", "10.3.0.1", addr));
    node.start();
    server->stop();
    server.reset();
    CHECK_NOTHROW(node.shutdown(true)); // deregister failure is logged, not raised
}

TEST_CASE("agent re-registers within two heartbeat intervals of a registry restart") {
    uint16_t port = probe_free_port();
    auto server = std::make_unique<registry::Server>(
        registry::Server::Options{"127.0.0.1", port, 50, false});
    server->start();
    std::string addr = "127.0.0.1:" + std::to_string(port);

    auto spec = test_spec("node03", "10.3.0.1", addr);
    spec.heartbeat_interval_s = 0.4;
    Agent node(spec);
    node.start();
    CHECK(node.registrations() == 1);

    server->stop();
    server = std::make_unique<registry::Server>(
        registry::Server::Options{"127.0.0.1", port, 50, false});
    server->start(); // fresh catalog: the agent is unknown again

    int budget_ms = int(2 * spec.heartbeat_interval_s * 1000) + 300;
    CHECK(test_support::eventually(budget_ms, [&] {
        auto snap = server->catalog().snapshot("hpc", true);
        return snap.instances.size() == 1 && snap.instances[0].node_id == "node03";
    }));
    CHECK(node.registrations() >= 2);
    node.shutdown(true);
}

// ---------------------------------------------------------------------------
// exec protocol over the wire

TEST_CASE("exec protocol: echo, deny, spawn error, bad request") {
    AgentFixture fx;
    Agent node(test_spec("node02", "10.2.0.1", fx.addr()));
    std::atomic<int> spawns{0};
    node.set_spawn_hook([&](const std::string&) { spawns++; });
    node.start();

    SUBCASE("echo round trip with streamed events") {
        ExecRequest req;
        req.cmd = "/bin/echo";
        req.args = {"hi"};
        std::vector<std::string> seen;
        auto result = exec_remote(node.endpoint(), req,
                                  [&](auto stream, auto line) { seen.push_back(std::string(stream) + ":" + std::string(line)); });
        CHECK(result.exit_code == 0);
        CHECK(result.stdout_lines == std::vector<std::string>{"hi"});
        CHECK(seen == std::vector<std::string>{"stdout:hi"});
        CHECK(spawns.load() == 1);
    }

    SUBCASE("deny-by-default: no spawn happens for a disallowed cmd") {
        ExecRequest req;
        req.cmd = "/usr/sbin/forbidden";
        CHECK_THROWS_AS(exec_remote(node.endpoint(), req), ExecDenied);
        CHECK(spawns.load() == 0);
    }

    SUBCASE("missing executable surfaces as SpawnError") {
        ExecRequest req;
        req.cmd = "/bin/no-such-binary";
        CHECK_THROWS_AS(exec_remote(node.endpoint(), req), SpawnError);
    }

    SUBCASE("env keys with '=' are rejected before anything runs") {
        auto stream = net::TcpStream::connect(net::parse_hostport(node.endpoint()));
        stream.send_all(R"({"op":"exec","cmd":"/bin/echo","env":{"BAD=KEY":"x"}})" "\n");
        auto line = stream.read_line();
        REQUIRE(line.has_value());
        auto j = nlohmann::json::parse(*line);
        CHECK(j["ok"] == false);
        CHECK(j["error"] == "bad_request");
        CHECK(spawns.load() == 0);
    }

    SUBCASE("several sequential requests reuse one connection") {
        auto stream = net::TcpStream::connect(net::parse_hostport(node.endpoint()));
        for (int i = 0; i < 3; ++i) {
            nlohmann::json req{{"op", "exec"}, {"cmd", "/bin/echo"}, {"args", {std::to_string(i)}}};
            stream.send_all(req.dump() + "\n");
            auto evt = nlohmann::json::parse(*stream.read_line());
            CHECK(evt["stream"] == "stdout");
            CHECK(evt["line"] == std::to_string(i));
            auto fin = nlohmann::json::parse(*stream.read_line());
            CHECK(fin["exit"] == 0);
        }
    }

    node.shutdown(true);
}

TEST_CASE("stream events arrive while the child is still running") {
    AgentFixture fx;
    Agent node(test_spec("node02", "10.2.0.1", fx.addr()));
    node.start();

    ExecRequest req;
    req.cmd = "/bin/sh";
    req.args = {"-c", "echo first; sleep 0.6; echo second"};
    auto t0 = std::chrono::steady_clock::now();
    int64_t first_line_at = -1;
    auto result = exec_remote(node.endpoint(), req, [&](auto, auto line) {
        if (line == "first") first_line_at = test_support::elapsed_ms_since(t0);
    });
    auto total = test_support::elapsed_ms_since(t0);
    CHECK(result.exit_code == 0);
    REQUIRE(first_line_at >= 0);
    CHECK(total >= 550);          // the job really did sleep
    CHECK(first_line_at < 450);   // but the first line did not wait for it
    node.shutdown(true);
}

TEST_CASE("concurrent exec sessions run independently") {
    AgentFixture fx;
    Agent node(test_spec("node02", "10.2.0.1", fx.addr()));
    node.start();

    const int kSessions = 8;
    std::vector<std::thread> threads;
    std::vector<int> codes(kSessions, -100);
    for (int i = 0; i < kSessions; ++i) {
        threads.emplace_back([&, i] {
            ExecRequest req;
            req.cmd = "/bin/sh";
            req.args = {"-c", "sleep 0.2; echo $HPC_TAG"};
            req.env = {{"HPC_TAG", std::to_string(i)}};
            auto result = exec_remote(node.endpoint(), req);
            if (result.stdout_lines == std::vector<std::string>{std::to_string(i)})
                codes[i] = result.exit_code;
        });
    }
    auto t0 = std::chrono::steady_clock::now();
    for (auto& t : threads) t.join();
    // 8 sequential 200 ms sleeps would need 1.6 s; concurrency keeps it well under
    CHECK(test_support::elapsed_ms_since(t0) < 1200);
    for (int i = 0; i < kSessions; ++i) CHECK(codes[i] == 0);
    node.shutdown(true);
}
