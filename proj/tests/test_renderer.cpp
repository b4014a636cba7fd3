#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "vcluster/renderer.hpp"

#include <filesystem>
#include <random>
#include <thread>

#include "test_support.hpp"

// note: `using namespace vcluster` would make `render` ambiguous with the
// namespace of the same name
using namespace vcluster::render;
namespace registry = vcluster::registry;
namespace net = vcluster::net;
using registry::Health;
using registry::InstanceView;
using registry::Snapshot;

namespace {

Snapshot make_snapshot(std::vector<std::tuple<std::string, std::string, int, Health>> rows,
                       const std::string& service = "hpc", uint64_t index = 1) {
    Snapshot s;
    s.index = index;
    s.service_name = service;
    for (auto& [node, address, slots, health] : rows)
        s.instances.push_back({node, address, "127.0.0.1:7" + std::to_string(100 + s.instances.size()),
                               slots, health});
    return s;
}

// Independent template interpreter: walks the source text directly instead of
// going through the parsed representation. Assumes the template is valid.
std::string direct_render(std::string_view src, const Snapshot& snap) {
    auto field_of = [](const InstanceView& inst, std::string_view name) -> std::string {
        if (name == "address") return inst.address;
        if (name == "endpoint") return inst.endpoint;
        if (name == "node") return inst.node_id;
        if (name == "slots") return std::to_string(inst.slots);
        return "";
    };

    std::string out;
    size_t i = 0;
    while (i < src.size()) {
        if (src.compare(i, 2, "%{") != 0) {
            out += src[i++];
            continue;
        }
        size_t close = src.find('}', i);
        std::string directive(src.substr(i + 2, close - i - 2));
        REQUIRE(directive.rfind("each ", 0) == 0);
        std::string service = directive.substr(5);
        size_t body_start = close + 1;
        size_t end = src.find("%{end}", body_start);
        std::string_view body = src.substr(body_start, end - body_start);
        if (service == snap.service_name) {
            for (const auto& inst : snap.instances) {
                if (inst.health != Health::passing) continue;
                size_t j = 0;
                while (j < body.size()) {
                    if (body.compare(j, 2, "%{") != 0) {
                        out += body[j++];
                        continue;
                    }
                    size_t pc = body.find('}', j);
                    out += field_of(inst, body.substr(j + 2, pc - j - 2));
                    j = pc + 1;
                }
            }
        }
        i = end + 6;
    }
    return out;
}

constexpr const char* kCanonical = "%{each hpc}%{address}\n%{end}";

} // namespace

TEST_CASE("canonical template parses to one each-block over hpc") {
    auto tmpl = parse_template(kCanonical);
    REQUIRE(tmpl.segments.size() == 1);
    const auto& block = std::get<Template::EachBlock>(tmpl.segments[0]);
    CHECK(block.service_name == "hpc");
    REQUIRE(block.body.size() == 2);
    CHECK(std::get<Field>(block.body[0]) == Field::address);
    CHECK(std::get<std::string>(block.body[1]) == "\n");
}

TEST_CASE("slot-annotated variant parses with two placeholders") {
    auto tmpl = parse_template("%{each hpc}%{address} slots=%{slots}\n%{end}");
    const auto& block = std::get<Template::EachBlock>(tmpl.segments[0]);
    int placeholders = 0;
    for (const auto& part : block.body)
        if (std::holds_alternative<Field>(part)) ++placeholders;
    CHECK(placeholders == 2);
}

TEST_CASE("template syntax errors carry line numbers") {
    CHECK_THROWS_AS(parse_template("%{each hpc}%{bogus}%{end}"), TemplateSyntaxError);

    try {
        parse_template("line one\nline two\n%{each hpc}%{nope}%{end}");
        FAIL("expected TemplateSyntaxError");
    } catch (const TemplateSyntaxError& e) {
        CHECK(e.line() == 3);
    }

    CHECK_THROWS_AS(parse_template("%{each hpc}%{address}"), TemplateSyntaxError); // unclosed
    CHECK_THROWS_AS(parse_template("%{each a}%{each b}%{end}%{end}"), TemplateSyntaxError); // nested
    CHECK_THROWS_AS(parse_template("%{end}"), TemplateSyntaxError);
    CHECK_THROWS_AS(parse_template("%{address}"), TemplateSyntaxError); // outside block
    CHECK_THROWS_AS(parse_template("text %{each hpc"), TemplateSyntaxError); // unterminated
    CHECK_THROWS_AS(parse_template("%{each }x%{end}"), TemplateSyntaxError); // empty name
    CHECK_THROWS_AS(parse_template("%{each a b}x%{end}"), TemplateSyntaxError);

    // a bare % is just a literal
    auto tmpl = parse_template("100% done");
    CHECK(render(tmpl, make_snapshot({})) == "100% done");
}

TEST_CASE("canonical render reproduces the two-line hostfile") {
    auto tmpl = parse_template(kCanonical);
    auto snap = make_snapshot({{"node02", "10.2.0.1", 12, Health::passing},
                               {"node03", "10.3.0.1", 12, Health::passing}});
    CHECK(render(tmpl, snap) == "10.2.0.1\n10.3.0.1\n");
}

TEST_CASE("empty catalog renders empty bytes") {
    CHECK(render(parse_template(kCanonical), make_snapshot({})).empty());
}

TEST_CASE("critical instances are excluded from the rendered output") {
    auto snap = make_snapshot({{"node02", "10.2.0.1", 12, Health::passing},
                               {"node03", "10.3.0.1", 12, Health::critical}});
    auto got = render(parse_template(kCanonical), snap);

    // brute-force comprehension over the instance list
    std::string expected;
    for (const auto& inst : snap.instances)
        if (inst.health == Health::passing) expected += inst.address + "\n";

    CHECK(got == expected);
    CHECK(got == "10.2.0.1\n");
}

TEST_CASE("all placeholders expand from the instance") {
    auto tmpl = parse_template("%{each hpc}%{node} %{address} %{endpoint} slots=%{slots}\n%{end}");
    Snapshot snap = make_snapshot({{"node02", "10.2.0.1", 12, Health::passing}});
    snap.instances[0].endpoint = "127.0.0.1:7102";
    CHECK(render(tmpl, snap) == "node02 10.2.0.1 127.0.0.1:7102 slots=12\n");
}

TEST_CASE("blocks for other services render nothing") {
    auto tmpl = parse_template("header\n%{each gpu}%{address}\n%{end}footer\n");
    auto snap = make_snapshot({{"node02", "10.2.0.1", 12, Health::passing}});
    CHECK(render(tmpl, snap) == "header\nfooter\n");
}

TEST_CASE("parsed-template rendering equals direct source interpretation") {
    std::mt19937 rng(4242);
    const std::string literal_alphabet = "ab c-.\n=";
    const std::vector<std::string> fields{"address", "endpoint", "node", "slots"};
    const std::vector<std::string> services{"hpc", "gpu"};

    for (int iter = 0; iter < 200; ++iter) {
        std::string src;
        auto emit_literal = [&](int max_len) {
            int len = int(rng() % max_len);
            for (int i = 0; i < len; ++i) src += literal_alphabet[rng() % literal_alphabet.size()];
        };
        emit_literal(8);
        int blocks = int(rng() % 3);
        for (int b = 0; b < blocks; ++b) {
            src += "%{each " + services[rng() % services.size()] + "}";
            int parts = int(rng() % 5);
            for (int p = 0; p < parts; ++p) {
                if (rng() % 2)
                    src += "%{" + fields[rng() % fields.size()] + "}";
                else
                    emit_literal(6);
            }
            src += "%{end}";
            emit_literal(8);
        }

        Snapshot snap;
        snap.index = 1;
        snap.service_name = services[rng() % services.size()];
        int n = int(rng() % 5);
        for (int i = 0; i < n; ++i)
            snap.instances.push_back({"node" + std::to_string(i), "10.2.0." + std::to_string(i + 1),
                                      "127.0.0.1:" + std::to_string(7000 + i), 1 + int(rng() % 16),
                                      rng() % 4 ? Health::passing : Health::critical});

        CAPTURE(src);
        auto tmpl = parse_template(src);
        CHECK(render(tmpl, snap) == direct_render(src, snap));
    }
}

TEST_CASE("render is bit-stable across repeated calls") {
    auto tmpl = parse_template("%{each hpc}%{address} slots=%{slots}\n%{end}");
    auto snap = make_snapshot({{"node02", "10.2.0.1", 12, Health::passing},
                               {"node03", "10.3.0.1", 4, Health::passing}});
    std::string first = render(tmpl, snap);
    for (int i = 0; i < 1000; ++i) REQUIRE(render(tmpl, snap) == first);
}

// ---------------------------------------------------------------------------
// Watch loop against a live in-process registry

namespace {

struct WatchFixture {
    registry::Server server{registry::Server::Options{"127.0.0.1", 0, 50, false}};
    test_support::TempDir dir;
    std::filesystem::path out;
    std::filesystem::path trigger_log;

    WatchFixture() {
        server.start();
        out = dir.path() / "hostfile";
        trigger_log = dir.path() / "trigger.log";
    }
    std::string addr() { return "127.0.0.1:" + std::to_string(server.port()); }
    registry::Registration reg(const std::string& node, const std::string& address) {
        registry::Registration r;
        r.node_id = node;
        r.service_name = "hpc";
        r.address = address;
        r.endpoint = "127.0.0.1:1";
        r.slots = 12;
        r.ttl_s = 600;
        return r;
    }
    int trigger_count() {
        auto content = test_support::read_file(trigger_log);
        if (!content) return 0;
        return int(std::count(content->begin(), content->end(), '\n'));
    }
};

} // namespace

TEST_CASE("watcher writes, then follows a scale-up within one cycle") {
    WatchFixture fx;
    fx.server.catalog().register_instance(fx.reg("node02", "10.2.0.1"));
    fx.server.catalog().register_instance(fx.reg("node03", "10.3.0.1"));

    WatchOptions wo;
    wo.registry_addr = fx.addr();
    wo.out_path = fx.out;
    wo.wait_ms = 200;
    wo.trigger_cmd = "echo ran >> " + fx.trigger_log.string();
    Watcher watcher(parse_template(kCanonical), wo);
    std::thread runner([&] { watcher.run(); });

    REQUIRE(test_support::eventually(2000, [&] {
        return test_support::read_file(fx.out) == std::optional<std::string>("10.2.0.1\n10.3.0.1\n");
    }));
    int triggers_after_initial = fx.trigger_count();
    CHECK(triggers_after_initial == 1); // fresh file counts as a change

    fx.server.catalog().register_instance(fx.reg("node04", "10.4.0.1"));
    REQUIRE(test_support::eventually(2000, [&] {
        return test_support::read_file(fx.out) ==
               std::optional<std::string>("10.2.0.1\n10.3.0.1\n10.4.0.1\n");
    }));
    CHECK(test_support::eventually(1000, [&] { return fx.trigger_count() == triggers_after_initial + 1; }));

    watcher.stop();
    runner.join();
    CHECK(watcher.stats().writes == 2);
}

TEST_CASE("unchanged catalog never rewrites: one write, at most one trigger") {
    WatchFixture fx;
    fx.server.catalog().register_instance(fx.reg("node02", "10.2.0.1"));

    WatchOptions wo;
    wo.registry_addr = fx.addr();
    wo.out_path = fx.out;
    wo.wait_ms = 0; // every cycle is an immediate wake-up
    wo.max_cycles = 500;
    wo.trigger_cmd = "echo ran >> " + fx.trigger_log.string();
    Watcher watcher(parse_template(kCanonical), wo);
    watcher.run();

    auto st = watcher.stats();
    CHECK(st.cycles == 500);
    CHECK(st.writes == 1);
    CHECK(st.trigger_runs == 1);
    CHECK(fx.trigger_count() == 1);
}

TEST_CASE("index bump without content change does not rewrite the file") {
    WatchFixture fx;
    fx.server.catalog().register_instance(fx.reg("node02", "10.2.0.1"));

    WatchOptions wo;
    wo.registry_addr = fx.addr();
    wo.out_path = fx.out;
    wo.wait_ms = 100;
    Watcher watcher(parse_template(kCanonical), wo);
    std::thread runner([&] { watcher.run(); });
    REQUIRE(test_support::eventually(2000, [&] { return watcher.stats().writes == 1; }));

    // upsert: index moves, passing list and bytes stay identical
    for (int i = 0; i < 5; ++i) fx.server.catalog().register_instance(fx.reg("node02", "10.2.0.1"));
    std::this_thread::sleep_for(std::chrono::milliseconds(400));
    watcher.stop();
    runner.join();

    CHECK(watcher.stats().writes == 1);
    CHECK(watcher.stats().last_index == fx.server.catalog().index());
}

TEST_CASE("registry down at startup: no file until the first good snapshot") {
    test_support::TempDir dir;
    auto out = dir.path() / "hostfile";
    WatchOptions wo;
    wo.registry_addr = "127.0.0.1:1"; // nothing listens there
    wo.out_path = out;
    wo.wait_ms = 50;
    wo.retry_backoff_ms = 20;
    Watcher watcher(parse_template(kCanonical), wo);
    std::thread runner([&] { watcher.run(); });
    std::this_thread::sleep_for(std::chrono::milliseconds(300));
    watcher.stop();
    runner.join();
    CHECK_FALSE(test_support::read_file(out).has_value());
    CHECK(watcher.stats().errors > 0);
    CHECK(watcher.stats().writes == 0);
}

TEST_CASE("registry loss mid-watch keeps the last good file intact") {
    auto server = std::make_unique<registry::Server>(
        registry::Server::Options{"127.0.0.1", 0, 1000, false});
    server->start();
    std::string addr = "127.0.0.1:" + std::to_string(server->port());
    registry::Registration r;
    r.node_id = "node02";
    r.service_name = "hpc";
    r.address = "10.2.0.1";
    r.endpoint = "127.0.0.1:1";
    r.slots = 12;
    r.ttl_s = 600;
    server->catalog().register_instance(r);

    test_support::TempDir dir;
    auto out = dir.path() / "hostfile";
    WatchOptions wo;
    wo.registry_addr = addr;
    wo.out_path = out;
    wo.wait_ms = 50;
    wo.retry_backoff_ms = 20;
    Watcher watcher(parse_template(kCanonical), wo);
    std::thread runner([&] { watcher.run(); });
    REQUIRE(test_support::eventually(2000, [&] { return watcher.stats().writes == 1; }));

    server->stop();
    server.reset(); // connection refused from here on
    std::this_thread::sleep_for(std::chrono::milliseconds(300));
    watcher.stop();
    runner.join();

    CHECK(test_support::read_file(out) == std::optional<std::string>("10.2.0.1\n"));
    CHECK(watcher.stats().errors > 0);
}

TEST_CASE("atomic_write replaces content without leaving temp files behind") {
    test_support::TempDir dir;
    auto path = dir.path() / "hostfile";
    atomic_write(path, "one\n");
    CHECK(test_support::read_file(path) == std::optional<std::string>("one\n"));
    atomic_write(path, "two\n");
    CHECK(test_support::read_file(path) == std::optional<std::string>("two\n"));
    int entries = 0;
    for ([[maybe_unused]] auto& e : std::filesystem::directory_iterator(dir.path())) ++entries;
    CHECK(entries == 1);
}
