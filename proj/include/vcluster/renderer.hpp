#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "vcluster/registry.hpp"

namespace vcluster::render {

class TemplateSyntaxError : public std::runtime_error {
public:
    TemplateSyntaxError(int line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

enum class Field { address, endpoint, node, slots };

// %{each SERVICE} ... %{end} with %{address|endpoint|node|slots} inside.
// Blocks do not nest; placeholders only appear inside a block.
struct Template {
    using Part = std::variant<std::string, Field>; // literal | placeholder
    struct EachBlock {
        std::string service_name;
        std::vector<Part> body;
    };
    using Segment = std::variant<std::string, EachBlock>;
    std::vector<Segment> segments;
};

Template parse_template(std::string_view source); // throws TemplateSyntaxError

// Pure: emits each block body once per passing instance, in snapshot order.
std::string render(const Template& tmpl, const registry::Snapshot& snapshot);

// One-shot: current catalog -> bytes. Throws net::TransportError when the
// registry is down.
std::string render_once(const Template& tmpl, const std::string& registry_addr,
                        const std::string& service);

// Replaces path contents via temp file + rename so readers never see a
// partial hostfile.
void atomic_write(const std::filesystem::path& path, std::string_view content);

struct WatchOptions {
    std::string registry_addr;
    std::string service = "hpc";
    std::filesystem::path out_path;
    std::string trigger_cmd;      // optional; run via /bin/sh -c after a change lands
    int wait_ms = 5000;           // long-poll budget per cycle
    uint64_t max_cycles = 0;      // 0 = run until stop()
    int retry_backoff_ms = 500;   // delay after a registry error
};

struct WatchStats {
    uint64_t cycles = 0;       // completed catalog polls
    uint64_t writes = 0;
    uint64_t trigger_runs = 0;
    uint64_t errors = 0;       // transport failures (kept last good file)
    uint64_t trigger_failures = 0;
    uint64_t last_index = 0;
};

// Watch loop: blocking catalog query -> render -> write only when the bytes
// differ from the file's current content (health flaps that bump the index
// without changing the passing list must not rewrite). First successful
// cycle always writes. Never truncates the file on registry errors.
class Watcher {
public:
    Watcher(Template tmpl, WatchOptions opts);

    void run();  // blocks until stop() or max_cycles
    void stop();
    WatchStats stats() const;

private:
    bool sleep_interruptible(int ms); // false if stopped meanwhile

    Template tmpl_;
    WatchOptions opts_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    bool stop_requested_ = false;
    WatchStats stats_;
};

} // namespace vcluster::render
