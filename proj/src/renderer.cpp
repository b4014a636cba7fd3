#include "vcluster/renderer.hpp"

#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace vcluster::render {

namespace {

std::optional<Field> field_from_name(std::string_view name) {
    if (name == "address") return Field::address;
    if (name == "endpoint") return Field::endpoint;
    if (name == "node") return Field::node;
    if (name == "slots") return Field::slots;
    return std::nullopt;
}

int line_of(std::string_view source, size_t pos) {
    int line = 1;
    for (size_t i = 0; i < pos && i < source.size(); ++i)
        if (source[i] == '\n') ++line;
    return line;
}

} // namespace

Template parse_template(std::string_view source) {
    Template tmpl;
    std::string literal;
    Template::EachBlock block;
    bool in_block = false;
    int block_line = 0;

    auto flush_literal = [&] {
        if (literal.empty()) return;
        if (in_block)
            block.body.emplace_back(literal);
        else
            tmpl.segments.emplace_back(literal);
        literal.clear();
    };

    size_t i = 0;
    while (i < source.size()) {
        if (source[i] != '%' || i + 1 >= source.size() || source[i + 1] != '{') {
            literal += source[i];
            ++i;
            continue;
        }
        size_t open = i;
        size_t close = source.find('}', open + 2);
        if (close == std::string_view::npos)
            throw TemplateSyntaxError(line_of(source, open), "unterminated %{ directive");
        std::string_view directive = source.substr(open + 2, close - open - 2);
        int line = line_of(source, open);

        if (directive.rfind("each ", 0) == 0) {
            std::string_view name = directive.substr(5);
            if (name.empty() || name.find_first_of(" \t\n}") != std::string_view::npos)
                throw TemplateSyntaxError(line, "bad service name in %{each}");
            if (in_block)
                throw TemplateSyntaxError(line, "each blocks do not nest");
            flush_literal();
            in_block = true;
            block_line = line;
            block = Template::EachBlock{std::string(name), {}};
        } else if (directive == "end") {
            if (!in_block)
                throw TemplateSyntaxError(line, "%{end} without an open %{each}");
            flush_literal();
            in_block = false;
            tmpl.segments.emplace_back(std::move(block));
            block = {};
        } else if (auto field = field_from_name(directive)) {
            if (!in_block)
                throw TemplateSyntaxError(line, "placeholder %{" + std::string(directive) +
                                                    "} outside an each block");
            flush_literal();
            block.body.emplace_back(*field);
        } else {
            throw TemplateSyntaxError(line, "unknown placeholder %{" + std::string(directive) + "}");
        }
        i = close + 1;
    }
    if (in_block)
        throw TemplateSyntaxError(block_line, "unclosed %{each} block");
    flush_literal();
    return tmpl;
}

std::string render(const Template& tmpl, const registry::Snapshot& snapshot) {
    std::string out;
    for (const auto& segment : tmpl.segments) {
        if (const auto* lit = std::get_if<std::string>(&segment)) {
            out += *lit;
            continue;
        }
        const auto& block = std::get<Template::EachBlock>(segment);
        if (block.service_name != snapshot.service_name) continue;
        for (const auto& inst : snapshot.instances) {
            if (inst.health != registry::Health::passing) continue;
            for (const auto& part : block.body) {
                if (const auto* plit = std::get_if<std::string>(&part)) {
                    out += *plit;
                    continue;
                }
                switch (std::get<Field>(part)) {
                    case Field::address: out += inst.address; break;
                    case Field::endpoint: out += inst.endpoint; break;
                    case Field::node: out += inst.node_id; break;
                    case Field::slots: out += std::to_string(inst.slots); break;
                }
            }
        }
    }
    return out;
}

std::string render_once(const Template& tmpl, const std::string& registry_addr,
                        const std::string& service) {
    registry::Client client(registry_addr);
    auto snapshot = client.catalog(service, /*passing_only=*/true, 0, 0);
    return render(tmpl, snapshot);
}

void atomic_write(const std::filesystem::path& path, std::string_view content) {
    auto dir = path.parent_path();
    if (dir.empty()) dir = ".";
    auto tmp = dir / (path.filename().string() + ".tmp." + std::to_string(::getpid()));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out.flush()) throw std::runtime_error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Watcher::Watcher(Template tmpl, WatchOptions opts)
    : tmpl_(std::move(tmpl)), opts_(std::move(opts)) {}

bool Watcher::sleep_interruptible(int ms) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, std::chrono::milliseconds(ms), [&] { return stop_requested_; });
    return !stop_requested_;
}

void Watcher::run() {
    registry::Client client(opts_.registry_addr);
    uint64_t last_index = 0;
    bool wrote_once = false;

    auto stopped = [&] {
        std::lock_guard lk(mu_);
        return stop_requested_;
    };

    while (!stopped()) {
        {
            std::lock_guard lk(mu_);
            if (opts_.max_cycles != 0 && stats_.cycles >= opts_.max_cycles) break;
        }

        // Long-poll in short chunks so stop() is prompt without touching the
        // socket from another thread. A catalog change still wakes the poll
        // immediately.
        registry::Snapshot snapshot;
        try {
            int remaining = opts_.wait_ms;
            for (;;) {
                int chunk = std::min(remaining, 250);
                snapshot = client.catalog(opts_.service, /*passing_only=*/true, last_index,
                                          chunk);
                remaining -= chunk;
                if (snapshot.index > last_index || remaining <= 0 || stopped()) break;
            }
        } catch (const std::exception& e) {
            {
                std::lock_guard lk(mu_);
                ++stats_.errors;
            }
            std::cerr << "renderer: registry unavailable (" << e.what()
                      << "), keeping last hostfile\n";
            if (!sleep_interruptible(opts_.retry_backoff_ms)) break;
            continue;
        }

        last_index = snapshot.index;
        std::string bytes = render(tmpl_, snapshot);
        auto existing = [&]() -> std::optional<std::string> {
            std::ifstream in(opts_.out_path, std::ios::binary);
            if (!in) return std::nullopt;
            std::ostringstream ss;
            ss << in.rdbuf();
            return ss.str();
        }();

        bool changed = !existing || *existing != bytes;
        bool should_write = changed || !wrote_once;
        if (should_write) {
            try {
                atomic_write(opts_.out_path, bytes);
            } catch (const std::exception& e) {
                {
                    std::lock_guard lk(mu_);
                    ++stats_.errors;
                }
                std::cerr << "renderer: write failed (" << e.what() << ")\n";
                if (!sleep_interruptible(opts_.retry_backoff_ms)) break;
                continue;
            }
            wrote_once = true;
        }

        {
            std::lock_guard lk(mu_);
            ++stats_.cycles;
            stats_.last_index = last_index;
            if (should_write) ++stats_.writes;
        }

        if (changed && !opts_.trigger_cmd.empty()) {
            int rc = std::system(opts_.trigger_cmd.c_str());
            std::lock_guard lk(mu_);
            ++stats_.trigger_runs;
            if (rc != 0) {
                ++stats_.trigger_failures;
                std::cerr << "renderer: trigger exited with status " << rc << "\n";
            }
        }
    }
}

void Watcher::stop() {
    std::lock_guard lk(mu_);
    stop_requested_ = true;
    cv_.notify_all();
}

WatchStats Watcher::stats() const {
    std::lock_guard lk(mu_);
    return stats_;
}

} // namespace vcluster::render
