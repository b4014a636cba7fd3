#include "vcluster/launcher.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <numeric>
#include <semaphore>
#include <set>
#include <sstream>
#include <thread>

#include "vcluster/net.hpp"
#include "vcluster/registry.hpp"

namespace vcluster::launch {

std::optional<MapBy> map_by_from_string(std::string_view s) {
    if (s == "slot") return MapBy::slot;
    if (s == "node") return MapBy::node;
    return std::nullopt;
}

Hostfile parse_hostfile(std::string_view source) {
    Hostfile hf;
    std::set<std::string> seen;
    int lineno = 0;
    size_t pos = 0;
    while (pos <= source.size()) {
        size_t nl = source.find('\n', pos);
        std::string_view raw = source.substr(pos, nl == std::string_view::npos
                                                      ? std::string_view::npos
                                                      : nl - pos);
        pos = nl == std::string_view::npos ? source.size() + 1 : nl + 1;
        ++lineno;

        std::string line(raw.substr(0, raw.find('#')));
        std::istringstream ss(line);
        std::string address, extra, trailing;
        ss >> address;
        if (address.empty()) continue;
        if (!net::parse_ipv4(address))
            throw HostfileParseError(lineno, "bad address '" + address + "'");
        if (!seen.insert(address).second)
            throw HostfileParseError(lineno, "duplicate address " + address);

        HostEntry entry{address, 1, false};
        if (ss >> extra) {
            if (extra.rfind("slots=", 0) != 0)
                throw HostfileParseError(lineno, "unexpected token '" + extra + "'");
            std::string num = extra.substr(6);
            int slots = 0;
            auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), slots);
            if (ec != std::errc{} || p != num.data() + num.size())
                throw HostfileParseError(lineno, "bad slots value '" + num + "'");
            if (slots < 1) throw HostfileParseError(lineno, "slots must be >= 1");
            entry.slots = slots;
            entry.explicit_slots = true;
            if (ss >> trailing)
                throw HostfileParseError(lineno, "unexpected token '" + trailing + "'");
        }
        hf.entries.push_back(std::move(entry));
    }
    return hf;
}

RankAssignment map_ranks(int np, const Hostfile& hostfile, MapBy map_by, bool oversubscribe) {
    if (np < 1) throw std::invalid_argument("np must be >= 1");
    if (hostfile.entries.empty()) throw std::invalid_argument("hostfile is empty");

    const auto& hosts = hostfile.entries;
    int64_t capacity = 0;
    for (const auto& h : hosts) capacity += h.slots;
    if (!oversubscribe && np > capacity)
        throw Oversubscription("np=" + std::to_string(np) + " exceeds " +
                               std::to_string(capacity) + " total slots");

    RankAssignment out;
    out.placements.resize(static_cast<size_t>(np));
    std::vector<int> used(hosts.size(), 0);

    if (map_by == MapBy::slot) {
        // fill each host to its slot count in hostfile order; with
        // oversubscribe the cycle repeats, slots acting as relative weights
        int rank = 0;
        while (rank < np) {
            for (size_t h = 0; h < hosts.size() && rank < np; ++h) {
                for (int s = 0; s < hosts[h].slots && rank < np; ++s) {
                    out.placements[rank] = {hosts[h].address, "", used[h]++};
                    ++rank;
                }
            }
        }
    } else {
        // round-robin in hostfile order; full hosts are skipped unless
        // oversubscribing, which ignores slot counts entirely
        size_t cursor = 0;
        for (int rank = 0; rank < np; ++rank) {
            size_t tried = 0;
            while (!oversubscribe && used[cursor] >= hosts[cursor].slots) {
                cursor = (cursor + 1) % hosts.size();
                if (++tried > hosts.size())
                    throw Oversubscription("no host has a free slot"); // unreachable given capacity check
            }
            out.placements[rank] = {hosts[cursor].address, "", used[cursor]++};
            cursor = (cursor + 1) % hosts.size();
        }
    }
    return out;
}

namespace {

std::string join_addresses(const Hostfile& hostfile) {
    std::string out;
    for (size_t i = 0; i < hostfile.entries.size(); ++i) {
        if (i) out += ",";
        out += hostfile.entries[i].address;
    }
    return out;
}

} // namespace

JobResult run_job(const JobSpec& spec, const Hostfile& hostfile,
                  const std::string& registry_addr) {
    if (spec.np < 1) throw std::invalid_argument("np must be >= 1");

    registry::Client client(registry_addr);
    auto snapshot = client.catalog(spec.service, /*passing_only=*/true, 0, 0);

    std::map<std::string, const registry::InstanceView*> by_address;
    for (const auto& inst : snapshot.instances) by_address[inst.address] = &inst;

    // resolve logical address -> endpoint/node/slots before any dispatch
    Hostfile effective = hostfile;
    std::map<std::string, std::string> endpoint_of, node_of;
    for (auto& entry : effective.entries) {
        auto it = by_address.find(entry.address);
        if (it == by_address.end())
            throw UnknownHost(entry.address + " has no passing instance in service '" +
                              spec.service + "'");
        endpoint_of[entry.address] = it->second->endpoint;
        node_of[entry.address] = it->second->node_id;
        if (!entry.explicit_slots && spec.slots_from_registry) entry.slots = it->second->slots;
    }

    RankAssignment assignment = map_ranks(spec.np, effective, spec.map_by, spec.oversubscribe);
    for (auto& p : assignment.placements) p.node_id = node_of[p.address];

    // reachability probe: the job aborts here rather than half-dispatched
    for (const auto& [address, endpoint] : endpoint_of) {
        try {
            net::TcpStream::connect(net::parse_hostport(endpoint)).close();
        } catch (const std::exception& e) {
            throw AgentUnreachable(address + " (" + endpoint + "): " + e.what());
        }
    }

    const std::string hostlist = join_addresses(hostfile);
    JobResult result;
    result.per_rank.resize(static_cast<size_t>(spec.np));

    std::counting_semaphore<> in_flight(std::max(1, spec.max_in_flight));
    std::atomic<bool> abort{false};
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(spec.np));

    for (int rank = 0; rank < spec.np; ++rank) {
        threads.emplace_back([&, rank] {
            in_flight.acquire();
            agent::ExecResult& slot = result.per_rank[static_cast<size_t>(rank)];
            if (abort.load()) {
                slot.exit_code = -1;
                slot.stderr_lines.push_back("rank " + std::to_string(rank) +
                                            " skipped: job aborted");
                in_flight.release();
                return;
            }
            const Placement& place = assignment.placements[static_cast<size_t>(rank)];
            agent::ExecRequest req;
            req.cmd = spec.cmd;
            req.args = spec.args;
            req.env = spec.env;
            req.env["HPC_RANK"] = std::to_string(rank);
            req.env["HPC_SIZE"] = std::to_string(spec.np);
            req.env["HPC_NODE"] = place.node_id;
            req.env["HPC_LOCAL"] = std::to_string(place.local_index);
            req.env["HPC_HOSTLIST"] = hostlist;
            req.timeout_s = spec.timeout_s;
            try {
                slot = agent::exec_remote(endpoint_of.at(place.address), req);
            } catch (const std::exception& e) {
                abort.store(true);
                slot.exit_code = -1;
                slot.stderr_lines.push_back("rank " + std::to_string(rank) + " on " +
                                            place.address + " failed: " + e.what());
            }
            in_flight.release();
        });
    }
    for (auto& t : threads) t.join();

    result.job_exit = 0;
    for (const auto& r : result.per_rank) {
        if (r.exit_code == -1) {
            result.job_exit = -1;
            break;
        }
        if (r.exit_code != 0 && result.job_exit == 0) result.job_exit = r.exit_code;
    }
    return result;
}

} // namespace vcluster::launch
