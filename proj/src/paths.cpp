#include "cper/paths.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "cper/error.hpp"
#include "cper/rng.hpp"

namespace cper {

namespace {

// Paths produced by the walks of one start vertex, grouped later.
struct EmittedPath {
    NodeId user;
    NodeId item;
    std::vector<NodeId> nodes;
};

void emit_owners(const RecGraph& g, NodeId start, const std::vector<NodeId>& prefix,
                 std::vector<EmittedPath>& out) {
    const NodeId terminal = prefix.back();
    if (g.kind(start) == NodeKind::User) {
        out.push_back({start, terminal, prefix});
    } else {
        for (const NodeId u : g.neighbors(start))
            if (g.kind(u) == NodeKind::User) out.push_back({u, terminal, prefix});
    }
}

// All qualifying prefixes reachable by walks_per_vertex self-avoiding walks
// from `start`. Deterministic given (seed, start).
void walk_vertex(const RecGraph& g, NodeId start, const ExploreOptions& opt,
                 std::vector<EmittedPath>& out) {
    Rng rng(derive_seed(opt.seed, "explore") ^ start);
    std::vector<NodeId> path;
    std::vector<NodeId> candidates;
    for (int w = 0; w < opt.walks_per_vertex; ++w) {
        path.clear();
        path.push_back(start);
        while (static_cast<int>(path.size()) < opt.max_len) {
            candidates.clear();
            for (const NodeId n : g.neighbors(path.back()))
                if (std::find(path.begin(), path.end(), n) == path.end())
                    candidates.push_back(n);
            if (candidates.empty()) break;
            path.push_back(candidates[rng.next_below(candidates.size())]);
            if (static_cast<int>(path.size()) >= opt.min_len &&
                g.kind(path.back()) == NodeKind::Item)
                emit_owners(g, start, path, out);
        }
    }
}

PathSetCollection group_paths(std::vector<std::vector<EmittedPath>>&& per_vertex) {
    // Merge in vertex order so the result is independent of how tasks ran.
    std::map<std::pair<NodeId, NodeId>, PathSet> grouped;
    std::map<std::pair<NodeId, NodeId>, std::set<std::vector<NodeId>>> seen;
    for (auto& chunk : per_vertex) {
        for (auto& e : chunk) {
            const std::pair<NodeId, NodeId> key{e.user, e.item};
            if (!seen[key].insert(e.nodes).second) continue;
            auto& set = grouped[key];
            set.user = e.user;
            set.item = e.item;
            set.paths.push_back(ExplainPath{std::move(e.nodes)});
        }
    }
    std::vector<PathSet> sets;
    sets.reserve(grouped.size());
    for (auto& [key, set] : grouped) sets.push_back(std::move(set));
    return PathSetCollection(std::move(sets));
}

void validate_explore_options(const ExploreOptions& opt) {
    if (opt.min_len < 2 || opt.min_len >= opt.max_len)
        throw ValidationError("explore_paths requires 2 <= min_len < max_len");
    if (opt.walks_per_vertex < 1) throw ValidationError("walks_per_vertex must be >= 1");
}

// One temporal walk; returns a walk of >= 2 nodes or nothing.
std::optional<TemporalWalk> one_temporal_walk(const RecGraph& g, NodeId start, int walk_len,
                                              Rng& rng) {
    TemporalWalk walk;
    walk.nodes.push_back(start);
    std::int64_t bound = std::numeric_limits<std::int64_t>::max();
    std::vector<NodeId> candidates;
    while (static_cast<int>(walk.nodes.size()) < walk_len) {
        const NodeId cur = walk.nodes.back();
        candidates.clear();
        for (const NodeId n : g.neighbors(cur)) {
            const auto* times = g.interaction_times(cur, n);
            if (times == nullptr) {
                candidates.push_back(n);  // attribute edge: always legal
            } else if (!times->empty() && times->front() <= bound) {
                candidates.push_back(n);
            }
        }
        if (candidates.empty()) break;
        const NodeId next = candidates[rng.next_below(candidates.size())];
        const auto* times = g.interaction_times(cur, next);
        if (times == nullptr) {
            walk.edge_times.push_back(std::nullopt);
        } else {
            const auto end = std::upper_bound(times->begin(), times->end(), bound);
            const auto count = static_cast<std::size_t>(end - times->begin());
            const std::int64_t t = (*times)[rng.next_below(count)];
            walk.edge_times.push_back(t);
            bound = t;
        }
        walk.nodes.push_back(next);
    }
    if (walk.nodes.size() < 2) return std::nullopt;
    return walk;
}

void walk_vertex_temporal(const RecGraph& g, NodeId start, const TemporalWalkOptions& opt,
                          std::vector<TemporalWalk>& out) {
    Rng rng(derive_seed(opt.seed, "twalk") ^ start);
    for (int w = 0; w < opt.walks_per_vertex; ++w)
        if (auto walk = one_temporal_walk(g, start, opt.walk_len, rng))
            out.push_back(std::move(*walk));
}

}  // namespace

PathSetCollection::PathSetCollection(std::vector<PathSet> sets) : sets_(std::move(sets)) {
    std::sort(sets_.begin(), sets_.end(), [](const PathSet& a, const PathSet& b) {
        return std::pair{a.user, a.item} < std::pair{b.user, b.item};
    });
}

const PathSet& PathSetCollection::pair(NodeId user, NodeId item) const {
    const auto it = std::lower_bound(
        sets_.begin(), sets_.end(), std::pair{user, item}, [](const PathSet& s, const auto& key) {
            return std::pair{s.user, s.item} < key;
        });
    if (it != sets_.end() && it->user == user && it->item == item) return *it;
    return empty_;
}

std::size_t PathSetCollection::total_paths() const {
    std::size_t n = 0;
    for (const auto& s : sets_) n += s.paths.size();
    return n;
}

void PathSetCollection::save_jsonl(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot write path sets: " + path.string());
    for (const auto& set : sets_) {
        nlohmann::json rec{{"user", set.user}, {"item", set.item}};
        auto& paths = rec["paths"] = nlohmann::json::array();
        for (const auto& p : set.paths) paths.push_back(p.nodes);
        os << rec.dump() << '\n';
    }
}

PathSetCollection PathSetCollection::load_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open path sets: " + path.string());
    std::vector<PathSet> sets;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto rec = nlohmann::json::parse(line);
        PathSet set;
        set.user = rec.at("user").get<NodeId>();
        set.item = rec.at("item").get<NodeId>();
        for (const auto& nodes : rec.at("paths"))
            set.paths.push_back(ExplainPath{nodes.get<std::vector<NodeId>>()});
        sets.push_back(std::move(set));
    }
    return PathSetCollection(std::move(sets));
}

PathSetCollection explore_paths(const RecGraph& g, const ExploreOptions& opt) {
    validate_explore_options(opt);
    const auto start_count = static_cast<std::int64_t>(g.user_count() + g.item_count());
    std::vector<std::vector<EmittedPath>> per_vertex(start_count);
#pragma omp parallel for schedule(dynamic, 16)
    for (std::int64_t v = 0; v < start_count; ++v)
        walk_vertex(g, static_cast<NodeId>(v), opt, per_vertex[v]);
    return group_paths(std::move(per_vertex));
}

std::vector<TemporalWalk> temporal_walks(const RecGraph& g, const TemporalWalkOptions& opt) {
    if (opt.walk_len < 2) throw ValidationError("temporal_walks requires walk_len >= 2");
    if (opt.walks_per_vertex < 1) throw ValidationError("walks_per_vertex must be >= 1");
    const auto start_count = static_cast<std::int64_t>(g.node_count());
    std::vector<std::vector<TemporalWalk>> per_vertex(start_count);
#pragma omp parallel for schedule(dynamic, 16)
    for (std::int64_t v = 0; v < start_count; ++v)
        walk_vertex_temporal(g, static_cast<NodeId>(v), opt, per_vertex[v]);

    std::vector<TemporalWalk> walks;
    for (auto& chunk : per_vertex)
        for (auto& w : chunk) walks.push_back(std::move(w));
    return walks;
}

namespace serial {

PathSetCollection explore_paths(const RecGraph& g, const ExploreOptions& opt) {
    validate_explore_options(opt);
    const auto start_count = static_cast<std::int64_t>(g.user_count() + g.item_count());
    std::vector<std::vector<EmittedPath>> per_vertex(start_count);
    for (std::int64_t v = 0; v < start_count; ++v)
        walk_vertex(g, static_cast<NodeId>(v), opt, per_vertex[v]);
    return group_paths(std::move(per_vertex));
}

std::vector<TemporalWalk> temporal_walks(const RecGraph& g, const TemporalWalkOptions& opt) {
    if (opt.walk_len < 2) throw ValidationError("temporal_walks requires walk_len >= 2");
    if (opt.walks_per_vertex < 1) throw ValidationError("walks_per_vertex must be >= 1");
    std::vector<TemporalWalk> walks;
    for (NodeId v = 0; v < g.node_count(); ++v) {
        std::vector<TemporalWalk> chunk;
        walk_vertex_temporal(g, v, opt, chunk);
        for (auto& w : chunk) walks.push_back(std::move(w));
    }
    return walks;
}

}  // namespace serial

void save_walks_jsonl(const std::vector<TemporalWalk>& walks, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot write walks: " + path.string());
    for (const auto& w : walks) {
        nlohmann::json rec{{"nodes", w.nodes}};
        auto& times = rec["times"] = nlohmann::json::array();
        for (const auto& t : w.edge_times)
            times.push_back(t ? nlohmann::json(*t) : nlohmann::json(nullptr));
        os << rec.dump() << '\n';
    }
}

std::vector<TemporalWalk> load_walks_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open walks: " + path.string());
    std::vector<TemporalWalk> walks;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto rec = nlohmann::json::parse(line);
        TemporalWalk w;
        w.nodes = rec.at("nodes").get<std::vector<NodeId>>();
        for (const auto& t : rec.at("times"))
            w.edge_times.push_back(t.is_null() ? std::nullopt
                                               : std::optional<std::int64_t>(t.get<std::int64_t>()));
        walks.push_back(std::move(w));
    }
    return walks;
}

}  // namespace cper
