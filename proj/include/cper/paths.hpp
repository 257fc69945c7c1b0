#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "cper/graph.hpp"

namespace cper {

/// Walk from a user (or one of their items) to a candidate item, offered as
/// recommendation evidence. 4..6 nodes by default, consecutive nodes adjacent.
struct ExplainPath {
    std::vector<NodeId> nodes;
    NodeId source() const { return nodes.front(); }
    NodeId target() const { return nodes.back(); }
    bool operator==(const ExplainPath&) const = default;
};

struct PathSet {
    NodeId user = 0;
    NodeId item = 0;
    std::vector<ExplainPath> paths;
};

/// Path sets keyed by (user, item), sorted; lookups for absent pairs return
/// an empty set.
class PathSetCollection {
public:
    PathSetCollection() = default;
    explicit PathSetCollection(std::vector<PathSet> sets);

    const PathSet& pair(NodeId user, NodeId item) const;  // empty set if absent
    const std::vector<PathSet>& sets() const { return sets_; }
    std::size_t total_paths() const;

    void save_jsonl(const std::filesystem::path& path) const;
    static PathSetCollection load_jsonl(const std::filesystem::path& path);

private:
    std::vector<PathSet> sets_;  // sorted by (user, item)
    PathSet empty_;
};

struct ExploreOptions {
    int min_len = 4;  // node count, inclusive
    int max_len = 6;
    int walks_per_vertex = 100;
    std::uint64_t seed = 0;
};

// Self-avoiding random walks from every user and item vertex; every prefix
// whose length is within bounds and whose terminal is an item becomes a path.
// User-start paths belong to the start user; item-start paths belong to every
// user adjacent to the start item. Output is independent of thread count.
PathSetCollection explore_paths(const RecGraph& g, const ExploreOptions& opt);

struct TemporalWalk {
    std::vector<NodeId> nodes;
    // One entry per edge; interaction edges carry the traversed timestamp,
    // attribute edges carry nullopt (they do not reset the time bound).
    std::vector<std::optional<std::int64_t>> edge_times;
    bool operator==(const TemporalWalk&) const = default;
};

struct TemporalWalkOptions {
    int walk_len = 8;  // node count target; walks stop early when stuck
    int walks_per_vertex = 10;
    std::uint64_t seed = 0;
};

// Random walks from every vertex where successive interaction-edge timestamps
// never increase (no future leakage). Output is independent of thread count.
std::vector<TemporalWalk> temporal_walks(const RecGraph& g, const TemporalWalkOptions& opt);

void save_walks_jsonl(const std::vector<TemporalWalk>& walks, const std::filesystem::path& path);
std::vector<TemporalWalk> load_walks_jsonl(const std::filesystem::path& path);

namespace serial {
// Reference implementations: same contracts and identical output as the
// parallel kernels above, kept for tests and benchmarking.
PathSetCollection explore_paths(const RecGraph& g, const ExploreOptions& opt);
std::vector<TemporalWalk> temporal_walks(const RecGraph& g, const TemporalWalkOptions& opt);
}  // namespace serial

}  // namespace cper
