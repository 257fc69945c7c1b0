#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace cper {

using NodeId = std::uint32_t;

enum class NodeKind : std::uint8_t { User = 0, Item = 1, Attribute = 2 };

const char* to_string(NodeKind k);

struct NodeInfo {
    NodeKind kind;
    std::string label;       // external id from the input files
    std::string attr_class;  // non-empty exactly when kind == Attribute
};

struct InteractionRecord {
    std::string user;
    std::string item;
    std::int64_t timestamp;
};

struct AttributeRecord {
    std::string item;
    std::string attr_class;
    std::string attr_value;
};

struct Interaction {
    NodeId item;
    std::int64_t timestamp;
};

/// Heterogeneous user–item–attribute graph. Undirected; user–item edges carry
/// one timestamp per interaction, item–attribute edges carry none. Immutable
/// once built, safe to share across threads.
class RecGraph {
public:
    // Node ids are dense: users [0,U), items [U,U+I), attributes [U+I,U+I+A),
    // each segment in first-seen input order.
    std::size_t node_count() const { return nodes_.size(); }
    std::size_t user_count() const { return user_count_; }
    std::size_t item_count() const { return item_count_; }
    std::size_t attribute_count() const { return nodes_.size() - user_count_ - item_count_; }
    std::size_t edge_count() const { return edge_count_; }
    std::size_t interaction_count() const { return interaction_count_; }
    std::size_t skipped_metadata_rows() const { return skipped_metadata_rows_; }

    const NodeInfo& node(NodeId v) const { return nodes_.at(v); }
    NodeKind kind(NodeId v) const { return nodes_.at(v).kind; }
    const std::vector<NodeInfo>& nodes() const { return nodes_; }

    const std::vector<NodeId>& neighbors(NodeId v) const { return adj_.at(v); }
    bool has_edge(NodeId a, NodeId b) const;

    // Time-ascending purchase sequence of a user.
    const std::vector<Interaction>& history(NodeId user) const;

    // Sorted interaction timestamps of a user–item edge; nullptr for edges
    // without timestamps (item–attribute).
    const std::vector<std::int64_t>* interaction_times(NodeId a, NodeId b) const;

    std::optional<NodeId> find_user(const std::string& label) const;
    std::optional<NodeId> find_item(const std::string& label) const;
    std::optional<NodeId> find_attribute(const std::string& attr_class, const std::string& value) const;

    // All nodes u != v of the same kind reachable by a 2-edge walk v-x-u,
    // deduplicated, ascending id order.
    std::vector<NodeId> two_hop_same_type(NodeId v) const;

    void save(const std::filesystem::path& snapshot) const;  // + ".json" sidecar
    static RecGraph load(const std::filesystem::path& snapshot);

private:
    friend RecGraph build_graph(const std::vector<InteractionRecord>&,
                                const std::vector<AttributeRecord>&);

    static std::uint64_t edge_key(NodeId a, NodeId b);
    void add_edge(NodeId a, NodeId b);
    void finalize();

    std::vector<NodeInfo> nodes_;
    std::vector<std::vector<NodeId>> adj_;
    std::vector<std::vector<Interaction>> history_;  // indexed by user id
    std::unordered_map<std::uint64_t, std::vector<std::int64_t>> edge_times_;
    std::unordered_map<std::string, NodeId> user_index_;
    std::unordered_map<std::string, NodeId> item_index_;
    std::unordered_map<std::string, NodeId> attr_index_;  // key "class\x1fvalue"
    std::size_t user_count_ = 0;
    std::size_t item_count_ = 0;
    std::size_t edge_count_ = 0;
    std::size_t interaction_count_ = 0;
    std::size_t skipped_metadata_rows_ = 0;
};

// Parses TSV rows `user \t item \t timestamp`, drops items occurring
// min_item_count times or fewer, then drops users left with no interactions.
// Throws ParseError with the line number on malformed rows and
// ValidationError when nothing survives the filter.
std::vector<InteractionRecord> load_interactions(const std::filesystem::path& path,
                                                 int min_item_count);

// Parses TSV rows `item \t attr_class \t attr_value`.
std::vector<AttributeRecord> load_metadata(const std::filesystem::path& path);

// Assembles the graph. Metadata rows that reference items absent from the
// interaction records are skipped and counted (skipped_metadata_rows).
RecGraph build_graph(const std::vector<InteractionRecord>& interactions,
                     const std::vector<AttributeRecord>& attributes);

}  // namespace cper
