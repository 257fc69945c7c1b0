#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cper/graph.hpp"
#include "cper/linalg.hpp"
#include "cper/paths.hpp"

namespace cper {

/// One d-dimensional vector per graph node.
class EmbeddingTable {
public:
    EmbeddingTable() = default;
    EmbeddingTable(int dim, std::size_t node_count)
        : dim_(dim), data_(node_count * static_cast<std::size_t>(dim), 0.0) {}

    int dim() const { return dim_; }
    std::size_t node_count() const { return dim_ == 0 ? 0 : data_.size() / dim_; }

    std::span<const double> vec(NodeId v) const;  // throws LookupError if absent
    std::span<double> mutable_vec(NodeId v);

    bool operator==(const EmbeddingTable&) const = default;

    // Binary layout: magic, version, dim, count, then count*dim little-endian
    // float32 rows. The JSON manifest maps external labels to node ids.
    void save(const std::filesystem::path& path, const RecGraph& g) const;
    static EmbeddingTable load(const std::filesystem::path& path);

private:
    int dim_ = 0;
    std::vector<double> data_;
};

struct SkipGramConfig {
    int dim = 100;
    int window = 3;
    int negatives_per_pair = 5;
    int epochs = 5;
    double learning_rate = 0.025;
    std::uint64_t seed = 0;
};

struct SkipGramReport {
    std::vector<double> epoch_loss;   // mean negative-sampling loss per epoch
    std::vector<NodeId> uncovered;    // nodes absent from the walk corpus
};

// Skip-gram with negative sampling over the walk corpus. Covers every node in
// [0, node_count); nodes missing from the corpus keep their seeded random
// initialization and are flagged in the report. Deterministic given config.
EmbeddingTable train_skipgram(std::size_t node_count, const std::vector<TemporalWalk>& walks,
                              const SkipGramConfig& cfg, SkipGramReport* report = nullptr);

// Arithmetic mean of the path's node vectors.
Vec embed_path(const EmbeddingTable& table, std::span<const NodeId> nodes);
Vec embed_path(const EmbeddingTable& table, const ExplainPath& path);

}  // namespace cper
