#include "cper/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cper/error.hpp"
#include "cper/rng.hpp"

namespace cper {

namespace {

constexpr std::uint32_t kEmbMagic = 0x4d455043;  // "CPEM"
constexpr std::uint32_t kEmbVersion = 1;

// Cumulative unigram^0.75 distribution; sampled by binary search.
class NegativeSampler {
public:
    NegativeSampler(std::size_t node_count, const std::vector<std::size_t>& counts) {
        cum_.reserve(node_count);
        double total = 0.0;
        for (std::size_t v = 0; v < node_count; ++v) {
            total += std::pow(static_cast<double>(counts[v]), 0.75);
            cum_.push_back(total);
        }
    }

    NodeId sample(Rng& rng) const {
        const double u = rng.next_double() * cum_.back();
        const auto it = std::upper_bound(cum_.begin(), cum_.end(), u);
        return static_cast<NodeId>(std::min<std::size_t>(it - cum_.begin(), cum_.size() - 1));
    }

private:
    std::vector<double> cum_;
};

}  // namespace

std::span<const double> EmbeddingTable::vec(NodeId v) const {
    if (v >= node_count())
        throw LookupError("embedding lookup for unknown node " + std::to_string(v));
    return {data_.data() + static_cast<std::size_t>(v) * dim_, static_cast<std::size_t>(dim_)};
}

std::span<double> EmbeddingTable::mutable_vec(NodeId v) {
    if (v >= node_count())
        throw LookupError("embedding lookup for unknown node " + std::to_string(v));
    return {data_.data() + static_cast<std::size_t>(v) * dim_, static_cast<std::size_t>(dim_)};
}

EmbeddingTable train_skipgram(std::size_t node_count, const std::vector<TemporalWalk>& walks,
                              const SkipGramConfig& cfg, SkipGramReport* report) {
    if (cfg.dim <= 0) throw ValidationError("skip-gram dim must be > 0");
    if (cfg.window < 1) throw ValidationError("skip-gram window must be >= 1");
    if (cfg.negatives_per_pair < 1) throw ValidationError("negatives_per_pair must be >= 1");
    if (walks.empty()) throw ValidationError("skip-gram requires a non-empty walk corpus");
    for (const auto& w : walks)
        for (const NodeId v : w.nodes)
            if (v >= node_count)
                throw ValidationError("walk references node " + std::to_string(v) +
                                      " outside the graph");

    Rng rng(derive_seed(cfg.seed, "skipgram"));
    EmbeddingTable table(cfg.dim, node_count);
    const double half = 0.5 / cfg.dim;
    for (NodeId v = 0; v < node_count; ++v)
        for (double& x : table.mutable_vec(v)) x = rng.uniform(-half, half);

    std::vector<std::size_t> counts(node_count, 0);
    std::size_t pairs_per_epoch = 0;
    for (const auto& w : walks) {
        const int n = static_cast<int>(w.nodes.size());
        for (int c = 0; c < n; ++c) {
            ++counts[w.nodes[c]];
            const int lo = std::max(0, c - cfg.window);
            const int hi = std::min(n - 1, c + cfg.window);
            pairs_per_epoch += static_cast<std::size_t>(hi - lo);  // excludes c itself
        }
    }
    if (report != nullptr) {
        report->uncovered.clear();
        for (NodeId v = 0; v < node_count; ++v)
            if (counts[v] == 0) report->uncovered.push_back(v);
        report->epoch_loss.clear();
    }
    if (cfg.epochs == 0) return table;

    NegativeSampler sampler(node_count, counts);
    std::vector<double> context(node_count * static_cast<std::size_t>(cfg.dim), 0.0);
    const auto ctx = [&](NodeId v) {
        return std::span<double>(context.data() + static_cast<std::size_t>(v) * cfg.dim,
                                 static_cast<std::size_t>(cfg.dim));
    };

    const double total_pairs = static_cast<double>(pairs_per_epoch) * cfg.epochs;
    std::size_t processed = 0;
    std::vector<double> grad_center(cfg.dim);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t loss_count = 0;
        for (const auto& w : walks) {
            const int n = static_cast<int>(w.nodes.size());
            for (int c = 0; c < n; ++c) {
                const NodeId center = w.nodes[c];
                const auto center_vec = table.mutable_vec(center);
                const int lo = std::max(0, c - cfg.window);
                const int hi = std::min(n - 1, c + cfg.window);
                for (int j = lo; j <= hi; ++j) {
                    if (j == c) continue;
                    const double lr =
                        cfg.learning_rate *
                        std::max(1.0 - static_cast<double>(processed) / total_pairs, 1e-4);
                    ++processed;
                    const NodeId pos = w.nodes[j];
                    std::fill(grad_center.begin(), grad_center.end(), 0.0);
                    double pair_loss = 0.0;

                    for (int s = 0; s < cfg.negatives_per_pair + 1; ++s) {
                        NodeId target;
                        double label;
                        if (s == 0) {
                            target = pos;
                            label = 1.0;
                        } else {
                            target = sampler.sample(rng);
                            if (target == pos) continue;
                            label = 0.0;
                        }
                        const auto target_vec = ctx(target);
                        const double z = dot(center_vec, target_vec);
                        const double p = sigmoid(z);
                        pair_loss += label > 0.5 ? softplus(-z) : softplus(z);
                        const double g = (p - label) * lr;
                        axpy(-g, target_vec, std::span<double>(grad_center));
                        axpy(-g, center_vec, target_vec);
                    }
                    axpy(1.0, std::span<const double>(grad_center), center_vec);
                    loss_sum += pair_loss;
                    ++loss_count;
                }
            }
        }
        if (report != nullptr)
            report->epoch_loss.push_back(loss_count == 0 ? 0.0 : loss_sum / loss_count);
    }
    return table;
}

Vec embed_path(const EmbeddingTable& table, std::span<const NodeId> nodes) {
    if (nodes.empty()) throw ValidationError("cannot embed an empty path");
    Vec out(table.dim(), 0.0);
    for (const NodeId v : nodes) axpy(1.0, table.vec(v), std::span<double>(out));
    for (double& x : out) x /= static_cast<double>(nodes.size());
    return out;
}

Vec embed_path(const EmbeddingTable& table, const ExplainPath& path) {
    return embed_path(table, std::span<const NodeId>(path.nodes));
}

void EmbeddingTable::save(const std::filesystem::path& path, const RecGraph& g) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("cannot write embeddings: " + path.string());
    const std::uint32_t dim32 = static_cast<std::uint32_t>(dim_);
    const std::uint64_t count = node_count();
    os.write(reinterpret_cast<const char*>(&kEmbMagic), 4);
    os.write(reinterpret_cast<const char*>(&kEmbVersion), 4);
    os.write(reinterpret_cast<const char*>(&dim32), 4);
    os.write(reinterpret_cast<const char*>(&count), 8);
    std::vector<float> row(dim_);
    for (std::uint64_t v = 0; v < count; ++v) {
        const auto src = vec(static_cast<NodeId>(v));
        for (int i = 0; i < dim_; ++i) row[i] = static_cast<float>(src[i]);
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(4 * row.size()));
    }
    if (!os) throw ValidationError("short write on embeddings: " + path.string());

    nlohmann::json manifest{{"format_version", kEmbVersion}, {"dim", dim_}, {"count", count}};
    auto& nodes = manifest["nodes"] = nlohmann::json::array();
    for (NodeId v = 0; v < g.node_count(); ++v) {
        const auto& n = g.node(v);
        nlohmann::json rec{{"id", v}, {"kind", to_string(n.kind)}, {"label", n.label}};
        if (n.kind == NodeKind::Attribute) rec["attr_class"] = n.attr_class;
        nodes.push_back(std::move(rec));
    }
    std::ofstream js(path.string() + ".json");
    js << manifest.dump(2) << '\n';
}

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open embeddings: " + path.string());
    std::uint32_t magic = 0, version = 0, dim = 0;
    std::uint64_t count = 0;
    is.read(reinterpret_cast<char*>(&magic), 4);
    is.read(reinterpret_cast<char*>(&version), 4);
    is.read(reinterpret_cast<char*>(&dim), 4);
    is.read(reinterpret_cast<char*>(&count), 8);
    if (!is || magic != kEmbMagic) throw ValidationError("bad embeddings file: " + path.string());
    if (version != kEmbVersion)
        throw ValidationError("unsupported embeddings version " + std::to_string(version));
    EmbeddingTable table(static_cast<int>(dim), count);
    std::vector<float> row(dim);
    for (std::uint64_t v = 0; v < count; ++v) {
        is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(4 * row.size()));
        auto dst = table.mutable_vec(static_cast<NodeId>(v));
        for (std::uint32_t i = 0; i < dim; ++i) dst[i] = row[i];
    }
    if (!is) throw ValidationError("truncated embeddings: " + path.string());
    return table;
}

}  // namespace cper
