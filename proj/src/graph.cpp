#include "cper/graph.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cper/error.hpp"

namespace cper {

namespace {

std::vector<std::string> split_tsv(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

std::int64_t parse_int64(const std::string& field, const std::string& file, std::size_t line_no) {
    std::int64_t value = 0;
    const char* begin = field.data();
    const char* end = begin + field.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc{} || ptr != end)
        throw ParseError(file, line_no, "expected integer, got '" + field + "'");
    return value;
}

void strip_cr(std::string& line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
}

std::string attr_key(const std::string& cls, const std::string& value) {
    return cls + '\x1f' + value;
}

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_i64(std::ostream& os, std::int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
std::int64_t read_i64(std::istream& is) {
    std::int64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
std::string read_string(std::istream& is) {
    const std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

constexpr std::uint32_t kSnapshotMagic = 0x52475043;  // "CPGR"
constexpr std::uint32_t kSnapshotVersion = 1;

}  // namespace

const char* to_string(NodeKind k) {
    switch (k) {
        case NodeKind::User: return "user";
        case NodeKind::Item: return "item";
        case NodeKind::Attribute: return "attribute";
    }
    return "?";
}

std::vector<InteractionRecord> load_interactions(const std::filesystem::path& path,
                                                 int min_item_count) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open interactions file: " + path.string());

    const std::string file = path.filename().string();
    std::vector<InteractionRecord> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        strip_cr(line);
        if (line.empty()) continue;
        const auto fields = split_tsv(line);
        if (fields.size() != 3)
            throw ParseError(file, line_no,
                             "expected 3 tab-separated fields, got " + std::to_string(fields.size()));
        if (fields[0].empty() || fields[1].empty())
            throw ParseError(file, line_no, "empty user or item id");
        rows.push_back({fields[0], fields[1], parse_int64(fields[2], file, line_no)});
    }

    std::unordered_map<std::string, int> item_counts;
    for (const auto& r : rows) ++item_counts[r.item];

    std::vector<InteractionRecord> kept;
    kept.reserve(rows.size());
    for (auto& r : rows)
        if (item_counts[r.item] > min_item_count) kept.push_back(std::move(r));

    if (kept.empty())
        throw ValidationError("interactions empty after filtering (min_item_count=" +
                              std::to_string(min_item_count) + ")");
    return kept;
}

std::vector<AttributeRecord> load_metadata(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open metadata file: " + path.string());

    const std::string file = path.filename().string();
    std::vector<AttributeRecord> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        strip_cr(line);
        if (line.empty()) continue;
        const auto fields = split_tsv(line);
        if (fields.size() != 3)
            throw ParseError(file, line_no,
                             "expected 3 tab-separated fields, got " + std::to_string(fields.size()));
        if (fields[0].empty() || fields[1].empty() || fields[2].empty())
            throw ParseError(file, line_no, "empty field");
        rows.push_back({fields[0], fields[1], fields[2]});
    }
    return rows;
}

std::uint64_t RecGraph::edge_key(NodeId a, NodeId b) {
    if (a > b) std::swap(a, b);
    return (static_cast<std::uint64_t>(a) << 32) | b;
}

void RecGraph::add_edge(NodeId a, NodeId b) {
    adj_[a].push_back(b);
    adj_[b].push_back(a);
}

void RecGraph::finalize() {
    edge_count_ = 0;
    for (auto& nbrs : adj_) {
        std::sort(nbrs.begin(), nbrs.end());
        nbrs.erase(std::unique(nbrs.begin(), nbrs.end()), nbrs.end());
        edge_count_ += nbrs.size();
    }
    edge_count_ /= 2;
    for (auto& [key, times] : edge_times_) std::sort(times.begin(), times.end());
    for (auto& h : history_)
        std::stable_sort(h.begin(), h.end(),
                         [](const Interaction& x, const Interaction& y) { return x.timestamp < y.timestamp; });
}

RecGraph build_graph(const std::vector<InteractionRecord>& interactions,
                     const std::vector<AttributeRecord>& attributes) {
    RecGraph g;

    for (const auto& r : interactions) {
        if (!g.user_index_.contains(r.user)) {
            g.user_index_.emplace(r.user, static_cast<NodeId>(g.nodes_.size()));
            g.nodes_.push_back({NodeKind::User, r.user, {}});
        }
    }
    g.user_count_ = g.nodes_.size();
    for (const auto& r : interactions) {
        if (!g.item_index_.contains(r.item)) {
            g.item_index_.emplace(r.item, static_cast<NodeId>(g.nodes_.size()));
            g.nodes_.push_back({NodeKind::Item, r.item, {}});
        }
    }
    g.item_count_ = g.nodes_.size() - g.user_count_;
    for (const auto& r : attributes) {
        if (!g.item_index_.contains(r.item)) {
            ++g.skipped_metadata_rows_;
            continue;
        }
        const std::string key = attr_key(r.attr_class, r.attr_value);
        if (!g.attr_index_.contains(key)) {
            g.attr_index_.emplace(key, static_cast<NodeId>(g.nodes_.size()));
            g.nodes_.push_back({NodeKind::Attribute, r.attr_value, r.attr_class});
        }
    }

    g.adj_.resize(g.nodes_.size());
    g.history_.resize(g.user_count_);

    std::unordered_map<std::uint64_t, bool> seen_edge;
    for (const auto& r : interactions) {
        const NodeId u = g.user_index_.at(r.user);
        const NodeId i = g.item_index_.at(r.item);
        const std::uint64_t key = RecGraph::edge_key(u, i);
        if (!seen_edge[key]) {
            seen_edge[key] = true;
            g.add_edge(u, i);
        }
        g.edge_times_[key].push_back(r.timestamp);
        g.history_[u].push_back({i, r.timestamp});
        ++g.interaction_count_;
    }
    for (const auto& r : attributes) {
        auto item_it = g.item_index_.find(r.item);
        if (item_it == g.item_index_.end()) continue;
        const NodeId a = g.attr_index_.at(attr_key(r.attr_class, r.attr_value));
        const std::uint64_t key = RecGraph::edge_key(item_it->second, a);
        if (!seen_edge[key]) {
            seen_edge[key] = true;
            g.add_edge(item_it->second, a);
        }
    }

    g.finalize();
    return g;
}

bool RecGraph::has_edge(NodeId a, NodeId b) const {
    const auto& nbrs = adj_.at(a);
    return std::binary_search(nbrs.begin(), nbrs.end(), b);
}

const std::vector<Interaction>& RecGraph::history(NodeId user) const {
    if (user >= user_count_) throw LookupError("node " + std::to_string(user) + " is not a user");
    return history_[user];
}

const std::vector<std::int64_t>* RecGraph::interaction_times(NodeId a, NodeId b) const {
    const auto it = edge_times_.find(edge_key(a, b));
    return it == edge_times_.end() ? nullptr : &it->second;
}

std::optional<NodeId> RecGraph::find_user(const std::string& label) const {
    const auto it = user_index_.find(label);
    if (it == user_index_.end()) return std::nullopt;
    return it->second;
}

std::optional<NodeId> RecGraph::find_item(const std::string& label) const {
    const auto it = item_index_.find(label);
    if (it == item_index_.end()) return std::nullopt;
    return it->second;
}

std::optional<NodeId> RecGraph::find_attribute(const std::string& attr_class,
                                               const std::string& value) const {
    const auto it = attr_index_.find(attr_key(attr_class, value));
    if (it == attr_index_.end()) return std::nullopt;
    return it->second;
}

std::vector<NodeId> RecGraph::two_hop_same_type(NodeId v) const {
    const NodeKind want = kind(v);
    std::vector<NodeId> out;
    for (const NodeId x : adj_.at(v))
        for (const NodeId u : adj_.at(x))
            if (u != v && kind(u) == want) out.push_back(u);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

void RecGraph::save(const std::filesystem::path& snapshot) const {
    std::ofstream os(snapshot, std::ios::binary);
    if (!os) throw ValidationError("cannot write graph snapshot: " + snapshot.string());

    write_u32(os, kSnapshotMagic);
    write_u32(os, kSnapshotVersion);
    write_u64(os, nodes_.size());
    write_u64(os, user_count_);
    write_u64(os, item_count_);
    write_u64(os, skipped_metadata_rows_);
    for (const auto& n : nodes_) {
        os.put(static_cast<char>(n.kind));
        write_string(os, n.label);
        write_string(os, n.attr_class);
    }
    for (const auto& nbrs : adj_) {
        write_u32(os, static_cast<std::uint32_t>(nbrs.size()));
        for (NodeId u : nbrs) write_u32(os, u);
    }
    for (const auto& h : history_) {
        write_u32(os, static_cast<std::uint32_t>(h.size()));
        for (const auto& it : h) {
            write_u32(os, it.item);
            write_i64(os, it.timestamp);
        }
    }
    // Timed edges in deterministic (key-sorted) order.
    std::vector<std::uint64_t> keys;
    keys.reserve(edge_times_.size());
    for (const auto& [k, _] : edge_times_) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    write_u64(os, keys.size());
    for (const std::uint64_t k : keys) {
        const auto& times = edge_times_.at(k);
        write_u64(os, k);
        write_u32(os, static_cast<std::uint32_t>(times.size()));
        for (const std::int64_t t : times) write_i64(os, t);
    }
    if (!os) throw ValidationError("short write on graph snapshot: " + snapshot.string());

    nlohmann::json sidecar{{"format_version", kSnapshotVersion},
                           {"users", user_count_},
                           {"items", item_count_},
                           {"attributes", attribute_count()},
                           {"nodes", nodes_.size()},
                           {"edges", edge_count_},
                           {"interactions", interaction_count_},
                           {"skipped_metadata_rows", skipped_metadata_rows_}};
    std::ofstream js(snapshot.string() + ".json");
    js << sidecar.dump(2) << '\n';
}

RecGraph RecGraph::load(const std::filesystem::path& snapshot) {
    std::ifstream is(snapshot, std::ios::binary);
    if (!is) throw ValidationError("cannot open graph snapshot: " + snapshot.string());
    if (read_u32(is) != kSnapshotMagic) throw ValidationError("bad graph snapshot magic");
    const std::uint32_t version = read_u32(is);
    if (version != kSnapshotVersion)
        throw ValidationError("unsupported graph snapshot version " + std::to_string(version));

    RecGraph g;
    const std::uint64_t node_count = read_u64(is);
    g.user_count_ = read_u64(is);
    g.item_count_ = read_u64(is);
    g.skipped_metadata_rows_ = read_u64(is);
    g.nodes_.resize(node_count);
    for (auto& n : g.nodes_) {
        n.kind = static_cast<NodeKind>(is.get());
        n.label = read_string(is);
        n.attr_class = read_string(is);
    }
    g.adj_.resize(node_count);
    for (auto& nbrs : g.adj_) {
        nbrs.resize(read_u32(is));
        for (auto& u : nbrs) u = read_u32(is);
    }
    g.history_.resize(g.user_count_);
    std::size_t interactions = 0;
    for (auto& h : g.history_) {
        h.resize(read_u32(is));
        for (auto& it : h) {
            it.item = read_u32(is);
            it.timestamp = read_i64(is);
        }
        interactions += h.size();
    }
    g.interaction_count_ = interactions;
    const std::uint64_t timed = read_u64(is);
    for (std::uint64_t i = 0; i < timed; ++i) {
        const std::uint64_t key = read_u64(is);
        auto& times = g.edge_times_[key];
        times.resize(read_u32(is));
        for (auto& t : times) t = read_i64(is);
    }
    if (!is) throw ValidationError("truncated graph snapshot: " + snapshot.string());

    for (NodeId v = 0; v < g.nodes_.size(); ++v) {
        const auto& n = g.nodes_[v];
        if (n.kind == NodeKind::User)
            g.user_index_.emplace(n.label, v);
        else if (n.kind == NodeKind::Item)
            g.item_index_.emplace(n.label, v);
        else
            g.attr_index_.emplace(attr_key(n.attr_class, n.label), v);
    }
    std::size_t degree_sum = 0;
    for (const auto& nbrs : g.adj_) degree_sum += nbrs.size();
    g.edge_count_ = degree_sum / 2;
    return g;
}

}  // namespace cper
