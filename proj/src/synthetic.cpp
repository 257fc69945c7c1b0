#include "cper/synthetic.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "cper/error.hpp"
#include "cper/rng.hpp"

namespace cper {

namespace {

struct GenState {
    std::vector<int> item_category;                  // per item
    std::vector<int> item_brand;                     // per item
    std::vector<std::vector<int>> category_items;    // items per category
    std::vector<std::vector<int>> user_items;        // purchase order per user
    std::vector<int> user_favorite;                  // favorite category per user
};

std::string user_label(int u) { return "u" + std::to_string(u); }
std::string item_label(int i) { return "i" + std::to_string(i); }
std::string cat_label(int c) { return "c" + std::to_string(c); }
std::string brand_label(int b) { return "b" + std::to_string(b); }

int draw_unbought(const std::vector<int>& pool, const std::unordered_set<int>& bought, Rng& rng) {
    std::vector<int> open;
    for (const int i : pool)
        if (!bought.contains(i)) open.push_back(i);
    if (open.empty()) return -1;
    return open[rng.next_below(open.size())];
}

// Simple paths user -> ... -> bridge category -> target within the generated
// data, 4..6 nodes. These are the ground-truth explanations.
std::vector<std::vector<std::string>> enumerate_planted(const GenState& st,
                                                        const SyntheticSpec& spec, int user,
                                                        int target) {
    const int bridge = st.user_favorite[user];

    // Label-space adjacency of the generated graph. Node encoding:
    // users [0, U), items [U, U+I), categories [U+I, U+I+C), brands after.
    const int user_base = 0;
    const int item_base = spec.users;
    const int cat_base = item_base + spec.items;
    const int brand_base = cat_base + spec.categories;
    const int total = brand_base + spec.brands;

    std::vector<std::set<int>> adj(total);
    for (int u = 0; u < spec.users; ++u)
        for (const int i : st.user_items[u]) {
            adj[user_base + u].insert(item_base + i);
            adj[item_base + i].insert(user_base + u);
        }
    for (int i = 0; i < spec.items; ++i) {
        adj[item_base + i].insert(cat_base + st.item_category[i]);
        adj[cat_base + st.item_category[i]].insert(item_base + i);
        adj[item_base + i].insert(brand_base + st.item_brand[i]);
        adj[brand_base + st.item_brand[i]].insert(item_base + i);
    }

    const int target_node = item_base + target;
    const int bridge_node = cat_base + bridge;
    const auto label_of = [&](int node) -> std::string {
        if (node < item_base) return user_label(node);
        if (node < cat_base) return item_label(node - item_base);
        if (node < brand_base) return cat_label(node - cat_base);
        return brand_label(node - brand_base);
    };

    // Walk starts the explorer can attribute to this user: the user itself
    // and every item the user bought.
    std::vector<int> starts{user_base + user};
    for (const int i : st.user_items[user])
        if (i != target) starts.push_back(item_base + i);

    std::vector<std::vector<std::string>> planted;
    std::set<std::vector<int>> seen;
    std::vector<int> stack;
    const auto dfs = [&](auto&& self, int node) -> void {
        stack.push_back(node);
        const int len = static_cast<int>(stack.size());
        if (len >= 3 && len + 1 <= 6 && node == bridge_node &&
            adj[node].contains(target_node) &&
            std::find(stack.begin(), stack.end(), target_node) == stack.end()) {
            std::vector<int> path = stack;
            path.push_back(target_node);
            if (static_cast<int>(path.size()) >= 4 && seen.insert(path).second) {
                std::vector<std::string> labels;
                labels.reserve(path.size());
                for (const int n : path) labels.push_back(label_of(n));
                planted.push_back(std::move(labels));
            }
        }
        if (len < 5) {  // penultimate position can still be reached
            for (const int next : adj[node]) {
                if (next == target_node) continue;
                if (std::find(stack.begin(), stack.end(), next) != stack.end()) continue;
                self(self, next);
            }
        }
        stack.pop_back();
    };
    for (const int s : starts) {
        stack.clear();
        dfs(dfs, s);
    }
    std::sort(planted.begin(), planted.end());
    return planted;
}

}  // namespace

SyntheticSummary make_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
    if (spec.users < 2 || spec.items < 4 || spec.categories < 1)
        throw ValidationError("synthetic spec too small: need >= 2 users, >= 4 items, >= 1 category");
    if (spec.brands < 0 || spec.interactions_per_user < 2)
        throw ValidationError("synthetic spec invalid: brands >= 0, interactions_per_user >= 2");
    if (spec.favorite_prob < 0.0 || spec.favorite_prob > 1.0)
        throw ValidationError("favorite_prob must lie in [0, 1]");
    if (spec.items < spec.categories)
        throw ValidationError("need at least one item per category");

    std::filesystem::create_directories(out_dir);
    Rng rng(derive_seed(spec.seed, "synthetic"));

    GenState st;
    st.item_category.resize(spec.items);
    st.item_brand.resize(spec.items);
    st.category_items.resize(spec.categories);
    for (int i = 0; i < spec.items; ++i) {
        st.item_category[i] = i % spec.categories;
        st.category_items[i % spec.categories].push_back(i);
        st.item_brand[i] = spec.brands > 0 ? static_cast<int>(rng.next_below(spec.brands)) : 0;
    }

    st.user_favorite.resize(spec.users);
    st.user_items.resize(spec.users);
    std::vector<int> all_items(spec.items);
    for (int i = 0; i < spec.items; ++i) all_items[i] = i;

    for (int u = 0; u < spec.users; ++u) {
        st.user_favorite[u] = u % spec.categories;
        const auto& favorites = st.category_items[st.user_favorite[u]];
        std::unordered_set<int> bought;
        for (int step = 0; step < spec.interactions_per_user; ++step) {
            const bool last = step + 1 == spec.interactions_per_user;
            const bool want_favorite = last || rng.bernoulli(spec.favorite_prob);
            int pick = want_favorite ? draw_unbought(favorites, bought, rng)
                                     : draw_unbought(all_items, bought, rng);
            if (pick < 0) pick = draw_unbought(all_items, bought, rng);
            if (pick < 0) break;  // bought everything
            bought.insert(pick);
            st.user_items[u].push_back(pick);
        }
        if (st.user_items[u].size() < 2)
            throw ValidationError("degenerate synthetic spec: user history too short");
    }

    SyntheticSummary summary;

    // Interactions interleaved across users; timestamps strictly increase per
    // user and steps are globally shuffled across users for realism.
    std::ofstream tsv(out_dir / "interactions.tsv");
    if (!tsv) throw ValidationError("cannot write interactions.tsv");
    for (int step = 0; step < spec.interactions_per_user; ++step) {
        for (int u = 0; u < spec.users; ++u) {
            if (step >= static_cast<int>(st.user_items[u].size())) continue;
            const std::int64_t t = 1'000'000 + static_cast<std::int64_t>(step) * spec.users + u;
            tsv << user_label(u) << '\t' << item_label(st.user_items[u][step]) << '\t' << t << '\n';
            ++summary.interaction_rows;
        }
    }
    tsv.close();

    std::ofstream meta(out_dir / "metadata.tsv");
    if (!meta) throw ValidationError("cannot write metadata.tsv");
    for (int i = 0; i < spec.items; ++i) {
        meta << item_label(i) << "\tcategory\t" << cat_label(st.item_category[i]) << '\n';
        ++summary.metadata_rows;
        if (spec.brands > 0) {
            meta << item_label(i) << "\tbrand\t" << brand_label(st.item_brand[i]) << '\n';
            ++summary.metadata_rows;
        }
    }
    meta.close();

    std::ofstream planted_os(out_dir / "planted.jsonl");
    if (!planted_os) throw ValidationError("cannot write planted.jsonl");
    for (int u = 0; u < spec.users; ++u) {
        const int target = st.user_items[u].back();
        PlantedPair pair;
        pair.user = user_label(u);
        pair.item = item_label(target);
        pair.bridge_class = "category";
        pair.bridge_value = cat_label(st.user_favorite[u]);
        pair.paths = enumerate_planted(st, spec, u, target);
        nlohmann::json row{{"user", pair.user},
                           {"item", pair.item},
                           {"bridge_class", pair.bridge_class},
                           {"bridge_value", pair.bridge_value},
                           {"paths", pair.paths}};
        planted_os << row.dump() << '\n';
        summary.planted.push_back(std::move(pair));
    }
    return summary;
}

std::vector<PlantedPair> load_planted_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open planted sidecar: " + path.string());
    std::vector<PlantedPair> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto row = nlohmann::json::parse(line);
        PlantedPair pair;
        pair.user = row.at("user").get<std::string>();
        pair.item = row.at("item").get<std::string>();
        pair.bridge_class = row.at("bridge_class").get<std::string>();
        pair.bridge_value = row.at("bridge_value").get<std::string>();
        pair.paths = row.at("paths").get<std::vector<std::vector<std::string>>>();
        out.push_back(std::move(pair));
    }
    return out;
}

}  // namespace cper
