#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cper {

// Desk-scale dataset with a known informative structure: every user prefers
// one item category, and paths that bridge their history to a new purchase
// through that category node are the planted ground-truth explanations.
// Brands are assigned independently at random, so brand paths carry no signal.
struct SyntheticSpec {
    int users = 50;
    int items = 200;
    int categories = 20;
    int brands = 40;
    int interactions_per_user = 8;
    double favorite_prob = 0.9;  // chance a purchase stays in the favorite category
    std::uint64_t seed = 0;
};

struct PlantedPair {
    std::string user;
    std::string item;             // the user's final (target) purchase
    std::string bridge_class;     // "category"
    std::string bridge_value;     // the user's favorite category label
    std::vector<std::vector<std::string>> paths;  // planted node-label sequences
};

struct SyntheticSummary {
    std::size_t interaction_rows = 0;
    std::size_t metadata_rows = 0;
    std::vector<PlantedPair> planted;
};

// Writes interactions.tsv, metadata.tsv and planted.jsonl into out_dir.
// Deterministic given the spec.
SyntheticSummary make_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

std::vector<PlantedPair> load_planted_jsonl(const std::filesystem::path& path);

}  // namespace cper
