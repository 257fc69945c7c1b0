#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cper/backend.hpp"
#include "cper/cf_repr.hpp"
#include "cper/cf_struct.hpp"
#include "cper/embedding.hpp"
#include "cper/graph.hpp"
#include "cper/paths.hpp"

namespace cper {

struct PipelineConfig {
    // [data]
    std::string interactions;
    std::string metadata;
    int min_item_count = 5;
    std::string holdout = "none";  // none | last

    // [paths]
    int min_len = 4;
    int max_len = 6;
    int walks_per_vertex = 100;
    int walk_len = 8;
    int temporal_walks_per_vertex = 10;

    // [embed]
    int dim = 100;
    int window = 3;
    int negatives_per_pair = 5;
    int embed_epochs = 5;
    double embed_learning_rate = 0.025;

    // [backend]
    double backend_learning_rate = 1e-3;
    int backend_epochs = 300;
    double backend_clip_norm = 5.0;
    int max_history = 8;
    int att_hidden = 0;
    int ff_hidden = 0;
    int mlp_hidden = 0;

    // [cf_repr]
    double alpha = 0.1;
    double beta = 0.5;
    double lambda = 5.0;
    double repr_learning_rate = 0.05;
    int repr_steps = 50;

    // [cf_struct]
    double zeta = 10.0;
    double epsilon = 10.0;
    double eta = 100.0;
    int struct_epochs = 50;
    int episodes_per_epoch = 8;
    double policy_learning_rate = 0.01;
    int policy_hidden = 16;

    // [explain]
    int max_pairs = 0;  // 0 = all users' pairs

    // [eval]
    int runs = 10;
    std::vector<double> ratios{0.25, 0.5, 0.75, 1.0};
    std::vector<int> k_list{5, 10, 20, 30};
    int negatives = 500;
    double variance_ratio = 0.1;
    int stability_pairs = 6;

    std::uint64_t seed = 42;
};

// key=value sections; unknown sections/keys are rejected.
PipelineConfig parse_config_file(const std::filesystem::path& path);
void apply_override(PipelineConfig& cfg, const std::string& dotted_key, const std::string& value);
std::string config_to_string(const PipelineConfig& cfg);  // canonical round-trip form

enum class Stage { Ingest, Walk, Embed, Train, ExplainRepr, ExplainStruct, Evaluate, Report };

const char* stage_name(Stage s);
std::optional<Stage> stage_from_name(const std::string& name);

// Runs one stage against the artifact directory; validates the upstream
// manifest chain and writes this stage's manifest. Idempotent given identical
// config and seed.
void run_stage(Stage stage, const PipelineConfig& cfg, const std::filesystem::path& out_dir);

// All stages in order.
void run_all(const PipelineConfig& cfg, const std::filesystem::path& out_dir);

// The (user, item) pairs the explanation stages cover: per user the held-out
// item when a holdout exists, otherwise the last trained item; capped by
// max_pairs; only pairs with a non-empty path set.
std::vector<std::pair<NodeId, NodeId>> explained_pairs(const PipelineConfig& cfg,
                                                       const RecGraph& g,
                                                       const PathSetCollection& paths,
                                                       const std::filesystem::path& out_dir);

std::uint64_t fnv1a_file(const std::filesystem::path& path);
std::uint64_t fnv1a_string(const std::string& text);

// Renders the plain-text summary of eval_report.json to the given stream.
void render_report(const std::filesystem::path& out_dir, std::ostream& os);

}  // namespace cper
