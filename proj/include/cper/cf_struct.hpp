#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "cper/backend.hpp"
#include "cper/cf_repr.hpp"
#include "cper/rng.hpp"

namespace cper {

struct RewardConfig {
    double zeta = 10.0;
    double epsilon = 10.0;
    double eta = 100.0;
    double no_edit_penalty = -200.0;
};

// Three-branch terminal reward. Branch priority: no edits first, then the
// sign of delta_s; delta_s == 0 earns 0 (no credit for no-effect edits).
double reward(const RewardConfig& cfg, int num_paths_edited, int num_nodes_replaced,
              double delta_s);

// Per (path, position) replacement candidates: two-hop same-type neighbors
// with matching attr_class. Source and target positions are always empty.
std::vector<std::vector<std::vector<NodeId>>> candidate_actions(const RecGraph& g,
                                                                const PathSet& set);

struct PolicyConfig {
    int hidden = 16;
    double learning_rate = 0.01;
    int epochs = 50;
    int episodes_per_epoch = 8;
    std::uint64_t seed = 0;
};

// Two-layer per-position selection scorer; outputs are strictly inside (0,1).
struct PolicyParams {
    int in_dim = 0, hidden = 0;
    Vec w1;  // hidden x in_dim, row-major
    Vec b1;  // hidden
    Vec w2;  // hidden
    double b2 = 0.0;

    double prob(std::span<const double> features) const;
};

PolicyParams init_policy(int in_dim, const PolicyConfig& cfg);

struct EditablePosition {
    int path_index = 0;
    int position = 0;  // never 0 (source) and never the last node (target)
    std::vector<NodeId> candidates;
};

// Single-step episode environment for one (user, item) pair. The score
// function is injectable so tests can rig the reward landscape.
struct StructEnv {
    NodeId user = 0, item = 0;
    double s_orig = 0.0;
    std::vector<std::vector<NodeId>> original;  // node sequences of the path set
    std::vector<EditablePosition> positions;
    std::vector<Vec> features;  // per editable position
    std::function<double(const std::vector<std::vector<NodeId>>&)> score_edited;
};

StructEnv make_env(const BackendParams& params, const BackendContext& ctx, NodeId user,
                   NodeId item);

struct EpisodeResult {
    std::vector<std::uint8_t> selections;  // per editable position
    std::vector<NodeId> replacements;      // meaningful where selected
    double delta_s = 0.0;
    double reward_value = 0.0;
    int paths_edited = 0;    // |C|
    int nodes_replaced = 0;  // |F|
};

// Samples Bernoulli selections from the policy, replaces each selected
// position with a uniformly random candidate, scores the edited path set.
EpisodeResult run_episode(const StructEnv& env, const PolicyParams& policy,
                          const RewardConfig& reward_cfg, Rng& rng);

struct EpisodeTrace {
    int epoch = 0, episode = 0;
    EpisodeResult result;
};

struct TrainPolicyResult {
    PolicyParams policy;
    std::vector<double> epoch_mean_reward;
    std::vector<double> epoch_mean_replaced;
    std::vector<EpisodeTrace> traces;
};

// REINFORCE with a running-mean baseline; policy updates are applied at epoch
// boundaries so episodes within an epoch can run concurrently.
TrainPolicyResult train_policy(const StructEnv& env, const PolicyConfig& policy_cfg,
                               const RewardConfig& reward_cfg);

namespace serial {
TrainPolicyResult train_policy(const StructEnv& env, const PolicyConfig& policy_cfg,
                               const RewardConfig& reward_cfg);
}  // namespace serial

struct StructExplanation {
    NodeId user = 0, item = 0;
    std::vector<int> selected_paths;  // indices into the pair's path set
    std::vector<double> raw_weights;  // max(delta_s, 0) split uniformly
    double best_reward = 0.0;
    double delta_s = 0.0;
    bool empty_diagnostic = false;  // no episode beat the no-edit penalty
};

StructExplanation best_explanation(const StructEnv& env, std::span<const EpisodeTrace> traces,
                                   const RewardConfig& reward_cfg);

struct IntersectionResult {
    std::vector<int> path_indices;  // selected by both methods
    std::vector<double> weights;    // repr weights renormalized over the intersection
    bool empty_warning = false;     // downstream falls back to repr selection
};

IntersectionResult intersect_explanations(const ReprExplanation& repr,
                                          const StructExplanation& structural);

void save_traces_jsonl(std::span<const EpisodeTrace> traces, const StructEnv& env,
                       const std::filesystem::path& path);
void save_curves_csv(const TrainPolicyResult& result, const std::filesystem::path& path);

void save_struct_jsonl(std::span<const StructExplanation> explanations,
                       const PathSetCollection& paths, std::uint64_t seed,
                       const std::filesystem::path& path);
std::vector<StructExplanation> load_struct_jsonl(const std::filesystem::path& path);

}  // namespace cper
