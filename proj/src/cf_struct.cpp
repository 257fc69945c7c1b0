#include "cper/cf_struct.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "cper/error.hpp"

namespace cper {

double reward(const RewardConfig& cfg, int num_paths_edited, int num_nodes_replaced,
              double delta_s) {
    if (num_nodes_replaced == 0) return cfg.no_edit_penalty;
    if (delta_s > 0.0)
        return -cfg.zeta * num_paths_edited - cfg.epsilon * num_nodes_replaced +
               cfg.eta * delta_s;
    return 0.0;
}

std::vector<std::vector<std::vector<NodeId>>> candidate_actions(const RecGraph& g,
                                                                const PathSet& set) {
    std::vector<std::vector<std::vector<NodeId>>> out;
    out.reserve(set.paths.size());
    for (const auto& path : set.paths) {
        std::vector<std::vector<NodeId>> per_position(path.nodes.size());
        for (std::size_t pos = 1; pos + 1 < path.nodes.size(); ++pos) {
            const NodeId original = path.nodes[pos];
            const auto& info = g.node(original);
            std::vector<NodeId> candidates;
            for (const NodeId c : g.two_hop_same_type(original)) {
                if (info.kind == NodeKind::Attribute && g.node(c).attr_class != info.attr_class)
                    continue;
                candidates.push_back(c);
            }
            per_position[pos] = std::move(candidates);
        }
        out.push_back(std::move(per_position));
    }
    return out;
}

double PolicyParams::prob(std::span<const double> features) const {
    double z = b2;
    for (int r = 0; r < hidden; ++r) {
        double acc = b1[r];
        const double* row = w1.data() + static_cast<std::size_t>(r) * in_dim;
        for (int c = 0; c < in_dim; ++c) acc += row[c] * features[c];
        z += w2[r] * std::tanh(acc);
    }
    return sigmoid(z);
}

PolicyParams init_policy(int in_dim, const PolicyConfig& cfg) {
    if (cfg.hidden < 1) throw ValidationError("policy hidden size must be >= 1");
    PolicyParams p;
    p.in_dim = in_dim;
    p.hidden = cfg.hidden;
    p.w1.assign(static_cast<std::size_t>(cfg.hidden) * in_dim, 0.0);
    p.b1.assign(cfg.hidden, 0.0);
    p.w2.assign(cfg.hidden, 0.0);
    p.b2 = 0.0;
    Rng rng(derive_seed(cfg.seed, "policy-init"));
    const double r1 = std::sqrt(6.0 / (in_dim + cfg.hidden));
    for (double& x : p.w1) x = rng.uniform(-r1, r1);
    const double r2 = std::sqrt(6.0 / (cfg.hidden + 1));
    for (double& x : p.w2) x = rng.uniform(-r2, r2);
    return p;
}

StructEnv make_env(const BackendParams& params, const BackendContext& ctx, NodeId user,
                   NodeId item) {
    const PathSet& set = ctx.paths->pair(user, item);
    StructEnv env;
    env.user = user;
    env.item = item;
    env.original.reserve(set.paths.size());
    for (const auto& p : set.paths) env.original.push_back(p.nodes);
    env.s_orig = score_pair(params, ctx, user, item);

    const auto candidates = candidate_actions(*ctx.g, set);
    const int d = ctx.table->dim();
    for (std::size_t k = 0; k < set.paths.size(); ++k) {
        const Vec path_mean = embed_path(*ctx.table, set.paths[k]);
        for (std::size_t pos = 1; pos + 1 < set.paths[k].nodes.size(); ++pos) {
            if (candidates[k][pos].empty()) continue;  // masked position
            EditablePosition ep;
            ep.path_index = static_cast<int>(k);
            ep.position = static_cast<int>(pos);
            ep.candidates = candidates[k][pos];
            env.positions.push_back(std::move(ep));

            Vec features;
            features.reserve(2 * d + 1);
            const auto node_vec = ctx.table->vec(set.paths[k].nodes[pos]);
            features.insert(features.end(), node_vec.begin(), node_vec.end());
            features.insert(features.end(), path_mean.begin(), path_mean.end());
            features.push_back(env.s_orig);
            env.features.push_back(std::move(features));
        }
    }

    // Edited node lists are re-pooled and fed through the backend in place of
    // the stored pair embeddings.
    const BackendParams* params_ptr = &params;
    const BackendContext* ctx_ptr = &ctx;
    env.score_edited = [params_ptr, ctx_ptr, user, item](
                           const std::vector<std::vector<NodeId>>& edited) {
        std::vector<Vec> pooled;
        pooled.reserve(edited.size());
        for (const auto& nodes : edited)
            pooled.push_back(embed_path(*ctx_ptr->table, std::span<const NodeId>(nodes)));
        return score_pair(*params_ptr, *ctx_ptr, user, item, &pooled);
    };
    return env;
}

EpisodeResult run_episode(const StructEnv& env, const PolicyParams& policy,
                          const RewardConfig& reward_cfg, Rng& rng) {
    EpisodeResult out;
    const std::size_t n = env.positions.size();
    out.selections.assign(n, 0);
    out.replacements.assign(n, 0);

    std::vector<std::vector<NodeId>> edited = env.original;
    std::vector<std::uint8_t> path_touched(env.original.size(), 0);
    for (std::size_t j = 0; j < n; ++j) {
        const double p = policy.prob(env.features[j]);
        if (!std::isfinite(p)) throw TrainingDiverged("policy output is not finite", -1);
        if (!rng.bernoulli(p)) continue;
        const auto& ep = env.positions[j];
        const NodeId replacement = ep.candidates[rng.next_below(ep.candidates.size())];
        out.selections[j] = 1;
        out.replacements[j] = replacement;
        edited[ep.path_index][ep.position] = replacement;
        path_touched[ep.path_index] = 1;
        ++out.nodes_replaced;
    }
    for (const std::uint8_t t : path_touched) out.paths_edited += t;

    if (out.nodes_replaced == 0) {
        out.delta_s = 0.0;
        out.reward_value = reward_cfg.no_edit_penalty;
        return out;
    }
    const double s_edited = env.score_edited(edited);
    out.delta_s = env.s_orig - s_edited;
    out.reward_value = reward(reward_cfg, out.paths_edited, out.nodes_replaced, out.delta_s);
    return out;
}

namespace {

struct PolicyGrad {
    Vec w1, b1, w2;
    double b2 = 0.0;

    explicit PolicyGrad(const PolicyParams& p)
        : w1(p.w1.size(), 0.0), b1(p.b1.size(), 0.0), w2(p.w2.size(), 0.0) {}

    void clear() {
        std::fill(w1.begin(), w1.end(), 0.0);
        std::fill(b1.begin(), b1.end(), 0.0);
        std::fill(w2.begin(), w2.end(), 0.0);
        b2 = 0.0;
    }
};

// advantage * d(log pi)/d(theta) for one position with selection y.
void accumulate_logpi_grad(const PolicyParams& policy, std::span<const double> features,
                           double p, int y, double advantage, PolicyGrad& grad) {
    const double g_z = advantage * (static_cast<double>(y) - p);
    for (int r = 0; r < policy.hidden; ++r) {
        double acc = policy.b1[r];
        const double* row = policy.w1.data() + static_cast<std::size_t>(r) * policy.in_dim;
        for (int c = 0; c < policy.in_dim; ++c) acc += row[c] * features[c];
        const double t = std::tanh(acc);
        grad.w2[r] += g_z * t;
        const double g_pre = g_z * policy.w2[r] * (1.0 - t * t);
        grad.b1[r] += g_pre;
        double* grow = grad.w1.data() + static_cast<std::size_t>(r) * policy.in_dim;
        for (int c = 0; c < policy.in_dim; ++c) grow[c] += g_pre * features[c];
    }
    grad.b2 += g_z;
}

TrainPolicyResult train_policy_impl(const StructEnv& env, const PolicyConfig& policy_cfg,
                                    const RewardConfig& reward_cfg, bool parallel) {
    if (policy_cfg.episodes_per_epoch < 1)
        throw ValidationError("episodes_per_epoch must be >= 1");
    const int in_dim = env.features.empty() ? 1 : static_cast<int>(env.features.front().size());

    TrainPolicyResult result;
    result.policy = init_policy(in_dim, policy_cfg);

    double baseline = 0.0;
    std::size_t baseline_count = 0;
    PolicyGrad grad(result.policy);
    std::vector<double> probs(env.positions.size(), 0.0);
    std::vector<EpisodeResult> episodes(policy_cfg.episodes_per_epoch);

    for (int epoch = 0; epoch < policy_cfg.epochs; ++epoch) {
        for (std::size_t j = 0; j < env.positions.size(); ++j) {
            probs[j] = result.policy.prob(env.features[j]);
            if (!std::isfinite(probs[j]))
                throw TrainingDiverged("policy output is not finite", epoch);
        }

        const auto run_one = [&](int e) {
            Rng rng(derive_seed(policy_cfg.seed, static_cast<std::uint64_t>(epoch),
                                static_cast<std::uint64_t>(e)));
            episodes[e] = run_episode(env, result.policy, reward_cfg, rng);
        };
        if (parallel) {
#pragma omp parallel for schedule(dynamic, 1)
            for (int e = 0; e < policy_cfg.episodes_per_epoch; ++e) run_one(e);
        } else {
            for (int e = 0; e < policy_cfg.episodes_per_epoch; ++e) run_one(e);
        }

        double epoch_reward = 0.0, epoch_replaced = 0.0;
        for (const auto& ep : episodes) {
            epoch_reward += ep.reward_value;
            epoch_replaced += ep.nodes_replaced;
        }
        epoch_reward /= policy_cfg.episodes_per_epoch;
        epoch_replaced /= policy_cfg.episodes_per_epoch;
        result.epoch_mean_reward.push_back(epoch_reward);
        result.epoch_mean_replaced.push_back(epoch_replaced);

        // First epoch centers on its own mean; afterwards the baseline is the
        // running mean of all previous episodes.
        const double base = baseline_count == 0 ? epoch_reward : baseline;

        grad.clear();
        for (int e = 0; e < policy_cfg.episodes_per_epoch; ++e) {
            const auto& ep = episodes[e];
            const double advantage = ep.reward_value - base;
            for (std::size_t j = 0; j < env.positions.size(); ++j)
                accumulate_logpi_grad(result.policy, env.features[j], probs[j],
                                      ep.selections[j], advantage, grad);
            result.traces.push_back({epoch, e, ep});
        }
        const double scale =
            policy_cfg.learning_rate / static_cast<double>(policy_cfg.episodes_per_epoch);
        axpy(scale, std::span<const double>(grad.w1), std::span<double>(result.policy.w1));
        axpy(scale, std::span<const double>(grad.b1), std::span<double>(result.policy.b1));
        axpy(scale, std::span<const double>(grad.w2), std::span<double>(result.policy.w2));
        result.policy.b2 += scale * grad.b2;

        for (const auto& ep : episodes) {
            ++baseline_count;
            baseline += (ep.reward_value - baseline) / static_cast<double>(baseline_count);
        }
    }
    return result;
}

}  // namespace

TrainPolicyResult train_policy(const StructEnv& env, const PolicyConfig& policy_cfg,
                               const RewardConfig& reward_cfg) {
    return train_policy_impl(env, policy_cfg, reward_cfg, true);
}

namespace serial {
TrainPolicyResult train_policy(const StructEnv& env, const PolicyConfig& policy_cfg,
                               const RewardConfig& reward_cfg) {
    return train_policy_impl(env, policy_cfg, reward_cfg, false);
}
}  // namespace serial

StructExplanation best_explanation(const StructEnv& env, std::span<const EpisodeTrace> traces,
                                   const RewardConfig& reward_cfg) {
    if (traces.empty()) throw ValidationError("best_explanation requires at least one episode");
    StructExplanation out;
    out.user = env.user;
    out.item = env.item;

    const EpisodeTrace* best = &traces.front();
    for (const auto& t : traces)
        if (t.result.reward_value > best->result.reward_value) best = &t;

    out.best_reward = best->result.reward_value;
    out.delta_s = best->result.delta_s;
    if (out.best_reward <= reward_cfg.no_edit_penalty || best->result.nodes_replaced == 0) {
        out.empty_diagnostic = true;
        return out;
    }

    std::vector<std::uint8_t> touched(env.original.size(), 0);
    for (std::size_t j = 0; j < env.positions.size(); ++j)
        if (best->result.selections[j]) touched[env.positions[j].path_index] = 1;
    for (std::size_t k = 0; k < touched.size(); ++k)
        if (touched[k]) out.selected_paths.push_back(static_cast<int>(k));
    const double credit =
        std::max(out.delta_s, 0.0) / static_cast<double>(out.selected_paths.size());
    out.raw_weights.assign(out.selected_paths.size(), credit);
    return out;
}

IntersectionResult intersect_explanations(const ReprExplanation& repr,
                                          const StructExplanation& structural) {
    if (repr.user != structural.user || repr.item != structural.item)
        throw ValidationError("intersection requires explanations of the same pair");
    IntersectionResult out;
    double weight_sum = 0.0;
    for (const int idx : structural.selected_paths) {
        if (static_cast<std::size_t>(idx) >= repr.records.size()) continue;
        const auto& rec = repr.records[idx];
        if (!rec.selected) continue;
        out.path_indices.push_back(idx);
        out.weights.push_back(rec.normalized_weight);
        weight_sum += rec.normalized_weight;
    }
    if (out.path_indices.empty()) {
        out.empty_warning = true;
        return out;
    }
    if (weight_sum > 0.0)
        for (double& w : out.weights) w /= weight_sum;
    else
        std::fill(out.weights.begin(), out.weights.end(),
                  1.0 / static_cast<double>(out.weights.size()));
    return out;
}

void save_traces_jsonl(std::span<const EpisodeTrace> traces, const StructEnv& env,
                       const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot write traces: " + path.string());
    for (const auto& t : traces) {
        nlohmann::json selections = nlohmann::json::array();
        nlohmann::json replacements = nlohmann::json::array();
        for (std::size_t j = 0; j < t.result.selections.size(); ++j) {
            if (!t.result.selections[j]) continue;
            const auto& ep = env.positions[j];
            selections.push_back({{"path", ep.path_index}, {"position", ep.position}});
            replacements.push_back({{"path", ep.path_index},
                                    {"position", ep.position},
                                    {"node", t.result.replacements[j]}});
        }
        nlohmann::json row{{"epoch", t.epoch},
                           {"episode", t.episode},
                           {"user", env.user},
                           {"item", env.item},
                           {"selections", selections},
                           {"replacements", replacements},
                           {"delta_s", t.result.delta_s},
                           {"reward", t.result.reward_value}};
        os << row.dump() << '\n';
    }
}

void save_curves_csv(const TrainPolicyResult& result, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot write curves: " + path.string());
    os << "epoch,mean_reward,mean_replaced_nodes\n";
    for (std::size_t e = 0; e < result.epoch_mean_reward.size(); ++e)
        os << e << ',' << result.epoch_mean_reward[e] << ',' << result.epoch_mean_replaced[e]
           << '\n';
}

void save_struct_jsonl(std::span<const StructExplanation> explanations,
                       const PathSetCollection& paths, std::uint64_t seed,
                       const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot write struct explanations: " + path.string());
    for (const auto& exp : explanations) {
        const auto& set = paths.pair(exp.user, exp.item);
        nlohmann::json selected = nlohmann::json::array();
        for (std::size_t i = 0; i < exp.selected_paths.size(); ++i) {
            selected.push_back({{"path_index", exp.selected_paths[i]},
                                {"path", set.paths.at(exp.selected_paths[i]).nodes},
                                {"raw_weight", exp.raw_weights[i]}});
        }
        nlohmann::json row{{"user", exp.user},
                           {"item", exp.item},
                           {"selected", selected},
                           {"best_reward", exp.best_reward},
                           {"delta_s", exp.delta_s},
                           {"empty", exp.empty_diagnostic},
                           {"method", "struct"},
                           {"seed", seed}};
        os << row.dump() << '\n';
    }
}

std::vector<StructExplanation> load_struct_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open struct explanations: " + path.string());
    std::vector<StructExplanation> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto row = nlohmann::json::parse(line);
        StructExplanation exp;
        exp.user = row.at("user").get<NodeId>();
        exp.item = row.at("item").get<NodeId>();
        exp.best_reward = row.at("best_reward").get<double>();
        exp.delta_s = row.at("delta_s").get<double>();
        exp.empty_diagnostic = row.at("empty").get<bool>();
        for (const auto& sel : row.at("selected")) {
            exp.selected_paths.push_back(sel.at("path_index").get<int>());
            exp.raw_weights.push_back(sel.at("raw_weight").get<double>());
        }
        out.push_back(std::move(exp));
    }
    return out;
}

}  // namespace cper
