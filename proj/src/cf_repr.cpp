#include "cper/cf_repr.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "cper/error.hpp"

namespace cper {

namespace {

double sign0(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// One (pair, path) optimization task operating on a reusable input buffer.
struct PairWorkspace {
    ScoreInputs inputs;        // candidate paths slot is mutated in place
    std::vector<Vec> stored;   // unperturbed pooled embeddings
    double s_orig = 0.0;
};

double eval_perturbed(const BackendParams& params, PairWorkspace& ws, int z,
                      std::span<const double> gamma, ScoreTape* tape) {
    auto& slot = ws.inputs.paths.back()[z];
    const Vec& base = ws.stored[z];
    for (std::size_t i = 0; i < base.size(); ++i) slot[i] = base[i] + gamma[i];
    const double s = forward_score(params, ws.inputs, tape);
    slot = base;  // restore for the next evaluation
    return s;
}

PathPerturbation optimize_one(const BackendParams& params, PairWorkspace& ws, NodeId user,
                              NodeId item, int z, const CfReprConfig& cfg) {
    const int d = params.cfg.dim;
    PathPerturbation result;
    result.user = user;
    result.item = item;
    result.path_index = z;
    result.gamma.assign(d, 0.0);

    Vec gamma(d, 0.0);
    double s_cur = ws.s_orig;  // gamma = 0 leaves the inputs bit-identical
    double loss_cur = total_loss(gamma, ws.s_orig, s_cur, cfg);
    result.loss_trace.push_back(loss_cur);

    ScoreTape tape;
    std::vector<Vec> path_grads;
    Vec param_scratch(params.block.size(), 0.0);  // accumulated but unused here
    Vec grad(d), trial(d);
    for (int step = 0; step < cfg.steps; ++step) {
        for (int i = 0; i < d; ++i) grad[i] = 2.0 * gamma[i] + cfg.alpha * sign0(gamma[i]);
        if (cfg.beta + loss_l2(ws.s_orig, s_cur) > 0.0) {
            const double s = eval_perturbed(params, ws, z, gamma, &tape);
            std::fill(param_scratch.begin(), param_scratch.end(), 0.0);
            backward_score(params, ws.inputs, tape, cfg.lambda * s * (1.0 - s), param_scratch,
                           &path_grads);
            axpy(1.0, std::span<const double>(path_grads[z]), std::span<double>(grad));
        }

        double lr = cfg.learning_rate;
        bool accepted = false;
        for (int halving = 0; halving < 30; ++halving) {
            for (int i = 0; i < d; ++i) trial[i] = gamma[i] - lr * grad[i];
            const double s_trial = eval_perturbed(params, ws, z, trial, nullptr);
            const double loss_trial = total_loss(trial, ws.s_orig, s_trial, cfg);
            if (loss_trial <= loss_cur) {
                gamma = trial;
                s_cur = s_trial;
                loss_cur = loss_trial;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if (!accepted) break;  // no descent direction left at this scale
        result.loss_trace.push_back(loss_cur);
    }

    result.gamma = std::move(gamma);
    result.delta_s = ws.s_orig - s_cur;
    return result;
}

struct PairTask {
    NodeId user, item;
    std::size_t first_slot;  // index of this pair's first (pair, path) task
    std::size_t path_count;
};

CfReprResult run_optimization(const BackendParams& params, const BackendContext& ctx,
                              std::span<const std::pair<NodeId, NodeId>> pairs,
                              const CfReprConfig& cfg, bool parallel) {
    if (cfg.steps < 1) throw ValidationError("cf_repr steps must be >= 1");
    if (cfg.alpha < 0 || cfg.beta < 0 || cfg.lambda < 0)
        throw ValidationError("cf_repr alpha/beta/lambda must be >= 0");

    CfReprResult result;
    std::vector<PairTask> tasks;
    std::vector<PairWorkspace> workspaces;
    std::size_t slots = 0;
    for (const auto& [user, item] : pairs) {
        const auto& embs = ctx.pair_embeddings(user, item);
        if (embs.empty()) {
            ++result.skipped_empty_pairs;
            continue;
        }
        PairWorkspace ws;
        try {
            ws.inputs = assemble_inputs(params, ctx, user, item);
        } catch (const ColdUserError&) {
            ++result.skipped_cold_users;
            continue;
        }
        ws.stored = embs;
        ws.s_orig = forward_score(params, ws.inputs, nullptr);
        tasks.push_back({user, item, slots, embs.size()});
        slots += embs.size();
        workspaces.push_back(std::move(ws));
    }

    std::vector<PathPerturbation> slots_out(slots);
    // Flattened (pair, path) tasks; each mutates only its own workspace copy.
    std::vector<std::pair<std::size_t, int>> flat;
    flat.reserve(slots);
    for (std::size_t t = 0; t < tasks.size(); ++t)
        for (std::size_t z = 0; z < tasks[t].path_count; ++z)
            flat.emplace_back(t, static_cast<int>(z));

    if (parallel) {
#pragma omp parallel
        {
            std::vector<PairWorkspace> local = workspaces;  // per-thread buffers
#pragma omp for schedule(dynamic, 1)
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(flat.size()); ++i) {
                const auto [t, z] = flat[i];
                slots_out[tasks[t].first_slot + z] =
                    optimize_one(params, local[t], tasks[t].user, tasks[t].item, z, cfg);
            }
        }
    } else {
        for (std::size_t i = 0; i < flat.size(); ++i) {
            const auto [t, z] = flat[i];
            slots_out[tasks[t].first_slot + z] =
                optimize_one(params, workspaces[t], tasks[t].user, tasks[t].item, z, cfg);
        }
    }

    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const auto& task = tasks[t];
        ReprExplanation exp;
        exp.user = task.user;
        exp.item = task.item;
        exp.s_orig = workspaces[t].s_orig;
        double selected_sum = 0.0;
        for (std::size_t z = 0; z < task.path_count; ++z) {
            const auto& p = slots_out[task.first_slot + z];
            ReprPathRecord rec;
            rec.path_index = static_cast<int>(z);
            rec.delta_s = p.delta_s;
            rec.selected = p.delta_s > 0.0;
            if (rec.selected) selected_sum += p.delta_s;
            exp.records.push_back(rec);
        }
        for (auto& rec : exp.records)
            rec.normalized_weight = rec.selected && selected_sum > 0.0 ? rec.delta_s / selected_sum : 0.0;
        result.explanations.push_back(std::move(exp));
    }
    result.perturbations = std::move(slots_out);
    return result;
}

}  // namespace

double loss_l1(std::span<const double> gamma, double alpha) {
    return l2_norm_sq(gamma) + alpha * l1_norm(gamma);
}

double loss_l2(double s_orig, double s_pert) { return -s_orig + s_pert; }

double total_loss(std::span<const double> gamma, double s_orig, double s_pert,
                  const CfReprConfig& cfg) {
    return loss_l1(gamma, cfg.alpha) + cfg.lambda * std::max(0.0, cfg.beta + loss_l2(s_orig, s_pert));
}

Vec perturbation_gradient(const BackendParams& params, const BackendContext& ctx, NodeId user,
                          NodeId item, int path_index, std::span<const double> gamma,
                          const CfReprConfig& cfg) {
    const auto& embs = ctx.pair_embeddings(user, item);
    if (path_index < 0 || static_cast<std::size_t>(path_index) >= embs.size())
        throw LookupError("path index " + std::to_string(path_index) + " out of range");

    PairWorkspace ws;
    ws.inputs = assemble_inputs(params, ctx, user, item);
    ws.stored = embs;
    ws.s_orig = forward_score(params, ws.inputs, nullptr);

    const int d = params.cfg.dim;
    Vec grad(d);
    for (int i = 0; i < d; ++i) grad[i] = 2.0 * gamma[i] + cfg.alpha * sign0(gamma[i]);

    ScoreTape tape;
    const double s_pert = eval_perturbed(params, ws, path_index, gamma, &tape);
    if (cfg.beta + loss_l2(ws.s_orig, s_pert) > 0.0) {
        std::vector<Vec> path_grads;
        Vec param_scratch(params.block.size(), 0.0);
        backward_score(params, ws.inputs, tape, cfg.lambda * s_pert * (1.0 - s_pert),
                       param_scratch, &path_grads);
        axpy(1.0, std::span<const double>(path_grads[path_index]), std::span<double>(grad));
    }
    return grad;
}

CfReprResult optimize_perturbations(const BackendParams& params, const BackendContext& ctx,
                                    std::span<const std::pair<NodeId, NodeId>> pairs,
                                    const CfReprConfig& cfg) {
    return run_optimization(params, ctx, pairs, cfg, true);
}

namespace serial {
CfReprResult optimize_perturbations(const BackendParams& params, const BackendContext& ctx,
                                    std::span<const std::pair<NodeId, NodeId>> pairs,
                                    const CfReprConfig& cfg) {
    return run_optimization(params, ctx, pairs, cfg, false);
}
}  // namespace serial

void save_repr_jsonl(const CfReprResult& result, const PathSetCollection& paths,
                     std::uint64_t seed, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot write repr explanations: " + path.string());
    for (const auto& exp : result.explanations) {
        const auto& set = paths.pair(exp.user, exp.item);
        for (const auto& rec : exp.records) {
            nlohmann::json row{{"user", exp.user},
                               {"item", exp.item},
                               {"path_index", rec.path_index},
                               {"path", set.paths.at(rec.path_index).nodes},
                               {"delta_s", rec.delta_s},
                               {"selected", rec.selected},
                               {"normalized_weight", rec.normalized_weight},
                               {"s_orig", exp.s_orig},
                               {"method", "repr"},
                               {"seed", seed}};
            os << row.dump() << '\n';
        }
    }
}

std::vector<ReprExplanation> load_repr_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open repr explanations: " + path.string());
    std::map<std::pair<NodeId, NodeId>, ReprExplanation> grouped;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto row = nlohmann::json::parse(line);
        const NodeId user = row.at("user").get<NodeId>();
        const NodeId item = row.at("item").get<NodeId>();
        auto& exp = grouped[{user, item}];
        exp.user = user;
        exp.item = item;
        exp.s_orig = row.at("s_orig").get<double>();
        ReprPathRecord rec;
        rec.path_index = row.at("path_index").get<int>();
        rec.delta_s = row.at("delta_s").get<double>();
        rec.selected = row.at("selected").get<bool>();
        rec.normalized_weight = row.at("normalized_weight").get<double>();
        exp.records.push_back(rec);
    }
    std::vector<ReprExplanation> out;
    out.reserve(grouped.size());
    for (auto& [key, exp] : grouped) {
        std::sort(exp.records.begin(), exp.records.end(),
                  [](const ReprPathRecord& a, const ReprPathRecord& b) {
                      return a.path_index < b.path_index;
                  });
        out.push_back(std::move(exp));
    }
    return out;
}

}  // namespace cper
