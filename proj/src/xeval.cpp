#include "cper/xeval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <unordered_set>

#include "cper/error.hpp"

namespace cper {

const char* to_string(ExplainMethod m) {
    switch (m) {
        case ExplainMethod::Attention: return "attention";
        case ExplainMethod::CfRepr: return "cf_repr";
        case ExplainMethod::CfStruct: return "cf_struct";
        case ExplainMethod::CfIntersection: return "cf_intersection";
        case ExplainMethod::Random: return "random";
    }
    return "?";
}

double confidence_entropy(std::span<const double> weights) {
    double h = 0.0;
    for (const double w : weights) {
        if (w < 0.0) throw ValidationError("entropy requires non-negative weights");
        if (w > 0.0) h -= w * std::log(w);
    }
    return h;
}

double confidence_entropy(const WeightedExplanation& w) { return confidence_entropy(w.weights); }

WeightedExplanation attention_explanation(const BackendParams& params, const BackendContext& ctx,
                                          NodeId user, NodeId item) {
    WeightedExplanation out;
    out.user = user;
    out.item = item;
    out.method = ExplainMethod::Attention;
    Vec attention;
    score_pair(params, ctx, user, item, nullptr, &attention);
    out.weights = std::move(attention);
    return out;
}

WeightedExplanation repr_explanation_weights(const ReprExplanation& repr) {
    WeightedExplanation out;
    out.user = repr.user;
    out.item = repr.item;
    out.method = ExplainMethod::CfRepr;
    out.weights.reserve(repr.records.size());
    for (const auto& rec : repr.records) out.weights.push_back(rec.normalized_weight);
    return out;
}

WeightedExplanation struct_explanation_weights(const StructExplanation& structural,
                                               std::size_t path_count) {
    WeightedExplanation out;
    out.user = structural.user;
    out.item = structural.item;
    out.method = ExplainMethod::CfStruct;
    out.weights.assign(path_count, 0.0);
    if (!structural.selected_paths.empty()) {
        const double w = 1.0 / static_cast<double>(structural.selected_paths.size());
        for (const int idx : structural.selected_paths) out.weights.at(idx) = w;
    }
    return out;
}

WeightedExplanation intersection_weights(const ReprExplanation& repr,
                                         const IntersectionResult& inter,
                                         std::size_t path_count) {
    WeightedExplanation out;
    out.user = repr.user;
    out.item = repr.item;
    out.method = ExplainMethod::CfIntersection;
    out.weights.assign(path_count, 0.0);
    if (!inter.empty_warning) {
        for (std::size_t i = 0; i < inter.path_indices.size(); ++i)
            out.weights.at(inter.path_indices[i]) = inter.weights[i];
    } else {
        // Fallback to the repr selection when the intersection is empty.
        for (const auto& rec : repr.records)
            if (rec.selected) out.weights.at(rec.path_index) = rec.normalized_weight;
    }
    return out;
}

WeightedExplanation topk_selection(const WeightedExplanation& full, std::size_t k) {
    WeightedExplanation out = full;
    if (k >= full.weights.size()) return out;
    std::vector<std::size_t> order(full.weights.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return full.weights[a] > full.weights[b];
    });
    out.weights.assign(full.weights.size(), 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) sum += full.weights[order[i]];
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t idx = order[i];
        out.weights[idx] = sum > 0.0 ? full.weights[idx] / sum : 1.0 / static_cast<double>(k);
    }
    return out;
}

WeightedExplanation random_selection(NodeId user, NodeId item, std::size_t path_count,
                                     std::size_t k, Rng& rng) {
    WeightedExplanation out;
    out.user = user;
    out.item = item;
    out.method = ExplainMethod::Random;
    out.weights.assign(path_count, 0.0);
    k = std::min(k, path_count);
    if (k == 0) return out;
    // Partial Fisher-Yates draw without replacement.
    std::vector<std::size_t> pool(path_count);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < k; ++i)
        std::swap(pool[i], pool[i + rng.next_below(path_count - i)]);
    for (std::size_t i = 0; i < k; ++i) out.weights[pool[i]] = 1.0 / static_cast<double>(k);
    return out;
}

namespace {

std::vector<std::size_t> selected_indices(std::span<const double> weights) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < weights.size(); ++i)
        if (weights[i] > 0.0) out.push_back(i);
    return out;
}

// Score the pair using only the kept subset of its stored path embeddings.
double score_with_subset(const BackendParams& params, const BackendContext& ctx, NodeId user,
                         NodeId item, const std::vector<std::size_t>& kept) {
    const auto& stored = ctx.pair_embeddings(user, item);
    std::vector<Vec> subset;
    subset.reserve(kept.size());
    for (const std::size_t idx : kept) subset.push_back(stored.at(idx));
    return score_pair(params, ctx, user, item, &subset);
}

InformativenessResult informativeness_impl(const BackendParams& params, const BackendContext& ctx,
                                           std::span<const WeightedExplanation> explanations,
                                           bool parallel) {
    std::vector<double> sq(explanations.size(), -1.0);  // -1 marks skipped
    const auto run_one = [&](std::size_t i) {
        const auto& exp = explanations[i];
        const auto kept = selected_indices(exp.weights);
        if (kept.empty()) return;
        const double s_all = score_pair(params, ctx, exp.user, exp.item);
        const double s_sel = score_with_subset(params, ctx, exp.user, exp.item, kept);
        sq[i] = (s_all - s_sel) * (s_all - s_sel);
    };
    if (parallel) {
#pragma omp parallel for schedule(dynamic, 1)
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(explanations.size()); ++i)
            run_one(static_cast<std::size_t>(i));
    } else {
        for (std::size_t i = 0; i < explanations.size(); ++i) run_one(i);
    }

    InformativenessResult out;
    double sum = 0.0;
    for (const double v : sq) {
        if (v < 0.0) {
            ++out.skipped;
        } else {
            sum += v;
            ++out.evaluated;
        }
    }
    out.mse = out.evaluated == 0 ? 0.0 : sum / static_cast<double>(out.evaluated);
    return out;
}

std::vector<FidelityPoint> fidelity_impl(const BackendParams& params, const BackendContext& ctx,
                                         std::span<const WeightedExplanation> explanations,
                                         std::span<const double> ratios, bool parallel) {
    for (const double r : ratios)
        if (!(r > 0.0) || r > 1.0) throw ValidationError("fidelity ratios must lie in (0, 1]");

    struct PairDrops {
        bool ok = false;
        std::vector<double> drop;  // per ratio
    };
    std::vector<PairDrops> results(explanations.size());

    const auto run_one = [&](std::size_t i) {
        const auto& exp = explanations[i];
        // Explainable set in descending-weight order, ties by lower index.
        std::vector<std::size_t> expl = selected_indices(exp.weights);
        if (expl.empty()) return;
        std::stable_sort(expl.begin(), expl.end(), [&](std::size_t a, std::size_t b) {
            return exp.weights[a] > exp.weights[b];
        });
        const double s_full = score_pair(params, ctx, exp.user, exp.item);
        auto& slot = results[i];
        slot.ok = true;
        slot.drop.resize(ratios.size());
        const std::size_t path_count = exp.weights.size();
        for (std::size_t ri = 0; ri < ratios.size(); ++ri) {
            const auto removed = static_cast<std::size_t>(
                std::llround(ratios[ri] * static_cast<double>(expl.size())));
            std::set<std::size_t> gone(expl.begin(),
                                       expl.begin() + static_cast<std::ptrdiff_t>(
                                                          std::min(removed, expl.size())));
            std::vector<std::size_t> kept;
            for (std::size_t z = 0; z < path_count; ++z)
                if (!gone.contains(z)) kept.push_back(z);
            const double s_kept = score_with_subset(params, ctx, exp.user, exp.item, kept);
            slot.drop[ri] = s_full - s_kept;
        }
    };
    if (parallel) {
#pragma omp parallel for schedule(dynamic, 1)
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(explanations.size()); ++i)
            run_one(static_cast<std::size_t>(i));
    } else {
        for (std::size_t i = 0; i < explanations.size(); ++i) run_one(i);
    }

    std::vector<FidelityPoint> curve(ratios.size());
    for (std::size_t ri = 0; ri < ratios.size(); ++ri) {
        curve[ri].ratio = ratios[ri];
        for (const auto& r : results) {
            if (!r.ok) continue;
            curve[ri].fidelity += r.drop[ri];
            ++curve[ri].evaluated;
        }
        if (curve[ri].evaluated > 0)
            curve[ri].fidelity /= static_cast<double>(curve[ri].evaluated);
    }
    return curve;
}

}  // namespace

InformativenessResult informativeness_mse(const BackendParams& params, const BackendContext& ctx,
                                          std::span<const WeightedExplanation> explanations) {
    return informativeness_impl(params, ctx, explanations, true);
}

std::vector<FidelityPoint> fidelity_curve(const BackendParams& params, const BackendContext& ctx,
                                          std::span<const WeightedExplanation> explanations,
                                          std::span<const double> ratios) {
    return fidelity_impl(params, ctx, explanations, ratios, true);
}

namespace serial {
InformativenessResult informativeness_mse(const BackendParams& params, const BackendContext& ctx,
                                          std::span<const WeightedExplanation> explanations) {
    return informativeness_impl(params, ctx, explanations, false);
}
std::vector<FidelityPoint> fidelity_curve(const BackendParams& params, const BackendContext& ctx,
                                          std::span<const WeightedExplanation> explanations,
                                          std::span<const double> ratios) {
    return fidelity_impl(params, ctx, explanations, ratios, false);
}
}  // namespace serial

StabilityReport stability_report(const WeightRunner& runner, std::span<const std::uint64_t> seeds,
                                 double variance_ratio) {
    if (seeds.size() < 2) throw ValidationError("stability requires at least 2 runs");
    StabilityReport report;
    for (const std::uint64_t seed : seeds) report.samples.push_back(runner(seed));
    const std::size_t paths = report.samples.front().size();
    for (const auto& s : report.samples)
        if (s.size() != paths)
            throw ValidationError("stability runs returned differing path counts");

    report.variance.assign(paths, 0.0);
    std::size_t small = 0;
    const double n = static_cast<double>(report.samples.size());
    for (std::size_t p = 0; p < paths; ++p) {
        double mean = 0.0;
        for (const auto& s : report.samples) mean += s[p];
        mean /= n;
        double var = 0.0;
        for (const auto& s : report.samples) var += (s[p] - mean) * (s[p] - mean);
        var /= n;
        report.variance[p] = var;
        if (var <= variance_ratio * mean * mean) ++small;
    }
    report.small_fraction = paths == 0 ? 0.0 : static_cast<double>(small) / paths;
    return report;
}

PrankingSetup make_pranking_pathset(const RecGraph& g, const PathSetCollection& paths, NodeId user,
                                    NodeId item,
                                    std::span<const std::pair<NodeId, NodeId>> donor_pairs,
                                    Rng& rng) {
    const PathSet& target_set = paths.pair(user, item);
    if (target_set.paths.empty())
        throw ValidationError("pranking requires a non-empty target path set");

    // Items and attributes the target user touches; donors must share none.
    std::unordered_set<NodeId> target_zone;
    for (const auto& it : g.history(user)) {
        target_zone.insert(it.item);
        for (const NodeId a : g.neighbors(it.item))
            if (g.kind(a) == NodeKind::Attribute) target_zone.insert(a);
    }

    std::vector<std::pair<NodeId, NodeId>> qualified;
    for (const auto& [du, di] : donor_pairs) {
        if (du == user) continue;
        if (du >= g.user_count()) continue;
        bool distant = true;
        for (const auto& it : g.history(du)) {
            if (target_zone.contains(it.item)) {
                distant = false;
                break;
            }
            for (const NodeId a : g.neighbors(it.item))
                if (g.kind(a) == NodeKind::Attribute && target_zone.contains(a)) {
                    distant = false;
                    break;
                }
            if (!distant) break;
        }
        if (distant && !paths.pair(du, di).paths.empty()) qualified.push_back({du, di});
    }
    if (qualified.empty())
        throw ValidationError("no qualifying distant donor for pranking injection");

    // Random starting point, then deterministic sweep until a valid injection.
    const std::size_t start = rng.next_below(qualified.size());
    for (std::size_t offset = 0; offset < qualified.size(); ++offset) {
        const auto [du, di] = qualified[(start + offset) % qualified.size()];
        const auto& donor_set = paths.pair(du, di);
        const std::size_t path_start = rng.next_below(donor_set.paths.size());
        for (std::size_t po = 0; po < donor_set.paths.size(); ++po) {
            std::vector<NodeId> injected =
                donor_set.paths[(path_start + po) % donor_set.paths.size()].nodes;
            injected.back() = item;  // re-target so the set invariant holds
            const bool duplicate =
                std::any_of(target_set.paths.begin(), target_set.paths.end(),
                            [&](const ExplainPath& p) { return p.nodes == injected; });
            if (duplicate) continue;
            PrankingSetup setup;
            setup.modified = target_set;
            setup.modified.paths.push_back(ExplainPath{std::move(injected)});
            setup.injected_index = target_set.paths.size();
            setup.donor_user = du;
            return setup;
        }
    }
    throw ValidationError("every candidate pranking path duplicates an existing path");
}

std::size_t rank_of(std::span<const double> scores, std::size_t index) {
    std::size_t rank = 1;
    const double mine = scores[index];
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (i != index && scores[i] > mine) ++rank;
    return rank;
}

bool in_bottom_quartile(std::size_t rank, std::size_t count) {
    const auto quartile = static_cast<std::size_t>(std::ceil(static_cast<double>(count) / 4.0));
    return rank > count - quartile;
}

PrankingReport effectiveness_pranking(const PrankingRunner& runner, const PrankingSetup& setup,
                                      std::span<const std::uint64_t> seeds) {
    PrankingReport report;
    report.path_count = setup.modified.paths.size();
    report.injected_index = setup.injected_index;
    for (const std::uint64_t seed : seeds) {
        const auto [attention, cf_scores] = runner(seed, setup.modified);
        if (attention.size() != report.path_count || cf_scores.size() != report.path_count)
            throw ValidationError("pranking runner returned wrong-sized weight vectors");
        const std::size_t att_rank = rank_of(attention, setup.injected_index);
        const std::size_t cf_rank = rank_of(cf_scores, setup.injected_index);
        report.attention_ranks.push_back(att_rank);
        report.cf_ranks.push_back(cf_rank);
        if (in_bottom_quartile(cf_rank, report.path_count)) ++report.cf_bottom_quartile_runs;
        if (cf_rank > att_rank) ++report.cf_worse_than_attention_runs;
    }
    return report;
}

}  // namespace cper
