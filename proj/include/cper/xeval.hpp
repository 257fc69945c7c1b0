#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cper/backend.hpp"
#include "cper/cf_struct.hpp"
#include "cper/rng.hpp"

namespace cper {

enum class ExplainMethod { Attention, CfRepr, CfStruct, CfIntersection, Random };

const char* to_string(ExplainMethod m);

/// Per-path explanation weights for one pair: a probability vector over the
/// pair's path set (all-zero only when the method selected nothing).
struct WeightedExplanation {
    NodeId user = 0, item = 0;
    ExplainMethod method = ExplainMethod::Attention;
    std::vector<double> weights;
    std::uint64_t seed = 0;
    int run_index = 0;
};

// Shannon entropy (natural log) of a weight vector; 0 log 0 := 0.
double confidence_entropy(std::span<const double> weights);
double confidence_entropy(const WeightedExplanation& w);

// ---- explanation constructors ----

WeightedExplanation attention_explanation(const BackendParams& params, const BackendContext& ctx,
                                          NodeId user, NodeId item);

WeightedExplanation repr_explanation_weights(const ReprExplanation& repr);

WeightedExplanation struct_explanation_weights(const StructExplanation& structural,
                                               std::size_t path_count);

// Intersection weights; falls back to the repr selection when empty (flag on
// the intersection result tells callers a fallback happened).
WeightedExplanation intersection_weights(const ReprExplanation& repr,
                                         const IntersectionResult& inter,
                                         std::size_t path_count);

// Keeps the k highest-weight paths (ties by lower index), renormalized.
WeightedExplanation topk_selection(const WeightedExplanation& full, std::size_t k);

// Uniform weights over a uniformly drawn k-subset, seeded.
WeightedExplanation random_selection(NodeId user, NodeId item, std::size_t path_count,
                                     std::size_t k, Rng& rng);

// ---- metrics ----

struct InformativenessResult {
    double mse = 0.0;
    std::size_t evaluated = 0;
    std::size_t skipped = 0;  // pairs with no selected paths
};

// Mean over pairs of (s_all - s_selected_only)^2; "removing" a path excludes
// its embedding from the enhancement sum and the attention softmax.
InformativenessResult informativeness_mse(const BackendParams& params, const BackendContext& ctx,
                                          std::span<const WeightedExplanation> explanations);

struct FidelityPoint {
    double ratio = 0.0;
    double fidelity = 0.0;
    std::size_t evaluated = 0;
};

// fidelity(r) = mean over pairs of (s_full - s_with_top_r_fraction_removed),
// removal in descending-weight order over the explainable set.
std::vector<FidelityPoint> fidelity_curve(const BackendParams& params, const BackendContext& ctx,
                                          std::span<const WeightedExplanation> explanations,
                                          std::span<const double> ratios);

namespace serial {
InformativenessResult informativeness_mse(const BackendParams& params, const BackendContext& ctx,
                                          std::span<const WeightedExplanation> explanations);
std::vector<FidelityPoint> fidelity_curve(const BackendParams& params, const BackendContext& ctx,
                                          std::span<const WeightedExplanation> explanations,
                                          std::span<const double> ratios);
}  // namespace serial

// ---- rerun-based diagnostics ----

struct StabilityReport {
    std::vector<std::vector<double>> samples;  // [run][path]
    std::vector<double> variance;              // population variance per path
    double small_fraction = 0.0;               // share with var <= ratio * mean^2
};

// The runner re-learns the explanation for one pair under the given seed and
// returns its per-path weights.
using WeightRunner = std::function<std::vector<double>(std::uint64_t seed)>;

StabilityReport stability_report(const WeightRunner& runner, std::span<const std::uint64_t> seeds,
                                 double variance_ratio);

struct PrankingSetup {
    PathSet modified;            // original set plus the injected path (last)
    std::size_t injected_index;  // == original path count
    NodeId donor_user = 0;
};

// Builds the pranking path set: a random path from a distant donor pair with
// its terminal swapped to the target item. Donors sharing any item or
// attribute with the target user are disqualified; injected duplicates of an
// existing path are rejected.
PrankingSetup make_pranking_pathset(const RecGraph& g, const PathSetCollection& paths, NodeId user,
                                    NodeId item,
                                    std::span<const std::pair<NodeId, NodeId>> donor_pairs,
                                    Rng& rng);

// 1-based descending-score competition rank.
std::size_t rank_of(std::span<const double> scores, std::size_t index);

struct PrankingReport {
    std::vector<std::size_t> attention_ranks;  // per run
    std::vector<std::size_t> cf_ranks;
    std::size_t path_count = 0;
    std::size_t injected_index = 0;
    int cf_bottom_quartile_runs = 0;
    int cf_worse_than_attention_runs = 0;
};

// The runner retrains the explanation machinery on the modified path set and
// returns (attention weights, per-path cf impact scores).
using PrankingRunner = std::function<std::pair<std::vector<double>, std::vector<double>>(
    std::uint64_t seed, const PathSet& modified)>;

PrankingReport effectiveness_pranking(const PrankingRunner& runner, const PrankingSetup& setup,
                                      std::span<const std::uint64_t> seeds);

bool in_bottom_quartile(std::size_t rank, std::size_t count);

}  // namespace cper
