#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cper/backend.hpp"

namespace cper {

struct CfReprConfig {
    double alpha = 0.1;
    double beta = 0.5;
    double lambda = 5.0;
    double learning_rate = 0.05;
    int steps = 50;
    std::uint64_t seed = 0;
};

// ||gamma||_2^2 + alpha ||gamma||_1
double loss_l1(std::span<const double> gamma, double alpha);

// -s_orig + s_pert (negative when the perturbation hurt the score)
double loss_l2(double s_orig, double s_pert);

// l1 + lambda * max(0, beta + l2)
double total_loss(std::span<const double> gamma, double s_orig, double s_pert,
                  const CfReprConfig& cfg);

// Exact gradient of total_loss wrt gamma with backend parameters fixed.
// sign(0) contributes 0 to the L1 subgradient.
Vec perturbation_gradient(const BackendParams& params, const BackendContext& ctx, NodeId user,
                          NodeId item, int path_index, std::span<const double> gamma,
                          const CfReprConfig& cfg);

struct PathPerturbation {
    NodeId user = 0, item = 0;
    int path_index = 0;
    Vec gamma;
    double delta_s = 0.0;             // s_orig - s_perturbed after the final step
    std::vector<double> loss_trace;   // total loss after each accepted step
};

struct ReprPathRecord {
    int path_index = 0;
    double delta_s = 0.0;
    bool selected = false;          // delta_s > 0
    double normalized_weight = 0.0; // delta_s / sum of selected delta_s
};

struct ReprExplanation {
    NodeId user = 0, item = 0;
    double s_orig = 0.0;
    std::vector<ReprPathRecord> records;  // one per path, in path-set order
};

struct CfReprResult {
    std::vector<PathPerturbation> perturbations;
    std::vector<ReprExplanation> explanations;
    std::size_t skipped_empty_pairs = 0;
    std::size_t skipped_cold_users = 0;
};

// Learns one perturbation per (pair, path): `steps` gradient steps from
// gamma = 0 with halving backtracking, so the recorded loss never increases.
// Output is independent of thread count.
CfReprResult optimize_perturbations(const BackendParams& params, const BackendContext& ctx,
                                    std::span<const std::pair<NodeId, NodeId>> pairs,
                                    const CfReprConfig& cfg);

namespace serial {
CfReprResult optimize_perturbations(const BackendParams& params, const BackendContext& ctx,
                                    std::span<const std::pair<NodeId, NodeId>> pairs,
                                    const CfReprConfig& cfg);
}  // namespace serial

void save_repr_jsonl(const CfReprResult& result, const PathSetCollection& paths,
                     std::uint64_t seed, const std::filesystem::path& path);
std::vector<ReprExplanation> load_repr_jsonl(const std::filesystem::path& path);

}  // namespace cper
