#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "cper/embedding.hpp"
#include "cper/graph.hpp"
#include "cper/linalg.hpp"
#include "cper/paths.hpp"

namespace cper {

struct BackendConfig {
    int dim = 100;
    int att_hidden = 0;  // 0 -> dim
    int ff_hidden = 0;   // 0 -> dim
    int mlp_hidden = 0;  // 0 -> max(1, dim/2)
    int max_history = 8;
    double learning_rate = 1e-3;
    int epochs = 300;
    double clip_norm = 5.0;  // per-update gradient L2 cap; 0 disables
    std::uint64_t seed = 0;
    // Ablation switches: uniform path weights / mean pooling over the history.
    bool use_attention = true;
    bool use_encoder = true;

    int att_hidden_or_default() const { return att_hidden > 0 ? att_hidden : dim; }
    int ff_hidden_or_default() const { return ff_hidden > 0 ? ff_hidden : dim; }
    int mlp_hidden_or_default() const { return mlp_hidden > 0 ? mlp_hidden : std::max(1, dim / 2); }
};

enum class Tensor : int {
    WItem, WPath, Bias,
    AttW1, AttB1, AttV,
    Wq, Wk, Wv, Pos,
    FfW1, FfB1, FfW2, FfB2,
    MlpW1, MlpB1, MlpW2, MlpB2,
    Count
};

const char* tensor_name(Tensor t);

struct TensorSpec {
    std::size_t offset = 0;
    int rows = 0, cols = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// All weights in one flat array so SGD steps, gradient accumulation, and
// finite-difference probes address parameters uniformly.
class ParamBlock {
public:
    ParamBlock() = default;
    explicit ParamBlock(const std::array<std::pair<int, int>, static_cast<int>(Tensor::Count)>& shapes);

    MatView mat(Tensor t);
    ConstMatView mat(Tensor t) const;
    std::span<double> vec(Tensor t);
    std::span<const double> vec(Tensor t) const;
    double& scalar(Tensor t);
    double scalar(Tensor t) const;

    const TensorSpec& spec(Tensor t) const { return specs_[static_cast<int>(t)]; }
    std::span<double> flat() { return data_; }
    std::span<const double> flat() const { return data_; }
    std::size_t size() const { return data_.size(); }

private:
    std::array<TensorSpec, static_cast<int>(Tensor::Count)> specs_{};
    std::vector<double> data_;
};

struct BackendParams {
    BackendConfig cfg;
    ParamBlock block;
    int trained_epochs = 0;
};

BackendParams init_backend(const BackendConfig& cfg);

// Read-only bundle the scoring functions operate on. Path embeddings are
// pooled once up front.
struct BackendContext {
    const RecGraph* g = nullptr;
    const EmbeddingTable* table = nullptr;
    const PathSetCollection* paths = nullptr;
    std::vector<std::vector<Vec>> pooled;  // parallel to paths->sets()

    static BackendContext make(const RecGraph& g, const EmbeddingTable& table,
                               const PathSetCollection& paths);
    // Pooled embeddings of a pair's path set (empty vector if pair absent).
    const std::vector<Vec>& pair_embeddings(NodeId user, NodeId item) const;
};

// ---- forward / backward over the fixed architecture ----

struct ScoreInputs {
    std::vector<Vec> items;               // history embeddings, candidate last
    std::vector<std::vector<Vec>> paths;  // per-position pooled path embeddings
};

struct EnhanceTape {
    std::vector<Vec> w;      // W_path x_z
    std::vector<Vec> att_t;  // tanh layer activations
    Vec att_a;               // attention weights over paths
    Vec pre;                 // pre-ReLU activation
    Vec out;                 // enhanced embedding
};

struct ScoreTape {
    std::vector<EnhanceTape> items;
    std::vector<Vec> s;  // position-encoded sequence
    Vec q, alpha, attn;
    std::vector<Vec> k, v;
    Vec ff1pre, ff1, hseq;
    Vec m1pre, m1;
    double logit = 0.0;
    double score = 0.0;
};

double forward_score(const BackendParams& params, const ScoreInputs& inputs, ScoreTape* tape);

// Accumulates d(logit)/d(params) * g_logit into grad (size = block.size()).
// When cand_path_grads is non-null it receives d(logit)/d(x_z) * g_logit for
// the candidate position's path embeddings.
void backward_score(const BackendParams& params, const ScoreInputs& inputs, const ScoreTape& tape,
                    double g_logit, std::span<double> grad,
                    std::vector<Vec>* cand_path_grads = nullptr);

// ---- spec-level operations ----

struct EnhanceResult {
    Vec enhanced;
    Vec attention;  // empty when there are no paths
};

EnhanceResult enhance_item(const BackendParams& params, const Vec& item_vec,
                           const std::vector<Vec>& path_vecs);

Vec user_preference(const BackendParams& params, const std::vector<Vec>& enhanced_items);

double score(const BackendParams& params, const Vec& user_pref);

// History sequence of `user` (candidate occurrences removed, most recent
// max_history kept) with `item` appended; each position carries its pair's
// pooled path embeddings. Throws ColdUserError for users without history.
ScoreInputs assemble_inputs(const BackendParams& params, const BackendContext& ctx, NodeId user,
                            NodeId item, const std::vector<Vec>* candidate_path_override = nullptr);

// Full forward pass. `candidate_path_override`, when given, replaces the
// candidate pair's pooled path embeddings (any length, including empty).
double score_pair(const BackendParams& params, const BackendContext& ctx, NodeId user, NodeId item,
                  const std::vector<Vec>* candidate_path_override = nullptr,
                  Vec* attention_out = nullptr);

// ---- training and ranking evaluation ----

struct TrainReport {
    std::vector<double> epoch_loss;
};

// Implicit-feedback loss with one uniform negative per positive, plain SGD.
BackendParams train_backend(const BackendContext& ctx, const BackendConfig& cfg,
                            TrainReport* report = nullptr);

struct TopkMetrics {
    std::map<int, double> hr;
    std::map<int, double> ndcg;
    std::size_t evaluated = 0;
    std::size_t skipped_cold = 0;
};

TopkMetrics evaluate_topk(const BackendParams& params, const BackendContext& ctx,
                          std::span<const std::pair<NodeId, NodeId>> heldout,
                          std::span<const int> k_list, int negatives_per_positive,
                          std::uint64_t seed);

// Ranking math shared with evaluate_topk; exposed for direct testing.
void accumulate_rank(std::size_t rank, std::span<const int> k_list, std::map<int, double>& hr,
                     std::map<int, double>& ndcg);

void save_checkpoint(const BackendParams& params, const std::filesystem::path& path);
BackendParams load_checkpoint(const std::filesystem::path& path);

}  // namespace cper
