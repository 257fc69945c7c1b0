#include "cper/backend.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "cper/error.hpp"
#include "cper/rng.hpp"

namespace cper {

namespace {

constexpr std::uint32_t kCkptMagic = 0x4b435043;  // "CPCK"
constexpr std::uint32_t kCkptVersion = 1;

std::array<std::pair<int, int>, static_cast<int>(Tensor::Count)> backend_shapes(
    const BackendConfig& cfg) {
    const int d = cfg.dim;
    const int h = cfg.att_hidden_or_default();
    const int f = cfg.ff_hidden_or_default();
    const int m = cfg.mlp_hidden_or_default();
    const int positions = cfg.max_history + 1;
    std::array<std::pair<int, int>, static_cast<int>(Tensor::Count)> shapes{};
    shapes[static_cast<int>(Tensor::WItem)] = {d, d};
    shapes[static_cast<int>(Tensor::WPath)] = {d, d};
    shapes[static_cast<int>(Tensor::Bias)] = {d, 1};
    shapes[static_cast<int>(Tensor::AttW1)] = {h, 2 * d};
    shapes[static_cast<int>(Tensor::AttB1)] = {h, 1};
    shapes[static_cast<int>(Tensor::AttV)] = {h, 1};
    shapes[static_cast<int>(Tensor::Wq)] = {d, d};
    shapes[static_cast<int>(Tensor::Wk)] = {d, d};
    shapes[static_cast<int>(Tensor::Wv)] = {d, d};
    shapes[static_cast<int>(Tensor::Pos)] = {positions, d};
    shapes[static_cast<int>(Tensor::FfW1)] = {f, d};
    shapes[static_cast<int>(Tensor::FfB1)] = {f, 1};
    shapes[static_cast<int>(Tensor::FfW2)] = {d, f};
    shapes[static_cast<int>(Tensor::FfB2)] = {d, 1};
    shapes[static_cast<int>(Tensor::MlpW1)] = {m, d};
    shapes[static_cast<int>(Tensor::MlpB1)] = {m, 1};
    shapes[static_cast<int>(Tensor::MlpW2)] = {m, 1};
    shapes[static_cast<int>(Tensor::MlpB2)] = {1, 1};
    return shapes;
}

MatView grad_mat(std::span<double> grad, const ParamBlock& block, Tensor t) {
    const auto& s = block.spec(t);
    return {grad.data() + s.offset, s.rows, s.cols};
}

std::span<double> grad_vec(std::span<double> grad, const ParamBlock& block, Tensor t) {
    const auto& s = block.spec(t);
    return grad.subspan(s.offset, s.size());
}

}  // namespace

const char* tensor_name(Tensor t) {
    switch (t) {
        case Tensor::WItem: return "w_item";
        case Tensor::WPath: return "w_path";
        case Tensor::Bias: return "bias";
        case Tensor::AttW1: return "att_w1";
        case Tensor::AttB1: return "att_b1";
        case Tensor::AttV: return "att_v";
        case Tensor::Wq: return "wq";
        case Tensor::Wk: return "wk";
        case Tensor::Wv: return "wv";
        case Tensor::Pos: return "pos";
        case Tensor::FfW1: return "ff_w1";
        case Tensor::FfB1: return "ff_b1";
        case Tensor::FfW2: return "ff_w2";
        case Tensor::FfB2: return "ff_b2";
        case Tensor::MlpW1: return "mlp_w1";
        case Tensor::MlpB1: return "mlp_b1";
        case Tensor::MlpW2: return "mlp_w2";
        case Tensor::MlpB2: return "mlp_b2";
        case Tensor::Count: break;
    }
    return "?";
}

ParamBlock::ParamBlock(
    const std::array<std::pair<int, int>, static_cast<int>(Tensor::Count)>& shapes) {
    std::size_t offset = 0;
    for (int i = 0; i < static_cast<int>(Tensor::Count); ++i) {
        specs_[i] = {offset, shapes[i].first, shapes[i].second};
        offset += specs_[i].size();
    }
    data_.assign(offset, 0.0);
}

MatView ParamBlock::mat(Tensor t) {
    const auto& s = spec(t);
    return {data_.data() + s.offset, s.rows, s.cols};
}

ConstMatView ParamBlock::mat(Tensor t) const {
    const auto& s = spec(t);
    return {data_.data() + s.offset, s.rows, s.cols};
}

std::span<double> ParamBlock::vec(Tensor t) {
    const auto& s = spec(t);
    return {data_.data() + s.offset, s.size()};
}

std::span<const double> ParamBlock::vec(Tensor t) const {
    const auto& s = spec(t);
    return {data_.data() + s.offset, s.size()};
}

double& ParamBlock::scalar(Tensor t) { return data_[spec(t).offset]; }
double ParamBlock::scalar(Tensor t) const { return data_[spec(t).offset]; }

BackendParams init_backend(const BackendConfig& cfg) {
    if (cfg.dim <= 0) throw ValidationError("backend dim must be > 0");
    if (cfg.max_history < 1) throw ValidationError("max_history must be >= 1");
    BackendParams params{cfg, ParamBlock(backend_shapes(cfg)), 0};
    Rng rng(derive_seed(cfg.seed, "backend-init"));
    for (int i = 0; i < static_cast<int>(Tensor::Count); ++i) {
        const Tensor t = static_cast<Tensor>(i);
        const auto& s = params.block.spec(t);
        const bool is_bias = s.cols == 1 && t != Tensor::AttV && t != Tensor::MlpW2;
        if (is_bias) continue;  // biases start at zero
        double range;
        if (t == Tensor::Pos) {
            range = 0.01;
        } else {
            const double fan_in = s.cols == 1 ? s.rows : s.cols;
            const double fan_out = s.cols == 1 ? 1.0 : s.rows;
            range = std::sqrt(6.0 / (fan_in + fan_out));
        }
        for (double& x : params.block.vec(t)) x = rng.uniform(-range, range);
    }
    return params;
}

BackendContext BackendContext::make(const RecGraph& g, const EmbeddingTable& table,
                                    const PathSetCollection& paths) {
    BackendContext ctx;
    ctx.g = &g;
    ctx.table = &table;
    ctx.paths = &paths;
    ctx.pooled.reserve(paths.sets().size());
    for (const auto& set : paths.sets()) {
        std::vector<Vec> embs;
        embs.reserve(set.paths.size());
        for (const auto& p : set.paths) embs.push_back(embed_path(table, p));
        ctx.pooled.push_back(std::move(embs));
    }
    return ctx;
}

const std::vector<Vec>& BackendContext::pair_embeddings(NodeId user, NodeId item) const {
    static const std::vector<Vec> empty;
    const auto& sets = paths->sets();
    const auto it = std::lower_bound(
        sets.begin(), sets.end(), std::pair{user, item}, [](const PathSet& s, const auto& key) {
            return std::pair{s.user, s.item} < key;
        });
    if (it == sets.end() || it->user != user || it->item != item) return empty;
    return pooled[static_cast<std::size_t>(it - sets.begin())];
}

namespace {

// Enhanced item embedding (Figure-4 unit): ReLU(W_i h + sum_z a_z Z W_p x_z + b) ⊙ h.
// Uniform weights a_z = 1/Z recover the plain unweighted path sum.
void enhance_forward(const BackendParams& params, const Vec& h, const std::vector<Vec>& paths,
                     EnhanceTape& tape) {
    const auto& cfg = params.cfg;
    const int d = cfg.dim;
    const auto& block = params.block;
    const std::size_t z_count = paths.size();

    tape.pre.assign(d, 0.0);
    matvec(block.mat(Tensor::WItem), h, tape.pre);
    axpy(1.0, block.vec(Tensor::Bias), std::span<double>(tape.pre));

    tape.w.assign(z_count, Vec(d, 0.0));
    tape.att_t.clear();
    tape.att_a.assign(z_count, 0.0);
    if (z_count > 0) {
        for (std::size_t z = 0; z < z_count; ++z)
            matvec(block.mat(Tensor::WPath), paths[z], tape.w[z]);
        if (cfg.use_attention) {
            const int att_h = cfg.att_hidden_or_default();
            tape.att_t.assign(z_count, Vec(att_h, 0.0));
            Vec concat(2 * d);
            for (std::size_t z = 0; z < z_count; ++z) {
                std::copy(h.begin(), h.end(), concat.begin());
                std::copy(paths[z].begin(), paths[z].end(), concat.begin() + d);
                matvec(block.mat(Tensor::AttW1), concat, tape.att_t[z]);
                axpy(1.0, block.vec(Tensor::AttB1), std::span<double>(tape.att_t[z]));
                for (double& x : tape.att_t[z]) x = std::tanh(x);
                tape.att_a[z] = dot(block.vec(Tensor::AttV), tape.att_t[z]);
            }
            softmax_inplace(tape.att_a);
        } else {
            std::fill(tape.att_a.begin(), tape.att_a.end(), 1.0 / static_cast<double>(z_count));
        }
        for (std::size_t z = 0; z < z_count; ++z)
            axpy(tape.att_a[z] * static_cast<double>(z_count), tape.w[z],
                 std::span<double>(tape.pre));
    }

    tape.out.assign(d, 0.0);
    for (int i = 0; i < d; ++i) tape.out[i] = std::max(tape.pre[i], 0.0) * h[i];
}

// Accumulates parameter gradients for one enhancement unit; returns the
// gradient wrt the path embeddings in path_grads when requested.
void enhance_backward(const BackendParams& params, const Vec& h, const std::vector<Vec>& paths,
                      const EnhanceTape& tape, std::span<const double> g_out,
                      std::span<double> grad, std::vector<Vec>* path_grads) {
    const auto& cfg = params.cfg;
    const int d = cfg.dim;
    const auto& block = params.block;
    const std::size_t z_count = paths.size();

    Vec g_pre(d);
    for (int i = 0; i < d; ++i) g_pre[i] = tape.pre[i] > 0.0 ? g_out[i] * h[i] : 0.0;

    outer_acc(g_pre, h, grad_mat(grad, block, Tensor::WItem));
    axpy(1.0, std::span<const double>(g_pre), grad_vec(grad, block, Tensor::Bias));

    if (z_count == 0) return;
    if (path_grads != nullptr) path_grads->assign(z_count, Vec(d, 0.0));

    const double zf = static_cast<double>(z_count);
    Vec g_w(d);
    Vec g_a(z_count, 0.0);
    for (std::size_t z = 0; z < z_count; ++z) {
        const double scale = tape.att_a[z] * zf;
        for (int i = 0; i < d; ++i) g_w[i] = scale * g_pre[i];
        outer_acc(g_w, paths[z], grad_mat(grad, block, Tensor::WPath));
        if (path_grads != nullptr) {
            Vec gx(d);
            matvec_t(block.mat(Tensor::WPath), g_w, gx);
            axpy(1.0, std::span<const double>(gx), std::span<double>((*path_grads)[z]));
        }
        g_a[z] = zf * dot(g_pre, tape.w[z]);
    }

    if (!cfg.use_attention) return;  // uniform weights are constants

    double common = 0.0;
    for (std::size_t z = 0; z < z_count; ++z) common += tape.att_a[z] * g_a[z];
    const int att_h = cfg.att_hidden_or_default();
    Vec g_tpre(att_h);
    Vec concat(2 * d);
    Vec gx_att(d);
    for (std::size_t z = 0; z < z_count; ++z) {
        const double g_e = tape.att_a[z] * (g_a[z] - common);
        axpy(g_e, std::span<const double>(tape.att_t[z]), grad_vec(grad, block, Tensor::AttV));
        const auto att_v = block.vec(Tensor::AttV);
        for (int i = 0; i < att_h; ++i) {
            const double t = tape.att_t[z][i];
            g_tpre[i] = g_e * att_v[i] * (1.0 - t * t);
        }
        std::copy(h.begin(), h.end(), concat.begin());
        std::copy(paths[z].begin(), paths[z].end(), concat.begin() + d);
        outer_acc(g_tpre, concat, grad_mat(grad, block, Tensor::AttW1));
        axpy(1.0, std::span<const double>(g_tpre), grad_vec(grad, block, Tensor::AttB1));
        if (path_grads != nullptr) {
            const auto att_w1 = block.mat(Tensor::AttW1);
            std::fill(gx_att.begin(), gx_att.end(), 0.0);
            for (int r = 0; r < att_h; ++r) {
                const double gr = g_tpre[r];
                if (gr == 0.0) continue;
                for (int c = 0; c < d; ++c) gx_att[c] += gr * att_w1(r, d + c);
            }
            axpy(1.0, std::span<const double>(gx_att), std::span<double>((*path_grads)[z]));
        }
    }
}

}  // namespace

double forward_score(const BackendParams& params, const ScoreInputs& inputs, ScoreTape* tape) {
    const auto& cfg = params.cfg;
    const int d = cfg.dim;
    const auto& block = params.block;
    const int L = static_cast<int>(inputs.items.size());
    if (L == 0) throw ColdUserError("cold user: empty item sequence");
    if (L > cfg.max_history + 1)
        throw ValidationError("sequence longer than max_history + 1");

    ScoreTape local;
    ScoreTape& tp = tape != nullptr ? *tape : local;
    tp.items.assign(L, EnhanceTape{});
    for (int j = 0; j < L; ++j)
        enhance_forward(params, inputs.items[j], inputs.paths[j], tp.items[j]);

    if (cfg.use_encoder) {
        const auto pos = block.mat(Tensor::Pos);
        tp.s.assign(L, Vec(d, 0.0));
        for (int j = 0; j < L; ++j)
            for (int i = 0; i < d; ++i) tp.s[j][i] = tp.items[j].out[i] + pos(j, i);

        tp.q.assign(d, 0.0);
        matvec(block.mat(Tensor::Wq), tp.s[L - 1], tp.q);
        tp.k.assign(L, Vec(d, 0.0));
        tp.v.assign(L, Vec(d, 0.0));
        tp.alpha.assign(L, 0.0);
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
        for (int j = 0; j < L; ++j) {
            matvec(block.mat(Tensor::Wk), tp.s[j], tp.k[j]);
            matvec(block.mat(Tensor::Wv), tp.s[j], tp.v[j]);
            tp.alpha[j] = dot(tp.q, tp.k[j]) * inv_sqrt_d;
        }
        softmax_inplace(tp.alpha);
        tp.attn.assign(d, 0.0);
        for (int j = 0; j < L; ++j)
            axpy(tp.alpha[j], std::span<const double>(tp.v[j]), std::span<double>(tp.attn));

        const int f = cfg.ff_hidden_or_default();
        tp.ff1pre.assign(f, 0.0);
        matvec(block.mat(Tensor::FfW1), tp.attn, tp.ff1pre);
        axpy(1.0, block.vec(Tensor::FfB1), std::span<double>(tp.ff1pre));
        tp.ff1.assign(f, 0.0);
        for (int i = 0; i < f; ++i) tp.ff1[i] = std::max(tp.ff1pre[i], 0.0);
        tp.hseq.assign(d, 0.0);
        matvec(block.mat(Tensor::FfW2), tp.ff1, tp.hseq);
        axpy(1.0, block.vec(Tensor::FfB2), std::span<double>(tp.hseq));
    } else {
        tp.hseq.assign(d, 0.0);
        for (int j = 0; j < L; ++j)
            axpy(1.0 / L, std::span<const double>(tp.items[j].out), std::span<double>(tp.hseq));
    }

    const int m = cfg.mlp_hidden_or_default();
    tp.m1pre.assign(m, 0.0);
    matvec(block.mat(Tensor::MlpW1), tp.hseq, tp.m1pre);
    axpy(1.0, block.vec(Tensor::MlpB1), std::span<double>(tp.m1pre));
    tp.m1.assign(m, 0.0);
    for (int i = 0; i < m; ++i) tp.m1[i] = std::max(tp.m1pre[i], 0.0);
    tp.logit = dot(block.vec(Tensor::MlpW2), tp.m1) + block.scalar(Tensor::MlpB2);
    tp.score = sigmoid(tp.logit);
    return tp.score;
}

void backward_score(const BackendParams& params, const ScoreInputs& inputs, const ScoreTape& tape,
                    double g_logit, std::span<double> grad, std::vector<Vec>* cand_path_grads) {
    const auto& cfg = params.cfg;
    const int d = cfg.dim;
    const auto& block = params.block;
    const int L = static_cast<int>(inputs.items.size());
    const int m = cfg.mlp_hidden_or_default();

    // MLP scorer
    Vec g_m1(m);
    const auto mlp_w2 = block.vec(Tensor::MlpW2);
    for (int i = 0; i < m; ++i) g_m1[i] = g_logit * mlp_w2[i];
    axpy(g_logit, std::span<const double>(tape.m1), grad_vec(grad, block, Tensor::MlpW2));
    grad_vec(grad, block, Tensor::MlpB2)[0] += g_logit;
    Vec g_m1pre(m);
    for (int i = 0; i < m; ++i) g_m1pre[i] = tape.m1pre[i] > 0.0 ? g_m1[i] : 0.0;
    outer_acc(g_m1pre, tape.hseq, grad_mat(grad, block, Tensor::MlpW1));
    axpy(1.0, std::span<const double>(g_m1pre), grad_vec(grad, block, Tensor::MlpB1));
    Vec g_hseq(d);
    matvec_t(block.mat(Tensor::MlpW1), g_m1pre, g_hseq);

    std::vector<Vec> g_out(L, Vec(d, 0.0));
    if (cfg.use_encoder) {
        const int f = cfg.ff_hidden_or_default();
        outer_acc(g_hseq, tape.ff1, grad_mat(grad, block, Tensor::FfW2));
        axpy(1.0, std::span<const double>(g_hseq), grad_vec(grad, block, Tensor::FfB2));
        Vec g_ff1(f);
        matvec_t(block.mat(Tensor::FfW2), g_hseq, g_ff1);
        Vec g_ff1pre(f);
        for (int i = 0; i < f; ++i) g_ff1pre[i] = tape.ff1pre[i] > 0.0 ? g_ff1[i] : 0.0;
        outer_acc(g_ff1pre, tape.attn, grad_mat(grad, block, Tensor::FfW1));
        axpy(1.0, std::span<const double>(g_ff1pre), grad_vec(grad, block, Tensor::FfB1));
        Vec g_attn(d);
        matvec_t(block.mat(Tensor::FfW1), g_ff1pre, g_attn);

        Vec g_alpha(L), g_beta(L);
        for (int j = 0; j < L; ++j) g_alpha[j] = dot(g_attn, tape.v[j]);
        double common = 0.0;
        for (int j = 0; j < L; ++j) common += tape.alpha[j] * g_alpha[j];
        for (int j = 0; j < L; ++j) g_beta[j] = tape.alpha[j] * (g_alpha[j] - common);

        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
        Vec g_q(d, 0.0);
        std::vector<Vec> g_s(L, Vec(d, 0.0));
        Vec tmp(d);
        for (int j = 0; j < L; ++j) {
            // value path
            Vec g_v(d);
            for (int i = 0; i < d; ++i) g_v[i] = tape.alpha[j] * g_attn[i];
            outer_acc(g_v, tape.s[j], grad_mat(grad, block, Tensor::Wv));
            matvec_t(block.mat(Tensor::Wv), g_v, tmp);
            axpy(1.0, std::span<const double>(tmp), std::span<double>(g_s[j]));
            // key path
            Vec g_k(d);
            for (int i = 0; i < d; ++i) g_k[i] = g_beta[j] * tape.q[i] * inv_sqrt_d;
            outer_acc(g_k, tape.s[j], grad_mat(grad, block, Tensor::Wk));
            matvec_t(block.mat(Tensor::Wk), g_k, tmp);
            axpy(1.0, std::span<const double>(tmp), std::span<double>(g_s[j]));
            // query accumulation
            axpy(g_beta[j] * inv_sqrt_d, std::span<const double>(tape.k[j]), std::span<double>(g_q));
        }
        outer_acc(g_q, tape.s[L - 1], grad_mat(grad, block, Tensor::Wq));
        matvec_t(block.mat(Tensor::Wq), g_q, tmp);
        axpy(1.0, std::span<const double>(tmp), std::span<double>(g_s[L - 1]));

        auto g_pos = grad_mat(grad, block, Tensor::Pos);
        for (int j = 0; j < L; ++j) {
            axpy(1.0, std::span<const double>(g_s[j]), g_pos.row(j));
            g_out[j] = std::move(g_s[j]);
        }
    } else {
        for (int j = 0; j < L; ++j)
            for (int i = 0; i < d; ++i) g_out[j][i] = g_hseq[i] / L;
    }

    for (int j = 0; j < L; ++j) {
        const bool want_paths = cand_path_grads != nullptr && j == L - 1;
        enhance_backward(params, inputs.items[j], inputs.paths[j], tape.items[j], g_out[j], grad,
                         want_paths ? cand_path_grads : nullptr);
    }
}

EnhanceResult enhance_item(const BackendParams& params, const Vec& item_vec,
                           const std::vector<Vec>& path_vecs) {
    EnhanceTape tape;
    enhance_forward(params, item_vec, path_vecs, tape);
    return {std::move(tape.out), std::move(tape.att_a)};
}

Vec user_preference(const BackendParams& params, const std::vector<Vec>& enhanced_items) {
    if (enhanced_items.empty()) throw ColdUserError("cold user: empty history");
    // Run the sequence stage alone by treating inputs as already-enhanced
    // vectors: identity enhancement is not available, so this recomputes the
    // encoder directly.
    const auto& cfg = params.cfg;
    const int d = cfg.dim;
    const auto& block = params.block;
    const int L = static_cast<int>(enhanced_items.size());
    if (L > cfg.max_history + 1) throw ValidationError("sequence longer than max_history + 1");

    if (!cfg.use_encoder) {
        Vec hseq(d, 0.0);
        for (const auto& e : enhanced_items) axpy(1.0 / L, std::span<const double>(e), std::span<double>(hseq));
        return hseq;
    }

    const auto pos = block.mat(Tensor::Pos);
    std::vector<Vec> s(L, Vec(d, 0.0));
    for (int j = 0; j < L; ++j)
        for (int i = 0; i < d; ++i) s[j][i] = enhanced_items[j][i] + pos(j, i);
    Vec q(d, 0.0);
    matvec(block.mat(Tensor::Wq), s[L - 1], q);
    std::vector<Vec> v(L, Vec(d, 0.0));
    Vec alpha(L, 0.0);
    Vec k(d, 0.0);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (int j = 0; j < L; ++j) {
        matvec(block.mat(Tensor::Wk), s[j], k);
        matvec(block.mat(Tensor::Wv), s[j], v[j]);
        alpha[j] = dot(q, k) * inv_sqrt_d;
    }
    softmax_inplace(alpha);
    Vec attn(d, 0.0);
    for (int j = 0; j < L; ++j) axpy(alpha[j], std::span<const double>(v[j]), std::span<double>(attn));
    const int f = cfg.ff_hidden_or_default();
    Vec ff1(f, 0.0);
    matvec(block.mat(Tensor::FfW1), attn, ff1);
    axpy(1.0, block.vec(Tensor::FfB1), std::span<double>(ff1));
    for (double& x : ff1) x = std::max(x, 0.0);
    Vec hseq(d, 0.0);
    matvec(block.mat(Tensor::FfW2), ff1, hseq);
    axpy(1.0, block.vec(Tensor::FfB2), std::span<double>(hseq));
    return hseq;
}

double score(const BackendParams& params, const Vec& user_pref) {
    const auto& block = params.block;
    const int m = params.cfg.mlp_hidden_or_default();
    Vec m1(m, 0.0);
    matvec(block.mat(Tensor::MlpW1), user_pref, m1);
    axpy(1.0, block.vec(Tensor::MlpB1), std::span<double>(m1));
    for (double& x : m1) x = std::max(x, 0.0);
    const double logit = dot(block.vec(Tensor::MlpW2), m1) + block.scalar(Tensor::MlpB2);
    return sigmoid(logit);
}

ScoreInputs assemble_inputs(const BackendParams& params, const BackendContext& ctx, NodeId user,
                            NodeId item, const std::vector<Vec>* candidate_path_override) {
    const auto& hist = ctx.g->history(user);
    if (hist.empty())
        throw ColdUserError("cold user " + std::to_string(user) + ": no interaction history");

    std::vector<NodeId> sequence;
    for (const auto& it : hist)
        if (it.item != item) sequence.push_back(it.item);
    const std::size_t keep = static_cast<std::size_t>(params.cfg.max_history);
    if (sequence.size() > keep)
        sequence.erase(sequence.begin(), sequence.end() - static_cast<std::ptrdiff_t>(keep));
    sequence.push_back(item);

    ScoreInputs inputs;
    inputs.items.reserve(sequence.size());
    inputs.paths.reserve(sequence.size());
    for (std::size_t j = 0; j < sequence.size(); ++j) {
        const NodeId it = sequence[j];
        const auto v = ctx.table->vec(it);
        inputs.items.emplace_back(v.begin(), v.end());
        if (j + 1 == sequence.size() && candidate_path_override != nullptr)
            inputs.paths.push_back(*candidate_path_override);
        else
            inputs.paths.push_back(ctx.pair_embeddings(user, it));
    }
    return inputs;
}

double score_pair(const BackendParams& params, const BackendContext& ctx, NodeId user, NodeId item,
                  const std::vector<Vec>* candidate_path_override, Vec* attention_out) {
    const ScoreInputs inputs = assemble_inputs(params, ctx, user, item, candidate_path_override);
    ScoreTape tape;
    const double s = forward_score(params, inputs, &tape);
    if (attention_out != nullptr) *attention_out = tape.items.back().att_a;
    return s;
}

BackendParams train_backend(const BackendContext& ctx, const BackendConfig& cfg,
                            TrainReport* report) {
    BackendParams params = init_backend(cfg);
    const auto& g = *ctx.g;
    const NodeId item_base = static_cast<NodeId>(g.user_count());
    const std::size_t item_count = g.item_count();

    struct TrainPair {
        NodeId user, item;
    };
    std::vector<TrainPair> pairs;
    std::vector<std::unordered_set<NodeId>> interacted(g.user_count());
    for (NodeId u = 0; u < g.user_count(); ++u) {
        for (const auto& it : g.history(u))
            if (interacted[u].insert(it.item).second) pairs.push_back({u, it.item});
    }
    if (pairs.empty()) throw ValidationError("no positive interactions to train on");

    Rng rng(derive_seed(cfg.seed, "backend-train"));
    std::vector<double> grad(params.block.size(), 0.0);
    ScoreTape tape;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with the project Rng so the visit order is reproducible.
        for (std::size_t i = pairs.size(); i > 1; --i)
            std::swap(pairs[i - 1], pairs[rng.next_below(i)]);

        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (const auto& pr : pairs) {
            if (interacted[pr.user].size() >= item_count) continue;  // nothing to contrast
            NodeId neg;
            do {
                neg = item_base + static_cast<NodeId>(rng.next_below(item_count));
            } while (interacted[pr.user].contains(neg));

            std::fill(grad.begin(), grad.end(), 0.0);
            const ScoreInputs pos_in = assemble_inputs(params, ctx, pr.user, pr.item);
            const double s_pos = forward_score(params, pos_in, &tape);
            epoch_loss += softplus(-tape.logit);
            backward_score(params, pos_in, tape, s_pos - 1.0, grad);

            const ScoreInputs neg_in = assemble_inputs(params, ctx, pr.user, neg);
            const double s_neg = forward_score(params, neg_in, &tape);
            epoch_loss += softplus(tape.logit);
            backward_score(params, neg_in, tape, s_neg, grad);

            double step_lr = cfg.learning_rate;
            if (cfg.clip_norm > 0.0) {
                const double norm = std::sqrt(l2_norm_sq(grad));
                if (norm > cfg.clip_norm) step_lr *= cfg.clip_norm / norm;
            }
            axpy(-step_lr, std::span<const double>(grad), params.block.flat());
            ++steps;
        }
        const double mean_loss = steps == 0 ? 0.0 : epoch_loss / static_cast<double>(steps);
        if (!std::isfinite(mean_loss) || !all_finite(params.block.flat()))
            throw TrainingDiverged("backend training loss is not finite", epoch);
        if (report != nullptr) report->epoch_loss.push_back(mean_loss);
        params.trained_epochs = epoch + 1;
    }
    return params;
}

void accumulate_rank(std::size_t rank, std::span<const int> k_list, std::map<int, double>& hr,
                     std::map<int, double>& ndcg) {
    for (const int k : k_list) {
        if (rank <= static_cast<std::size_t>(k)) {
            hr[k] += 1.0;
            ndcg[k] += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
        } else {
            hr[k] += 0.0;
            ndcg[k] += 0.0;
        }
    }
}

TopkMetrics evaluate_topk(const BackendParams& params, const BackendContext& ctx,
                          std::span<const std::pair<NodeId, NodeId>> heldout,
                          std::span<const int> k_list, int negatives_per_positive,
                          std::uint64_t seed) {
    const auto& g = *ctx.g;
    const NodeId item_base = static_cast<NodeId>(g.user_count());
    const std::size_t item_count = g.item_count();
    TopkMetrics out;
    for (const int k : k_list) {
        out.hr[k] = 0.0;
        out.ndcg[k] = 0.0;
    }

    struct PairResult {
        bool ok = false;
        std::size_t rank = 0;
    };
    std::vector<PairResult> results(heldout.size());

#pragma omp parallel for schedule(dynamic, 1)
    for (std::int64_t idx = 0; idx < static_cast<std::int64_t>(heldout.size()); ++idx) {
        const auto [user, pos_item] = heldout[idx];
        if (user >= g.user_count() || g.history(user).empty()) continue;
        std::unordered_set<NodeId> seen;
        for (const auto& it : g.history(user)) seen.insert(it.item);
        seen.insert(pos_item);
        if (seen.size() >= item_count) continue;

        Rng rng(derive_seed(seed, "topk") ^ derive_seed(user, pos_item));
        const double s_pos = score_pair(params, ctx, user, pos_item);
        std::size_t rank = 1;
        for (int n = 0; n < negatives_per_positive; ++n) {
            NodeId neg;
            do {
                neg = item_base + static_cast<NodeId>(rng.next_below(item_count));
            } while (seen.contains(neg));
            if (score_pair(params, ctx, user, neg) > s_pos) ++rank;
        }
        results[idx] = {true, rank};
    }

    for (const auto& r : results) {
        if (!r.ok) {
            ++out.skipped_cold;
            continue;
        }
        accumulate_rank(r.rank, k_list, out.hr, out.ndcg);
        ++out.evaluated;
    }
    if (out.evaluated > 0) {
        for (auto& [k, v] : out.hr) v /= static_cast<double>(out.evaluated);
        for (auto& [k, v] : out.ndcg) v /= static_cast<double>(out.evaluated);
    }
    return out;
}

void save_checkpoint(const BackendParams& params, const std::filesystem::path& path) {
    nlohmann::json manifest{{"format_version", kCkptVersion},
                            {"dim", params.cfg.dim},
                            {"att_hidden", params.cfg.att_hidden},
                            {"ff_hidden", params.cfg.ff_hidden},
                            {"mlp_hidden", params.cfg.mlp_hidden},
                            {"max_history", params.cfg.max_history},
                            {"learning_rate", params.cfg.learning_rate},
                            {"epochs", params.cfg.epochs},
                            {"clip_norm", params.cfg.clip_norm},
                            {"seed", params.cfg.seed},
                            {"use_attention", params.cfg.use_attention},
                            {"use_encoder", params.cfg.use_encoder},
                            {"trained_epochs", params.trained_epochs}};
    auto& shapes = manifest["tensors"] = nlohmann::json::array();
    for (int i = 0; i < static_cast<int>(Tensor::Count); ++i) {
        const auto& s = params.block.spec(static_cast<Tensor>(i));
        shapes.push_back({{"name", tensor_name(static_cast<Tensor>(i))},
                          {"rows", s.rows},
                          {"cols", s.cols},
                          {"offset", s.offset}});
    }
    const std::string header = manifest.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("cannot write checkpoint: " + path.string());
    const std::uint32_t header_len = static_cast<std::uint32_t>(header.size());
    os.write(reinterpret_cast<const char*>(&kCkptMagic), 4);
    os.write(reinterpret_cast<const char*>(&kCkptVersion), 4);
    os.write(reinterpret_cast<const char*>(&header_len), 4);
    os.write(header.data(), header_len);
    const auto flat = params.block.flat();
    std::vector<float> blob(flat.size());
    for (std::size_t i = 0; i < flat.size(); ++i) blob[i] = static_cast<float>(flat[i]);
    os.write(reinterpret_cast<const char*>(blob.data()),
             static_cast<std::streamsize>(4 * blob.size()));
    if (!os) throw ValidationError("short write on checkpoint: " + path.string());
}

BackendParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open checkpoint: " + path.string());
    std::uint32_t magic = 0, version = 0, header_len = 0;
    is.read(reinterpret_cast<char*>(&magic), 4);
    is.read(reinterpret_cast<char*>(&version), 4);
    is.read(reinterpret_cast<char*>(&header_len), 4);
    if (!is || magic != kCkptMagic) throw ValidationError("bad checkpoint file: " + path.string());
    if (version != kCkptVersion)
        throw ValidationError("unsupported checkpoint version " + std::to_string(version));
    std::string header(header_len, '\0');
    is.read(header.data(), header_len);
    const auto manifest = nlohmann::json::parse(header);

    BackendConfig cfg;
    cfg.dim = manifest.at("dim").get<int>();
    cfg.att_hidden = manifest.at("att_hidden").get<int>();
    cfg.ff_hidden = manifest.at("ff_hidden").get<int>();
    cfg.mlp_hidden = manifest.at("mlp_hidden").get<int>();
    cfg.max_history = manifest.at("max_history").get<int>();
    cfg.learning_rate = manifest.at("learning_rate").get<double>();
    cfg.epochs = manifest.at("epochs").get<int>();
    cfg.clip_norm = manifest.at("clip_norm").get<double>();
    cfg.seed = manifest.at("seed").get<std::uint64_t>();
    cfg.use_attention = manifest.at("use_attention").get<bool>();
    cfg.use_encoder = manifest.at("use_encoder").get<bool>();

    BackendParams params{cfg, ParamBlock(backend_shapes(cfg)),
                         manifest.at("trained_epochs").get<int>()};
    std::vector<float> blob(params.block.size());
    is.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(4 * blob.size()));
    if (!is) throw ValidationError("truncated checkpoint: " + path.string());
    auto flat = params.block.flat();
    for (std::size_t i = 0; i < blob.size(); ++i) flat[i] = blob[i];
    return params;
}

}  // namespace cper
