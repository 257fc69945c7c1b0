#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "cper/backend.hpp"
#include "cper/error.hpp"
#include "cper/rng.hpp"
#include "cper/synthetic.hpp"
#include "support/oracles.hpp"

using namespace cper;

namespace {

// Tiny fixture: dim-8 backend over a 3-user / 6-item graph with real path sets.
struct Fixture {
    RecGraph graph;
    EmbeddingTable table;
    PathSetCollection paths;
    BackendConfig cfg;

    static Fixture make(std::uint64_t seed = 1) {
        Fixture f;
        std::vector<InteractionRecord> inter{
            {"u0", "i0", 10}, {"u0", "i1", 20}, {"u0", "i2", 30}, {"u1", "i0", 15},
            {"u1", "i2", 25}, {"u1", "i3", 35}, {"u2", "i1", 12}, {"u2", "i3", 22},
            {"u2", "i4", 32}, {"u0", "i5", 40}, {"u1", "i5", 41}, {"u2", "i5", 42},
        };
        std::vector<AttributeRecord> attrs{
            {"i0", "category", "c0"}, {"i1", "category", "c0"}, {"i2", "category", "c1"},
            {"i3", "category", "c1"}, {"i4", "category", "c0"}, {"i5", "category", "c1"},
            {"i0", "brand", "b0"},    {"i1", "brand", "b1"},    {"i2", "brand", "b0"},
            {"i3", "brand", "b1"},    {"i4", "brand", "b0"},    {"i5", "brand", "b1"},
        };
        f.graph = build_graph(inter, attrs);
        f.cfg.dim = 8;
        f.cfg.max_history = 4;
        f.cfg.epochs = 0;
        f.cfg.seed = seed;

        Rng rng(seed);
        f.table = EmbeddingTable(8, f.graph.node_count());
        for (NodeId v = 0; v < f.graph.node_count(); ++v)
            for (double& x : f.table.mutable_vec(v)) x = rng.uniform(-0.6, 0.6);

        const ExploreOptions eo{4, 6, 50, seed};
        f.paths = explore_paths(f.graph, eo);
        return f;
    }

    BackendContext ctx() const { return BackendContext::make(graph, table, paths); }
};

std::pair<NodeId, NodeId> pair_with_paths(const Fixture& f, std::size_t min_paths = 3) {
    for (const auto& set : f.paths.sets())
        if (set.paths.size() >= min_paths && !f.graph.history(set.user).empty())
            return {set.user, set.item};
    REQUIRE(false);
    return {0, 0};
}

}  // namespace

TEST_CASE("enhance_item: zero item vector gates output to zero") {
    BackendConfig cfg;
    cfg.dim = 4;
    cfg.seed = 3;
    const BackendParams params = init_backend(cfg);
    const Vec zero(4, 0.0);
    const auto res = enhance_item(params, zero, {Vec{1, 2, 3, 4}});
    for (const double x : res.enhanced) CHECK(x == 0.0);
}

TEST_CASE("enhance_item: singleton path gets attention weight exactly 1") {
    BackendConfig cfg;
    cfg.dim = 4;
    cfg.seed = 4;
    const BackendParams params = init_backend(cfg);
    const auto res = enhance_item(params, Vec{0.5, -0.2, 0.1, 0.9}, {Vec{1, 0, 0, 1}});
    REQUIRE(res.attention.size() == 1);
    CHECK(res.attention[0] == 1.0);
}

TEST_CASE("enhance_item: empty path list yields empty weights and a finite output") {
    BackendConfig cfg;
    cfg.dim = 4;
    cfg.seed = 5;
    const BackendParams params = init_backend(cfg);
    const auto res = enhance_item(params, Vec{0.5, -0.2, 0.1, 0.9}, {});
    CHECK(res.attention.empty());
    for (const double x : res.enhanced) CHECK(std::isfinite(x));
}

TEST_CASE("enhance_item: identity weights, zero bias, hand-computed gate") {
    // W_item = I, W_path = I, b = 0, uniform attention:
    // pre = h + (x1 + x2) = (2.5, -3.0); relu = (2.5, 0); out = relu * h.
    BackendConfig cfg;
    cfg.dim = 2;
    cfg.use_attention = false;
    BackendParams params = init_backend(cfg);
    std::fill(params.block.flat().begin(), params.block.flat().end(), 0.0);
    auto wi = params.block.mat(Tensor::WItem);
    auto wp = params.block.mat(Tensor::WPath);
    for (int i = 0; i < 2; ++i) {
        wi(i, i) = 1.0;
        wp(i, i) = 1.0;
    }
    const Vec h{2.0, -1.0};
    const std::vector<Vec> paths{Vec{1.0, 1.0}, Vec{-0.5, -3.0}};
    const auto res = enhance_item(params, h, paths);
    CHECK(res.enhanced[0] == doctest::Approx(5.0));
    CHECK(res.enhanced[1] == doctest::Approx(0.0));
    CHECK(res.attention[0] == doctest::Approx(0.5));
    CHECK(res.attention[1] == doctest::Approx(0.5));
}

TEST_CASE("enhance_item: uniform attention recovers the unweighted path sum") {
    BackendConfig with_att;
    with_att.dim = 6;
    with_att.seed = 9;
    BackendParams pa = init_backend(with_att);
    // Collapse the attention scorer so every path scores identically.
    std::fill(pa.block.vec(Tensor::AttV).begin(), pa.block.vec(Tensor::AttV).end(), 0.0);

    BackendConfig no_att = with_att;
    no_att.use_attention = false;
    BackendParams pb = init_backend(no_att);

    Rng rng(11);
    Vec h(6);
    for (double& x : h) x = rng.uniform(-1, 1);
    std::vector<Vec> paths(3, Vec(6));
    for (auto& p : paths)
        for (double& x : p) x = rng.uniform(-1, 1);

    const auto ra = enhance_item(pa, h, paths);
    const auto rb = enhance_item(pb, h, paths);
    for (int i = 0; i < 6; ++i) CHECK(ra.enhanced[i] == doctest::Approx(rb.enhanced[i]));
    for (const double a : ra.attention) CHECK(a == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("attention weights are non-negative and sum to 1 on every pair") {
    const Fixture f = Fixture::make(21);
    const BackendParams params = init_backend(f.cfg);
    const BackendContext ctx = f.ctx();
    for (const auto& set : f.paths.sets()) {
        if (set.paths.empty()) continue;
        Vec attention;
        score_pair(params, ctx, set.user, set.item, nullptr, &attention);
        double sum = 0.0;
        for (const double a : attention) {
            CHECK(a >= 0.0);
            sum += a;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("user_preference: five identical vectors with zero position embeddings") {
    BackendConfig cfg;
    cfg.dim = 4;
    cfg.max_history = 6;
    cfg.seed = 6;
    BackendParams params = init_backend(cfg);
    std::fill(params.block.vec(Tensor::Pos).begin(), params.block.vec(Tensor::Pos).end(), 0.0);
    const std::vector<Vec> seq(5, Vec{0.3, -0.8, 0.2, 0.5});
    // Equal inputs -> equal attention logits -> uniform weights -> the mix
    // equals the single-vector case.
    const Vec pref5 = user_preference(params, seq);
    const Vec pref1 = user_preference(params, {seq[0]});
    for (int i = 0; i < 4; ++i) CHECK(pref5[i] == doctest::Approx(pref1[i]));
}

TEST_CASE("user_preference: singleton history is a pure transform") {
    BackendConfig cfg;
    cfg.dim = 4;
    cfg.seed = 7;
    const BackendParams params = init_backend(cfg);
    const Vec a = user_preference(params, {Vec{1, 2, 3, 4}});
    const Vec b = user_preference(params, {Vec{1, 2, 3, 4}});
    CHECK(a == b);
    CHECK(a.size() == 4);
}

TEST_CASE("user_preference: empty history raises the cold-user error") {
    BackendConfig cfg;
    cfg.dim = 4;
    const BackendParams params = init_backend(cfg);
    CHECK_THROWS_AS(user_preference(params, {}), ColdUserError);
}

TEST_CASE("user_preference matches an independent attention computation") {
    BackendConfig cfg;
    cfg.dim = 4;
    cfg.ff_hidden = 4;
    cfg.seed = 8;
    BackendParams params = init_backend(cfg);
    // Make the feed-forward an identity-on-relu so the block output exposes
    // the attention mix directly.
    std::fill(params.block.vec(Tensor::FfW1).begin(), params.block.vec(Tensor::FfW1).end(), 0.0);
    std::fill(params.block.vec(Tensor::FfW2).begin(), params.block.vec(Tensor::FfW2).end(), 0.0);
    std::fill(params.block.vec(Tensor::FfB1).begin(), params.block.vec(Tensor::FfB1).end(), 0.0);
    std::fill(params.block.vec(Tensor::FfB2).begin(), params.block.vec(Tensor::FfB2).end(), 0.0);
    auto ff1 = params.block.mat(Tensor::FfW1);
    auto ff2 = params.block.mat(Tensor::FfW2);
    for (int i = 0; i < 4; ++i) {
        ff1(i, i) = 1.0;
        ff2(i, i) = 1.0;
    }

    const std::vector<Vec> seq{Vec{0.2, 0.1, -0.3, 0.4}, Vec{-0.5, 0.3, 0.2, 0.1},
                               Vec{0.7, -0.2, 0.05, -0.6}};
    const Vec got = user_preference(params, seq);
    const Vec attn = oracle::reference_attention(
        seq, params.block.mat(Tensor::Wq), params.block.mat(Tensor::Wk),
        params.block.mat(Tensor::Wv), params.block.mat(Tensor::Pos));
    for (int i = 0; i < 4; ++i) CHECK(got[i] == doctest::Approx(std::max(attn[i], 0.0)));
}

TEST_CASE("score: zero weights give 0.5, large logit approaches 1") {
    BackendConfig cfg;
    cfg.dim = 2;
    cfg.mlp_hidden = 1;
    BackendParams params = init_backend(cfg);
    std::fill(params.block.flat().begin(), params.block.flat().end(), 0.0);
    CHECK(score(params, Vec{1.0, -1.0}) == doctest::Approx(0.5));

    params.block.mat(Tensor::MlpW1)(0, 0) = 1.0;
    params.block.vec(Tensor::MlpW2)[0] = 1.0;
    CHECK(score(params, Vec{50.0, 0.0}) > 0.999999);
}

TEST_CASE("score: sigmoid of logit 0.8473 is 0.7000") {
    BackendConfig cfg;
    cfg.dim = 2;
    cfg.mlp_hidden = 1;
    BackendParams params = init_backend(cfg);
    std::fill(params.block.flat().begin(), params.block.flat().end(), 0.0);
    params.block.mat(Tensor::MlpW1)(0, 0) = 1.0;  // pass x[0] through
    params.block.vec(Tensor::MlpW2)[0] = 1.0;
    const double s = score(params, Vec{0.8473, 0.0});
    CHECK(s == doctest::Approx(0.7000).epsilon(1e-4));
    CHECK(score(params, Vec{0.9, 0.0}) > s);  // monotone in the logit
}

TEST_CASE("score_pair: purity, override identity, empty-set override") {
    const Fixture f = Fixture::make(31);
    BackendConfig cfg = f.cfg;
    cfg.epochs = 3;
    cfg.learning_rate = 0.01;
    const BackendContext ctx = f.ctx();
    const BackendParams params = train_backend(ctx, cfg);
    const auto [user, item] = pair_with_paths(f);

    const double a = score_pair(params, ctx, user, item);
    const double b = score_pair(params, ctx, user, item);
    CHECK(a == b);  // bitwise purity

    const std::vector<Vec> stored = ctx.pair_embeddings(user, item);
    const double c = score_pair(params, ctx, user, item, &stored);
    CHECK(a == c);

    const std::vector<Vec> empty;
    const double d = score_pair(params, ctx, user, item, &empty);
    CHECK(std::isfinite(d));
}

TEST_CASE("gradient of the implicit-feedback loss matches finite differences (dim=8)") {
    const Fixture f = Fixture::make(41);
    BackendConfig cfg = f.cfg;
    cfg.seed = 41;
    BackendParams params = init_backend(cfg);
    const BackendContext ctx = f.ctx();
    const auto [user, pos_item] = pair_with_paths(f, 3);
    const NodeId neg_item = static_cast<NodeId>(f.graph.user_count() + 4);  // i4

    const auto loss = [&]() {
        const ScoreInputs pin = assemble_inputs(params, ctx, user, pos_item);
        ScoreTape tp;
        forward_score(params, pin, &tp);
        double l = softplus(-tp.logit);
        const ScoreInputs nin = assemble_inputs(params, ctx, user, neg_item);
        forward_score(params, nin, &tp);
        l += softplus(tp.logit);
        return l;
    };

    Vec analytic(params.block.size(), 0.0);
    {
        ScoreTape tp;
        const ScoreInputs pin = assemble_inputs(params, ctx, user, pos_item);
        const double sp = forward_score(params, pin, &tp);
        backward_score(params, pin, tp, sp - 1.0, analytic);
        const ScoreInputs nin = assemble_inputs(params, ctx, user, neg_item);
        const double sn = forward_score(params, nin, &tp);
        backward_score(params, nin, tp, sn, analytic);
    }
    const auto fd = oracle::finite_difference(params.block.flat(), loss);
    CHECK(oracle::max_relative_error(analytic, fd) < 1e-4);
}

TEST_CASE("train_backend: epochs=0 equals initialization; loss decreases on average") {
    const Fixture f = Fixture::make(51);
    const BackendContext ctx = f.ctx();

    BackendConfig cfg = f.cfg;
    cfg.epochs = 0;
    const BackendParams p0 = train_backend(ctx, cfg);
    const BackendParams init = init_backend(cfg);
    CHECK(std::equal(p0.block.flat().begin(), p0.block.flat().end(), init.block.flat().begin()));

    int improved = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        BackendConfig c = f.cfg;
        c.seed = seed;
        c.epochs = 300;
        c.learning_rate = 1e-3;
        TrainReport report;
        train_backend(ctx, c, &report);
        if (report.epoch_loss.back() < report.epoch_loss.front()) ++improved;
    }
    CHECK(improved >= 19);
}

TEST_CASE("train_backend is deterministic given the seed") {
    const Fixture f = Fixture::make(52);
    const BackendContext ctx = f.ctx();
    BackendConfig cfg = f.cfg;
    cfg.epochs = 5;
    cfg.learning_rate = 0.005;
    const BackendParams a = train_backend(ctx, cfg);
    const BackendParams b = train_backend(ctx, cfg);
    CHECK(std::equal(a.block.flat().begin(), a.block.flat().end(), b.block.flat().begin()));
}

TEST_CASE("rank accumulation: perfect ranker and log2 discount") {
    std::map<int, double> hr, ndcg;
    const int ks[] = {5, 10, 20, 30};
    accumulate_rank(1, ks, hr, ndcg);
    for (const int k : ks) {
        CHECK(hr[k] == 1.0);
        CHECK(ndcg[k] == 1.0);
    }
    accumulate_rank(7, ks, hr, ndcg);
    CHECK(hr[5] == 1.0);
    CHECK(hr[10] == 2.0);
    CHECK(ndcg[10] == doctest::Approx(1.0 + 1.0 / std::log2(8.0)));
}

TEST_CASE("random scores land near the analytic HR@5 expectation") {
    // 1 positive among 500 negatives, random scores: P(rank <= 5) = 5/501.
    Rng rng(77);
    const int trials = 1000, negatives = 500;
    const int ks[] = {5};
    std::map<int, double> hr, ndcg;
    for (int t = 0; t < trials; ++t) {
        const double pos = rng.next_double();
        std::size_t rank = 1;
        for (int n = 0; n < negatives; ++n)
            if (rng.next_double() > pos) ++rank;
        accumulate_rank(rank, ks, hr, ndcg);
    }
    const double mean = hr[5] / trials;
    const double p = 5.0 / 501.0;
    const double sigma = std::sqrt(p * (1 - p) / trials);
    CHECK(mean > p - 4 * sigma);
    CHECK(mean < p + 4 * sigma);
}

TEST_CASE("evaluate_topk on the fixture produces sane values") {
    const Fixture f = Fixture::make(61);
    BackendConfig cfg = f.cfg;
    cfg.epochs = 5;
    cfg.learning_rate = 0.01;
    const BackendContext ctx = f.ctx();
    const BackendParams params = train_backend(ctx, cfg);
    const std::vector<std::pair<NodeId, NodeId>> heldout{
        {0, static_cast<NodeId>(f.graph.user_count() + 1)}};
    const int ks[] = {5, 10, 20, 30};
    const TopkMetrics m = evaluate_topk(params, ctx, heldout, ks, 3, 99);
    CHECK(m.evaluated == 1);
    for (const int k : ks) {
        CHECK(m.hr.at(k) >= 0.0);
        CHECK(m.hr.at(k) <= 1.0);
        CHECK(m.ndcg.at(k) <= m.hr.at(k) + 1e-12);
    }
}

TEST_CASE("checkpoint round-trip reproduces the same file") {
    const Fixture f = Fixture::make(71);
    BackendConfig cfg = f.cfg;
    cfg.epochs = 2;
    cfg.learning_rate = 0.01;
    const BackendContext ctx = f.ctx();
    const BackendParams params = train_backend(ctx, cfg);

    const auto dir = std::filesystem::temp_directory_path() / "cper-test-ckpt";
    std::filesystem::create_directories(dir);
    save_checkpoint(params, dir / "a.ckpt");
    const BackendParams loaded = load_checkpoint(dir / "a.ckpt");
    save_checkpoint(loaded, dir / "b.ckpt");

    std::ifstream fa(dir / "a.ckpt", std::ios::binary), fb(dir / "b.ckpt", std::ios::binary);
    const std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    const std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(ba == bb);
    CHECK(loaded.cfg.dim == params.cfg.dim);
    CHECK(loaded.trained_epochs == params.trained_epochs);
}

TEST_CASE("ablation ordering: full model beats no-attention and mean-pooling variants") {
    // Component-ablation direction at desk scale (NDCG@20, one fixed seed).
    const auto dir = std::filesystem::temp_directory_path() / "cper-test-ablate";
    SyntheticSpec spec;
    spec.users = 24;
    spec.items = 60;
    spec.categories = 6;
    spec.brands = 12;
    spec.interactions_per_user = 7;
    spec.seed = 5;
    make_synthetic(spec, dir);
    const auto inter = load_interactions(dir / "interactions.tsv", 0);

    std::map<std::string, std::size_t> last;
    for (std::size_t i = 0; i < inter.size(); ++i) {
        const auto it = last.find(inter[i].user);
        if (it == last.end() || inter[i].timestamp >= inter[it->second].timestamp)
            last[inter[i].user] = i;
    }
    std::vector<bool> held_row(inter.size(), false);
    for (const auto& [u, idx] : last) held_row[idx] = true;
    std::vector<InteractionRecord> train;
    std::vector<std::pair<std::string, std::string>> held;
    for (std::size_t i = 0; i < inter.size(); ++i) {
        if (held_row[i])
            held.push_back({inter[i].user, inter[i].item});
        else
            train.push_back(inter[i]);
    }
    const RecGraph g = build_graph(train, load_metadata(dir / "metadata.tsv"));

    const ExploreOptions eo{4, 6, 200, 5};
    const PathSetCollection paths = explore_paths(g, eo);
    const TemporalWalkOptions two{8, 20, 5};
    const auto walks = temporal_walks(g, two);
    SkipGramConfig sg;
    sg.dim = 16;
    sg.epochs = 5;
    sg.seed = 5;
    const EmbeddingTable table = train_skipgram(g.node_count(), walks, sg);
    const BackendContext ctx = BackendContext::make(g, table, paths);

    std::vector<std::pair<NodeId, NodeId>> heldout;
    for (const auto& [u, i] : held) {
        const auto uu = g.find_user(u);
        const auto ii = g.find_item(i);
        if (uu && ii) heldout.push_back({*uu, *ii});
    }
    REQUIRE(!heldout.empty());

    const auto ndcg20 = [&](bool attention, bool encoder) {
        BackendConfig cfg;
        cfg.dim = 16;
        cfg.max_history = 5;
        cfg.epochs = 40;
        cfg.learning_rate = 0.02;
        cfg.seed = 5;
        cfg.use_attention = attention;
        cfg.use_encoder = encoder;
        const BackendParams params = train_backend(ctx, cfg);
        const int ks[] = {20};
        return evaluate_topk(params, ctx, heldout, ks, 50, 5).ndcg.at(20);
    };

    const double full = ndcg20(true, true);
    const double no_attention = ndcg20(false, true);
    const double mean_pool = ndcg20(true, false);
    CHECK(full >= no_attention);
    CHECK(full >= mean_pool);
}
