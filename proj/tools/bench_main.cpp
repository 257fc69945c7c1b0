// Benchmark comparing the OpenMP kernels against their serial reference
// implementations on a generated dataset. Also verifies the outputs match.

#include <chrono>
#include <cstdio>
#include <filesystem>

#include <omp.h>

#include "cper/backend.hpp"
#include "cper/cf_repr.hpp"
#include "cper/embedding.hpp"
#include "cper/graph.hpp"
#include "cper/paths.hpp"
#include "cper/synthetic.hpp"
#include "cper/xeval.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

void row(const char* kernel, double serial_ms, double parallel_ms, bool equal) {
    std::printf("%-24s %10.1f ms %10.1f ms %8.2fx   %s\n", kernel, serial_ms, parallel_ms,
                serial_ms / parallel_ms, equal ? "outputs equal" : "OUTPUTS DIFFER");
}

}  // namespace

int main() {
    const auto tmp = std::filesystem::temp_directory_path() / "cper-bench";
    std::filesystem::create_directories(tmp);

    cper::SyntheticSpec spec;
    spec.seed = 7;
    cper::make_synthetic(spec, tmp);
    const auto interactions = cper::load_interactions(tmp / "interactions.tsv", 1);
    const auto metadata = cper::load_metadata(tmp / "metadata.tsv");
    const cper::RecGraph g = cper::build_graph(interactions, metadata);

    std::printf("graph: %zu users, %zu items, %zu attributes, %zu edges\n", g.user_count(),
                g.item_count(), g.attribute_count(), g.edge_count());
    std::printf("threads: %d\n\n", omp_get_max_threads());
    std::printf("%-24s %13s %13s %9s\n", "kernel", "serial", "openmp", "speedup");

    cper::ExploreOptions eo{4, 6, 800, 11};
    const auto t0 = Clock::now();
    const auto paths_serial = cper::serial::explore_paths(g, eo);
    const double explore_serial = ms_since(t0);
    const auto t1 = Clock::now();
    const auto paths_parallel = cper::explore_paths(g, eo);
    const double explore_parallel = ms_since(t1);
    bool equal = paths_serial.sets().size() == paths_parallel.sets().size();
    for (std::size_t i = 0; equal && i < paths_serial.sets().size(); ++i)
        equal = paths_serial.sets()[i].user == paths_parallel.sets()[i].user &&
                paths_serial.sets()[i].item == paths_parallel.sets()[i].item &&
                paths_serial.sets()[i].paths == paths_parallel.sets()[i].paths;
    row("explore_paths", explore_serial, explore_parallel, equal);

    cper::TemporalWalkOptions to{8, 60, 12};
    const auto t2 = Clock::now();
    const auto walks_serial = cper::serial::temporal_walks(g, to);
    const double walk_serial = ms_since(t2);
    const auto t3 = Clock::now();
    const auto walks_parallel = cper::temporal_walks(g, to);
    const double walk_parallel = ms_since(t3);
    row("temporal_walks", walk_serial, walk_parallel, walks_serial == walks_parallel);

    cper::SkipGramConfig sc;
    sc.dim = 32;
    sc.epochs = 2;
    sc.seed = 13;
    const auto table = cper::train_skipgram(g.node_count(), walks_parallel, sc);
    const cper::BackendContext ctx = cper::BackendContext::make(g, table, paths_parallel);
    cper::BackendConfig bc;
    bc.dim = 32;
    bc.epochs = 2;
    bc.max_history = 6;
    bc.learning_rate = 0.03;
    bc.seed = 17;
    const cper::BackendParams params = cper::train_backend(ctx, bc);

    std::vector<std::pair<cper::NodeId, cper::NodeId>> pairs;
    for (const auto& set : paths_parallel.sets()) {
        if (set.paths.size() < 4) continue;
        pairs.push_back({set.user, set.item});
        if (pairs.size() == 12) break;
    }

    cper::CfReprConfig rc;
    rc.steps = 15;
    const auto t4 = Clock::now();
    const auto repr_serial = cper::serial::optimize_perturbations(params, ctx, pairs, rc);
    const double repr_serial_ms = ms_since(t4);
    const auto t5 = Clock::now();
    const auto repr_parallel = cper::optimize_perturbations(params, ctx, pairs, rc);
    const double repr_parallel_ms = ms_since(t5);
    equal = repr_serial.explanations.size() == repr_parallel.explanations.size();
    for (std::size_t i = 0; equal && i < repr_serial.explanations.size(); ++i)
        for (std::size_t z = 0; z < repr_serial.explanations[i].records.size(); ++z)
            equal = equal && repr_serial.explanations[i].records[z].delta_s ==
                                 repr_parallel.explanations[i].records[z].delta_s;
    row("optimize_perturbations", repr_serial_ms, repr_parallel_ms, equal);

    std::vector<cper::WeightedExplanation> expl;
    for (const auto& e : repr_parallel.explanations)
        expl.push_back(cper::repr_explanation_weights(e));
    const double ratios[] = {0.25, 0.5, 0.75, 1.0};
    const auto t6 = Clock::now();
    const auto fid_serial = cper::serial::fidelity_curve(params, ctx, expl, ratios);
    const double fid_serial_ms = ms_since(t6);
    const auto t7 = Clock::now();
    const auto fid_parallel = cper::fidelity_curve(params, ctx, expl, ratios);
    const double fid_parallel_ms = ms_since(t7);
    equal = true;
    for (std::size_t i = 0; i < fid_serial.size(); ++i)
        equal = equal && fid_serial[i].fidelity == fid_parallel[i].fidelity;
    row("fidelity_curve", fid_serial_ms, fid_parallel_ms, equal);

    return 0;
}
