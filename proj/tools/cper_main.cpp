#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cper/error.hpp"
#include "cper/pipeline.hpp"
#include "cper/synthetic.hpp"

namespace {

struct CommonOpts {
    std::string config_file;
    std::string out_dir = "out";
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    bool seed_given = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_file, "pipeline config file");
    cmd->add_option("--out", opts.out_dir, "artifact directory");
    cmd->add_option("--set", opts.overrides, "override a config value, e.g. backend.epochs=5")
        ->type_name("SECTION.KEY=VALUE");
    cmd->add_option("--seed", opts.seed, "master seed (overrides config)")
        ->each([&opts](const std::string&) { opts.seed_given = true; });
}

cper::PipelineConfig resolve_config(const CommonOpts& opts) {
    cper::PipelineConfig cfg;
    if (!opts.config_file.empty()) cfg = cper::parse_config_file(opts.config_file);
    for (const auto& kv : opts.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw cper::ValidationError("--set expects section.key=value, got: " + kv);
        cper::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (opts.seed_given) cfg.seed = opts.seed;
    return cfg;
}

void write_synthetic_config(const std::filesystem::path& data_dir, std::uint64_t seed) {
    std::ofstream os(data_dir / "synthetic.cfg");
    os << "# desk-scale pipeline configuration for the bundled synthetic benchmark\n"
       << "[data]\n"
       << "interactions = " << (data_dir / "interactions.tsv").string() << "\n"
       << "metadata = " << (data_dir / "metadata.tsv").string() << "\n"
       << "min_item_count = 1\n"
       << "holdout = last\n\n"
       << "[paths]\n"
       << "min_len = 4\n"
       << "max_len = 6\n"
       << "walks_per_vertex = 400\n"
       << "walk_len = 8\n"
       << "temporal_walks_per_vertex = 20\n\n"
       << "[embed]\n"
       << "dim = 32\n"
       << "window = 3\n"
       << "negatives_per_pair = 5\n"
       << "epochs = 5\n"
       << "learning_rate = 0.025\n\n"
       << "[backend]\n"
       << "learning_rate = 0.03\n"
       << "epochs = 60\n"
       << "max_history = 6\n\n"
       << "[cf_repr]\n"
       << "alpha = 0.1\n"
       << "beta = 0.5\n"
       << "lambda = 5\n"
       << "learning_rate = 0.05\n"
       << "steps = 50\n\n"
       << "[cf_struct]\n"
       << "zeta = 10\n"
       << "epsilon = 10\n"
       << "eta = 100\n"
       << "epochs = 50\n"
       << "episodes_per_epoch = 8\n"
       << "learning_rate = 0.01\n"
       << "hidden = 16\n\n"
       << "[explain]\n"
       << "max_pairs = 40\n\n"
       << "[eval]\n"
       << "runs = 10\n"
       << "ratios = 0.25,0.5,0.75,1.0\n"
       << "k_list = 5,10,20,30\n"
       << "negatives = 150\n"
       << "variance_ratio = 0.1\n"
       << "stability_pairs = 6\n\n"
       << "[run]\n"
       << "seed = " << seed << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"counterfactual path-based explainable recommendation pipeline"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string stage_arg;

    for (const char* name : {"ingest", "walk", "embed", "train", "explain-repr", "explain-struct",
                             "evaluate", "report"}) {
        auto* cmd = app.add_subcommand(name, std::string("run the ") + name + " stage");
        add_common(cmd, opts);
        cmd->callback([name, &opts] {
            const auto cfg = resolve_config(opts);
            cper::run_stage(*cper::stage_from_name(name), cfg, opts.out_dir);
        });
    }
    {
        auto* cmd = app.add_subcommand("run", "run every stage in order");
        add_common(cmd, opts);
        cmd->callback([&opts] {
            const auto cfg = resolve_config(opts);
            cper::run_all(cfg, opts.out_dir);
        });
    }
    {
        auto* cmd = app.add_subcommand("synth", "generate the synthetic benchmark dataset");
        static cper::SyntheticSpec spec;
        static std::string out_dir = "data/synthetic";
        cmd->add_option("--out", out_dir, "dataset directory");
        cmd->add_option("--users", spec.users);
        cmd->add_option("--items", spec.items);
        cmd->add_option("--categories", spec.categories);
        cmd->add_option("--brands", spec.brands);
        cmd->add_option("--interactions-per-user", spec.interactions_per_user);
        cmd->add_option("--favorite-prob", spec.favorite_prob);
        cmd->add_option("--seed", spec.seed);
        cmd->callback([] {
            const auto summary = cper::make_synthetic(spec, out_dir);
            write_synthetic_config(out_dir, spec.seed);
            std::cout << "wrote " << summary.interaction_rows << " interactions, "
                      << summary.metadata_rows << " metadata rows, " << summary.planted.size()
                      << " planted pairs to " << out_dir << "\n"
                      << "pipeline config: " << (std::filesystem::path(out_dir) / "synthetic.cfg")
                      << "\n";
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const cper::MissingDependency& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const cper::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const cper::StaleArtifact& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
