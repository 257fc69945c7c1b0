#include "cper/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <variant>

#include <nlohmann/json.hpp>

#include "cper/error.hpp"
#include "cper/rng.hpp"
#include "cper/xeval.hpp"

namespace cper {

namespace {

using json = nlohmann::json;

// ---------- config registry ----------

struct ConfigField {
    std::string section, key;
    std::variant<int PipelineConfig::*, double PipelineConfig::*, std::string PipelineConfig::*,
                 std::uint64_t PipelineConfig::*, std::vector<double> PipelineConfig::*,
                 std::vector<int> PipelineConfig::*>
        member;
};

const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = {
        {"data", "interactions", &PipelineConfig::interactions},
        {"data", "metadata", &PipelineConfig::metadata},
        {"data", "min_item_count", &PipelineConfig::min_item_count},
        {"data", "holdout", &PipelineConfig::holdout},
        {"paths", "min_len", &PipelineConfig::min_len},
        {"paths", "max_len", &PipelineConfig::max_len},
        {"paths", "walks_per_vertex", &PipelineConfig::walks_per_vertex},
        {"paths", "walk_len", &PipelineConfig::walk_len},
        {"paths", "temporal_walks_per_vertex", &PipelineConfig::temporal_walks_per_vertex},
        {"embed", "dim", &PipelineConfig::dim},
        {"embed", "window", &PipelineConfig::window},
        {"embed", "negatives_per_pair", &PipelineConfig::negatives_per_pair},
        {"embed", "epochs", &PipelineConfig::embed_epochs},
        {"embed", "learning_rate", &PipelineConfig::embed_learning_rate},
        {"backend", "learning_rate", &PipelineConfig::backend_learning_rate},
        {"backend", "epochs", &PipelineConfig::backend_epochs},
        {"backend", "clip_norm", &PipelineConfig::backend_clip_norm},
        {"backend", "max_history", &PipelineConfig::max_history},
        {"backend", "att_hidden", &PipelineConfig::att_hidden},
        {"backend", "ff_hidden", &PipelineConfig::ff_hidden},
        {"backend", "mlp_hidden", &PipelineConfig::mlp_hidden},
        {"cf_repr", "alpha", &PipelineConfig::alpha},
        {"cf_repr", "beta", &PipelineConfig::beta},
        {"cf_repr", "lambda", &PipelineConfig::lambda},
        {"cf_repr", "learning_rate", &PipelineConfig::repr_learning_rate},
        {"cf_repr", "steps", &PipelineConfig::repr_steps},
        {"cf_struct", "zeta", &PipelineConfig::zeta},
        {"cf_struct", "epsilon", &PipelineConfig::epsilon},
        {"cf_struct", "eta", &PipelineConfig::eta},
        {"cf_struct", "epochs", &PipelineConfig::struct_epochs},
        {"cf_struct", "episodes_per_epoch", &PipelineConfig::episodes_per_epoch},
        {"cf_struct", "learning_rate", &PipelineConfig::policy_learning_rate},
        {"cf_struct", "hidden", &PipelineConfig::policy_hidden},
        {"explain", "max_pairs", &PipelineConfig::max_pairs},
        {"eval", "runs", &PipelineConfig::runs},
        {"eval", "ratios", &PipelineConfig::ratios},
        {"eval", "k_list", &PipelineConfig::k_list},
        {"eval", "negatives", &PipelineConfig::negatives},
        {"eval", "variance_ratio", &PipelineConfig::variance_ratio},
        {"eval", "stability_pairs", &PipelineConfig::stability_pairs},
        {"run", "seed", &PipelineConfig::seed},
    };
    return fields;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

void set_field(PipelineConfig& cfg, const ConfigField& field, const std::string& raw) {
    const std::string value = trim(raw);
    const std::string where = field.section + "." + field.key;
    try {
        std::visit(
            [&](auto member) {
                using T = std::remove_cvref_t<decltype(cfg.*member)>;
                if constexpr (std::is_same_v<T, int>) {
                    cfg.*member = std::stoi(value);
                } else if constexpr (std::is_same_v<T, double>) {
                    cfg.*member = std::stod(value);
                } else if constexpr (std::is_same_v<T, std::string>) {
                    cfg.*member = value;
                } else if constexpr (std::is_same_v<T, std::uint64_t>) {
                    cfg.*member = std::stoull(value);
                } else {
                    T list;
                    std::stringstream ss(value);
                    std::string part;
                    while (std::getline(ss, part, ',')) {
                        part = trim(part);
                        if (part.empty()) continue;
                        if constexpr (std::is_same_v<T, std::vector<double>>)
                            list.push_back(std::stod(part));
                        else
                            list.push_back(std::stoi(part));
                    }
                    if (list.empty()) throw ValidationError("empty list for " + where);
                    cfg.*member = std::move(list);
                }
            },
            field.member);
    } catch (const std::invalid_argument&) {
        throw ValidationError("bad value '" + value + "' for " + where);
    } catch (const std::out_of_range&) {
        throw ValidationError("value out of range for " + where);
    }
}

std::string get_field(const PipelineConfig& cfg, const ConfigField& field) {
    std::ostringstream os;
    std::visit(
        [&](auto member) {
            using T = std::remove_cvref_t<decltype(cfg.*member)>;
            if constexpr (std::is_same_v<T, std::vector<double>> ||
                          std::is_same_v<T, std::vector<int>>) {
                const auto& list = cfg.*member;
                for (std::size_t i = 0; i < list.size(); ++i) {
                    if (i > 0) os << ',';
                    os << list[i];
                }
            } else {
                os << cfg.*member;
            }
        },
        field.member);
    return os.str();
}

// ---------- manifests ----------

constexpr std::string_view kArtifactGraph = "graph.bin";
constexpr std::string_view kArtifactHeldout = "heldout.tsv";
constexpr std::string_view kArtifactPathSets = "pathsets.jsonl";
constexpr std::string_view kArtifactWalks = "walks.jsonl";
constexpr std::string_view kArtifactEmbeddings = "embeddings.bin";
constexpr std::string_view kArtifactCheckpoint = "backend.ckpt";
constexpr std::string_view kArtifactRepr = "repr.jsonl";
constexpr std::string_view kArtifactStruct = "struct.jsonl";
constexpr std::string_view kArtifactReport = "eval_report.json";

// Which config sections feed each stage; the chain hash folds in upstream.
const std::vector<std::string>& stage_sections(Stage s) {
    static const std::vector<std::string> ingest{"data"};
    static const std::vector<std::string> walk{"paths"};
    static const std::vector<std::string> embed{"embed"};
    static const std::vector<std::string> train{"backend"};
    static const std::vector<std::string> repr{"cf_repr", "explain"};
    static const std::vector<std::string> strct{"cf_struct", "explain"};
    static const std::vector<std::string> eval{"eval"};
    static const std::vector<std::string> report{};
    switch (s) {
        case Stage::Ingest: return ingest;
        case Stage::Walk: return walk;
        case Stage::Embed: return embed;
        case Stage::Train: return train;
        case Stage::ExplainRepr: return repr;
        case Stage::ExplainStruct: return strct;
        case Stage::Evaluate: return eval;
        case Stage::Report: return report;
    }
    return report;
}

std::vector<Stage> stage_dependencies(Stage s) {
    switch (s) {
        case Stage::Ingest: return {};
        case Stage::Walk: return {Stage::Ingest};
        case Stage::Embed: return {Stage::Walk};
        case Stage::Train: return {Stage::Embed};
        case Stage::ExplainRepr: return {Stage::Train};
        case Stage::ExplainStruct: return {Stage::Train};
        case Stage::Evaluate: return {Stage::ExplainRepr, Stage::ExplainStruct};
        case Stage::Report: return {Stage::Evaluate};
    }
    return {};
}

std::uint64_t section_hash(const PipelineConfig& cfg, const std::vector<std::string>& sections) {
    std::string blob = "seed=" + std::to_string(cfg.seed) + "\n";
    for (const auto& field : config_fields())
        if (std::find(sections.begin(), sections.end(), field.section) != sections.end())
            blob += field.section + "." + field.key + "=" + get_field(cfg, field) + "\n";
    return fnv1a_string(blob);
}

std::uint64_t chain_hash(Stage s, const PipelineConfig& cfg) {
    std::uint64_t h = section_hash(cfg, stage_sections(s));
    for (const Stage dep : stage_dependencies(s)) h = splitmix64(h ^ chain_hash(dep, cfg));
    return h;
}

std::filesystem::path manifest_path(const std::filesystem::path& out, Stage s) {
    return out / ("manifest_" + std::string(stage_name(s)) + ".json");
}

void write_manifest(const std::filesystem::path& out, Stage s, const PipelineConfig& cfg,
                    const std::vector<std::string>& outputs) {
    json m{{"stage", stage_name(s)},
           {"chain_hash", chain_hash(s, cfg)},
           {"seed", cfg.seed}};
    auto& oh = m["output_hashes"] = json::object();
    for (const auto& name : outputs) oh[name] = fnv1a_file(out / name);
    std::ofstream os(manifest_path(out, s));
    os << m.dump(2) << '\n';
}

// Validates the full upstream chain of `s`: manifests must exist, carry the
// expected chain hash, and their recorded artifact hashes must match the
// files on disk.
void require_upstream(const std::filesystem::path& out, Stage s, const PipelineConfig& cfg) {
    for (const Stage dep : stage_dependencies(s)) {
        const auto mpath = manifest_path(out, dep);
        if (!std::filesystem::exists(mpath)) throw MissingDependency(stage_name(dep));
        std::ifstream is(mpath);
        json m;
        try {
            is >> m;
        } catch (const json::exception&) {
            throw StaleArtifact("unreadable manifest for stage " + std::string(stage_name(dep)));
        }
        if (m.value("chain_hash", std::uint64_t{0}) != chain_hash(dep, cfg))
            throw StaleArtifact("stage " + std::string(stage_name(dep)) +
                                " was produced under a different config/seed; rerun it");
        for (const auto& [name, hash] : m.at("output_hashes").items()) {
            const auto file = out / name;
            if (!std::filesystem::exists(file)) throw MissingDependency(stage_name(dep));
            if (fnv1a_file(file) != hash.get<std::uint64_t>())
                throw StaleArtifact("artifact " + name + " changed since stage " +
                                    std::string(stage_name(dep)) + " ran");
        }
        require_upstream(out, dep, cfg);
    }
}

// ---------- shared stage state ----------

struct LoadedState {
    RecGraph graph;
    PathSetCollection paths;
    EmbeddingTable table;
    BackendParams params;
};

RecGraph load_graph(const std::filesystem::path& out) {
    return RecGraph::load(out / kArtifactGraph);
}

std::vector<std::pair<NodeId, NodeId>> load_heldout(const std::filesystem::path& out,
                                                    const RecGraph& g) {
    std::vector<std::pair<NodeId, NodeId>> pairs;
    std::ifstream is(out / kArtifactHeldout);
    if (!is) return pairs;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string user, item, ts;
        std::getline(ss, user, '\t');
        std::getline(ss, item, '\t');
        std::getline(ss, ts, '\t');
        const auto u = g.find_user(user);
        const auto i = g.find_item(item);
        if (u && i) pairs.emplace_back(*u, *i);
    }
    return pairs;
}

BackendConfig backend_config(const PipelineConfig& cfg) {
    BackendConfig bc;
    bc.dim = cfg.dim;
    bc.att_hidden = cfg.att_hidden;
    bc.ff_hidden = cfg.ff_hidden;
    bc.mlp_hidden = cfg.mlp_hidden;
    bc.max_history = cfg.max_history;
    bc.learning_rate = cfg.backend_learning_rate;
    bc.epochs = cfg.backend_epochs;
    bc.clip_norm = cfg.backend_clip_norm;
    bc.seed = derive_seed(cfg.seed, "train");
    return bc;
}

CfReprConfig repr_config(const PipelineConfig& cfg) {
    CfReprConfig rc;
    rc.alpha = cfg.alpha;
    rc.beta = cfg.beta;
    rc.lambda = cfg.lambda;
    rc.learning_rate = cfg.repr_learning_rate;
    rc.steps = cfg.repr_steps;
    rc.seed = derive_seed(cfg.seed, "explain-repr");
    return rc;
}

RewardConfig reward_config(const PipelineConfig& cfg) {
    return {cfg.zeta, cfg.epsilon, cfg.eta, -200.0};
}

PolicyConfig policy_config(const PipelineConfig& cfg) {
    PolicyConfig pc;
    pc.hidden = cfg.policy_hidden;
    pc.learning_rate = cfg.policy_learning_rate;
    pc.epochs = cfg.struct_epochs;
    pc.episodes_per_epoch = cfg.episodes_per_epoch;
    pc.seed = derive_seed(cfg.seed, "explain-struct");
    return pc;
}

// ---------- stages ----------

void stage_ingest(const PipelineConfig& cfg, const std::filesystem::path& out) {
    if (cfg.interactions.empty()) throw ValidationError("data.interactions not configured");
    if (cfg.holdout != "none" && cfg.holdout != "last")
        throw ValidationError("data.holdout must be 'none' or 'last'");
    auto records = load_interactions(cfg.interactions, cfg.min_item_count);
    auto attributes = cfg.metadata.empty() ? std::vector<AttributeRecord>{}
                                           : load_metadata(cfg.metadata);

    std::vector<InteractionRecord> heldout;
    if (cfg.holdout == "last") {
        // Hold out each user's chronologically last interaction, unless that
        // would erase the item from the training graph entirely.
        std::unordered_map<std::string, std::size_t> item_counts;
        for (const auto& r : records) ++item_counts[r.item];
        std::unordered_map<std::string, std::size_t> last_row;
        std::unordered_map<std::string, std::size_t> user_rows;
        for (std::size_t i = 0; i < records.size(); ++i) {
            ++user_rows[records[i].user];
            const auto it = last_row.find(records[i].user);
            if (it == last_row.end() || records[i].timestamp >= records[it->second].timestamp)
                last_row[records[i].user] = i;
        }
        std::vector<bool> drop(records.size(), false);
        std::vector<std::string> users;
        for (const auto& [u, idx] : last_row) users.push_back(u);
        std::sort(users.begin(), users.end());
        for (const auto& u : users) {
            const std::size_t idx = last_row[u];
            if (user_rows[u] < 2) continue;               // keep single-row users trainable
            if (item_counts[records[idx].item] < 2) continue;  // item must survive in train
            drop[idx] = true;
            --item_counts[records[idx].item];
            heldout.push_back(records[idx]);
        }
        std::vector<InteractionRecord> train;
        for (std::size_t i = 0; i < records.size(); ++i)
            if (!drop[i]) train.push_back(std::move(records[i]));
        records = std::move(train);
    }

    RecGraph g = build_graph(records, attributes);
    g.save(out / kArtifactGraph);
    std::ofstream hs(out / kArtifactHeldout);
    for (const auto& r : heldout) hs << r.user << '\t' << r.item << '\t' << r.timestamp << '\n';
    hs.close();
    write_manifest(out, Stage::Ingest, cfg,
                   {std::string(kArtifactGraph), std::string(kArtifactHeldout)});
}

void stage_walk(const PipelineConfig& cfg, const std::filesystem::path& out) {
    const RecGraph g = load_graph(out);
    ExploreOptions eo{cfg.min_len, cfg.max_len, cfg.walks_per_vertex,
                      derive_seed(cfg.seed, "walk-explore")};
    const PathSetCollection paths = explore_paths(g, eo);
    paths.save_jsonl(out / kArtifactPathSets);

    TemporalWalkOptions to{cfg.walk_len, cfg.temporal_walks_per_vertex,
                           derive_seed(cfg.seed, "walk-temporal")};
    const auto walks = temporal_walks(g, to);
    save_walks_jsonl(walks, out / kArtifactWalks);
    write_manifest(out, Stage::Walk, cfg,
                   {std::string(kArtifactPathSets), std::string(kArtifactWalks)});
}

void stage_embed(const PipelineConfig& cfg, const std::filesystem::path& out) {
    const RecGraph g = load_graph(out);
    const auto walks = load_walks_jsonl(out / kArtifactWalks);
    SkipGramConfig sc{cfg.dim, cfg.window, cfg.negatives_per_pair, cfg.embed_epochs,
                      cfg.embed_learning_rate, derive_seed(cfg.seed, "embed")};
    SkipGramReport report;
    const EmbeddingTable table = train_skipgram(g.node_count(), walks, sc, &report);
    table.save(out / kArtifactEmbeddings, g);
    json rj{{"epoch_loss", report.epoch_loss}, {"uncovered_nodes", report.uncovered}};
    std::ofstream(out / "embed_report.json") << rj.dump(2) << '\n';
    write_manifest(out, Stage::Embed, cfg, {std::string(kArtifactEmbeddings)});
}

void stage_train(const PipelineConfig& cfg, const std::filesystem::path& out) {
    const RecGraph g = load_graph(out);
    const auto paths = PathSetCollection::load_jsonl(out / kArtifactPathSets);
    const auto table = EmbeddingTable::load(out / kArtifactEmbeddings);
    const BackendContext ctx = BackendContext::make(g, table, paths);
    TrainReport report;
    const BackendParams params = train_backend(ctx, backend_config(cfg), &report);
    save_checkpoint(params, out / kArtifactCheckpoint);
    json rj{{"epoch_loss", report.epoch_loss}};
    std::ofstream(out / "train_report.json") << rj.dump(2) << '\n';
    write_manifest(out, Stage::Train, cfg, {std::string(kArtifactCheckpoint)});
}

LoadedState load_state(const std::filesystem::path& out) {
    LoadedState st{load_graph(out), PathSetCollection::load_jsonl(out / kArtifactPathSets),
                   EmbeddingTable::load(out / kArtifactEmbeddings),
                   load_checkpoint(out / kArtifactCheckpoint)};
    return st;
}

void stage_explain_repr(const PipelineConfig& cfg, const std::filesystem::path& out) {
    const LoadedState st = load_state(out);
    const BackendContext ctx = BackendContext::make(st.graph, st.table, st.paths);
    const auto pairs = explained_pairs(cfg, st.graph, st.paths, out);
    const CfReprConfig rc = repr_config(cfg);
    const CfReprResult result = optimize_perturbations(st.params, ctx, pairs, rc);
    save_repr_jsonl(result, st.paths, rc.seed, out / kArtifactRepr);
    json summary{{"pairs", pairs.size()},
                 {"skipped_empty_pairs", result.skipped_empty_pairs},
                 {"skipped_cold_users", result.skipped_cold_users}};
    std::ofstream(out / "repr_summary.json") << summary.dump(2) << '\n';
    write_manifest(out, Stage::ExplainRepr, cfg, {std::string(kArtifactRepr)});
}

void stage_explain_struct(const PipelineConfig& cfg, const std::filesystem::path& out) {
    const LoadedState st = load_state(out);
    const BackendContext ctx = BackendContext::make(st.graph, st.table, st.paths);
    const auto pairs = explained_pairs(cfg, st.graph, st.paths, out);
    const PolicyConfig pc = policy_config(cfg);
    const RewardConfig rc = reward_config(cfg);

    std::vector<StructExplanation> explanations;
    bool wrote_diag = false;
    for (const auto& [user, item] : pairs) {
        StructEnv env = make_env(st.params, ctx, user, item);
        PolicyConfig pair_pc = pc;
        pair_pc.seed = derive_seed(pc.seed, user, item);
        const TrainPolicyResult trained = train_policy(env, pair_pc, rc);
        explanations.push_back(best_explanation(env, trained.traces, rc));
        if (!wrote_diag) {
            // Figure-8-style diagnostics for the first explained pair.
            save_traces_jsonl(trained.traces, env, out / "struct_traces.jsonl");
            save_curves_csv(trained, out / "struct_curves.csv");
            wrote_diag = true;
        }
    }
    save_struct_jsonl(explanations, st.paths, pc.seed, out / kArtifactStruct);
    write_manifest(out, Stage::ExplainStruct, cfg, {std::string(kArtifactStruct)});
}

// Retrains the backend under a different seed; shared by the stability and
// effectiveness diagnostics.
BackendParams retrain_with_seed(const PipelineConfig& cfg, const BackendContext& ctx,
                                std::uint64_t seed) {
    BackendConfig bc = backend_config(cfg);
    bc.seed = seed;
    return train_backend(ctx, bc);
}

void stage_evaluate(const PipelineConfig& cfg, const std::filesystem::path& out) {
    const LoadedState st = load_state(out);
    const BackendContext ctx = BackendContext::make(st.graph, st.table, st.paths);
    const auto pairs = explained_pairs(cfg, st.graph, st.paths, out);
    const auto repr_all = load_repr_jsonl(out / kArtifactRepr);
    const auto struct_all = load_struct_jsonl(out / kArtifactStruct);

    const auto find_repr = [&](NodeId u, NodeId i) -> const ReprExplanation* {
        for (const auto& r : repr_all)
            if (r.user == u && r.item == i) return &r;
        return nullptr;
    };
    const auto find_struct = [&](NodeId u, NodeId i) -> const StructExplanation* {
        for (const auto& s : struct_all)
            if (s.user == u && s.item == i) return &s;
        return nullptr;
    };

    // Per-pair weight vectors for every method.
    std::vector<WeightedExplanation> attention_full, repr_w, struct_w, inter_w;
    std::size_t intersection_fallbacks = 0;
    double mean_selected_repr = 0.0, mean_selected_struct = 0.0;
    std::size_t counted = 0;
    for (const auto& [user, item] : pairs) {
        const auto* repr = find_repr(user, item);
        const auto* strct = find_struct(user, item);
        if (repr == nullptr || strct == nullptr) continue;
        const std::size_t path_count = st.paths.pair(user, item).paths.size();
        attention_full.push_back(attention_explanation(st.params, ctx, user, item));
        repr_w.push_back(repr_explanation_weights(*repr));
        struct_w.push_back(struct_explanation_weights(*strct, path_count));
        const IntersectionResult inter = intersect_explanations(*repr, *strct);
        if (inter.empty_warning) ++intersection_fallbacks;
        inter_w.push_back(intersection_weights(*repr, inter, path_count));
        std::size_t sel = 0;
        for (const auto& rec : repr->records) sel += rec.selected ? 1 : 0;
        mean_selected_repr += static_cast<double>(sel);
        mean_selected_struct += static_cast<double>(strct->selected_paths.size());
        ++counted;
    }
    if (counted == 0) throw ValidationError("no explained pairs available for evaluation");
    mean_selected_repr /= static_cast<double>(counted);
    mean_selected_struct /= static_cast<double>(counted);
    // Baseline sizes follow the two methods' average selected-path count.
    const auto baseline_k = static_cast<std::size_t>(std::max<long long>(
        1, std::llround((mean_selected_repr + mean_selected_struct) / 2.0)));

    Rng baseline_rng(derive_seed(cfg.seed, "eval-random"));
    std::vector<WeightedExplanation> attention_topk, random_k;
    for (std::size_t i = 0; i < counted; ++i) {
        attention_topk.push_back(topk_selection(attention_full[i], baseline_k));
        random_k.push_back(random_selection(attention_full[i].user, attention_full[i].item,
                                            attention_full[i].weights.size(), baseline_k,
                                            baseline_rng));
    }

    json report;
    report["provenance"] = {{"chain_hash", chain_hash(Stage::Evaluate, cfg)},
                            {"seed", cfg.seed},
                            {"pairs", counted},
                            {"baseline_k", baseline_k},
                            {"intersection_fallbacks", intersection_fallbacks},
                            {"mean_selected_repr", mean_selected_repr},
                            {"mean_selected_struct", mean_selected_struct}};

    // Confidence: mean per-pair entropy.
    const auto mean_entropy = [](const std::vector<WeightedExplanation>& ws) {
        double h = 0.0;
        for (const auto& w : ws) h += confidence_entropy(w);
        return ws.empty() ? 0.0 : h / static_cast<double>(ws.size());
    };
    report["confidence"] = {{"attention", mean_entropy(attention_full)},
                            {"cf_repr", mean_entropy(repr_w)},
                            {"cf_struct", mean_entropy(struct_w)},
                            {"cf_intersection", mean_entropy(inter_w)}};

    // Informativeness: MSE of score from selected paths only.
    const auto inf_to_json = [](const InformativenessResult& r) {
        return json{{"mse", r.mse}, {"evaluated", r.evaluated}, {"skipped", r.skipped}};
    };
    report["informativeness"] = {
        {"cf_repr", inf_to_json(informativeness_mse(st.params, ctx, repr_w))},
        {"cf_struct", inf_to_json(informativeness_mse(st.params, ctx, struct_w))},
        {"cf_intersection", inf_to_json(informativeness_mse(st.params, ctx, inter_w))},
        {"attention_topk", inf_to_json(informativeness_mse(st.params, ctx, attention_topk))},
        {"random_k", inf_to_json(informativeness_mse(st.params, ctx, random_k))}};

    // Fidelity: the intersection set is the 100% input for cf; the attention
    // baseline uses the same selection budget (top-k) for a rank-quality
    // comparison.
    {
        const auto cf_curve = fidelity_curve(st.params, ctx, inter_w, cfg.ratios);
        const auto att_curve = fidelity_curve(st.params, ctx, attention_topk, cfg.ratios);
        json fj = json::array();
        std::ofstream fcsv(out / "fidelity.csv");
        fcsv << "ratio,cf_intersection,attention_topk\n";
        for (std::size_t i = 0; i < cf_curve.size(); ++i) {
            fj.push_back({{"ratio", cf_curve[i].ratio},
                          {"cf_intersection", cf_curve[i].fidelity},
                          {"attention_topk", att_curve[i].fidelity},
                          {"evaluated", cf_curve[i].evaluated}});
            fcsv << cf_curve[i].ratio << ',' << cf_curve[i].fidelity << ','
                 << att_curve[i].fidelity << '\n';
        }
        report["fidelity"] = std::move(fj);
    }

    // Stability: retrain the backend `runs` times; track per-path attention
    // and cf weights of the first stability_pairs pairs.
    {
        const std::size_t tracked =
            std::min<std::size_t>(counted, static_cast<std::size_t>(std::max(1, cfg.stability_pairs)));
        std::vector<std::pair<NodeId, NodeId>> tracked_pairs;
        for (std::size_t i = 0; i < tracked; ++i)
            tracked_pairs.push_back({attention_full[i].user, attention_full[i].item});

        std::vector<std::uint64_t> seeds;
        for (int r = 0; r < cfg.runs; ++r)
            seeds.push_back(derive_seed(derive_seed(cfg.seed, "stability"),
                                        static_cast<std::uint64_t>(r)));

        // Retrained params are cached per seed and reused by the
        // effectiveness diagnostic below.
        std::map<std::uint64_t, BackendParams> retrained;
        const auto params_for = [&](std::uint64_t seed) -> const BackendParams& {
            auto it = retrained.find(seed);
            if (it == retrained.end())
                it = retrained.emplace(seed, retrain_with_seed(cfg, ctx, seed)).first;
            return it->second;
        };

        const CfReprConfig rc = repr_config(cfg);
        const WeightRunner attention_runner = [&](std::uint64_t seed) {
            std::vector<double> flat;
            const auto& p = params_for(seed);
            for (const auto& [u, i] : tracked_pairs) {
                const auto w = attention_explanation(p, ctx, u, i);
                flat.insert(flat.end(), w.weights.begin(), w.weights.end());
            }
            return flat;
        };
        const WeightRunner repr_runner = [&](std::uint64_t seed) {
            std::vector<double> flat;
            const auto& p = params_for(seed);
            const auto result = optimize_perturbations(p, ctx, tracked_pairs, rc);
            for (const auto& exp : result.explanations)
                for (const auto& rec : exp.records) flat.push_back(rec.normalized_weight);
            return flat;
        };

        const StabilityReport att_stab = stability_report(attention_runner, seeds, cfg.variance_ratio);
        const StabilityReport cf_stab = stability_report(repr_runner, seeds, cfg.variance_ratio);
        report["stability"] = {{"runs", cfg.runs},
                               {"tracked_paths", att_stab.variance.size()},
                               {"attention_small_fraction", att_stab.small_fraction},
                               {"cf_repr_small_fraction", cf_stab.small_fraction}};
        std::ofstream scsv(out / "stability_samples.csv");
        scsv << "method,run,path,weight\n";
        for (std::size_t r = 0; r < att_stab.samples.size(); ++r)
            for (std::size_t p = 0; p < att_stab.samples[r].size(); ++p)
                scsv << "attention," << r << ',' << p << ',' << att_stab.samples[r][p] << '\n';
        for (std::size_t r = 0; r < cf_stab.samples.size(); ++r)
            for (std::size_t p = 0; p < cf_stab.samples[r].size(); ++p)
                scsv << "cf_repr," << r << ',' << p << ',' << cf_stab.samples[r][p] << '\n';

        // Effectiveness: inject a pranking path into the first pair with a
        // qualifying distant donor and rank it under the retrained models.
        Rng prng(derive_seed(cfg.seed, "pranking"));
        std::optional<PrankingSetup> setup;
        std::pair<NodeId, NodeId> pranked{0, 0};
        for (const auto& [u, i] : pairs) {
            try {
                setup = make_pranking_pathset(st.graph, st.paths, u, i, pairs, prng);
                pranked = {u, i};
                break;
            } catch (const ValidationError&) {
                continue;
            }
        }
        if (setup) {
            const PrankingRunner runner = [&](std::uint64_t seed, const PathSet& modified) {
                const auto& p = params_for(seed);
                // Rebuild the pair's pooled embeddings with the injected path.
                std::vector<Vec> pooled;
                pooled.reserve(modified.paths.size());
                for (const auto& path : modified.paths)
                    pooled.push_back(embed_path(st.table, path));
                Vec attention;
                score_pair(p, ctx, modified.user, modified.item, &pooled, &attention);

                // cf impact: per-path delta_s on the modified set.
                std::vector<PathSet> sets = st.paths.sets();
                for (auto& s : sets)
                    if (s.user == modified.user && s.item == modified.item) s = modified;
                const PathSetCollection mod_paths(std::move(sets));
                const BackendContext mod_ctx = BackendContext::make(st.graph, st.table, mod_paths);
                const std::pair<NodeId, NodeId> one{modified.user, modified.item};
                const auto result = optimize_perturbations(p, mod_ctx, {&one, 1}, rc);
                std::vector<double> deltas(modified.paths.size(), 0.0);
                if (!result.explanations.empty())
                    for (const auto& rec : result.explanations.front().records)
                        deltas[rec.path_index] = rec.delta_s;
                return std::pair{std::vector<double>(attention.begin(), attention.end()), deltas};
            };
            const PrankingReport pr = effectiveness_pranking(runner, *setup, seeds);
            report["effectiveness"] = {
                {"pair_user", pranked.first},
                {"pair_item", pranked.second},
                {"path_count", pr.path_count},
                {"injected_index", pr.injected_index},
                {"attention_ranks", pr.attention_ranks},
                {"cf_ranks", pr.cf_ranks},
                {"cf_bottom_quartile_runs", pr.cf_bottom_quartile_runs},
                {"cf_worse_than_attention_runs", pr.cf_worse_than_attention_runs},
                {"runs", seeds.size()}};
        } else {
            report["effectiveness"] = {{"error", "no qualifying distant donor"}};
        }
    }

    // Ranking quality on the held-out pairs, when a holdout exists.
    {
        const auto heldout = load_heldout(out, st.graph);
        if (!heldout.empty()) {
            const TopkMetrics m =
                evaluate_topk(st.params, ctx, heldout, cfg.k_list, cfg.negatives,
                              derive_seed(cfg.seed, "topk-eval"));
            json hr = json::object(), ndcg = json::object();
            for (const auto& [k, v] : m.hr) hr[std::to_string(k)] = v;
            for (const auto& [k, v] : m.ndcg) ndcg[std::to_string(k)] = v;
            report["ranking"] = {{"hr", hr},
                                 {"ndcg", ndcg},
                                 {"evaluated", m.evaluated},
                                 {"skipped_cold", m.skipped_cold},
                                 {"negatives", cfg.negatives}};
        }
    }

    std::ofstream(out / kArtifactReport) << report.dump(2) << '\n';
    write_manifest(out, Stage::Evaluate, cfg,
                   {std::string(kArtifactReport), "fidelity.csv", "stability_samples.csv"});
}

void stage_report(const PipelineConfig& cfg, const std::filesystem::path& out) {
    render_report(out, std::cout);
    write_manifest(out, Stage::Report, cfg, {});
}

}  // namespace

PipelineConfig parse_config_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open config file: " + path.string());
    PipelineConfig cfg;
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[' && t.back() == ']') {
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ParseError(path.filename().string(), line_no, "expected key = value");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = t.substr(eq + 1);
        bool found = false;
        for (const auto& field : config_fields()) {
            if (field.section == section && field.key == key) {
                set_field(cfg, field, value);
                found = true;
                break;
            }
        }
        if (!found)
            throw ParseError(path.filename().string(), line_no,
                             "unknown config key [" + section + "] " + key);
    }
    return cfg;
}

void apply_override(PipelineConfig& cfg, const std::string& dotted_key, const std::string& value) {
    const auto dot = dotted_key.find('.');
    if (dot == std::string::npos)
        throw ValidationError("override key must look like section.key: " + dotted_key);
    const std::string section = dotted_key.substr(0, dot);
    const std::string key = dotted_key.substr(dot + 1);
    for (const auto& field : config_fields()) {
        if (field.section == section && field.key == key) {
            set_field(cfg, field, value);
            return;
        }
    }
    throw ValidationError("unknown config key: " + dotted_key);
}

std::string config_to_string(const PipelineConfig& cfg) {
    std::string out;
    std::string section;
    for (const auto& field : config_fields()) {
        if (field.section != section) {
            section = field.section;
            out += "[" + section + "]\n";
        }
        out += field.key + " = " + get_field(cfg, field) + "\n";
    }
    return out;
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::Ingest: return "ingest";
        case Stage::Walk: return "walk";
        case Stage::Embed: return "embed";
        case Stage::Train: return "train";
        case Stage::ExplainRepr: return "explain-repr";
        case Stage::ExplainStruct: return "explain-struct";
        case Stage::Evaluate: return "evaluate";
        case Stage::Report: return "report";
    }
    return "?";
}

std::optional<Stage> stage_from_name(const std::string& name) {
    for (const Stage s : {Stage::Ingest, Stage::Walk, Stage::Embed, Stage::Train,
                          Stage::ExplainRepr, Stage::ExplainStruct, Stage::Evaluate,
                          Stage::Report})
        if (name == stage_name(s)) return s;
    return std::nullopt;
}

std::uint64_t fnv1a_string(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot hash missing file: " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        const std::streamsize n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (!is) break;
    }
    return h;
}

std::vector<std::pair<NodeId, NodeId>> explained_pairs(const PipelineConfig& cfg,
                                                       const RecGraph& g,
                                                       const PathSetCollection& paths,
                                                       const std::filesystem::path& out_dir) {
    std::vector<std::pair<NodeId, NodeId>> candidates;
    if (cfg.holdout == "last") {
        candidates = load_heldout(out_dir, g);
    } else {
        for (NodeId u = 0; u < g.user_count(); ++u) {
            const auto& h = g.history(u);
            if (!h.empty()) candidates.emplace_back(u, h.back().item);
        }
    }
    std::sort(candidates.begin(), candidates.end());
    std::vector<std::pair<NodeId, NodeId>> pairs;
    for (const auto& [u, i] : candidates) {
        if (paths.pair(u, i).paths.empty()) continue;
        if (g.history(u).empty()) continue;
        pairs.emplace_back(u, i);
        if (cfg.max_pairs > 0 && pairs.size() >= static_cast<std::size_t>(cfg.max_pairs)) break;
    }
    return pairs;
}

void run_stage(Stage stage, const PipelineConfig& cfg, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    require_upstream(out_dir, stage, cfg);
    switch (stage) {
        case Stage::Ingest: stage_ingest(cfg, out_dir); break;
        case Stage::Walk: stage_walk(cfg, out_dir); break;
        case Stage::Embed: stage_embed(cfg, out_dir); break;
        case Stage::Train: stage_train(cfg, out_dir); break;
        case Stage::ExplainRepr: stage_explain_repr(cfg, out_dir); break;
        case Stage::ExplainStruct: stage_explain_struct(cfg, out_dir); break;
        case Stage::Evaluate: stage_evaluate(cfg, out_dir); break;
        case Stage::Report: stage_report(cfg, out_dir); break;
    }
}

void run_all(const PipelineConfig& cfg, const std::filesystem::path& out_dir) {
    for (const Stage s : {Stage::Ingest, Stage::Walk, Stage::Embed, Stage::Train,
                          Stage::ExplainRepr, Stage::ExplainStruct, Stage::Evaluate,
                          Stage::Report})
        run_stage(s, cfg, out_dir);
}

void render_report(const std::filesystem::path& out_dir, std::ostream& os) {
    const auto path = out_dir / kArtifactReport;
    if (!std::filesystem::exists(path)) throw MissingDependency("evaluate");
    std::ifstream is(path);
    json report;
    is >> report;

    os << "== explainability evaluation ==\n";
    os << "pairs evaluated: " << report["provenance"]["pairs"] << "\n\n";
    os << "confidence (mean entropy, lower = more decisive)\n";
    for (const auto& [k, v] : report["confidence"].items())
        os << "  " << k << ": " << v.dump() << '\n';
    os << "\ninformativeness (MSE vs full-input score, lower = better)\n";
    for (const auto& [k, v] : report["informativeness"].items())
        os << "  " << k << ": " << v["mse"].dump() << " (" << v["evaluated"].dump()
           << " pairs)\n";
    os << "\nfidelity (score drop after removing top-ratio explainable paths)\n";
    for (const auto& row : report["fidelity"])
        os << "  ratio " << row["ratio"].dump() << ": cf=" << row["cf_intersection"].dump()
           << " attention=" << row["attention_topk"].dump() << '\n';
    if (report.contains("stability")) {
        os << "\nstability (fraction of paths with small weight variance)\n";
        os << "  attention: " << report["stability"]["attention_small_fraction"].dump() << '\n';
        os << "  cf_repr:   " << report["stability"]["cf_repr_small_fraction"].dump() << '\n';
    }
    if (report.contains("effectiveness") && !report["effectiveness"].contains("error")) {
        os << "\neffectiveness (injected pranking path ranks, higher = better)\n";
        os << "  cf bottom-quartile runs: "
           << report["effectiveness"]["cf_bottom_quartile_runs"].dump() << "/"
           << report["effectiveness"]["runs"].dump() << '\n';
        os << "  cf worse-than-attention runs: "
           << report["effectiveness"]["cf_worse_than_attention_runs"].dump() << "/"
           << report["effectiveness"]["runs"].dump() << '\n';
    }
    if (report.contains("ranking")) {
        os << "\nranking on held-out interactions (" << report["ranking"]["negatives"].dump()
           << " sampled negatives)\n";
        for (const auto& [k, v] : report["ranking"]["hr"].items())
            os << "  HR@" << k << ": " << v.dump()
               << "  NDCG@" << k << ": " << report["ranking"]["ndcg"][k].dump() << '\n';
    }
}

}  // namespace cper
