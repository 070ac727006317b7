#pragma once

// Command-line front end: init, train, infer, active-round, eval, serve.
// Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage error.

#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "nsmrg/orchestrator.hpp"
#include "nsmrg/service.hpp"
#include "nsmrg/training.hpp"

namespace nsmrg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

inline constexpr double kKgCacheTtlSeconds = 60.0;

namespace cli_detail {

inline std::atomic<bool> g_stop{false};
inline void on_signal(int) { g_stop = true; }

/// Effective config: --config file, else the state copy, else defaults; --seed overrides.
inline TrainConfig resolve_config(const std::string& state, const std::string& config_path,
                                  const std::optional<std::uint64_t>& seed) {
    TrainConfig c;
    const auto in_state = state_files::path(state, state_files::kConfig);
    if (!config_path.empty())
        c = load_config(config_path);
    else if (std::filesystem::exists(in_state))
        c = load_config(in_state);
    if (seed) c.seed = *seed;
    c.validate();
    return c;
}

/// The world for `cfg`, with the rule and template libraries taken from the
/// state directory when present so edits there take effect.
inline SyntheticWorld state_world(const std::string& state, const TrainConfig& cfg) {
    SyntheticWorld w = make_world(cfg);
    const auto rules = state_files::path(state, state_files::kRules);
    const auto templates = state_files::path(state, state_files::kTemplates);
    if (std::filesystem::exists(rules)) {
        auto lib = load_rule_library(rules);
        if (lib.concepts != w.library.concepts || lib.size() != w.library.size())
            throw CompatibilityError(rules + " does not match the world's concepts and rule count");
        w.library = std::move(lib);
    }
    if (std::filesystem::exists(templates)) w.templates = load_template_library(templates);
    validate_library(w.library, w.templates);
    return w;
}

inline KgScoreFn state_kg(const std::string& state, const RuleLibrary& lib) {
    const auto p = state_files::path(state, state_files::kKg);
    if (!std::filesystem::exists(p)) return {};
    return KnowledgeGraph::open(p, kKgCacheTtlSeconds).score_fn(lib.concepts);
}

inline Model load_model(const std::string& ckpt_path, const TrainConfig& cfg, const SyntheticWorld& w,
                        OptimState* optim = nullptr, Checkpoint* header = nullptr) {
    const Checkpoint c = load_checkpoint(ckpt_path);
    Model m = make_model(cfg, w);
    apply_checkpoint(c, m, optim, config_hash(cfg));
    if (header) *header = c;
    return m;
}

inline json labeled_json(const std::vector<std::size_t>& labeled, const std::vector<std::size_t>& unlabeled) {
    return {{"format", "nsmrg-labeled"}, {"version", 1}, {"labeled", labeled}, {"unlabeled", unlabeled}};
}

struct Flags {
    std::string state;
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string checkpoint;
    std::string dataset;
    std::string policy;
    std::optional<std::size_t> k;
    std::optional<std::size_t> t_mc;
    std::optional<std::size_t> n_r;
    int port = 8080;
    std::string host = "127.0.0.1";
    std::string token;
    std::string static_dir;
    std::string split = "test";
    std::optional<std::size_t> sample;
    bool enqueue = false;
    bool quiet = false;
};

inline std::string checkpoint_path(const Flags& f, const std::string& state) {
    return f.checkpoint.empty() ? state_files::path(state, state_files::kCheckpoint) : f.checkpoint;
}

inline void apply_overrides(TrainConfig& c, const Flags& f) {
    if (!f.policy.empty()) c.policy = parse_policy(f.policy);
    if (f.k) c.k = *f.k;
    if (f.t_mc) c.t_mc = *f.t_mc;
    if (f.n_r) c.n_r = *f.n_r;
    c.validate();
}

inline int cmd_init(const Flags& f, std::ostream& out) {
    const auto state = resolve_state_dir(f.state);
    TrainConfig c = resolve_config(state, f.config, f.seed);
    apply_overrides(c, f);
    std::filesystem::create_directories(state);
    const SyntheticWorld w = make_world(c);
    write_file_atomic(state_files::path(state, state_files::kConfig), to_json(c).dump(2) + "\n");
    write_file_atomic(state_files::path(state, state_files::kRules), world_rule_text(c.world, false));
    write_file_atomic(state_files::path(state, state_files::kTemplates), world_template_text());
    write_file_atomic(state_files::path(state, state_files::kKg), world_kg_text());
    std::vector<FeatureSample> test;
    for (const auto& s : w.test) test.push_back({s.id, s.x});
    write_file_atomic(state_files::path(state, state_files::kFeatures), format_features(test));
    out << json{{"state", state}, {"config_hash", config_hash(c)}, {"train", w.train.size()}, {"test", w.test.size()}}
               .dump()
        << '\n';
    return kExitOk;
}

inline int cmd_train(const Flags& f, std::ostream& out) {
    const auto state = resolve_state_dir(f.state);
    TrainConfig c = resolve_config(state, f.config, f.seed);
    apply_overrides(c, f);
    std::filesystem::create_directories(state);
    const SyntheticWorld w = state_world(state, c);
    const auto metrics = state_files::path(state, state_files::kMetrics);
    const auto rounds = state_files::path(state, state_files::kRounds);
    std::filesystem::remove(metrics);
    std::filesystem::remove(rounds);
    const ExemplarStore store = ExemplarStore::load(state_files::path(state, state_files::kExemplars));

    TrainHooks hooks;
    hooks.kg = state_kg(state, w.library);
    hooks.store = &store;
    hooks.round_log = c.active ? rounds : "";
    hooks.divergence_checkpoint = state_files::path(state, "checkpoint.diverged.bin");
    hooks.on_record = [&](const MetricsRecord& m) {
        append_metrics(metrics, m);
        if (!f.quiet) out << to_json(m).dump() << '\n';
    };
    const TrainResult r = train_loop(w, c, hooks);

    write_file_atomic(state_files::path(state, state_files::kConfig), to_json(c).dump(2) + "\n");
    save_checkpoint(checkpoint_path(f, state), make_checkpoint(r.model, &r.optim, config_hash(c), r.epochs_run));
    const auto labeled_path = state_files::path(state, state_files::kLabeled);
    if (c.active)
        write_file_atomic(labeled_path, labeled_json(r.labeled, r.unlabeled).dump() + "\n");
    else
        std::filesystem::remove(labeled_path);
    return kExitOk;
}

inline int cmd_infer(const Flags& f, std::ostream& out) {
    const auto state = resolve_state_dir(f.state);
    TrainConfig c = resolve_config(state, f.config, f.seed);
    apply_overrides(c, f);
    const SyntheticWorld w = state_world(state, c);
    const Model m = load_model(checkpoint_path(f, state), c, w);
    const auto dataset = f.dataset.empty() ? state_files::path(state, state_files::kFeatures) : f.dataset;
    const auto samples = load_features(dataset);
    const ExemplarStore store = ExemplarStore::load(state_files::path(state, state_files::kExemplars));
    const auto opts = inference_options(c, state_kg(state, w.library));
    std::optional<ReviewService> svc;
    if (f.enqueue) svc.emplace(state);
    bool found = !f.sample;
    for (const auto& s : samples) {
        if (f.sample && s.id != *f.sample) continue;
        found = true;
        const auto r = run_inference(m, w.templates, s.x, &store, opts);
        ReviewCase rc = make_case("case-" + std::to_string(s.id), s.id, r, m);
        json j = to_json(rc);
        j.erase("status");
        j.erase("decision");
        j["review_required"] = rc.draft.review_required;
        out << j.dump() << '\n';
        if (svc && !svc->find(rc.id)) svc->add_case(std::move(rc));
    }
    if (!found) throw LookupError("sample " + std::to_string(*f.sample) + " is not in " + dataset);
    return kExitOk;
}

inline int cmd_active_round(const Flags& f, std::ostream& out) {
    const auto state = resolve_state_dir(f.state);
    TrainConfig c = resolve_config(state, f.config, f.seed);
    apply_overrides(c, f);
    const SyntheticWorld w = state_world(state, c);
    OptimState optim;
    Checkpoint header;
    Model m = load_model(checkpoint_path(f, state), c, w, &optim, &header);

    const auto labeled_path = state_files::path(state, state_files::kLabeled);
    std::vector<std::size_t> labeled, unlabeled;
    if (std::filesystem::exists(labeled_path)) {
        const json j = json::parse(read_file_text(labeled_path));
        check_format(j, "nsmrg-labeled", 1, labeled_path);
        labeled = j.at("labeled").get<std::vector<std::size_t>>();
        unlabeled = j.at("unlabeled").get<std::vector<std::size_t>>();
    } else {
        auto p = initial_partition(w, c);
        labeled = std::move(p.labeled);
        unlabeled = std::move(p.unlabeled);
    }
    const auto rounds_path = state_files::path(state, state_files::kRounds);
    const std::size_t round = std::filesystem::exists(rounds_path) ? load_round_log(rounds_path).size() : 0;

    const auto kg = state_kg(state, w.library);
    const SimulatedAnnotator annotator = make_annotator(w, c);
    const SelectionRound sel = select_for_round(m, w, c, unlabeled, round);
    const auto revealed = ids_to_reveal(m, w, c, annotator, sel, kg);
    labeled.insert(labeled.end(), revealed.begin(), revealed.end());
    unlabeled = without_ids(unlabeled, sel.chosen);

    std::vector<LabeledItem> items;
    for (std::size_t id : labeled) items.push_back({id, w.make_targets(annotator.noisy_labels(id))});
    Trainer trainer(std::move(m), c);
    trainer.optim() = optim;
    const RngStream root = train_root(c);
    std::size_t epoch = header.epoch;
    double loss = 0.0;
    for (std::size_t e = 0; e < c.epochs; ++e) {
        RngStream erng = root.fork(epoch++);
        loss = trainer.epoch(w, items, erng);
    }

    const ExemplarStore store = ExemplarStore::load(state_files::path(state, state_files::kExemplars));
    MetricsRecord rec = evaluate(trainer.model(), w, w.test, inference_options(c, kg), &store);
    rec.epoch = epoch;
    rec.round = round + 1;
    rec.loss = loss;
    rec.labeled = items.size();

    save_checkpoint(checkpoint_path(f, state), make_checkpoint(trainer.model(), &trainer.optim(), config_hash(c), epoch));
    write_file_atomic(labeled_path, labeled_json(labeled, unlabeled).dump() + "\n");
    append_round_log(rounds_path, sel);
    append_metrics(state_files::path(state, state_files::kMetrics), rec);
    out << json{{"round", to_json(sel)}, {"revealed", revealed}, {"metrics", to_json(rec)}}.dump() << '\n';
    return kExitOk;
}

inline int cmd_eval(const Flags& f, std::ostream& out) {
    const auto state = resolve_state_dir(f.state);
    TrainConfig c = resolve_config(state, f.config, f.seed);
    apply_overrides(c, f);
    const SyntheticWorld w = state_world(state, c);
    Checkpoint header;
    const Model m = load_model(checkpoint_path(f, state), c, w, nullptr, &header);
    if (f.split != "test" && f.split != "train") throw ArgumentError("--split must be test or train");
    const ExemplarStore store = ExemplarStore::load(state_files::path(state, state_files::kExemplars));
    MetricsRecord rec =
        evaluate(m, w, f.split == "test" ? w.test : w.train, inference_options(c, state_kg(state, w.library)), &store);
    rec.split = f.split;
    rec.epoch = header.epoch;
    append_metrics(state_files::path(state, state_files::kMetrics), rec);
    out << to_json(rec).dump() << '\n';
    return kExitOk;
}

inline int cmd_serve(const Flags& f, std::ostream& out) {
    const auto state = resolve_state_dir(f.state);
    if (!std::filesystem::exists(state)) throw StateError("state directory " + state + " does not exist; run init");
    ReviewService svc(state);
    ReviewServer server(svc, {f.host, f.port, f.token, f.static_dir});
    const int port = server.start();
    out << "listening on http://" << f.host << ":" << port << std::endl;
    g_stop = false;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
    return kExitOk;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    using namespace cli_detail;
    CLI::App app{"nsmrg: neuro-symbolic report drafting engine"};
    app.require_subcommand(1);
    Flags f;

    auto common = [&](CLI::App* s) {
        s->add_option("--state", f.state, "State directory (default $NSMRG_STATE or ./nsmrg-state)");
        s->add_option("--config", f.config, "Config JSON (default <state>/config.json)");
        s->add_option("--seed", f.seed, "Override the config seed");
    };
    auto model_flags = [&](CLI::App* s) {
        s->add_option("--checkpoint", f.checkpoint, "Checkpoint path (default <state>/checkpoint.bin)");
        s->add_option("--n-r", f.n_r, "Retrieved exemplars per draft (N_r)");
    };
    auto active_flags = [&](CLI::App* s) {
        s->add_option("--policy", f.policy, "Selection policy: entropy+kcenter, entropy, kcenter, random");
        s->add_option("--k", f.k, "Samples selected per round");
        s->add_option("--t-mc", f.t_mc, "MC-dropout passes (T_MC)");
    };

    auto* init = app.add_subcommand("init", "Write config, libraries, knowledge graph and test features into the state directory");
    common(init);
    auto* train = app.add_subcommand("train", "Train from scratch; writes checkpoint and metric trace");
    common(train);
    model_flags(train);
    active_flags(train);
    train->add_flag("--quiet", f.quiet, "Do not echo metric records");
    auto* infer = app.add_subcommand("infer", "Draft reports for a feature file");
    common(infer);
    model_flags(infer);
    infer->add_option("--dataset", f.dataset, "Feature file (default <state>/test.features)");
    infer->add_option("--sample", f.sample, "Only this sample id");
    infer->add_flag("--enqueue", f.enqueue, "Add drafts to the review queue");
    auto* round = app.add_subcommand("active-round", "Select, reveal and fine-tune for one active-learning round");
    common(round);
    model_flags(round);
    active_flags(round);
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    common(eval);
    model_flags(eval);
    eval->add_option("--split", f.split, "test or train")->check(CLI::IsMember({"test", "train"}));
    auto* serve = app.add_subcommand("serve", "Serve the review API");
    serve->add_option("--state", f.state, "State directory (default $NSMRG_STATE or ./nsmrg-state)");
    serve->add_option("--port", f.port, "TCP port (0 picks a free one)")->check(CLI::Range(0, 65535));
    serve->add_option("--host", f.host, "Bind address");
    serve->add_option("--token", f.token, "Require this value in the X-Review-Token header");
    serve->add_option("--static", f.static_dir, "Serve a UI build from this directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    try {
        if (*init) return cmd_init(f, out);
        if (*train) return cmd_train(f, out);
        if (*infer) return cmd_infer(f, out);
        if (*round) return cmd_active_round(f, out);
        if (*eval) return cmd_eval(f, out);
        if (*serve) return cmd_serve(f, out);
    } catch (const ConfigError& e) {
        err << "error: configuration: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace nsmrg
