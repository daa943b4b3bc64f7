#include "detwin/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "detwin/blackswan.hpp"
#include "detwin/common.hpp"
#include "detwin/localize.hpp"
#include "detwin/pipeline.hpp"

namespace detwin {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
    std::string out;
};

PipelineConfig load_config(const Common& c) {
    json j = json::object();
    if (!c.config_path.empty()) {
        try {
            j = json::parse(read_text(c.config_path));
        } catch (const json::parse_error& e) {
            throw ConfigError("config " + c.config_path + ": " + e.what());
        }
    }
    for (const auto& o : c.overrides) apply_override(j, o);
    if (c.seed) j["seed"] = *c.seed;
    if (c.workers) j["workers"] = *c.workers;
    PipelineConfig cfg = pipeline_config_from_json(j);
    cfg.validate();
    return cfg;
}

fs::path out_root(const Common& c) {
    if (!c.out.empty()) return c.out;
    if (const char* env = std::getenv(kOutEnv); env && *env) return env;
    return "detwin_out";
}

std::vector<Estimate> argmax_all(const std::vector<RDMap>& maps) {
    std::vector<Estimate> out;
    out.reserve(maps.size());
    for (const auto& m : maps) out.push_back(argmax_localize(m));
    return out;
}

int phase_exit(const PhaseReport& r, const fs::path& root, std::ostream& out) {
    out << "phase" << r.phase << ": " << r.outcome << " (" << (root / "reports" / ("phase" + std::to_string(r.phase) + ".json")).string()
        << ")\n";
    return r.pass ? exit_code::ok : exit_code::gate_fail;
}

int cmd_simulate(const Common& c, std::size_t count, std::ostream& out) {
    const PipelineConfig cfg = load_config(c);
    const ScenarioContext ctx = cfg.context();
    BuildOptions opt;
    opt.name = "simulated";
    opt.out_dir = out_root(c);
    opt.workers = cfg.workers;
    const auto ds = build_dataset(ctx, cfg.scenario, count, cfg.seed, opt);
    out << "simulated " << ds.manifest.count() << " maps into " << opt.out_dir.string() << " (manifest "
        << ds.manifest.hash() << ", D = " << ds.manifest.diversity << ")\n";
    return exit_code::ok;
}

int cmd_train(const Common& c, const std::string& data_dir, std::ostream& out) {
    const PipelineConfig cfg = load_config(c);
    const fs::path root = out_root(c);
    Dataset ds;
    if (!data_dir.empty()) {
        ds = load_dataset(data_dir);
    } else {
        BuildOptions opt;
        opt.out_dir = root / "datasets" / "baseline";
        opt.workers = cfg.workers;
        ds = build_dataset(cfg.context(), cfg.scenario, cfg.phase1.count, cfg.seed, opt);
    }
    const auto tc = localizer_train_config(cfg, cfg.train.folds, stable_hash(cfg.seed, 101));
    auto result = train_localizer(ds.maps, ds.truths, cfg.preprocess, tc,
                                  {{"name", ds.manifest.name}, {"hash", ds.manifest.hash()}});
    json folds = json::array();
    for (auto& f : result.folds) {
        const auto stem = root / "models" / "train" / ("fold_" + std::to_string(f.fold));
        save_localizer(stem, f.model);
        folds.push_back({{"fold", f.fold},
                         {"model", fs::relative(stem, root).string()},
                         {"final_train_loss", f.history.train.empty() ? 0.0 : f.history.train.back()},
                         {"cnn", to_json(f.cnn)},
                         {"argmax", to_json(f.argmax)},
                         {"cfar", to_json(f.cfar)}});
        out << "fold " << f.fold << ": cnn MAE (" << f.cnn.error.mae_range << ", " << f.cnn.error.mae_doppler << "), argmax MAE ("
            << f.argmax.error.mae_range << ", " << f.argmax.error.mae_doppler << ")\n";
    }
    const json report{{"config", to_json(cfg)},
                      {"dataset", {{"name", ds.manifest.name}, {"hash", ds.manifest.hash()}}},
                      {"assignment_hash", result.assignment_hash},
                      {"folds", folds}};
    fs::create_directories(root / "reports");
    write_text(root / "reports" / "train.json", report.dump(2));
    write_text(root / "reports" / "train.csv", report_csv(report));
    return exit_code::ok;
}

int cmd_eval(const Common& c, const std::string& model_stem, const std::string& data_dir, const std::string& report_path,
             std::ostream& out) {
    const PipelineConfig cfg = load_config(c);
    auto model = load_localizer(model_stem);
    const auto ds = load_dataset(data_dir);
    const auto cnn = predict_batch(model, ds.maps);
    Evaluation e;
    e.label = ds.manifest.name;
    e.cnn = evaluate_estimates("cnn", cnn, ds.truths);
    e.argmax = evaluate_estimates("argmax", argmax_all(ds.maps), ds.truths);
    e.cfar = evaluate_cfar(ds.maps, ds.truths, cfg.cfar);
    const json j{{"model", model_stem}, {"dataset", {{"name", ds.manifest.name}, {"hash", ds.manifest.hash()}}},
                 {"evaluation", to_json(e)}};
    if (!report_path.empty()) write_text(report_path, j.dump(2));
    out << j.dump(2) << "\n";
    return exit_code::ok;
}

std::optional<GeneratorBundle> find_generator(const PipelineConfig& cfg, const fs::path& root, const std::string& dir) {
    if (!dir.empty()) return load_bundle(dir);
    if (cfg.phase3.use_generator && fs::exists(root / "gan")) return load_bundle(root / "gan");
    return std::nullopt;
}

int cmd_phase(const Common& c, int phase, const std::string& generator_dir, std::ostream& out) {
    const PipelineConfig cfg = load_config(c);
    const fs::path root = out_root(c);
    PipelineRun run = make_run(cfg, root);
    if (phase == 1) return phase_exit(run_phase1(run), root, out);
    if (phase == 2) return phase_exit(run_phase2(run), root, out);
    auto gen = find_generator(cfg, root, generator_dir);
    const auto rep = run_phase3(run, gen ? &*gen : nullptr);
    const auto& events = rep.body.at("scan").at("events");
    out << "phase3: " << events.size() << " flagged of " << rep.body.at("scan").at("scanned").get<std::size_t>()
        << " scanned\n";
    return phase_exit(rep, root, out);
}

int cmd_gan_train(const Common& c, std::ostream& out) {
    const PipelineConfig cfg = load_config(c);
    const fs::path root = out_root(c);
    const auto t0 = std::chrono::steady_clock::now();
    const PairSet pairs = gan_pairs(cfg, cfg.gan.pairs, stable_hash(cfg.seed, 400));
    const double t_pairs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    auto result = train_cgan(pairs, cfg.gan.config);
    const double t_train = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() - t_pairs;
    const double l1 = validation_l1(result.bundle, pairs, 9);
    const double dacc = discriminator_accuracy(result.bundle, pairs, 9);
    save_bundle(root / "gan", result.bundle);
    const json report{{"config", to_json(cfg)},
                      {"pairs_hash", pairs.hash()},
                      {"train_pairs", pairs.train.size()},
                      {"val_pairs", pairs.val.size()},
                      {"validation_l1", l1},
                      {"discriminator_accuracy", dacc},
                      {"history",
                       {{"g_loss", result.history.g_loss},
                        {"g_l1", result.history.g_l1},
                        {"d_loss", result.history.d_loss},
                        {"val_l1", result.history.val_l1}}},
                      {"timing_s", {{"pairs", t_pairs}, {"train", t_train}}}};
    fs::create_directories(root / "reports");
    write_text(root / "reports" / "gan.json", report.dump(2));
    out << "gan: validation L1 " << l1 << ", discriminator accuracy " << dacc << " (" << (root / "gan").string()
        << ")\n";
    return exit_code::ok;
}

int cmd_gan_generate(const Common& c, const std::string& bundle_dir, int count, std::ostream& out) {
    const PipelineConfig cfg = load_config(c);
    const fs::path root = out_root(c);
    auto bundle = load_bundle(bundle_dir.empty() ? root / "gan" : fs::path(bundle_dir));
    PipelineConfig pc = cfg;
    pc.gan.pair_spec = bundle.pair_spec;
    const PairSet cond = gan_pairs(pc, std::max(count, 2), stable_hash(cfg.seed, 401));
    const fs::path dir = root / "generated";
    fs::create_directories(dir);
    json items = json::array();
    for (int i = 0; i < count; ++i) {
        const auto g = generate_clutter(bundle, cond.pairs[i].input, stable_hash(cfg.seed, 402 + i));
        const auto name = "clutter_" + std::to_string(i) + ".f32";
        const auto bytes = to_f32_le(std::span<const float>(g.map));
        write_file(dir / name, bytes);
        items.push_back({{"file", name}, {"sha256", sha256_hex(bytes)}, {"latency_ms", g.latency_ms}});
    }
    const json report{{"bundle", bundle.provenance}, {"size", bundle.pair_spec.size}, {"maps", items}};
    write_text(dir / "generated.json", report.dump(2));
    out << "generated " << count << " clutter maps into " << dir.string() << "\n";
    return exit_code::ok;
}

int cmd_report(const std::string& format, const std::string& file, std::ostream& out) {
    json j;
    try {
        j = json::parse(read_text(file));
    } catch (const json::parse_error& e) {
        throw ConfigError("report " + file + ": " + e.what());
    }
    if (format == "csv") out << report_csv(j);
    else out << j.dump(2) << "\n";
    return exit_code::ok;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Radar digital-twin pipeline: simulation, CNN localisation, phased validation", "detwin"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_help_flag();
    app.set_help_all_flag("-h,--help", "Print help for every subcommand and exit");

    Common c;
    app.add_option("--config", c.config_path, "JSON pipeline config (missing keys keep defaults)")->check(CLI::ExistingFile);
    app.add_option("--set", c.overrides, "Override a config key: dotted.key=value (repeatable)");
    app.add_option("--seed", c.seed, "Master seed");
    app.add_option("--workers", c.workers, "Worker threads")->check(CLI::PositiveNumber);
    app.add_option("--out", c.out, std::string("Output root (default $") + kOutEnv + " or ./detwin_out)");

    std::size_t count = 0;
    auto* sim = app.add_subcommand("simulate", "Simulate RD maps with truth labels and a manifest into <out>");
    sim->add_option("--count", count, "Number of maps")->required();

    std::string data_dir;
    auto* train = app.add_subcommand("train", "Train k-fold CNN localisers");
    train->add_option("--data", data_dir, "Dataset directory (default: build the baseline set)");

    std::string model_stem;
    std::string eval_report;
    std::string eval_data;
    auto* eval = app.add_subcommand("eval", "Evaluate a saved CNN against ArgMax and CFAR");
    eval->add_option("--model", model_stem, "Model path stem")->required();
    eval->add_option("--data", eval_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--report", eval_report, "Also write the JSON here");

    auto* p1 = app.add_subcommand("phase1", "Baseline validation and gate");
    auto* p2 = app.add_subcommand("phase2", "Excursion, redesign and perturbation checks (needs phase1)");
    std::string generator_dir;
    auto* p3 = app.add_subcommand("phase3", "Black-swan scan (needs phase2)");
    p3->add_option("--generator", generator_dir, "Generator bundle directory")->check(CLI::ExistingDirectory);

    auto* gan = app.add_subcommand("gan", "Terrain-to-clutter GAN");
    gan->require_subcommand(1);
    auto* gan_train = gan->add_subcommand("train", "Build conditioning pairs and train the GAN into <out>/gan");
    std::string bundle_dir;
    int gen_count = 1;
    auto* gan_gen = gan->add_subcommand("generate", "Generate clutter maps into <out>/generated");
    gan_gen->add_option("--bundle", bundle_dir, "Bundle directory (default <out>/gan)")->check(CLI::ExistingDirectory);
    gan_gen->add_option("--count", gen_count, "Number of maps")->check(CLI::PositiveNumber);
    app.footer(
        "gan generate\n"
        "  Options:\n"
        "    --bundle TEXT:DIR           Bundle directory (default <out>/gan)\n"
        "    --count INT:POSITIVE        Number of maps\n\n"
        "Exit codes: 0 success or gate pass, 1 gate fail, 2 usage, config or ordering error, 3 runtime error.");

    std::string format = "csv";
    std::string report_file;
    auto* report = app.add_subcommand("report", "Convert a report JSON");
    report->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    report->add_option("file", report_file, "Report JSON")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_code::ok : exit_code::usage;
    }

    try {
        if (sim->parsed()) return cmd_simulate(c, count, out);
        if (train->parsed()) return cmd_train(c, data_dir, out);
        if (eval->parsed()) return cmd_eval(c, model_stem, eval_data, eval_report, out);
        if (p1->parsed()) return cmd_phase(c, 1, "", out);
        if (p2->parsed()) return cmd_phase(c, 2, "", out);
        if (p3->parsed()) return cmd_phase(c, 3, generator_dir, out);
        if (gan_train->parsed()) return cmd_gan_train(c, out);
        if (gan_gen->parsed()) return cmd_gan_generate(c, bundle_dir, gen_count, out);
        if (report->parsed()) return cmd_report(format, report_file, out);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return exit_code::usage;
    } catch (const StateError& e) {
        err << "error: " << e.what() << "\n";
        return exit_code::usage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code::runtime;
    }
    return exit_code::usage;
}

}  // namespace detwin
