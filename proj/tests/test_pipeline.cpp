#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "detwin/pipeline.hpp"

using namespace detwin;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("detwin_pipeline_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

const ScenarioContext& shared_context() {
    static const ScenarioContext ctx = desk_context();
    return ctx;
}

/// Brute-force oracle over all ordered pairs i != j.
double diversity_oracle(const std::vector<std::vector<double>>& v, const std::vector<double>& w) {
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < v.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) {
            if (i == j) continue;
            double d2 = 0.0;
            for (std::size_t k = 0; k < w.size(); ++k) d2 += std::pow((v[i][k] - v[j][k]) / w[k], 2);
            sum += std::sqrt(d2);
            ++pairs;
        }
    return pairs ? sum / static_cast<double>(pairs) : 0.0;
}

/// Small, fast pipeline on the desk scene.
PipelineConfig small_config() {
    PipelineConfig c = default_pipeline_config();
    c.phase1.count = 20;
    c.phase1.min_samples = 5;
    c.phase1.tolerance = 0.5;
    c.phase1.gate_target = 0.0;
    c.train.folds = 2;
    c.train.epochs = 1;
    c.train.batch_size = 8;
    c.phase2.gate_target = 0.0;
    c.phase3.count = 4;
    return c;
}

}  // namespace

TEST_CASE("diversity: identical vectors, pair case, homogeneity and permutation") {
    const std::vector<double> unit(3, 1.0);
    CHECK(diversity({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}}, unit) == 0.0);
    CHECK(diversity({{1, 2, 3}}, unit) == 0.0);
    CHECK(diversity({{0, 0, 0}, {3, 4, 0}}, unit) == doctest::Approx(5.0).epsilon(1e-15));

    Rng rng(5);
    std::vector<std::vector<double>> v(40, std::vector<double>(3));
    for (auto& x : v)
        for (auto& e : x) e = rng.uniform(-2.0, 2.0);
    const double d = diversity(v, unit);
    CHECK(std::abs(d - diversity_oracle(v, unit)) <= 1e-12 * d);

    auto scaled = v;
    for (auto& x : scaled)
        for (auto& e : x) e *= 3.5;
    CHECK(std::abs(diversity(scaled, unit) - 3.5 * d) <= 1e-12 * d);

    auto perm = v;
    std::reverse(perm.begin(), perm.end());
    CHECK(std::abs(diversity(perm, unit) - d) <= 1e-12 * d);

    const std::vector<double> w{2.0, 0.5, 4.0};
    CHECK(std::abs(diversity(v, w) - diversity_oracle(v, w)) <= 1e-12 * d);
}

TEST_CASE("scenario space: expansion is centered, clipped and degenerate widths become 1") {
    ScenarioSpace s;
    const auto e = s.expanded(2.0);
    CHECK(e.rcs_db.lo == doctest::Approx(19.0));
    CHECK(e.rcs_db.hi == doctest::Approx(31.0));
    CHECK(e.heading.lo == 0.0);
    CHECK(e.heading.hi == 360.0);
    CHECK(e.speeds[0] == doctest::Approx(3.5));
    CHECK(e.speeds[1] == doctest::Approx(17.5));
    const auto big = s.expanded(100.0);
    CHECK(big.rcs_db.lo == 0.0);
    CHECK(big.rcs_db.hi == 40.0);
    CHECK(big.lat.lo == 32.50);
    CHECK(big.speeds[0] == 0.0);
    CHECK(big.speeds[1] == 40.0);
    const auto id = s.expanded(1.0);
    CHECK(id.lat.lo == s.lat.lo);
    CHECK(id.lat.hi == s.lat.hi);

    const auto w = s.widths();
    REQUIRE(w.size() == static_cast<std::size_t>(kParamCount));
    CHECK(w[2] == doctest::Approx(7.0));
    CHECK(w[5] == 1.0);

    ScenarioSpace bad;
    bad.rcs_db.lo = 30.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = {};
    bad.speeds.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("build_dataset: files, manifest hash and order independence across worker counts") {
    const auto& ctx = shared_context();
    ScenarioSpace space;
    const auto dir1 = temp_dir("w1");
    const auto dir8 = temp_dir("w8");
    BuildOptions o1;
    o1.out_dir = dir1;
    o1.workers = 1;
    BuildOptions o8 = o1;
    o8.out_dir = dir8;
    o8.workers = 8;
    const auto a = build_dataset(ctx, space, 5, 42, o1);
    const auto b = build_dataset(ctx, space, 5, 42, o8);
    CHECK(a.manifest.count() == 5);
    CHECK(a.manifest.hash() == b.manifest.hash());
    for (std::size_t i = 0; i < 5; ++i) CHECK(a.maps[i].power == b.maps[i].power);

    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(dir1 / "maps"))
        if (e.path().extension() == ".f32") ++files;
    CHECK(files == 5);

    const auto loaded = load_dataset(dir1);
    CHECK(loaded.manifest.hash() == a.manifest.hash());
    for (std::size_t i = 0; i < 5; ++i) CHECK(loaded.maps[i].power == a.maps[i].power);
    CHECK(std::abs(diversity(loaded.manifest.vectors(), loaded.manifest.reference_widths) - a.manifest.diversity) <= 1e-9);

    // Parameters stay inside the space and labels match the stored truths.
    for (const auto& s : a.manifest.samples) {
        CHECK(s.params[0] >= space.lat.lo);
        CHECK(s.params[0] <= space.lat.hi);
        CHECK(s.params[4] >= space.rcs_db.lo);
        CHECK(s.params[4] <= space.rcs_db.hi);
        CHECK(target_truth(ctx.view, ctx.radar, target_from_params(s.params)).range_bin == s.truth.range_bin);
    }

    // A tampered map is caught on load.
    auto bytes = read_file(dir1 / "maps" / "sample_00000.f32");
    bytes[0] ^= 0xff;
    write_file(dir1 / "maps" / "sample_00000.f32", bytes);
    CHECK_THROWS_AS(load_dataset(dir1), IoError);
    CHECK_THROWS_AS(build_dataset(ctx, space, 0, 1), ConfigError);
}

TEST_CASE("build_dataset: a point box gives zero location diversity") {
    const auto& ctx = shared_context();
    ScenarioSpace space;
    space.lat.lo = space.lat.hi = 32.5505;
    space.lon.lo = space.lon.hi = -117.0493;
    const auto d = build_dataset(ctx, space, 6, 3);
    std::vector<std::vector<double>> loc;
    for (const auto& s : d.manifest.samples) {
        CHECK(s.params[0] == 32.5505);
        CHECK(s.params[1] == -117.0493);
        loc.push_back({s.params[0], s.params[1]});
        CHECK(s.truth.range_bin == d.truths[0].range_bin);
    }
    CHECK(diversity(loc, {1.0, 1.0}) == 0.0);
}

TEST_CASE("sample_params: rejection keeps every location inside the range window") {
    const auto& ctx = shared_context();
    const auto wide = ScenarioSpace{}.expanded(6.0);
    for (std::size_t i = 0; i < 50; ++i) {
        const auto p = sample_params(ctx, wide, 9, i);
        CHECK_NOTHROW(target_truth(ctx.view, ctx.radar, target_from_params(p)));
        CHECK(p == sample_params(ctx, wide, 9, i));
    }
    ScenarioSpace outside;
    outside.lat = {32.595, 32.599, 32.50, 32.60};
    outside.max_location_draws = 5;
    CHECK_THROWS_AS(sample_params(ctx, outside, 1, 0), ConfigError);
}

TEST_CASE("scale_excursion: count, diversity bound, parent and clutter scale") {
    const auto& ctx = shared_context();
    const auto ref = build_dataset(ctx, ScenarioSpace{}, 10, 17);
    ExcursionSpec spec;
    spec.kappa1 = 2.0;
    spec.kappa2 = 1.5;
    spec.clutter_delta_db = 6.0;
    BuildOptions o;
    o.name = "excursion";
    const auto ex = scale_excursion(ctx, ref, spec, o);
    CHECK(ex.manifest.count() == 20);
    const double d_r = diversity(ref.manifest.vectors(), ref.manifest.reference_widths);
    CHECK(ex.manifest.diversity >= 1.5 * d_r);
    CHECK(std::abs(diversity(ex.manifest.vectors(), ex.manifest.reference_widths) - ex.manifest.diversity) <= 1e-9);
    CHECK(ex.manifest.parent == ref.manifest.name);
    CHECK(ex.manifest.parent_hash == ref.manifest.hash());
    CHECK(ex.manifest.expansion > 1.0);
    for (const auto& s : ex.manifest.samples) {
        CHECK(s.clutter_scale == doctest::Approx(3.981).epsilon(1e-3));
        CHECK(s.params[5] == 6.0);
    }
}

TEST_CASE("scale_excursion: ceil arithmetic and minimal expansion for kappa2 slightly above 1") {
    const auto& ctx = shared_context();
    const auto ref = build_dataset(ctx, ScenarioSpace{}, 7, 23);
    ExcursionSpec spec;
    spec.kappa1 = 1.5;
    spec.kappa2 = 1.02;
    const auto ex = scale_excursion(ctx, ref, spec);
    CHECK(ex.manifest.count() == 11);
    const double ratio = ex.manifest.diversity / diversity(ref.manifest.vectors(), ref.manifest.reference_widths);
    CHECK(ratio >= 1.02);
    CHECK(ratio <= 1.07);
}

TEST_CASE("scale_excursion: unreachable diversity raises with the achieved value") {
    const auto& ctx = shared_context();
    const auto ref = build_dataset(ctx, ScenarioSpace{}, 6, 29);
    ExcursionSpec spec;
    spec.kappa1 = 2.0;
    spec.kappa2 = 50.0;
    spec.max_expansion = 2.0;
    try {
        scale_excursion(ctx, ref, spec);
        FAIL("expected DiversityError");
    } catch (const DiversityError& e) {
        CHECK(e.achieved() < e.required());
        CHECK(e.achieved() > 0.0);
    }
    spec.kappa1 = 0.5;
    CHECK_THROWS_AS(scale_excursion(ctx, ref, spec), ConfigError);
}

TEST_CASE("config: JSON round trip, unknown keys and overrides") {
    const auto c = default_pipeline_config();
    const auto j = to_json(c);
    CHECK(to_json(pipeline_config_from_json(j)) == j);
    CHECK(to_json(pipeline_config_from_json(nlohmann::json::object())) == j);

    auto bad = j;
    bad["phase1"]["gate"] = 1;
    CHECK_THROWS_AS(pipeline_config_from_json(bad), ConfigError);
    bad = j;
    bad["nonsense"] = true;
    CHECK_THROWS_AS(pipeline_config_from_json(bad), ConfigError);
    bad = j;
    bad["train"]["epochs"] = "many";
    CHECK_THROWS_AS(pipeline_config_from_json(bad), ConfigError);
    bad = j;
    bad["train"]["folds"] = 0;
    CHECK_THROWS_AS(pipeline_config_from_json(bad), ConfigError);

    nlohmann::json o = nlohmann::json::object();
    apply_override(o, "phase2.excursion.kappa1=3");
    apply_override(o, "phase3.anomalies=[\"doppler_streak\"]");
    apply_override(o, "radar.n_horizontal=20");
    const auto c2 = pipeline_config_from_json(o);
    CHECK(c2.phase2.excursion.kappa1 == 3.0);
    CHECK(c2.phase3.anomalies == std::vector<std::string>{"doppler_streak"});
    CHECK(c2.radar.n_horizontal == 20);
    CHECK_THROWS_AS(apply_override(o, "novalue"), ConfigError);
    apply_override(o, "phase3.anomalies=[\"bogus\"]");
    CHECK_THROWS_AS(pipeline_config_from_json(o), ConfigError);
}

TEST_CASE("ScenarioContext copies rebind the view to their own scene") {
    const auto& ctx = shared_context();
    ScenarioContext copy = ctx;
    CHECK(copy.view.scene == &copy.scene);
    ScenarioContext assigned;
    assigned = ctx;
    CHECK(assigned.view.scene == &assigned.scene);
    CHECK(copy.hash() == ctx.hash());
}

TEST_CASE("phase ordering: phase2 needs a passed phase1 report") {
    auto cfg = small_config();
    const auto out = temp_dir("order");
    auto run = make_run(cfg, out);
    try {
        run_phase2(run);
        FAIL("expected StateError");
    } catch (const StateError& e) {
        CHECK(std::string(e.what()).find("phase1 report not found") != std::string::npos);
    }
    PhaseReport failed;
    failed.phase = 1;
    failed.pass = false;
    failed.outcome = "gate_fail";
    run.phase1 = failed;
    CHECK_THROWS_AS(run_phase2(run), StateError);
    auto run3 = make_run(cfg, temp_dir("order3"));
    CHECK_THROWS_AS(run_phase3(run3, nullptr), StateError);
}

TEST_CASE("phase1: forced non-convergence reports budget_exceeded") {
    auto cfg = small_config();
    cfg.phase1.budget = 10;
    cfg.phase1.tolerance = 1e-6;
    auto run = make_run(cfg, {});
    const auto rep = run_phase1(run);
    CHECK(rep.outcome == "budget_exceeded");
    CHECK_FALSE(rep.pass);
    CHECK(rep.body.at("convergence").at("state").at("n").get<std::size_t>() == 10);
    CHECK_FALSE(rep.body.at("recommendations").empty());
    CHECK(rep.body.at("pooled").contains("argmax"));
    CHECK(rep.body.at("pooled").contains("cfar"));
}

TEST_CASE("phase1: a trivially easy scenario passes with near-zero error") {
    auto cfg = small_config();
    cfg.radar.noise_power = 0.0;
    cfg.radar.clutter_scale = 0.0;
    cfg.scenario.lat.lo = cfg.scenario.lat.hi = 32.5505;
    cfg.scenario.lon.lo = cfg.scenario.lon.hi = -117.0493;
    cfg.scenario.speeds = {7.0};
    cfg.scenario.heading.lo = cfg.scenario.heading.hi = 90.0;
    cfg.scenario.rcs_db.lo = cfg.scenario.rcs_db.hi = 40.0;
    cfg.phase1.gate_target = 0.8;
    cfg.phase1.tolerance = 0.2;
    cfg.train.epochs = 40;
    cfg.train.lr = 3e-4;
    cfg.train.augment = false;
    auto run = make_run(cfg, {});
    const auto rep = run_phase1(run);
    CHECK(rep.outcome == "pass");
    CHECK(rep.pass);
    const auto& pooled = rep.body.at("pooled");
    CHECK(pooled.at("argmax").at("mae_range").get<double>() <= 0.5);
    CHECK(pooled.at("argmax").at("mae_doppler").get<double>() <= 0.5);
    CHECK(pooled.at("cnn").at("mae_range").get<double>() <= 1.0);
    CHECK(pooled.at("cnn").at("mae_doppler").get<double>() <= 1.0);
}

TEST_CASE("phase2: identity excursion reproduces phase1 metrics after a reload from disk") {
    auto cfg = small_config();
    cfg.phase2.excursion = {1.0, 1.0, 0.0, 8.0, 30};
    cfg.phase2.redesign_horizontal = cfg.radar.n_horizontal;
    cfg.phase2.redesign_vertical = cfg.radar.n_vertical;
    const auto out = temp_dir("identity");
    {
        auto run = make_run(cfg, out);
        const auto p1 = run_phase1(run);
        REQUIRE(p1.pass);
    }
    CHECK(fs::exists(out / "reports" / "phase1.json"));
    CHECK(fs::exists(out / "reports" / "phase1.csv"));
    CHECK(fs::exists(out / "reports" / "phase1_loss.csv"));

    auto run = make_run(cfg, out);
    const auto p2 = run_phase2(run);
    const auto p1 = read_phase_report(out, 1);
    const auto& a = p2.body.at("evaluations").at(0);
    CHECK(a.at("label") == "a_phase1_models_on_excursion");
    CHECK(a.at("cnn") == p1.body.at("pooled").at("cnn"));
    CHECK(a.at("argmax") == p1.body.at("pooled").at("argmax"));
    CHECK(p2.body.at("datasets").at("excursion").at("count") == 20);
    CHECK(p2.body.at("excursion").at("expansion") == 1.0);
    CHECK(p2.body.at("evaluations").size() == 4);
    CHECK(fs::exists(out / "reports" / "phase2.json"));

    // Phase III from the stored artifacts; threshold 0 flags every admissible sample.
    cfg.phase3.threshold = 0.0;
    auto run3 = make_run(cfg, out);
    const auto p3 = run_phase3(run3, nullptr);
    CHECK(p3.outcome == "non_gating");
    const auto& scan = p3.body.at("scan");
    CHECK(scan.at("scanned") == 4);
    CHECK(scan.at("flagged").get<std::size_t>() + scan.at("rejected").get<std::size_t>() == 4);

    // Every event regenerates its map from the recorded seed.
    ScanInputs in;
    in.data = &*run3.redesign;
    in.indices.assign(run3.phase2_val.begin(), run3.phase2_val.end());
    in.model = &*run3.phase2_model;
    ScenarioContext ctx = run3.context;
    in.context = &ctx;
    for (const auto& e : scan.at("events")) {
        const auto map = scan_sample(in, cfg.phase3, e.at("index").get<std::size_t>());
        CHECK(map.content_hash() == e.at("map_sha256").get<std::string>());
    }
}

TEST_CASE("report_csv: metric rows carry the JSON values") {
    MetricReport r = make_report("cnn", std::vector<Estimate>{{1.2, 3.0, 0.0}, {5.0, 5.0, 0.0}},
                                 std::vector<BinTruth>{{1, 3}, {2, 5}});
    MetricReport am = r;
    am.algorithm = "argmax";
    PhaseReport p;
    p.phase = 1;
    p.body = {{"pooled", to_json(Evaluation{"pooled", r, am, std::nullopt})}};
    const auto csv = report_csv(p.to_json());
    CHECK(csv.rfind(metrics_csv_header(), 0) == 0);
    CHECK(csv.find("\npooled,cnn,2,") != std::string::npos);
    CHECK(csv.find("\npooled,argmax,2,") != std::string::npos);
    CHECK(csv.find(metrics_csv_row(r, "pooled")) != std::string::npos);
}
