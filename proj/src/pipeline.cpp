#include "detwin/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

namespace detwin {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Strict object reader: every key must be claimed before finish().
class Fields {
public:
    Fields(const json& j, std::string what) : j_(j), what_(std::move(what)) {
        if (!j.is_object()) throw ConfigError(what_ + ": expected an object");
    }
    template <typename T>
    void get(const char* key, T& out) {
        known_.insert(key);
        if (j_.contains(key)) out = j_.at(key).get<T>();
    }
    const json* sub(const char* key) {
        known_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!known_.count(it.key())) throw ConfigError(what_ + ": unknown key '" + it.key() + "'");
    }

private:
    const json& j_;
    std::string what_;
    std::set<std::string> known_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string stem_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%05zu", i);
    return buf;
}

/// Stored maps are float32; in-memory copies are rounded the same way so a
/// reloaded dataset evaluates bit-identically.
void round_to_f32(RDMap& m) {
    for (auto& v : m.power) v = static_cast<double>(static_cast<float>(v));
}

std::string model_hash(Localizer& m) { return sha256_hex(nn::serialize_model(m.net)); }

json terrain_json(const TerrainSpec& t) {
    return {{"rows", t.rows},
            {"cols", t.cols},
            {"cell_size", t.cell_size},
            {"relief", t.relief},
            {"base_elevation", t.base_elevation},
            {"octaves", t.octaves},
            {"feature_cells", t.feature_cells},
            {"water_level", t.water_level},
            {"urban_moisture", t.urban_moisture},
            {"forest_moisture", t.forest_moisture}};
}

TerrainSpec terrain_from_json(const json& j, TerrainSpec t) {
    Fields f(j, "terrain");
    f.get("rows", t.rows);
    f.get("cols", t.cols);
    f.get("cell_size", t.cell_size);
    f.get("relief", t.relief);
    f.get("base_elevation", t.base_elevation);
    f.get("octaves", t.octaves);
    f.get("feature_cells", t.feature_cells);
    f.get("water_level", t.water_level);
    f.get("urban_moisture", t.urban_moisture);
    f.get("forest_moisture", t.forest_moisture);
    f.finish();
    return t;
}

json platform_json(const PlatformState& p) {
    return {{"lat", p.lat}, {"lon", p.lon}, {"height_agl", p.height_agl}, {"speed", p.speed}, {"heading_deg", p.heading_deg}};
}

PlatformState platform_from_json(const json& j, PlatformState p) {
    Fields f(j, "platform");
    f.get("lat", p.lat);
    f.get("lon", p.lon);
    f.get("height_agl", p.height_agl);
    f.get("speed", p.speed);
    f.get("heading_deg", p.heading_deg);
    f.finish();
    return p;
}

json to_json(const ParamRange& r) {
    return {{"lo", r.lo}, {"hi", r.hi}, {"limit_lo", r.limit_lo}, {"limit_hi", r.limit_hi}};
}

ParamRange range_from_json(const json& j, ParamRange r, const std::string& what) {
    Fields f(j, what);
    f.get("lo", r.lo);
    f.get("hi", r.hi);
    f.get("limit_lo", r.limit_lo);
    f.get("limit_hi", r.limit_hi);
    f.finish();
    return r;
}

void check_range(const ParamRange& r, const char* name) {
    if (!std::isfinite(r.lo) || !std::isfinite(r.hi) || !std::isfinite(r.limit_lo) || !std::isfinite(r.limit_hi))
        throw ConfigError(std::string("scenario: non-finite ") + name + " range");
    if (r.lo > r.hi) throw ConfigError(std::string("scenario: ") + name + " lo > hi");
    if (r.lo < r.limit_lo || r.hi > r.limit_hi)
        throw ConfigError(std::string("scenario: ") + name + " range outside its limits");
}

ParamRange widen(const ParamRange& r, double factor) {
    const double c = 0.5 * (r.lo + r.hi);
    const double h = 0.5 * r.width() * factor;
    ParamRange out = r;
    out.lo = std::max(r.limit_lo, c - h);
    out.hi = std::min(r.limit_hi, c + h);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Scenario space

void ScenarioSpace::validate() const {
    check_range(lat, "lat");
    check_range(lon, "lon");
    check_range(heading, "heading");
    check_range(rcs_db, "rcs_db");
    if (speeds.empty()) throw ConfigError("scenario: speed set is empty");
    if (!(speed_limit > 0.0)) throw ConfigError("scenario: speed_limit must be > 0");
    for (double s : speeds)
        if (!(s >= 0.0 && s <= speed_limit)) throw ConfigError("scenario: speed outside [0, speed_limit]");
    if (!std::isfinite(clutter_db)) throw ConfigError("scenario: clutter_db must be finite");
    if (max_location_draws < 1) throw ConfigError("scenario: max_location_draws must be >= 1");
}

ScenarioSpace ScenarioSpace::expanded(double factor) const {
    if (!(factor > 0.0) || !std::isfinite(factor)) throw ConfigError("scenario: expansion factor must be > 0");
    ScenarioSpace s = *this;
    s.lat = widen(lat, factor);
    s.lon = widen(lon, factor);
    s.heading = widen(heading, factor);
    s.rcs_db = widen(rcs_db, factor);
    const auto [mn, mx] = std::minmax_element(speeds.begin(), speeds.end());
    const double mid = 0.5 * (*mn + *mx);
    for (auto& v : s.speeds) v = std::clamp(mid + factor * (v - mid), 0.0, speed_limit);
    return s;
}

std::vector<double> ScenarioSpace::widths() const {
    const auto [mn, mx] = std::minmax_element(speeds.begin(), speeds.end());
    std::vector<double> w{lat.width(), lon.width(), *mx - *mn, heading.width(), rcs_db.width(), 0.0};
    for (auto& v : w)
        if (!(v > 0.0)) v = 1.0;
    return w;
}

const std::vector<std::string>& param_names() {
    static const std::vector<std::string> names{"lat", "lon", "speed", "heading_deg", "rcs_db", "clutter_db"};
    return names;
}

json to_json(const ScenarioSpace& s) {
    return {{"lat", to_json(s.lat)},
            {"lon", to_json(s.lon)},
            {"speeds", s.speeds},
            {"speed_limit", s.speed_limit},
            {"heading", to_json(s.heading)},
            {"rcs_db", to_json(s.rcs_db)},
            {"clutter_db", s.clutter_db},
            {"max_location_draws", s.max_location_draws}};
}

ScenarioSpace scenario_from_json(const json& j, const ScenarioSpace& base) {
    ScenarioSpace s = base;
    Fields f(j, "scenario");
    if (auto* v = f.sub("lat")) s.lat = range_from_json(*v, s.lat, "scenario.lat");
    if (auto* v = f.sub("lon")) s.lon = range_from_json(*v, s.lon, "scenario.lon");
    if (auto* v = f.sub("heading")) s.heading = range_from_json(*v, s.heading, "scenario.heading");
    if (auto* v = f.sub("rcs_db")) s.rcs_db = range_from_json(*v, s.rcs_db, "scenario.rcs_db");
    f.get("speeds", s.speeds);
    f.get("speed_limit", s.speed_limit);
    f.get("clutter_db", s.clutter_db);
    f.get("max_location_draws", s.max_location_draws);
    f.finish();
    s.validate();
    return s;
}

double diversity(const std::vector<std::vector<double>>& vectors, const std::vector<double>& widths) {
    const std::size_t n = vectors.size();
    if (n < 2) return 0.0;
    const std::size_t dim = widths.size();
    std::vector<double> z(n * dim);
    for (std::size_t i = 0; i < n; ++i) {
        if (vectors[i].size() != dim) throw ConfigError("diversity: vector length differs from widths");
        for (std::size_t k = 0; k < dim; ++k) {
            if (!(widths[k] > 0.0)) throw ConfigError("diversity: widths must be > 0");
            z[i * dim + k] = vectors[i][k] / widths[k];
        }
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double d = z[i * dim + k] - z[j * dim + k];
                d2 += d * d;
            }
            sum += std::sqrt(d2);
        }
    return sum / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

// ---------------------------------------------------------------------------
// Scenario context

ScenarioContext::ScenarioContext(const ScenarioContext& o)
    : terrain(o.terrain), terrain_seed(o.terrain_seed), platform(o.platform), radar(o.radar), scene(o.scene),
      view(o.view) {
    if (o.view.scene) view.scene = &scene;
}

ScenarioContext& ScenarioContext::operator=(const ScenarioContext& o) {
    if (this == &o) return *this;
    terrain = o.terrain;
    terrain_seed = o.terrain_seed;
    platform = o.platform;
    radar = o.radar;
    scene = o.scene;
    view = o.view;
    if (o.view.scene) view.scene = &scene;
    return *this;
}

void ScenarioContext::build() {
    terrain.validate();
    platform.validate();
    radar.validate();
    scene = generate_terrain(terrain_seed, terrain);
    view = view_scene(scene, platform, radar.terrain_shadowing);
}

json ScenarioContext::to_json() const {
    return {{"terrain", terrain_json(terrain)},
            {"terrain_seed", terrain_seed},
            {"platform", platform_json(platform)},
            {"radar", detwin::to_json(radar)}};
}

std::string ScenarioContext::hash() const { return sha256_hex(to_json().dump()); }

ScenarioContext desk_context() { return default_pipeline_config().context(); }

// ---------------------------------------------------------------------------
// Datasets

std::vector<std::vector<double>> DatasetManifest::vectors() const {
    std::vector<std::vector<double>> v;
    v.reserve(samples.size());
    for (const auto& s : samples) v.push_back(s.params);
    return v;
}

std::string DatasetManifest::hash() const { return sha256_hex(detwin::to_json(*this).dump()); }

json to_json(const DatasetManifest& m) {
    json samples = json::array();
    for (const auto& s : m.samples)
        samples.push_back({{"stem", s.stem},
                           {"sha256", s.map_sha256},
                           {"seed", s.seed},
                           {"params", s.params},
                           {"clutter_scale", s.clutter_scale},
                           {"truth", to_json(s.truth)}});
    return {{"name", m.name},
            {"count", m.samples.size()},
            {"master_seed", m.master_seed},
            {"scenario_space", to_json(m.space)},
            {"param_names", param_names()},
            {"reference_widths", m.reference_widths},
            {"diversity", m.diversity},
            {"expansion", m.expansion},
            {"parent", m.parent},
            {"parent_hash", m.parent_hash},
            {"context_hash", m.context_hash},
            {"radar", m.radar},
            {"samples", samples}};
}

DatasetManifest manifest_from_json(const json& j) {
    DatasetManifest m;
    try {
        m.name = j.at("name").get<std::string>();
        m.master_seed = j.at("master_seed").get<std::uint64_t>();
        m.space = scenario_from_json(j.at("scenario_space"));
        m.reference_widths = j.at("reference_widths").get<std::vector<double>>();
        m.diversity = j.at("diversity").get<double>();
        m.expansion = j.at("expansion").get<double>();
        m.parent = j.at("parent").get<std::string>();
        m.parent_hash = j.at("parent_hash").get<std::string>();
        m.context_hash = j.at("context_hash").get<std::string>();
        m.radar = j.at("radar");
        for (const auto& s : j.at("samples")) {
            SampleRecord r;
            r.stem = s.at("stem").get<std::string>();
            r.map_sha256 = s.at("sha256").get<std::string>();
            r.seed = s.at("seed").get<std::uint64_t>();
            r.params = s.at("params").get<std::vector<double>>();
            r.clutter_scale = s.at("clutter_scale").get<double>();
            r.truth = truth_from_json(s.at("truth"));
            m.samples.push_back(std::move(r));
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("dataset manifest: ") + e.what());
    }
    if (j.contains("count") && j.at("count").get<std::size_t>() != m.samples.size())
        throw ConfigError("dataset manifest: count does not match the sample list");
    return m;
}

std::vector<double> sample_params(const ScenarioContext& ctx, const ScenarioSpace& space, std::uint64_t master_seed,
                                  std::size_t index) {
    Rng rng(stable_hash(master_seed, 2 * static_cast<std::uint64_t>(index)));
    TargetSpec probe;
    bool placed = false;
    for (int draw = 0; draw < space.max_location_draws && !placed; ++draw) {
        probe.lat = rng.uniform(space.lat.lo, space.lat.hi);
        probe.lon = rng.uniform(space.lon.lo, space.lon.hi);
        try {
            target_truth(ctx.view, ctx.radar, probe);
            placed = true;
        } catch (const ConfigError&) {
        }
    }
    if (!placed)
        throw ConfigError("sample " + std::to_string(index) + ": no target location inside the scene and range window after " +
                          std::to_string(space.max_location_draws) + " draws");
    const double speed = space.speeds[rng.below(space.speeds.size())];
    const double heading = rng.uniform(space.heading.lo, space.heading.hi);
    const double rcs_db = rng.uniform(space.rcs_db.lo, space.rcs_db.hi);
    return {probe.lat, probe.lon, speed, heading, rcs_db, space.clutter_db};
}

TargetSpec target_from_params(const std::vector<double>& p) {
    if (p.size() != static_cast<std::size_t>(kParamCount)) throw ConfigError("target parameters: expected 6 values");
    TargetSpec t;
    t.lat = p[0];
    t.lon = p[1];
    t.ground_speed = p[2];
    t.heading_deg = p[3];
    t.rcs = std::pow(10.0, p[4] / 10.0);
    return t;
}

namespace {

std::uint64_t sim_seed(std::uint64_t master, std::size_t index) {
    return stable_hash(master, 2 * static_cast<std::uint64_t>(index) + 1);
}

struct Simulated {
    SampleRecord record;
    RDMap map;
};

Simulated simulate_sample(const ScenarioContext& ctx, const RadarConfig& radar, const ScenarioSpace& space,
                          std::uint64_t master, std::size_t index) {
    Simulated s;
    s.record.stem = stem_name(index);
    s.record.seed = sim_seed(master, index);
    s.record.params = sample_params(ctx, space, master, index);
    s.record.clutter_scale = radar.clutter_scale;
    auto res = simulate_rd_map(ctx.view, radar, target_from_params(s.record.params), s.record.seed);
    round_to_f32(res.map);
    s.record.map_sha256 = res.map.content_hash();
    s.record.truth = res.truth;
    s.map = std::move(res.map);
    return s;
}

struct Lineage {
    double expansion = 1.0;
    std::string parent;
    std::string parent_hash;
};

Dataset build_impl(const ScenarioContext& ctx, const ScenarioSpace& space, std::size_t n, std::uint64_t master_seed,
                   const BuildOptions& options, const Lineage& lineage) {
    space.validate();
    if (n < 1) throw ConfigError("dataset: N must be >= 1");
    if (!ctx.view.scene) throw StateError("dataset: scenario context not built");
    const RadarConfig radar = perturb_clutter(ctx.radar, space.clutter_db);

    Dataset ds;
    ds.maps.resize(n);
    ds.truths.resize(n);
    ds.manifest.samples.resize(n);
    if (!options.out_dir.empty()) fs::create_directories(options.out_dir / "maps");
    parallel_for(n, options.workers, [&](std::size_t i) {
        auto s = simulate_sample(ctx, radar, space, master_seed, i);
        if (!options.out_dir.empty()) write_rd_map(options.out_dir / "maps" / s.record.stem, s.map, radar, s.record.truth);
        ds.truths[i] = s.record.truth;
        ds.maps[i] = std::move(s.map);
        ds.manifest.samples[i] = std::move(s.record);
    });

    auto& m = ds.manifest;
    m.name = options.name;
    m.master_seed = master_seed;
    m.space = space;
    m.reference_widths = options.reference_widths.empty() ? space.widths() : options.reference_widths;
    m.diversity = diversity(m.vectors(), m.reference_widths);
    m.expansion = lineage.expansion;
    m.parent = lineage.parent;
    m.parent_hash = lineage.parent_hash;
    m.context_hash = ctx.hash();
    m.radar = to_json(radar);
    if (!options.out_dir.empty()) write_text(options.out_dir / "manifest.json", to_json(m).dump(1));
    return ds;
}

}  // namespace

Dataset build_dataset(const ScenarioContext& ctx, const ScenarioSpace& space, std::size_t n, std::uint64_t master_seed,
                      const BuildOptions& options) {
    return build_impl(ctx, space, n, master_seed, options, {});
}

Dataset load_dataset(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json")) throw IoError("dataset not found: " + dir.string());
    Dataset ds;
    ds.manifest = manifest_from_json(json::parse(read_text(dir / "manifest.json")));
    for (const auto& s : ds.manifest.samples) {
        auto loaded = read_rd_map(dir / "maps" / s.stem);
        if (loaded.map.content_hash() != s.map_sha256) throw IoError("dataset: hash mismatch for " + s.stem);
        ds.maps.push_back(std::move(loaded.map));
        ds.truths.push_back(s.truth);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Excursions

void ExcursionSpec::validate() const {
    if (!(kappa1 >= 1.0) || !std::isfinite(kappa1)) throw ConfigError("excursion: kappa1 must be >= 1");
    if (!(kappa2 >= 1.0) || !std::isfinite(kappa2)) throw ConfigError("excursion: kappa2 must be >= 1");
    if (!std::isfinite(clutter_delta_db)) throw ConfigError("excursion: clutter_delta_db must be finite");
    if (!(max_expansion >= 1.0)) throw ConfigError("excursion: max_expansion must be >= 1");
    if (bisection_steps < 1) throw ConfigError("excursion: bisection_steps must be >= 1");
}

json to_json(const ExcursionSpec& e) {
    return {{"kappa1", e.kappa1},
            {"kappa2", e.kappa2},
            {"clutter_delta_db", e.clutter_delta_db},
            {"max_expansion", e.max_expansion},
            {"bisection_steps", e.bisection_steps}};
}

Dataset scale_excursion(const ScenarioContext& ctx, const Dataset& reference, const ExcursionSpec& spec,
                        const BuildOptions& options) {
    spec.validate();
    const auto& ref = reference.manifest;
    const std::size_t n_r = ref.count();
    if (n_r < 1) throw ConfigError("excursion: empty reference dataset");
    const auto n_s = static_cast<std::size_t>(std::ceil(spec.kappa1 * static_cast<double>(n_r) - 1e-9));
    const auto widths = ref.reference_widths.empty() ? ref.space.widths() : ref.reference_widths;
    const double d_r = diversity(ref.vectors(), widths);
    const double required = spec.kappa2 * d_r;

    auto space_at = [&](double f) {
        ScenarioSpace s = ref.space.expanded(f);
        s.clutter_db = ref.space.clutter_db + spec.clutter_delta_db;
        return s;
    };
    auto diversity_at = [&](double f) {
        const ScenarioSpace s = space_at(f);
        std::vector<std::vector<double>> v(n_s);
        parallel_for(n_s, options.workers, [&](std::size_t i) { v[i] = sample_params(ctx, s, ref.master_seed, i); });
        return diversity(v, widths);
    };

    double f = 1.0;
    if (diversity_at(1.0) < required) {
        const double d_max = diversity_at(spec.max_expansion);
        if (d_max < required) {
            std::ostringstream os;
            os << "unsatisfiable diversity: achieved D = " << d_max << " at expansion " << spec.max_expansion
               << ", required " << required << " (" << spec.kappa2 << " x " << d_r << ")";
            throw DiversityError(os.str(), d_max, required);
        }
        double lo = 1.0, hi = spec.max_expansion;
        for (int s = 0; s < spec.bisection_steps; ++s) {
            const double mid = 0.5 * (lo + hi);
            (diversity_at(mid) >= required ? hi : lo) = mid;
        }
        f = hi;
    }

    BuildOptions opts = options;
    opts.reference_widths = widths;
    return build_impl(ctx, space_at(f), n_s, ref.master_seed, opts, {f, ref.name, ref.hash()});
}

// ---------------------------------------------------------------------------
// Configuration

void PipelineConfig::validate() const {
    if (workers < 1) throw ConfigError("workers must be >= 1");
    terrain.validate();
    platform.validate();
    radar.validate();
    scenario.validate();
    preprocess.validate();
    cfar.validate();
    if (preprocess.map_range != radar.n_range_bins || preprocess.map_doppler != radar.n_pulses)
        throw ConfigError("preprocess map size does not match the radar's range bins and pulses");
    if (train.folds < 1) throw ConfigError("train.folds must be >= 1");
    if (train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(train.lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
    if (phase1.count < static_cast<std::size_t>(std::max(train.folds, 2)))
        throw ConfigError("phase1.count must be at least the fold count");
    if (!(phase1.gate_target >= 0.0 && phase1.gate_target <= 1.0)) throw ConfigError("phase1.gate_target must be in [0, 1]");
    if (!(phase1.tolerance > 0.0)) throw ConfigError("phase1.tolerance must be > 0");
    if (phase1.min_samples < 2) throw ConfigError("phase1.min_samples must be >= 2");
    phase2.excursion.validate();
    if (phase2.redesign_horizontal < 1 || phase2.redesign_vertical < 1)
        throw ConfigError("phase2 redesign array sizes must be >= 1");
    if (!(phase2.redesign_tx_factor > 0.0)) throw ConfigError("phase2.redesign_tx_factor must be > 0");
    if (phase2.folds < 1) throw ConfigError("phase2.folds must be >= 1");
    if (!(phase2.gate_target >= 0.0 && phase2.gate_target <= 1.0)) throw ConfigError("phase2.gate_target must be in [0, 1]");
    if (!(phase2.recovery_factor >= 1.0)) throw ConfigError("phase2.recovery_factor must be >= 1");
    if (!(phase3.threshold >= 0.0)) throw ConfigError("phase3.threshold must be >= 0");
    if (phase3.anomalies.empty()) throw ConfigError("phase3.anomalies must not be empty");
    for (const auto& a : phase3.anomalies) anomaly_from_name(a);
    if (phase3.swarm_count < 0 || phase3.swarm_extent < 0) throw ConfigError("phase3 swarm sizes must be >= 0");
    if (!(phase3.swarm_amplitude_rel >= 0.0)) throw ConfigError("phase3.swarm_amplitude_rel must be >= 0");
    if (!(phase3.noise_scale_factor > 0.0)) throw ConfigError("phase3.noise_scale_factor must be > 0");
    if (gan.pairs < 2) throw ConfigError("gan.pairs must be >= 2");
    if (gan.scenes < 1) throw ConfigError("gan.scenes must be >= 1");
    if (gan.scene_cells < 8) throw ConfigError("gan.scene_cells must be >= 8");
    if (!(gan.feature_cells > 0.0)) throw ConfigError("gan.feature_cells must be > 0");
    gan.config.validate();
    gan.pair_spec.validate();
}

ScenarioContext PipelineConfig::context() const {
    ScenarioContext c;
    c.terrain = terrain;
    c.terrain_seed = terrain_seed;
    c.platform = platform;
    c.radar = radar;
    c.build();
    return c;
}

PipelineConfig default_pipeline_config() {
    PipelineConfig c;
    c.terrain.rows = 340;
    c.terrain.cols = 340;
    c.terrain.cell_size = 30.0;
    c.terrain.feature_cells = 64.0;
    c.radar = RadarConfig::desk_scale();
    c.radar.noise_power = 1e-17;
    c.preprocess.map_range = c.radar.n_range_bins;
    c.preprocess.map_doppler = c.radar.n_pulses;
    c.gan.pair_spec.min_ground_range = 200.0;
    c.gan.pair_spec.max_ground_range = 2500.0;
    return c;
}

json to_json(const PipelineConfig& c) {
    return {{"seed", c.seed},
            {"workers", c.workers},
            {"terrain", terrain_json(c.terrain)},
            {"terrain_seed", c.terrain_seed},
            {"platform", platform_json(c.platform)},
            {"radar", to_json(c.radar)},
            {"scenario", to_json(c.scenario)},
            {"preprocess", to_json(c.preprocess)},
            {"cfar", to_json(c.cfar)},
            {"train",
             {{"folds", c.train.folds},
              {"epochs", c.train.epochs},
              {"batch_size", c.train.batch_size},
              {"lr", c.train.lr},
              {"augment", c.train.augment}}},
            {"phase1",
             {{"count", c.phase1.count},
              {"gate_target", c.phase1.gate_target},
              {"tolerance", c.phase1.tolerance},
              {"min_samples", c.phase1.min_samples},
              {"budget", c.phase1.budget}}},
            {"phase2",
             {{"excursion", to_json(c.phase2.excursion)},
              {"redesign_horizontal", c.phase2.redesign_horizontal},
              {"redesign_vertical", c.phase2.redesign_vertical},
              {"redesign_tx_factor", c.phase2.redesign_tx_factor},
              {"folds", c.phase2.folds},
              {"gate_target", c.phase2.gate_target},
              {"recovery_factor", c.phase2.recovery_factor}}},
            {"phase3",
             {{"count", c.phase3.count},
              {"threshold", c.phase3.threshold},
              {"anomalies", c.phase3.anomalies},
              {"swarm_count", c.phase3.swarm_count},
              {"swarm_extent", c.phase3.swarm_extent},
              {"swarm_offset", c.phase3.swarm_offset},
              {"swarm_amplitude_rel", c.phase3.swarm_amplitude_rel},
              {"use_generator", c.phase3.use_generator},
              {"noise_scale_factor", c.phase3.noise_scale_factor},
              {"seed", c.phase3.seed}}},
            {"gan",
             {{"pairs", c.gan.pairs},
              {"scenes", c.gan.scenes},
              {"scene_cells", c.gan.scene_cells},
              {"feature_cells", c.gan.feature_cells},
              {"config", to_json(c.gan.config)},
              {"pair_spec", to_json(c.gan.pair_spec)}}}};
}

PipelineConfig pipeline_config_from_json(const json& j) {
    PipelineConfig c = default_pipeline_config();
    try {
        Fields top(j, "config");
        top.get("seed", c.seed);
        top.get("workers", c.workers);
        top.get("terrain_seed", c.terrain_seed);
        if (auto* v = top.sub("terrain")) c.terrain = terrain_from_json(*v, c.terrain);
        if (auto* v = top.sub("platform")) c.platform = platform_from_json(*v, c.platform);
        if (auto* v = top.sub("radar")) c.radar = radar_config_from_json(*v, c.radar);
        if (auto* v = top.sub("scenario")) c.scenario = scenario_from_json(*v, c.scenario);
        if (auto* v = top.sub("preprocess")) {
            json merged = to_json(c.preprocess);
            Fields f(*v, "preprocess");
            for (const char* k : {"map_range", "map_doppler", "factor", "floor_rel", "scaling"})
                if (auto* x = f.sub(k)) merged[k] = *x;
            f.finish();
            c.preprocess = preprocess_from_json(merged);
        } else {
            c.preprocess.map_range = c.radar.n_range_bins;
            c.preprocess.map_doppler = c.radar.n_pulses;
        }
        if (auto* v = top.sub("cfar")) c.cfar = cfar_params_from_json(*v, c.cfar);
        if (auto* v = top.sub("train")) {
            Fields f(*v, "train");
            f.get("folds", c.train.folds);
            f.get("epochs", c.train.epochs);
            f.get("batch_size", c.train.batch_size);
            f.get("lr", c.train.lr);
            f.get("augment", c.train.augment);
            f.finish();
        }
        if (auto* v = top.sub("phase1")) {
            Fields f(*v, "phase1");
            f.get("count", c.phase1.count);
            f.get("gate_target", c.phase1.gate_target);
            f.get("tolerance", c.phase1.tolerance);
            f.get("min_samples", c.phase1.min_samples);
            f.get("budget", c.phase1.budget);
            f.finish();
        }
        if (auto* v = top.sub("phase2")) {
            Fields f(*v, "phase2");
            if (auto* e = f.sub("excursion")) {
                Fields g(*e, "phase2.excursion");
                g.get("kappa1", c.phase2.excursion.kappa1);
                g.get("kappa2", c.phase2.excursion.kappa2);
                g.get("clutter_delta_db", c.phase2.excursion.clutter_delta_db);
                g.get("max_expansion", c.phase2.excursion.max_expansion);
                g.get("bisection_steps", c.phase2.excursion.bisection_steps);
                g.finish();
            }
            f.get("redesign_horizontal", c.phase2.redesign_horizontal);
            f.get("redesign_vertical", c.phase2.redesign_vertical);
            f.get("redesign_tx_factor", c.phase2.redesign_tx_factor);
            f.get("folds", c.phase2.folds);
            f.get("gate_target", c.phase2.gate_target);
            f.get("recovery_factor", c.phase2.recovery_factor);
            f.finish();
        }
        if (auto* v = top.sub("phase3")) {
            Fields f(*v, "phase3");
            f.get("count", c.phase3.count);
            f.get("threshold", c.phase3.threshold);
            f.get("anomalies", c.phase3.anomalies);
            f.get("swarm_count", c.phase3.swarm_count);
            f.get("swarm_extent", c.phase3.swarm_extent);
            f.get("swarm_offset", c.phase3.swarm_offset);
            f.get("swarm_amplitude_rel", c.phase3.swarm_amplitude_rel);
            f.get("use_generator", c.phase3.use_generator);
            f.get("noise_scale_factor", c.phase3.noise_scale_factor);
            f.get("seed", c.phase3.seed);
            f.finish();
        }
        if (auto* v = top.sub("gan")) {
            Fields f(*v, "gan");
            f.get("pairs", c.gan.pairs);
            f.get("scenes", c.gan.scenes);
            f.get("scene_cells", c.gan.scene_cells);
            f.get("feature_cells", c.gan.feature_cells);
            if (auto* g = f.sub("config")) c.gan.config = gan_config_from_json(*g, c.gan.config);
            if (auto* g = f.sub("pair_spec")) c.gan.pair_spec = pair_spec_from_json(*g, c.gan.pair_spec);
            f.finish();
        }
        top.finish();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json* node = &config;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override '" + assignment + "': empty key component");
        if (!node->is_object()) {
            if (!node->is_null()) throw ConfigError("override '" + assignment + "': '" + part + "' is not inside an object");
            *node = json::object();
        }
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

// ---------------------------------------------------------------------------
// Phases

json to_json(const Evaluation& e) {
    json j{{"label", e.label}, {"cnn", to_json(e.cnn)}};
    if (e.argmax) j["argmax"] = to_json(*e.argmax);
    if (e.cfar) j["cfar"] = to_json(*e.cfar);
    return j;
}

json PhaseReport::to_json() const {
    return {{"phase", phase}, {"pass", pass}, {"outcome", outcome}, {"body", body}};
}

PhaseReport phase_report_from_json(const json& j) {
    PhaseReport r;
    try {
        r.phase = j.at("phase").get<int>();
        r.pass = j.at("pass").get<bool>();
        r.outcome = j.at("outcome").get<std::string>();
        r.body = j.at("body");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("phase report: ") + e.what());
    }
    return r;
}

PhaseReport read_phase_report(const fs::path& out_root, int phase) {
    const auto path = out_root / "reports" / ("phase" + std::to_string(phase) + ".json");
    if (out_root.empty() || !fs::exists(path)) throw StateError("phase" + std::to_string(phase) + " report not found");
    return phase_report_from_json(json::parse(read_text(path)));
}

PipelineRun make_run(const PipelineConfig& config, const fs::path& out_root) {
    config.validate();
    PipelineRun run;
    run.config = config;
    run.out_root = out_root;
    run.context = config.context();
    return run;
}

LocalizerTrainConfig localizer_train_config(const PipelineConfig& c, int folds, std::uint64_t seed) {
    LocalizerTrainConfig t;
    t.folds = folds;
    t.seed = seed;
    t.fit.epochs = c.train.epochs;
    t.fit.batch_size = c.train.batch_size;
    t.fit.adam.lr = c.train.lr;
    t.augment = c.train.augment;
    t.workers = c.workers;
    t.cfar = c.cfar;
    return t;
}

std::vector<TerrainScene> gan_scenes(const PipelineConfig& c) {
    TerrainSpec spec = c.terrain;
    spec.rows = c.gan.scene_cells;
    spec.cols = c.gan.scene_cells;
    spec.feature_cells = c.gan.feature_cells;
    std::vector<TerrainScene> scenes;
    for (int s = 0; s < c.gan.scenes; ++s) scenes.push_back(generate_terrain(stable_hash(c.seed, 300 + s), spec));
    return scenes;
}

PairSet gan_pairs(const PipelineConfig& c, int n, std::uint64_t seed) {
    return build_pairs(gan_scenes(c), c.radar, c.gan.pair_spec, n, seed, c.workers);
}

namespace {

fs::path dataset_dir(const PipelineRun& run, const std::string& name) {
    return run.out_root.empty() ? fs::path() : run.out_root / "datasets" / name;
}

fs::path model_stem(const PipelineRun& run, const std::string& rel) {
    return run.out_root.empty() ? fs::path() : run.out_root / "models" / rel;
}

std::uint64_t phase1_train_seed(const PipelineConfig& c) { return stable_hash(c.seed, 101); }
std::uint64_t phase2_train_seed(const PipelineConfig& c) { return stable_hash(c.seed, 202); }

json dataset_json(const Dataset& d) {
    return {{"name", d.manifest.name},
            {"hash", d.manifest.hash()},
            {"count", d.manifest.count()},
            {"diversity", d.manifest.diversity},
            {"expansion", d.manifest.expansion},
            {"parent", d.manifest.parent},
            {"context_hash", d.manifest.context_hash}};
}

template <typename T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<int>& idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(v[i]);
    return out;
}

/// CNN estimates in `idx` order, each sample predicted by the model `model_of(i)`.
std::vector<Estimate> predict_grouped(std::vector<Localizer>& models, const std::vector<RDMap>& maps,
                                      const std::vector<int>& idx, const std::function<int(int)>& model_of) {
    std::vector<Estimate> out(idx.size());
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t k = 0; k < idx.size(); ++k) groups[model_of(idx[k])].push_back(k);
    for (auto& [m, ks] : groups) {
        std::vector<RDMap> sub;
        sub.reserve(ks.size());
        for (auto k : ks) sub.push_back(maps[idx[k]]);
        const auto est = predict_batch(models.at(m), sub);
        for (std::size_t t = 0; t < ks.size(); ++t) out[ks[t]] = est[t];
    }
    return out;
}

Evaluation evaluate_all(const std::string& label, const std::vector<Estimate>& cnn, const std::vector<RDMap>& maps,
                        const std::vector<TruthLabel>& truths, const CfarParams& cfar) {
    Evaluation e;
    e.label = label;
    e.cnn = evaluate_estimates("cnn", cnn, truths);
    std::vector<Estimate> am;
    am.reserve(maps.size());
    for (const auto& m : maps) am.push_back(argmax_localize(m));
    e.argmax = evaluate_estimates("argmax", am, truths);
    e.cfar = evaluate_cfar(maps, truths, cfar);
    return e;
}

bool joint_success(const Estimate& e, const TruthLabel& t) {
    const Estimate one[1] = {e};
    const BinTruth bt[1] = {{t.range_bin, t.doppler_bin}};
    return within_one_bin(one, bt).joint.successes == 1;
}

json gate_json(const MetricReport& r, double target) {
    return {{"metric", "cnn within-1-bin joint rate, lower 95% bound"},
            {"target", target},
            {"value", r.within.joint.lower},
            {"pass", proportion_gate(r.within.joint, target)}};
}

json design_knobs(const RadarConfig& r) {
    return json::array({{{"knob", "tx_power"}, {"current", r.tx_power}},
                        {{"knob", "n_horizontal"}, {"current", r.n_horizontal}},
                        {{"knob", "n_vertical"}, {"current", r.n_vertical}}});
}

void write_loss_csv(const fs::path& path, const std::vector<FoldResult>& folds) {
    std::ostringstream os;
    os.precision(17);
    os << "fold,epoch,train,train_sigma,validation\n";
    for (const auto& f : folds)
        for (std::size_t e = 0; e < f.history.train.size(); ++e) {
            os << f.fold << ',' << e << ',' << f.history.train[e] << ',' << f.history.train_sigma[e] << ',';
            if (e < f.history.validation.size()) os << f.history.validation[e];
            os << '\n';
        }
    write_text(path, os.str());
}

void ensure_baseline(PipelineRun& run) {
    if (run.baseline) return;
    if (!run.out_root.empty() && fs::exists(dataset_dir(run, "baseline") / "manifest.json")) {
        run.baseline = load_dataset(dataset_dir(run, "baseline"));
        return;
    }
    BuildOptions o;
    o.name = "baseline";
    o.out_dir = dataset_dir(run, "baseline");
    o.workers = run.config.workers;
    run.baseline = build_dataset(run.context, run.config.scenario, run.config.phase1.count, run.config.seed, o);
}

}  // namespace

ScenarioContext redesign_context(const PipelineRun& run) {
    ScenarioContext c = run.context;
    c.radar.n_horizontal = run.config.phase2.redesign_horizontal;
    c.radar.n_vertical = run.config.phase2.redesign_vertical;
    c.radar.tx_power *= run.config.phase2.redesign_tx_factor;
    return c;
}

PhaseReport run_phase1(PipelineRun& run) {
    const auto t0 = std::chrono::steady_clock::now();
    const PipelineConfig& cfg = run.config;
    ensure_baseline(run);
    const Dataset& base = *run.baseline;
    const std::size_t n = base.maps.size();
    const double t_data = seconds_since(t0);

    const auto tc = localizer_train_config(cfg, cfg.train.folds, phase1_train_seed(cfg));
    const json ds_info = dataset_json(base);
    auto trained = train_localizer(base.maps, base.truths, cfg.preprocess, tc, ds_info);
    run.phase1_folds = fold_assignment(n, tc.folds, tc.seed);
    run.phase1_models.clear();
    json models = json::array();
    json fold_rows = json::array();
    int cnn_better = 0;
    for (auto& f : trained.folds) {
        const bool better = f.cnn.error.mae_range < f.argmax.error.mae_range &&
                            f.cnn.error.mae_doppler < f.argmax.error.mae_doppler;
        cnn_better += better;
        fold_rows.push_back({{"fold", f.fold},
                             {"n_train", f.train_index.size()},
                             {"n_val", f.val_index.size()},
                             {"cnn", to_json(f.cnn)},
                             {"argmax", to_json(f.argmax)},
                             {"cfar", to_json(f.cfar)},
                             {"cnn_below_argmax", better},
                             {"final_train_loss", f.history.train.empty() ? 0.0 : f.history.train.back()},
                             {"final_val_loss", f.history.validation.empty() ? 0.0 : f.history.validation.back()}});
        const std::string h = model_hash(f.model);
        json entry{{"fold", f.fold}, {"hash", h}};
        if (!run.out_root.empty()) {
            const auto stem = model_stem(run, "phase1/fold_" + std::to_string(f.fold));
            fs::create_directories(stem.parent_path());
            save_localizer(stem, f.model);
            entry["path"] = fs::relative(stem, run.out_root).string();
        }
        models.push_back(entry);
        run.phase1_models.push_back(std::move(f.model));
    }

    // Pooled held-out evaluation in sample order.
    std::vector<int> held;
    for (std::size_t i = 0; i < n; ++i)
        if (tc.folds > 1 || run.phase1_folds[i] == 0) held.push_back(static_cast<int>(i));
    const auto cnn_est = predict_grouped(run.phase1_models, base.maps, held,
                                         [&](int i) { return tc.folds > 1 ? run.phase1_folds[i] : 0; });
    const auto held_maps = pick(base.maps, held);
    const auto held_truths = pick(base.truths, held);
    const Evaluation pooled = evaluate_all("phase1_pooled", cnn_est, held_maps, held_truths, cfg.cfar);

    // Monte Carlo convergence of the per-sample success indicator. The running
    // state is reported; the stopping rule uses the exact binomial half-width
    // so a run of identical outcomes does not stop on zero sample variance.
    const std::size_t budget = cfg.phase1.budget == 0 ? held.size() : std::min(cfg.phase1.budget, held.size());
    ConvergenceState conv;
    std::size_t successes = 0;
    double half_width = 0.5;
    bool converged = false;
    for (std::size_t k = 0; k < budget; ++k) {
        const bool ok = joint_success(cnn_est[k], held_truths[k]);
        successes += ok;
        conv = convergence_update(conv, ok ? 1.0 : 0.0, cfg.phase1.tolerance, cfg.phase1.min_samples);
        const auto cp = clopper_pearson(successes, conv.n);
        half_width = 0.5 * (cp.upper - cp.lower);
        if (conv.n >= cfg.phase1.min_samples && half_width <= cfg.phase1.tolerance) {
            converged = true;
            break;
        }
    }

    PhaseReport rep;
    rep.phase = 1;
    const json gate = gate_json(pooled.cnn, cfg.phase1.gate_target);
    if (!converged) {
        rep.outcome = "budget_exceeded";
        rep.pass = false;
    } else {
        rep.pass = gate.at("pass").get<bool>();
        rep.outcome = rep.pass ? "pass" : "gate_fail";
    }
    json recommendations = json::array();
    if (!rep.pass) {
        recommendations.push_back(rep.outcome == "budget_exceeded"
                                      ? "increase the sample count or the convergence tolerance"
                                      : "adjust a design knob (transmit power or array size) and rerun phase 1");
    }
    rep.body = {{"config", to_json(cfg)},
                {"dataset", ds_info},
                {"train", to_json(tc)},
                {"fold_assignment_hash", trained.assignment_hash},
                {"models", models},
                {"folds", fold_rows},
                {"cnn_below_argmax_folds", cnn_better},
                {"pooled", to_json(pooled)},
                {"convergence",
                 {{"state", to_json(conv)},
                  {"budget", budget},
                  {"tolerance", cfg.phase1.tolerance},
                  {"binomial_half_width", half_width},
                  {"converged", converged},
                  {"converged_at", converged ? conv.n : 0}}},
                {"gate", gate},
                {"design_knobs", design_knobs(cfg.radar)},
                {"recommendations", recommendations},
                {"timing_s", {{"dataset", t_data}, {"total", seconds_since(t0)}}}};
    if (!run.out_root.empty()) {
        fs::create_directories(run.out_root / "reports");
        write_loss_csv(run.out_root / "reports" / "phase1_loss.csv", trained.folds);
        write_phase_report(run.out_root, rep);
    }
    run.phase1 = rep;
    return rep;
}

namespace {

void ensure_phase1_models(PipelineRun& run) {
    if (!run.phase1_models.empty()) return;
    const auto& body = run.phase1->body;
    for (const auto& m : body.at("models")) {
        if (!m.contains("path")) throw StateError("phase1 models were not saved");
        auto model = load_localizer(run.out_root / m.at("path").get<std::string>());
        if (model_hash(model) != m.at("hash").get<std::string>()) throw IoError("phase1 model hash mismatch");
        run.phase1_models.push_back(std::move(model));
    }
    const int folds = body.at("train").at("folds").get<int>();
    run.phase1_folds = fold_assignment(run.baseline->maps.size(), folds, phase1_train_seed(run.config));
    if (fold_assignment_hash(run.phase1_folds) != body.at("fold_assignment_hash").get<std::string>())
        throw StateError("phase1 fold assignment does not match its report");
}

}  // namespace

PhaseReport run_phase2(PipelineRun& run) {
    const auto t0 = std::chrono::steady_clock::now();
    const PipelineConfig& cfg = run.config;
    if (!run.phase1) run.phase1 = read_phase_report(run.out_root, 1);
    if (!run.phase1->pass) throw StateError("phase1 gate did not pass (" + run.phase1->outcome + "); phase2 not run");
    ensure_baseline(run);
    ensure_phase1_models(run);
    const Dataset& base = *run.baseline;
    const std::size_t n_r = base.maps.size();
    const auto& p1 = run.phase1->body.at("pooled").at("cnn");
    const double p1_range = p1.at("mae_range").get<double>();
    const double p1_doppler = p1.at("mae_doppler").get<double>();

    // (a) Phase I models on the excursion set.
    BuildOptions ox;
    ox.name = "excursion";
    ox.out_dir = dataset_dir(run, "excursion");
    ox.workers = cfg.workers;
    run.excursion = scale_excursion(run.context, base, cfg.phase2.excursion, ox);
    const Dataset& exc = *run.excursion;
    std::vector<int> all(exc.maps.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    const int k1 = static_cast<int>(run.phase1_models.size());
    const auto est_a = predict_grouped(run.phase1_models, exc.maps, all, [&](int i) {
        if (k1 == 1) return 0;
        return static_cast<std::size_t>(i) < n_r ? run.phase1_folds[i] : i % k1;
    });
    const Evaluation eval_a = evaluate_all("a_phase1_models_on_excursion", est_a, exc.maps, exc.truths, cfg.cfar);
    const bool degraded = eval_a.cnn.error.mae_range > p1_range && eval_a.cnn.error.mae_doppler > p1_doppler;
    const double t_a = seconds_since(t0);

    // (b) Redesigned radar, regenerated data, retrained model.
    const ScenarioContext red_ctx = redesign_context(run);
    BuildOptions orr;
    orr.name = "redesign";
    orr.out_dir = dataset_dir(run, "redesign");
    orr.workers = cfg.workers;
    orr.reference_widths = exc.manifest.reference_widths;
    run.redesign = build_dataset(red_ctx, exc.manifest.space, exc.maps.size(), exc.manifest.master_seed, orr);
    const Dataset& red = *run.redesign;
    const auto tc = localizer_train_config(cfg, cfg.phase2.folds, phase2_train_seed(cfg));
    auto trained = train_localizer(red.maps, red.truths, cfg.preprocess, tc, dataset_json(red));
    std::vector<Localizer> models;
    const auto assignment = fold_assignment(red.maps.size(), tc.folds, tc.seed);
    for (auto& f : trained.folds) models.push_back(std::move(f.model));
    std::vector<int> held;
    for (std::size_t i = 0; i < assignment.size(); ++i)
        if (tc.folds > 1 || assignment[i] == 0) held.push_back(static_cast<int>(i));
    const auto est_b =
        predict_grouped(models, red.maps, held, [&](int i) { return tc.folds > 1 ? assignment[i] : 0; });
    const Evaluation eval_b =
        evaluate_all("b_redesign_retrained", est_b, pick(red.maps, held), pick(red.truths, held), cfg.cfar);
    const double ratio_range = eval_b.cnn.error.mae_range / p1_range;
    const double ratio_doppler = eval_b.cnn.error.mae_doppler / p1_doppler;
    const bool recovered = ratio_range <= cfg.phase2.recovery_factor && ratio_doppler <= cfg.phase2.recovery_factor;
    const double t_b = seconds_since(t0);

    // (c) Deployed model (fold 0) on its held-out maps with and without the clutter perturbation.
    run.phase2_val.clear();
    for (std::size_t i = 0; i < assignment.size(); ++i)
        if (assignment[i] == 0) run.phase2_val.push_back(static_cast<int>(i));
    run.phase2_model = std::move(models.front());
    Localizer& deployed = *run.phase2_model;
    const auto val_maps = pick(red.maps, run.phase2_val);
    const auto val_truths = pick(red.truths, run.phase2_val);
    const auto est_cp = predict_batch(deployed, val_maps);
    const Evaluation eval_cp = evaluate_all("c_perturbed", est_cp, val_maps, val_truths, cfg.cfar);

    ScenarioSpace clean = red.manifest.space;
    clean.clutter_db = cfg.scenario.clutter_db;
    const RadarConfig clean_radar = perturb_clutter(red_ctx.radar, clean.clutter_db);
    std::vector<RDMap> clean_maps(run.phase2_val.size());
    std::vector<TruthLabel> clean_truths(run.phase2_val.size());
    std::vector<std::string> clean_hashes(run.phase2_val.size());
    parallel_for(run.phase2_val.size(), cfg.workers, [&](std::size_t k) {
        auto s = simulate_sample(red_ctx, clean_radar, clean, red.manifest.master_seed, run.phase2_val[k]);
        clean_hashes[k] = s.record.map_sha256;
        clean_truths[k] = s.record.truth;
        clean_maps[k] = std::move(s.map);
    });
    std::string joined;
    for (const auto& h : clean_hashes) joined += h;
    const auto est_cu = predict_batch(deployed, clean_maps);
    const Evaluation eval_cu = evaluate_all("c_unperturbed", est_cu, clean_maps, clean_truths, cfg.cfar);

    const json gate_b = gate_json(eval_b.cnn, cfg.phase2.gate_target);
    const json gate_cp = gate_json(eval_cp.cnn, cfg.phase2.gate_target);
    const json gate_cu = gate_json(eval_cu.cnn, cfg.phase2.gate_target);
    PhaseReport rep;
    rep.phase = 2;
    rep.pass = gate_b.at("pass").get<bool>() && gate_cp.at("pass").get<bool>() && gate_cu.at("pass").get<bool>();
    rep.outcome = rep.pass ? "pass" : "gate_fail";

    json model_entry{{"hash", model_hash(deployed)}};
    if (!run.out_root.empty()) {
        const auto stem = model_stem(run, "phase2/retrained");
        fs::create_directories(stem.parent_path());
        save_localizer(stem, deployed);
        model_entry["path"] = fs::relative(stem, run.out_root).string();
    }
    std::ostringstream array;
    array << cfg.radar.n_horizontal << "x" << cfg.radar.n_vertical << " -> " << red_ctx.radar.n_horizontal << "x"
          << red_ctx.radar.n_vertical;
    rep.body = {
        {"config", to_json(cfg)},
        {"phase1_reference", {{"mae_range", p1_range}, {"mae_doppler", p1_doppler}}},
        {"datasets",
         {{"baseline", dataset_json(base)},
          {"excursion", dataset_json(exc)},
          {"redesign", dataset_json(red)},
          {"unperturbed_val", {{"count", clean_maps.size()}, {"hash", sha256_hex(joined)}}}}},
        {"excursion",
         {{"spec", to_json(cfg.phase2.excursion)},
          {"n_reference", n_r},
          {"n_excursion", exc.manifest.count()},
          {"reference_diversity", diversity(base.manifest.vectors(), exc.manifest.reference_widths)},
          {"excursion_diversity", exc.manifest.diversity},
          {"expansion", exc.manifest.expansion},
          {"clutter_scale", perturb_clutter(RadarConfig{}, exc.manifest.space.clutter_db).clutter_scale}}},
        {"redesign_actions",
         json::array({{{"knob", "array"}, {"change", array.str()}},
                      {{"knob", "tx_power"},
                       {"change", std::to_string(cfg.radar.tx_power) + " -> " + std::to_string(red_ctx.radar.tx_power)}}})},
        {"train", to_json(tc)},
        {"fold_assignment_hash", fold_assignment_hash(assignment)},
        {"validation_indices", run.phase2_val},
        {"model", model_entry},
        {"evaluations", {to_json(eval_a), to_json(eval_b), to_json(eval_cp), to_json(eval_cu)}},
        {"degradation", {{"mae_range_increased", eval_a.cnn.error.mae_range > p1_range},
                         {"mae_doppler_increased", eval_a.cnn.error.mae_doppler > p1_doppler},
                         {"both", degraded}}},
        {"recovery",
         {{"ratio_range", ratio_range},
          {"ratio_doppler", ratio_doppler},
          {"factor", cfg.phase2.recovery_factor},
          {"recovered", recovered}}},
        {"gates", {{"b", gate_b}, {"c_perturbed", gate_cp}, {"c_unperturbed", gate_cu}}},
        {"timing_s", {{"a", t_a}, {"b", t_b - t_a}, {"total", seconds_since(t0)}}}};
    if (!run.out_root.empty()) write_phase_report(run.out_root, rep);
    run.phase2 = rep;
    return rep;
}

// ---------------------------------------------------------------------------
// Phase III

json to_json(const BlackSwanEvent& e) {
    return {{"index", e.index},
            {"base_sample", e.base_sample},
            {"seed", e.seed},
            {"kind", e.kind},
            {"anomaly", e.anomaly},
            {"error_range", e.error_range},
            {"error_doppler", e.error_doppler},
            {"error", e.error},
            {"map_sha256", e.map_sha256}};
}

json BlackSwanReport::to_json() const {
    json ev = json::array();
    for (const auto& e : events) ev.push_back(detwin::to_json(e));
    return {{"scanned", scanned}, {"rejected", rejected}, {"flagged", events.size()}, {"events", ev}};
}

RDMap scan_sample(const ScanInputs& in, const Phase3Settings& s, std::size_t index, json* anomaly, std::size_t* base) {
    if (!in.data || !in.context || !in.context->view.scene) throw StateError("scan: inputs not set");
    if (in.indices.empty()) throw ConfigError("scan: no held-out samples");
    if (s.anomalies.empty()) throw ConfigError("scan: no anomaly kinds");
    const std::size_t b = in.indices[index % in.indices.size()];
    const auto& rec = in.data->manifest.samples.at(b);
    const RadarConfig radar = radar_config_from_json(in.data->manifest.radar);
    const TargetSpec target = target_from_params(rec.params);
    const std::uint64_t seed = stable_hash(s.seed, index);

    RDMap map;
    if (in.generator) {
        // Target and noise from the simulator; clutter from the generator,
        // scaled to the simulator's clutter power for this sample.
        SimOptions no_clutter;
        no_clutter.clutter = false;
        map = simulate_rd_map(in.context->view, radar, target, rec.seed, no_clutter).map;
        SimOptions clutter_only;
        clutter_only.target = false;
        clutter_only.noise = false;
        const auto ref = simulate_rd_map(in.context->view, radar, target, rec.seed, clutter_only).map;
        double ref_power = 0.0;
        for (double v : ref.power) ref_power += v;

        const auto& spec = in.generator->pair_spec;
        const TerrainScene& scene = *in.context->view.scene;
        PlatformState virt = in.context->platform;
        virt.lat = scene.origin_lat;
        virt.lon = scene.origin_lon;
        virt.height_agl = scene.mean_height() + spec.altitude_above_mean;
        virt.speed = 0.0;
        RadarConfig omni = radar;
        omni.omnidirectional = true;
        const auto pc = polar_clutter(scene, omni, virt, spec, stable_hash(seed, 1));
        std::vector<float> cond(pc.height);
        cond.insert(cond.end(), pc.landcover.begin(), pc.landcover.end());
        NoiseMutation mut;
        mut.scale_factor = s.noise_scale_factor;
        const auto noise = noise_excursion(in.generator->noise, mut);
        const auto gen = generate_clutter(*in.generator, cond, stable_hash(seed, 2), noise);
        const auto clutter = clutter_to_rd(*in.generator, gen.map, radar, in.context->platform, ref_power);
        for (std::size_t k = 0; k < map.power.size(); ++k) map.power[k] += clutter.power[k];
    } else {
        map = simulate_rd_map(in.context->view, radar, target, rec.seed).map;
    }
    round_to_f32(map);

    AnomalySpec a;
    a.kind = anomaly_from_name(s.anomalies[index % s.anomalies.size()]);
    a.count = s.swarm_count;
    a.extent = s.swarm_extent;
    const int tr = rec.truth.range_bin;
    a.center_range = tr + s.swarm_offset + s.swarm_extent < map.n_range ? tr + s.swarm_offset : tr - s.swarm_offset;
    a.center_range = std::clamp(a.center_range, 0, map.n_range - 1);
    a.center_doppler = rec.truth.doppler_bin;
    const double peak = *std::max_element(map.power.begin(), map.power.end());
    a.amplitude = a.kind == AnomalyKind::ood_noise_scale ? s.noise_scale_factor : s.swarm_amplitude_rel * peak;
    a.seed = seed;
    auto injected = inject_anomaly(map, a);
    if (anomaly) {
        *anomaly = to_json(a);
        (*anomaly)["clipped"] = injected.clipped;
        (*anomaly)["generator"] = in.generator != nullptr;
    }
    if (base) *base = b;
    return std::move(injected.map);
}

BlackSwanReport black_swan_scan(const ScanInputs& in, const Phase3Settings& s) {
    if (!in.model) throw StateError("scan: no model");
    BlackSwanReport rep;
    if (s.count == 0) return rep;
    const RadarConfig radar = radar_config_from_json(in.data->manifest.radar);
    const auto bounds =
        physical_power_bounds(in.context->view, radar, std::pow(10.0, in.data->manifest.space.rcs_db.hi / 10.0));
    for (std::size_t i = 0; i < s.count; ++i) {
        json anomaly;
        std::size_t b = 0;
        const RDMap map = scan_sample(in, s, i, &anomaly, &b);
        ++rep.scanned;
        if (!admissible(map, bounds)) {
            ++rep.rejected;
            continue;
        }
        const Estimate e = predict(*in.model, map);
        const auto& truth = in.data->manifest.samples[b].truth;
        BlackSwanEvent ev;
        ev.index = i;
        ev.base_sample = b;
        ev.seed = stable_hash(s.seed, i);
        ev.kind = anomaly.at("kind").get<std::string>();
        ev.anomaly = anomaly;
        ev.error_range = std::abs(std::round(e.range_bin) - truth.range_bin);
        ev.error_doppler = std::abs(std::round(e.doppler_bin) - truth.doppler_bin);
        ev.error = std::max(ev.error_range, ev.error_doppler);
        if (ev.error >= s.threshold) {
            ev.map_sha256 = map.content_hash();
            rep.events.push_back(std::move(ev));
        }
    }
    std::stable_sort(rep.events.begin(), rep.events.end(),
                     [](const BlackSwanEvent& a, const BlackSwanEvent& b) { return a.error > b.error; });
    return rep;
}

PhaseReport run_phase3(PipelineRun& run, GeneratorBundle* generator) {
    const auto t0 = std::chrono::steady_clock::now();
    const PipelineConfig& cfg = run.config;
    if (!run.phase2) run.phase2 = read_phase_report(run.out_root, 2);
    const auto& body = run.phase2->body;
    if (!run.phase2_model) {
        const auto& m = body.at("model");
        if (!m.contains("path")) throw StateError("phase2 model was not saved");
        run.phase2_model = load_localizer(run.out_root / m.at("path").get<std::string>());
        if (model_hash(*run.phase2_model) != m.at("hash").get<std::string>()) throw IoError("phase2 model hash mismatch");
    }
    if (!run.redesign) run.redesign = load_dataset(dataset_dir(run, "redesign"));
    if (run.phase2_val.empty()) run.phase2_val = body.at("validation_indices").get<std::vector<int>>();
    if (cfg.phase3.use_generator && !generator) throw StateError("phase3: use_generator is set but no generator was given");

    const ScenarioContext ctx = redesign_context(run);
    ScanInputs in;
    in.data = &*run.redesign;
    in.indices.assign(run.phase2_val.begin(), run.phase2_val.end());
    in.model = &*run.phase2_model;
    in.generator = cfg.phase3.use_generator ? generator : nullptr;
    in.context = &ctx;
    const auto scan = black_swan_scan(in, cfg.phase3);

    PhaseReport rep;
    rep.phase = 3;
    rep.pass = true;
    rep.outcome = "non_gating";
    rep.body = {{"config", to_json(cfg)},
                {"model_hash", model_hash(*run.phase2_model)},
                {"dataset", dataset_json(*run.redesign)},
                {"threshold", cfg.phase3.threshold},
                {"generator", in.generator ? in.generator->provenance : json(nullptr)},
                {"scan", scan.to_json()},
                {"timing_s", {{"total", seconds_since(t0)}}}};
    if (!run.out_root.empty()) write_phase_report(run.out_root, rep);
    return rep;
}

// ---------------------------------------------------------------------------
// Reports

void write_phase_report(const fs::path& out_root, const PhaseReport& report) {
    const auto dir = out_root / "reports";
    fs::create_directories(dir);
    const std::string name = "phase" + std::to_string(report.phase);
    const json j = report.to_json();
    write_text(dir / (name + ".json"), j.dump(2));
    write_text(dir / (name + ".csv"), report_csv(j));
}

namespace {

void collect_metrics(const json& j, const std::string& label, std::vector<std::pair<std::string, const json*>>& out) {
    if (j.is_object()) {
        if (j.contains("algorithm") && j.contains("mae_range") && j.contains("within_1bin_joint")) {
            out.emplace_back(label, &j);
            return;
        }
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "config") continue;
            std::string next = label;
            if (it->is_object() && it->contains("label")) next = it->at("label").get<std::string>();
            else if (it.key() != "cnn" && it.key() != "argmax" && it.key() != "cfar")
                next = label.empty() ? it.key() : label + "." + it.key();
            collect_metrics(*it, next, out);
        }
    } else if (j.is_array()) {
        for (std::size_t i = 0; i < j.size(); ++i) {
            const json& e = j[i];
            std::string next = label + "[" + std::to_string(i) + "]";
            if (e.is_object() && e.contains("label")) next = e.at("label").get<std::string>();
            else if (e.is_object() && e.contains("fold")) next = label + ".fold" + std::to_string(e.at("fold").get<int>());
            collect_metrics(e, next, out);
        }
    }
}

std::string num(const json& v) {
    std::ostringstream os;
    os.precision(17);
    os << v.get<double>();
    return os.str();
}

}  // namespace

std::string report_csv(const json& report) {
    std::vector<std::pair<std::string, const json*>> found;
    collect_metrics(report.contains("body") ? report.at("body") : report, "", found);
    std::ostringstream os;
    os << metrics_csv_header() << '\n';
    for (const auto& [label, m] : found) {
        const json& r = *m;
        const auto& joint = r.at("within_1bin_joint");
        os << label << ',' << r.at("algorithm").get<std::string>() << ',' << r.at("n").get<std::size_t>() << ','
           << num(r.at("mae_range")) << ',' << num(r.at("mae_doppler")) << ',' << num(r.at("sigma_range")) << ','
           << num(r.at("sigma_doppler")) << ',' << num(r.at("within_1bin_range").at("percent")) << ','
           << num(r.at("within_1bin_doppler").at("percent")) << ',' << num(joint.at("percent")) << ','
           << num(joint.at("ci95").at(0)) << ',' << num(joint.at("ci95").at(1)) << ',';
        if (r.contains("fp_per_map")) os << num(r.at("fp_per_map")) << ',' << num(r.at("fn_rate"));
        else os << ',';
        os << '\n';
    }
    return os.str();
}

}  // namespace detwin
