#include "detwin/rfsim.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <set>

namespace detwin {

namespace {

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
    if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("bad value for key '") + key + "'");
    }
}

// Scene-center geometry of the reference scenario.
PatchGeometry reference_center_geometry() {
    return patch_geometry(PlatformState{}, GeoPoint{32.5505, -117.0493, 0.0});
}

}  // namespace

void RadarConfig::validate() const {
    if (!(carrier_freq > 0.0) || !std::isfinite(carrier_freq)) throw ConfigError("radar: carrier_freq must be > 0");
    if (!(tx_power >= 0.0) || !std::isfinite(tx_power)) throw ConfigError("radar: tx_power must be >= 0");
    if (!(element_spacing > 0.0)) throw ConfigError("radar: element_spacing must be > 0");
    // 0.1% slack: the reference 1.5 cm spacing is half of c/f with c rounded to 3e8.
    if (element_spacing > 0.5 * wavelength() * (1.0 + 1e-3))
        throw ConfigError("radar: element_spacing exceeds half a wavelength (grating lobes)");
    if (n_horizontal < 1 || n_vertical < 1) throw ConfigError("radar: array needs at least one element per axis");
    if (n_pulses < 2) throw ConfigError("radar: n_pulses must be >= 2");
    if (n_range_bins < 1) throw ConfigError("radar: n_range_bins must be >= 1");
    if (!(range_bin > 0.0)) throw ConfigError("radar: range_bin must be > 0");
    if (!(doppler_bin > 0.0)) throw ConfigError("radar: doppler_bin must be > 0");
    if (!(near_range >= 0.0)) throw ConfigError("radar: near_range must be >= 0");
    if (!(noise_power >= 0.0) || !std::isfinite(noise_power)) throw ConfigError("radar: noise_power must be >= 0");
    if (!(clutter_scale >= 0.0) || !std::isfinite(clutter_scale)) throw ConfigError("radar: clutter_scale must be >= 0");
    if (!std::isfinite(look_az) || !std::isfinite(look_el) || !std::isfinite(boresight_bearing_deg))
        throw ConfigError("radar: non-finite pointing");
}

std::string RadarConfig::hash() const { return sha256_hex(to_json(*this).dump()); }

RadarConfig RadarConfig::paper_scale() {
    RadarConfig c;
    const PatchGeometry g = reference_center_geometry();
    c.n_range_bins = 680;
    c.n_pulses = 320;
    c.range_bin = 0.0162 * kMetersPerNauticalMile;
    c.doppler_bin = 3.4375;
    c.boresight_bearing_deg = g.azimuth * 180.0 / kPi;
    c.look_el = g.elevation;
    c.near_range = g.slant_range - 0.5 * c.n_range_bins * c.range_bin;
    return c;
}

RadarConfig RadarConfig::desk_scale() {
    RadarConfig c;
    const PatchGeometry g = reference_center_geometry();
    c.n_range_bins = 128;
    c.n_pulses = 64;
    c.range_bin = 30.0;
    c.doppler_bin = 32.0;
    c.boresight_bearing_deg = g.azimuth * 180.0 / kPi;
    c.look_el = g.elevation;
    c.near_range = std::round(g.slant_range - 0.5 * c.n_range_bins * c.range_bin);
    return c;
}

nlohmann::json to_json(const RadarConfig& c) {
    return {{"carrier_freq", c.carrier_freq},
            {"tx_power", c.tx_power},
            {"element_spacing", c.element_spacing},
            {"n_horizontal", c.n_horizontal},
            {"n_vertical", c.n_vertical},
            {"look_az", c.look_az},
            {"look_el", c.look_el},
            {"boresight_bearing_deg", c.boresight_bearing_deg},
            {"n_pulses", c.n_pulses},
            {"n_range_bins", c.n_range_bins},
            {"range_bin", c.range_bin},
            {"doppler_bin", c.doppler_bin},
            {"near_range", c.near_range},
            {"noise_power", c.noise_power},
            {"clutter_scale", c.clutter_scale},
            {"omnidirectional", c.omnidirectional},
            {"terrain_shadowing", c.terrain_shadowing}};
}

RadarConfig radar_config_from_json(const nlohmann::json& j, const RadarConfig& base) {
    reject_unknown_keys(j,
                        {"carrier_freq", "tx_power", "element_spacing", "n_horizontal", "n_vertical", "look_az",
                         "look_el", "boresight_bearing_deg", "n_pulses", "n_range_bins", "range_bin",
                         "doppler_bin", "near_range", "noise_power", "clutter_scale", "omnidirectional",
                         "terrain_shadowing"},
                        "radar config");
    RadarConfig c = base;
    read_key(j, "carrier_freq", c.carrier_freq);
    read_key(j, "tx_power", c.tx_power);
    read_key(j, "element_spacing", c.element_spacing);
    read_key(j, "n_horizontal", c.n_horizontal);
    read_key(j, "n_vertical", c.n_vertical);
    read_key(j, "look_az", c.look_az);
    read_key(j, "look_el", c.look_el);
    read_key(j, "boresight_bearing_deg", c.boresight_bearing_deg);
    read_key(j, "n_pulses", c.n_pulses);
    read_key(j, "n_range_bins", c.n_range_bins);
    read_key(j, "range_bin", c.range_bin);
    read_key(j, "doppler_bin", c.doppler_bin);
    read_key(j, "near_range", c.near_range);
    read_key(j, "noise_power", c.noise_power);
    read_key(j, "clutter_scale", c.clutter_scale);
    read_key(j, "omnidirectional", c.omnidirectional);
    read_key(j, "terrain_shadowing", c.terrain_shadowing);
    c.validate();
    return c;
}

void TargetSpec::validate() const {
    if (!std::isfinite(lat) || !std::isfinite(lon) || !std::isfinite(heading_deg))
        throw ConfigError("target: non-finite position or heading");
    if (!(ground_speed >= 0.0)) throw ConfigError("target: speed must be >= 0");
    if (!(rcs >= 0.0) || !std::isfinite(rcs)) throw ConfigError("target: rcs must be >= 0");
}

nlohmann::json to_json(const TargetSpec& t) {
    return {{"lat", t.lat}, {"lon", t.lon}, {"ground_speed", t.ground_speed}, {"heading_deg", t.heading_deg},
            {"rcs", t.rcs}};
}

TargetSpec target_from_json(const nlohmann::json& j) {
    reject_unknown_keys(j, {"lat", "lon", "ground_speed", "heading_deg", "rcs"}, "target");
    TargetSpec t;
    read_key(j, "lat", t.lat);
    read_key(j, "lon", t.lon);
    read_key(j, "ground_speed", t.ground_speed);
    read_key(j, "heading_deg", t.heading_deg);
    read_key(j, "rcs", t.rcs);
    t.validate();
    return t;
}

nlohmann::json to_json(const TruthLabel& t) {
    return {{"range_bin", t.range_bin},     {"doppler_bin", t.doppler_bin},
            {"doppler_hz", t.doppler_hz},   {"slant_range", t.slant_range},
            {"doppler_ambiguous", t.doppler_ambiguous}, {"target", to_json(t.target)}};
}

TruthLabel truth_from_json(const nlohmann::json& j) {
    TruthLabel t;
    t.range_bin = j.at("range_bin").get<int>();
    t.doppler_bin = j.at("doppler_bin").get<int>();
    t.doppler_hz = j.value("doppler_hz", 0.0);
    t.slant_range = j.value("slant_range", 0.0);
    t.doppler_ambiguous = j.value("doppler_ambiguous", false);
    if (j.contains("target")) t.target = target_from_json(j.at("target"));
    return t;
}

std::string RDMap::content_hash() const {
    return sha256_hex(to_f32_le(std::span<const double>(power)));
}

void RDMap::validate() const {
    if (n_range <= 0 || n_doppler <= 0) throw ConfigError("rd map: empty");
    if (power.size() != static_cast<std::size_t>(n_range) * n_doppler) throw ConfigError("rd map: size mismatch");
    for (double p : power)
        if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError("rd map: entries must be finite and >= 0");
}

double line_array_power(int n, double spacing_over_lambda, double sin_offset) {
    const double psi = 2.0 * kPi * spacing_over_lambda * sin_offset;
    const double half = 0.5 * psi;
    const double den = std::sin(half);
    if (std::abs(den) < 1e-9) {
        // Near a main/grating lobe: sum the phasors directly.
        cplx sum{0.0, 0.0};
        for (int k = 0; k < n; ++k) sum += std::polar(1.0, psi * k);
        return std::norm(sum);
    }
    const double num = std::sin(n * half);
    return (num * num) / (den * den);
}

double array_gain(const RadarConfig& config, double az, double el) {
    if (config.omnidirectional) return 1.0;
    const double ratio = config.element_spacing / config.wavelength();
    if (az == config.look_az && el == config.look_el) {
        const double nh = config.n_horizontal, nv = config.n_vertical;
        return nh * nh * nv * nv;
    }
    return line_array_power(config.n_horizontal, ratio, std::sin(az) - std::sin(config.look_az)) *
           line_array_power(config.n_vertical, ratio, std::sin(el) - std::sin(config.look_el));
}

double azimuth_beamwidth_3db(const RadarConfig& config) {
    const double ratio = config.element_spacing / config.wavelength();
    const int n = config.n_horizontal;
    const double half_peak = 0.5 * n * n;
    auto pattern = [&](double az) { return line_array_power(n, ratio, std::sin(az)); };
    // First null of an unsteered line lies at asin(1 / (n * ratio)); bracket inside it.
    double lo = 0.0;
    double hi = std::asin(std::min(1.0, 1.0 / (n * ratio)));
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (pattern(mid) > half_peak) lo = mid; else hi = mid;
    }
    return 2.0 * 0.5 * (lo + hi);
}

double wrap_doppler(double f, double prf) {
    double w = std::fmod(f + 0.5 * prf, prf);
    if (w < 0.0) w += prf;
    return w - 0.5 * prf;
}

SceneView view_scene(const TerrainScene& scene, const PlatformState& platform, bool shadowing) {
    SceneView v;
    v.scene = &scene;
    v.platform = platform;
    v.shadowing = shadowing;
    v.cells = illuminate(scene, platform, shadowing);
    return v;
}

namespace {

double wrap_angle(double a) {
    while (a > kPi) a -= 2.0 * kPi;
    while (a <= -kPi) a += 2.0 * kPi;
    return a;
}

// Two-way gain for a line of sight, zero behind the array plane.
double two_way_gain(const RadarConfig& config, double bearing, double elevation) {
    if (config.omnidirectional) return 1.0;
    const double az_rel = wrap_angle(bearing - config.boresight_bearing_deg * kPi / 180.0);
    if (std::abs(az_rel) > 0.5 * kPi) return 0.0;
    const double g = array_gain(config, az_rel, elevation);
    return g * g;
}

double received_power(const RadarConfig& config, double gain2, double sigma, double range) {
    const double lambda = config.wavelength();
    const double four_pi3 = std::pow(4.0 * kPi, 3);
    const double r2 = range * range;
    return config.tx_power * gain2 * lambda * lambda * sigma / (four_pi3 * r2 * r2);
}

void add_tone(cplx* row, int n_pulses, cplx amplitude, double f, double prf) {
    const cplx step = std::polar(1.0, 2.0 * kPi * f / prf);
    cplx phasor = amplitude;
    for (int m = 0; m < n_pulses; ++m) {
        row[m] += phasor;
        phasor *= step;
    }
}

}  // namespace

TruthLabel target_truth(const SceneView& view, const RadarConfig& config, const TargetSpec& target) {
    target.validate();
    const TerrainScene& scene = *view.scene;
    const Enu t = to_local(scene.origin(), {target.lat, target.lon, 0.0});
    if (!scene.contains(t)) throw ConfigError("target outside scene");
    const double th = scene.height_at_offset(t.east, t.north);
    const PlatformState& p = view.platform;
    const Enu plat = to_local(scene.origin(), {p.lat, p.lon, p.height_agl});
    const PatchGeometry g =
        patch_geometry_local(plat, p.speed, p.heading_deg * kPi / 180.0, {t.east, t.north, th});

    const double ue = std::sin(g.azimuth) * std::cos(g.elevation);
    const double un = std::cos(g.azimuth) * std::cos(g.elevation);
    const double heading_t = target.heading_deg * kPi / 180.0;
    const double platform_closing = p.speed * g.radial_component;
    const double target_closing = -target.ground_speed * (std::sin(heading_t) * ue + std::cos(heading_t) * un);
    const double prf = config.prf();

    TruthLabel truth;
    truth.target = target;
    truth.slant_range = g.slant_range;
    truth.doppler_hz = 2.0 * (platform_closing + target_closing) / config.wavelength();
    truth.doppler_ambiguous = truth.doppler_hz < -0.5 * prf || truth.doppler_hz >= 0.5 * prf;
    const long rb = std::lround((g.slant_range - config.near_range) / config.range_bin);
    if (rb < 0 || rb >= config.n_range_bins) throw ConfigError("target outside range window");
    truth.range_bin = static_cast<int>(rb);
    const double folded = wrap_doppler(truth.doppler_hz, prf);
    long db = std::lround(folded / config.doppler_bin) % config.n_pulses;
    if (db < 0) db += config.n_pulses;
    truth.doppler_bin = static_cast<int>(db);
    return truth;
}

SlowTimeCube synthesize_slow_time(const SceneView& view, const RadarConfig& config, const TargetSpec* target,
                                  std::uint64_t seed, const SimOptions& options) {
    config.validate();
    const TerrainScene& scene = *view.scene;
    SlowTimeCube cube;
    cube.n_range = config.n_range_bins;
    cube.n_pulses = config.n_pulses;
    cube.samples.assign(static_cast<std::size_t>(cube.n_range) * cube.n_pulses, cplx{0.0, 0.0});
    const double prf = config.prf();
    const double lambda = config.wavelength();
    const double speed = view.platform.speed;
    const double cell_area = scene.cell_size * scene.cell_size;

    if (options.clutter) {
        // One complex Gaussian per cell in fixed order, drawn whether or not the
        // cell contributes, so draws line up across configurations.
        Rng rng(stable_hash(seed, 0));
        for (std::size_t i = 0; i < view.cells.size(); ++i) {
            const cplx fluct = rng.complex_normal();
            const CellIllumination& cell = view.cells[i];
            if (!cell.visible) continue;
            const PatchGeometry& g = cell.geometry;
            const long rb = std::lround((g.slant_range - config.near_range) / config.range_bin);
            if (rb < 0 || rb >= config.n_range_bins) continue;
            const double gain2 = two_way_gain(config, g.azimuth, g.elevation);
            if (gain2 <= 0.0) continue;
            const double gamma = std::pow(10.0, backscatter_db(scene.landcover[i]) / 10.0);
            const double sigma = config.clutter_scale * gamma * cell_area * std::sin(g.grazing_angle);
            if (sigma <= 0.0) continue;
            const double amp = std::sqrt(received_power(config, gain2, sigma, g.slant_range));
            const double fd = wrap_doppler(2.0 * speed * g.radial_component / lambda, prf);
            add_tone(&cube.at(static_cast<int>(rb), 0), cube.n_pulses, amp * fluct, fd, prf);
        }
    }

    if (options.target && target != nullptr) {
        const TruthLabel truth = target_truth(view, config, *target);
        Rng rng(stable_hash(seed, 1));
        const double phase = 2.0 * kPi * rng.uniform();
        const Enu t = to_local(scene.origin(), {target->lat, target->lon, 0.0});
        const PlatformState& p = view.platform;
        const Enu plat = to_local(scene.origin(), {p.lat, p.lon, p.height_agl});
        const PatchGeometry g = patch_geometry_local(plat, p.speed, p.heading_deg * kPi / 180.0,
                                                     {t.east, t.north, scene.height_at_offset(t.east, t.north)});
        const double gain2 = two_way_gain(config, g.azimuth, g.elevation);
        const double amp = std::sqrt(received_power(config, gain2, target->rcs, g.slant_range));
        add_tone(&cube.at(truth.range_bin, 0), cube.n_pulses, std::polar(amp, phase),
                 wrap_doppler(truth.doppler_hz, prf), prf);
    }

    if (options.noise && config.noise_power > 0.0) {
        Rng rng(stable_hash(seed, 2));
        const double sd = std::sqrt(config.noise_power);
        for (auto& s : cube.samples) s += sd * rng.complex_normal();
    }
    return cube;
}

std::vector<double> hann_window(int n) {
    std::vector<double> w(static_cast<std::size_t>(n));
    for (int m = 0; m < n; ++m) w[m] = 0.5 - 0.5 * std::cos(2.0 * kPi * m / n);
    return w;
}

namespace {

struct FftwPlanCache {
    std::mutex mutex;
    std::map<int, fftw_plan> plans;

    fftw_plan get(int n) {
        std::lock_guard lock(mutex);
        auto it = plans.find(n);
        if (it != plans.end()) return it->second;
        std::vector<fftw_complex> in(static_cast<std::size_t>(n)), out(static_cast<std::size_t>(n));
        fftw_plan p = fftw_plan_dft_1d(n, in.data(), out.data(), FFTW_FORWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
        plans.emplace(n, p);
        return p;
    }
};

FftwPlanCache& plan_cache() {
    static FftwPlanCache cache;
    return cache;
}

}  // namespace

RDMap doppler_process(const SlowTimeCube& cube) {
    RDMap map;
    map.n_range = cube.n_range;
    map.n_doppler = cube.n_pulses;
    map.power.assign(static_cast<std::size_t>(cube.n_range) * cube.n_pulses, 0.0);
    const auto w = hann_window(cube.n_pulses);
    fftw_plan plan = plan_cache().get(cube.n_pulses);
    std::vector<fftw_complex> in(static_cast<std::size_t>(cube.n_pulses)), out(static_cast<std::size_t>(cube.n_pulses));
    for (int r = 0; r < cube.n_range; ++r) {
        for (int m = 0; m < cube.n_pulses; ++m) {
            const cplx v = w[m] * cube.at(r, m);
            in[m][0] = v.real();
            in[m][1] = v.imag();
        }
        fftw_execute_dft(plan, in.data(), out.data());
        for (int k = 0; k < cube.n_pulses; ++k) map.at(r, k) = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    }
    return map;
}

SimResult simulate_rd_map(const SceneView& view, const RadarConfig& config, const TargetSpec& target,
                          std::uint64_t seed, const SimOptions& options) {
    SimResult result;
    result.truth = target_truth(view, config, target);
    const SlowTimeCube cube = synthesize_slow_time(view, config, &target, seed, options);
    result.map = doppler_process(cube);
    result.map.config_hash = config.hash();
    result.map.seed = seed;
    result.map.doppler_ambiguous = result.truth.doppler_ambiguous;
    return result;
}

SimResult simulate_rd_map(const TerrainScene& scene, const RadarConfig& config, const PlatformState& platform,
                          const TargetSpec& target, std::uint64_t seed, const SimOptions& options) {
    const SceneView view = view_scene(scene, platform, config.terrain_shadowing);
    return simulate_rd_map(view, config, target, seed, options);
}

double db_to_power_ratio(double db) { return std::pow(10.0, db / 10.0); }

RadarConfig perturb_clutter(const RadarConfig& config, double delta_db) {
    if (!std::isfinite(delta_db)) throw ConfigError("perturb_clutter: delta_db must be finite");
    RadarConfig out = config;
    out.clutter_scale = config.clutter_scale * db_to_power_ratio(delta_db);
    return out;
}

void write_rd_map(const std::filesystem::path& stem, const RDMap& map, const RadarConfig& config,
                  const std::optional<TruthLabel>& truth) {
    map.validate();
    auto data = stem;
    data += ".f32";
    auto side = stem;
    side += ".json";
    write_file(data, to_f32_le(std::span<const double>(map.power)));
    nlohmann::json j;
    j["n_range"] = map.n_range;
    j["n_doppler"] = map.n_doppler;
    j["range_bin_m"] = config.range_bin;
    j["doppler_bin_hz"] = config.doppler_bin;
    j["near_range_m"] = config.near_range;
    j["config_hash"] = map.config_hash;
    j["seed"] = map.seed;
    j["window"] = map.window;
    j["doppler_ambiguous"] = map.doppler_ambiguous;
    j["layout"] = "float32-le row-major, rows = range bins";
    if (truth) j["truth"] = to_json(*truth);
    write_text(side, j.dump(2));
}

LoadedMap read_rd_map(const std::filesystem::path& stem) {
    auto data = stem;
    data += ".f32";
    auto side = stem;
    side += ".json";
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(side));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("rd map sidecar: ") + e.what());
    }
    LoadedMap out;
    out.map.n_range = j.at("n_range").get<int>();
    out.map.n_doppler = j.at("n_doppler").get<int>();
    out.map.config_hash = j.value("config_hash", std::string{});
    out.map.seed = j.value("seed", std::uint64_t{0});
    out.map.window = j.value("window", std::string("hann"));
    out.map.doppler_ambiguous = j.value("doppler_ambiguous", false);
    const auto values = from_f32_le(read_file(data));
    out.map.power.assign(values.begin(), values.end());
    out.map.validate();
    if (j.contains("truth")) out.truth = truth_from_json(j.at("truth"));
    return out;
}

}  // namespace detwin
