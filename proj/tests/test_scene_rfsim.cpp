#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "detwin/rfsim.hpp"

using namespace detwin;

namespace {

const TerrainScene& desk_scene() {
    static const TerrainScene scene = [] {
        TerrainSpec ts;
        ts.rows = 340;
        ts.cols = 340;
        ts.cell_size = 30.0;
        ts.feature_cells = 64.0;
        return generate_terrain(7, ts);
    }();
    return scene;
}

const SceneView& desk_view() {
    static const SceneView view = view_scene(desk_scene(), PlatformState{}, true);
    return view;
}

TargetSpec center_target() {
    TargetSpec t;
    t.lat = 32.5505;
    t.lon = -117.0493;
    t.rcs = 300.0;
    return t;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

}  // namespace

TEST_CASE("terrain is deterministic and seed dependent") {
    TerrainSpec s;
    const auto a = generate_terrain(7, s), b = generate_terrain(7, s), c = generate_terrain(8, s);
    CHECK(a.rows == 64);
    CHECK(a.height == b.height);
    CHECK(a.landcover == b.landcover);
    CHECK(a.height != c.height);
    for (double h : a.height) CHECK(std::isfinite(h));
}

TEST_CASE("terrain thresholds") {
    TerrainSpec s;
    s.water_level = 2.0;
    const auto flooded = generate_terrain(1, s);
    CHECK(std::all_of(flooded.landcover.begin(), flooded.landcover.end(),
                      [](Landcover c) { return c == Landcover::water; }));

    // Water sits at the basin floor: never above any land cell.
    const auto t = generate_terrain(3, TerrainSpec{});
    double max_water = -1e300, min_land = 1e300;
    std::array<int, kLandcoverCount> seen{};
    for (std::size_t i = 0; i < t.height.size(); ++i) {
        ++seen[static_cast<int>(t.landcover[i])];
        if (t.landcover[i] == Landcover::water) max_water = std::max(max_water, t.height[i]);
        else min_land = std::min(min_land, t.height[i]);
    }
    CHECK(max_water <= min_land);
    for (int k : seen) CHECK(k > 0);

    TerrainSpec bad;
    bad.rows = 4;
    CHECK_THROWS_AS(generate_terrain(1, bad), ConfigError);
    bad = {};
    bad.urban_moisture = 0.9;
    bad.forest_moisture = 0.1;
    CHECK_THROWS_AS(generate_terrain(1, bad), ConfigError);
}

TEST_CASE("scene export round-trip") {
    const auto t = generate_terrain(5, TerrainSpec{});
    const auto dir = std::filesystem::temp_directory_path() / "detwin_test_scene";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    export_scene(t, dir);
    const auto back = import_scene(dir);
    CHECK(back.rows == t.rows);
    CHECK(back.landcover == t.landcover);
    for (std::size_t i = 0; i < t.height.size(); ++i)
        CHECK(back.height[i] == doctest::Approx(t.height[i]).epsilon(1e-6));
}

TEST_CASE("patch geometry examples") {
    PlatformState p;
    p.lat = 32.5;
    p.lon = -117.0;
    p.height_agl = 1000.0;
    auto g = patch_geometry(p, {32.5, -117.0, 0.0});
    CHECK(g.slant_range == doctest::Approx(1000.0));
    CHECK(g.radial_component == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(g.grazing_angle == doctest::Approx(kPi / 2));

    g = patch_geometry(p, {32.6, -117.0, 1000.0});
    CHECK(g.radial_component == doctest::Approx(1.0));

    PlatformState ref;  // 32.4005 N, 117.1993 W, 1000 m
    g = patch_geometry(ref, {32.5505, -117.0493, 0.0});
    const double mid = (32.4005 + 32.5505) / 2 * kPi / 180.0;
    const double dn = 0.15 * kMetersPerDegree, de = 0.15 * std::cos(mid) * kMetersPerDegree;
    CHECK(g.slant_range == doctest::Approx(std::sqrt(dn * dn + de * de + 1e6)).epsilon(1e-9));
    CHECK(g.slant_range == doctest::Approx(2.19e4).epsilon(0.01));

    CHECK_THROWS_AS(patch_geometry(p, {32.5, -117.0, 1000.0}), GeometryError);
}

TEST_CASE("patch geometry symmetry and flat-earth consistency") {
    const Enu plat{0.0, 0.0, 1000.0};
    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        const double e = rng.uniform(-5000, 5000), n = rng.uniform(-5000, 5000);
        const auto a = patch_geometry_local(plat, 100.0, 0.0, {e, n, 0.0});
        const auto mirrored = patch_geometry_local(plat, 100.0, 0.0, {-e, n, 0.0});
        const auto aft = patch_geometry_local(plat, 100.0, 0.0, {e, -n, 0.0});
        CHECK(mirrored.slant_range == doctest::Approx(a.slant_range).epsilon(1e-12));
        CHECK(mirrored.radial_component == doctest::Approx(a.radial_component).epsilon(1e-12));
        CHECK(aft.radial_component == doctest::Approx(-a.radial_component).epsilon(1e-12));
        CHECK(a.slant_range > 1000.0);
        CHECK(a.grazing_angle >= 0.0);
        CHECK(a.grazing_angle <= kPi / 2);
    }
    CHECK(patch_geometry_local(plat, 100.0, 0.0, {0.0, 0.0, 0.0}).slant_range == doctest::Approx(1000.0));
}

TEST_CASE("bin arithmetic of the reference radar") {
    const auto c = RadarConfig::paper_scale();
    CHECK(c.range_bin == doctest::Approx(0.0162 * kMetersPerNauticalMile).epsilon(1e-3));
    CHECK(c.cpi() == doctest::Approx(0.2909).epsilon(1e-3));
    CHECK(c.doppler_bin * c.n_pulses == c.prf());
    CHECK(c.wavelength() == kSpeedOfLight / 10e9);
    CHECK(db_to_power_ratio(6.0) == doctest::Approx(3.981).epsilon(1e-3));
    CHECK(c.n_range_bins == 680);
    CHECK(c.n_pulses == 320);
}

TEST_CASE("array gain and beamwidth") {
    RadarConfig c;
    CHECK(array_gain(c, c.look_az, c.look_el) == doctest::Approx(2500.0).epsilon(1e-12));
    const double bw10 = azimuth_beamwidth_3db(c);
    const double deg = bw10 * 180.0 / kPi;
    CHECK(deg == doctest::Approx(10.2).epsilon(0.01));
    // Independent small-angle estimate 0.886 lambda / (N d).
    CHECK(bw10 == doctest::Approx(0.886 * c.wavelength() / (10 * c.element_spacing)).epsilon(0.02));
    c.n_horizontal = 20;
    const double bw20 = azimuth_beamwidth_3db(c);
    CHECK(bw10 / bw20 == doctest::Approx(2.0).epsilon(0.05));
    CHECK(array_gain(c, c.look_az, c.look_el) == doctest::Approx(10000.0).epsilon(1e-12));
    // Pattern at the measured half-width is half the peak.
    CHECK(array_gain(c, c.look_az + bw20 / 2, c.look_el) == doctest::Approx(5000.0).epsilon(1e-6));
    c.omnidirectional = true;
    CHECK(array_gain(c, 1.0, 0.3) == 1.0);
}

TEST_CASE("radar config validation") {
    RadarConfig c;
    c.element_spacing = 0.02;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.range_bin = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(radar_config_from_json({{"bogus", 1}}), ConfigError);
    const auto d = RadarConfig::desk_scale();
    CHECK(radar_config_from_json(to_json(d)).hash() == d.hash());
}

TEST_CASE("doppler folding") {
    CHECK(wrap_doppler(0.0, 100.0) == 0.0);
    CHECK(wrap_doppler(50.0, 100.0) == -50.0);
    CHECK(wrap_doppler(-50.0, 100.0) == -50.0);
    CHECK(wrap_doppler(130.0, 100.0) == doctest::Approx(30.0));
    CHECK(wrap_doppler(-6667.0, 2048.0) == doctest::Approx(-6667.0 + 3 * 2048.0));
}

TEST_CASE("closing target lands 136 bins out at 3.4375 Hz") {
    const double fd = 2.0 * 7.0 / 0.03;
    CHECK(fd == doctest::Approx(466.7).epsilon(1e-3));
    CHECK(std::lround(fd / 3.4375) == 136);

    // Same through the simulator: stationary platform, target heading at it.
    PlatformState still;
    still.speed = 0.0;
    auto view = view_scene(desk_scene(), still, false);
    RadarConfig c = RadarConfig::desk_scale();
    c.doppler_bin = 3.4375;
    c.n_pulses = 320;
    TargetSpec t = center_target();
    const auto g = patch_geometry(still, {t.lat, t.lon, 0.0});
    t.heading_deg = std::fmod(g.azimuth * 180.0 / kPi + 180.0, 360.0);
    const auto truth = target_truth(view, c, t);
    const double expect = 2.0 * 7.0 * std::cos(g.elevation) / c.wavelength();
    CHECK(truth.doppler_hz == doctest::Approx(expect).epsilon(0.01));
    CHECK(truth.doppler_bin == 136);
}

TEST_CASE("stationary target without clutter peaks in Doppler bin zero") {
    PlatformState still;
    still.speed = 0.0;
    auto view = view_scene(desk_scene(), still, false);
    auto c = RadarConfig::desk_scale();
    TargetSpec t = center_target();
    t.ground_speed = 0.0;
    const auto res = simulate_rd_map(view, c, t, 1, {.clutter = false, .target = true, .noise = false});
    std::size_t best = 0;
    for (std::size_t i = 0; i < res.map.power.size(); ++i)
        if (res.map.power[i] > res.map.power[best]) best = i;
    CHECK(static_cast<int>(best / c.n_pulses) == res.truth.range_bin);
    CHECK(best % c.n_pulses == 0);
    CHECK(res.truth.doppler_bin == 0);
}

TEST_CASE("simulation is deterministic and non-negative") {
    const auto c = RadarConfig::desk_scale();
    auto cn = c;
    cn.noise_power = 1e-17;
    const auto a = simulate_rd_map(desk_view(), cn, center_target(), 5);
    const auto b = simulate_rd_map(desk_view(), cn, center_target(), 5);
    const auto d = simulate_rd_map(desk_view(), cn, center_target(), 6);
    CHECK(a.map.power == b.map.power);
    CHECK(a.map.content_hash() == b.map.content_hash());
    CHECK(a.map.power != d.map.power);
    for (double v : a.map.power) {
        CHECK(std::isfinite(v));
        CHECK(v >= 0.0);
    }
}

TEST_CASE("parseval per range bin") {
    const auto c = RadarConfig::desk_scale();
    const auto cube = synthesize_slow_time(desk_view(), c, nullptr, 3, {.clutter = true, .target = false, .noise = false});
    const auto map = doppler_process(cube);
    const auto w = hann_window(c.n_pulses);
    int checked = 0;
    for (int r = 0; r < cube.n_range; ++r) {
        double time = 0.0, freq = 0.0;
        for (int m = 0; m < cube.n_pulses; ++m) time += std::norm(w[m] * cube.at(r, m));
        for (int k = 0; k < map.n_doppler; ++k) freq += map.at(r, k);
        if (time == 0.0) continue;
        CHECK(freq / map.n_doppler == doctest::Approx(time).epsilon(1e-9));
        ++checked;
    }
    CHECK(checked > 0);
}

TEST_CASE("clutter doppler stays inside the platform support") {
    const auto& view = desk_view();
    const auto c = RadarConfig::desk_scale();
    const double limit = 2.0 * view.platform.speed / c.wavelength();
    for (const auto& cell : view.cells)
        CHECK(std::abs(2.0 * view.platform.speed * cell.geometry.radial_component / c.wavelength()) <= limit);
}

TEST_CASE("clutter perturbation scales clutter power only") {
    const auto c = RadarConfig::desk_scale();
    CHECK(perturb_clutter(c, 6.0).clutter_scale == doctest::Approx(3.981).epsilon(1e-3));
    const SimOptions clutter_only{.clutter = true, .target = false, .noise = false};
    const auto base = simulate_rd_map(desk_view(), c, center_target(), 8, clutter_only);
    const auto same = simulate_rd_map(desk_view(), perturb_clutter(c, 0.0), center_target(), 8, clutter_only);
    CHECK(base.map.power == same.map.power);
    const auto up = simulate_rd_map(desk_view(), perturb_clutter(c, 6.0), center_target(), 8, clutter_only);
    CHECK(mean(up.map.power) / mean(base.map.power) == doctest::Approx(std::pow(10.0, 0.6)).epsilon(0.01));

    const SimOptions target_only{.clutter = false, .target = true, .noise = false};
    const auto t0 = simulate_rd_map(desk_view(), c, center_target(), 8, target_only);
    const auto t1 = simulate_rd_map(desk_view(), perturb_clutter(c, 6.0), center_target(), 8, target_only);
    CHECK(t0.map.power == t1.map.power);
}

TEST_CASE("target power is linear in transmit power") {
    auto c = RadarConfig::desk_scale();
    const SimOptions target_only{.clutter = false, .target = true, .noise = false};
    const auto a = simulate_rd_map(desk_view(), c, center_target(), 2, target_only);
    c.tx_power = 7.0;
    const auto b = simulate_rd_map(desk_view(), c, center_target(), 2, target_only);
    const double pa = *std::max_element(a.map.power.begin(), a.map.power.end());
    const double pb = *std::max_element(b.map.power.begin(), b.map.power.end());
    CHECK(pb / pa == doctest::Approx(7.0).epsilon(1e-9));
}

TEST_CASE("target outside the scene is rejected") {
    TargetSpec t = center_target();
    t.lat = 33.5;
    CHECK_THROWS_AS(simulate_rd_map(desk_view(), RadarConfig::desk_scale(), t, 1), ConfigError);
}

TEST_CASE("rd map files round-trip") {
    auto c = RadarConfig::desk_scale();
    c.noise_power = 1e-17;
    const auto res = simulate_rd_map(desk_view(), c, center_target(), 4);
    const auto dir = std::filesystem::temp_directory_path() / "detwin_test_rd";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    write_rd_map(dir / "m", res.map, c, res.truth);
    const auto back = read_rd_map(dir / "m");
    REQUIRE(back.truth.has_value());
    CHECK(back.truth->range_bin == res.truth.range_bin);
    CHECK(back.map.config_hash == c.hash());
    CHECK(back.map.content_hash() == res.map.content_hash());
}
