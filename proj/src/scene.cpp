#include "detwin/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

namespace detwin {

double backscatter_db(Landcover c) {
    switch (c) {
        case Landcover::water: return -35.0;
        case Landcover::grass: return -20.0;
        case Landcover::forest: return -15.0;
        case Landcover::urban: return -8.0;
    }
    return -35.0;
}

const char* landcover_name(Landcover c) {
    switch (c) {
        case Landcover::water: return "water";
        case Landcover::grass: return "grass";
        case Landcover::forest: return "forest";
        case Landcover::urban: return "urban";
    }
    return "?";
}

void PlatformState::validate() const {
    if (!std::isfinite(lat) || !std::isfinite(lon) || !std::isfinite(heading_deg))
        throw ConfigError("platform: non-finite position or heading");
    if (!(speed >= 0.0)) throw ConfigError("platform: speed must be >= 0");
    if (!(height_agl > 0.0)) throw ConfigError("platform: height_agl must be > 0");
}

Enu to_local(const GeoPoint& reference, const GeoPoint& point) {
    const double mid_lat = 0.5 * (reference.lat + point.lat) * kPi / 180.0;
    return {(point.lon - reference.lon) * kMetersPerDegree * std::cos(mid_lat),
            (point.lat - reference.lat) * kMetersPerDegree, point.height - reference.height};
}

GeoPoint from_local(const GeoPoint& reference, const Enu& offset) {
    const double lat = reference.lat + offset.north / kMetersPerDegree;
    const double mid_lat = 0.5 * (reference.lat + lat) * kPi / 180.0;
    return {lat, reference.lon + offset.east / (kMetersPerDegree * std::cos(mid_lat)),
            reference.height + offset.up};
}

PatchGeometry patch_geometry_local(const Enu& platform_pos, double speed, double heading_rad,
                                   const Enu& patch, const Enu& surface_normal) {
    const double de = patch.east - platform_pos.east;
    const double dn = patch.north - platform_pos.north;
    const double du = patch.up - platform_pos.up;
    const double ground = std::hypot(de, dn);
    const double range = std::sqrt(ground * ground + du * du);
    if (!(range > 0.0)) throw GeometryError("patch coincides with platform (zero slant range)");

    PatchGeometry g;
    g.slant_range = range;
    g.azimuth = std::atan2(de, dn);
    g.elevation = std::atan2(du, ground);
    const double ue = de / range, un = dn / range, uu = du / range;
    // Incidence on the local surface plane; back-facing slopes give zero grazing.
    const double cos_incidence =
        -(ue * surface_normal.east + un * surface_normal.north + uu * surface_normal.up);
    g.grazing_angle = std::asin(std::clamp(cos_incidence, 0.0, 1.0));
    if (speed > 0.0) {
        g.radial_component = std::sin(heading_rad) * ue + std::cos(heading_rad) * un;
    } else {
        g.radial_component = 0.0;
    }
    return g;
}

PatchGeometry patch_geometry(const PlatformState& platform, const GeoPoint& patch_center) {
    platform.validate();
    const GeoPoint plat{platform.lat, platform.lon, platform.height_agl};
    const Enu patch = to_local(plat, patch_center);
    return patch_geometry_local({0.0, 0.0, 0.0}, platform.speed, platform.heading_deg * kPi / 180.0,
                                {patch.east, patch.north, patch_center.height - platform.height_agl});
}

void TerrainSpec::validate() const {
    if (rows < 8 || cols < 8) throw ConfigError("terrain: dimensions must be at least 8x8");
    if (!(cell_size > 0.0) || !std::isfinite(cell_size)) throw ConfigError("terrain: cell_size must be > 0");
    if (!(relief >= 0.0) || !std::isfinite(relief)) throw ConfigError("terrain: relief must be >= 0");
    if (octaves < 1 || octaves > 12) throw ConfigError("terrain: octaves must be in [1, 12]");
    if (!(feature_cells >= 1.0)) throw ConfigError("terrain: feature_cells must be >= 1");
    if (!std::isfinite(water_level) || !std::isfinite(urban_moisture) || !std::isfinite(forest_moisture))
        throw ConfigError("terrain: thresholds must be finite");
    if (!(urban_moisture <= forest_moisture))
        throw ConfigError("terrain: thresholds not ordered (urban_moisture <= forest_moisture)");
}

Enu TerrainScene::cell_offset(int r, int c) const {
    return {(c - 0.5 * (cols - 1)) * cell_size, (r - 0.5 * (rows - 1)) * cell_size, height_at(r, c)};
}

GeoPoint TerrainScene::cell_center(int r, int c) const {
    const Enu off = cell_offset(r, c);
    GeoPoint p = from_local(origin(), {off.east, off.north, 0.0});
    p.height = off.up;
    return p;
}

double TerrainScene::height_at_offset(double east, double north) const {
    const double x = std::clamp(east / cell_size + 0.5 * (cols - 1), 0.0, cols - 1.0);
    const double y = std::clamp(north / cell_size + 0.5 * (rows - 1), 0.0, rows - 1.0);
    const int c0 = std::min(static_cast<int>(x), cols - 2);
    const int r0 = std::min(static_cast<int>(y), rows - 2);
    const double fx = x - c0, fy = y - r0;
    const double h00 = height_at(r0, c0), h01 = height_at(r0, c0 + 1);
    const double h10 = height_at(r0 + 1, c0), h11 = height_at(r0 + 1, c0 + 1);
    return (1 - fy) * ((1 - fx) * h00 + fx * h01) + fy * ((1 - fx) * h10 + fx * h11);
}

Enu TerrainScene::surface_normal(int r, int c) const {
    const int c0 = std::max(c - 1, 0), c1 = std::min(c + 1, cols - 1);
    const int r0 = std::max(r - 1, 0), r1 = std::min(r + 1, rows - 1);
    const double dhdx = (height_at(r, c1) - height_at(r, c0)) / ((c1 - c0) * cell_size);
    const double dhdy = (height_at(r1, c) - height_at(r0, c)) / ((r1 - r0) * cell_size);
    const double norm = std::sqrt(dhdx * dhdx + dhdy * dhdy + 1.0);
    return {-dhdx / norm, -dhdy / norm, 1.0 / norm};
}

bool TerrainScene::contains(const Enu& offset) const {
    return std::abs(offset.east) <= half_extent_east() && std::abs(offset.north) <= half_extent_north();
}

double TerrainScene::mean_height() const {
    double s = 0.0;
    for (double h : height) s += h;
    return height.empty() ? 0.0 : s / static_cast<double>(height.size());
}

void TerrainScene::validate() const {
    if (rows < 8 || cols < 8) throw ConfigError("scene: dimensions must be at least 8x8");
    const auto n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    if (height.size() != n || landcover.size() != n) throw ConfigError("scene: grid sizes disagree");
    if (!(cell_size > 0.0)) throw ConfigError("scene: cell_size must be > 0");
    for (double h : height)
        if (!std::isfinite(h)) throw ConfigError("scene: non-finite height");
    for (auto c : landcover)
        if (static_cast<int>(c) >= kLandcoverCount) throw ConfigError("scene: invalid landcover class");
}

namespace {

double lattice_value(std::uint64_t seed, int octave, long ix, long iy) {
    const std::uint64_t h = stable_hash(stable_hash(seed, static_cast<std::uint64_t>(octave)),
                                        (static_cast<std::uint64_t>(ix) << 32) ^ static_cast<std::uint32_t>(iy));
    return static_cast<double>(h >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

double smooth(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

// Multi-octave value noise, min-max normalised to [0, 1].
std::vector<double> fractal_field(std::uint64_t seed, int rows, int cols, int octaves, double feature_cells) {
    std::vector<double> field(static_cast<std::size_t>(rows) * cols, 0.0);
    double amplitude = 1.0;
    double wavelength = feature_cells;
    for (int o = 0; o < octaves; ++o) {
        for (int r = 0; r < rows; ++r) {
            const double y = r / wavelength;
            const long iy = static_cast<long>(std::floor(y));
            const double fy = smooth(y - iy);
            for (int c = 0; c < cols; ++c) {
                const double x = c / wavelength;
                const long ix = static_cast<long>(std::floor(x));
                const double fx = smooth(x - ix);
                const double v00 = lattice_value(seed, o, ix, iy), v01 = lattice_value(seed, o, ix + 1, iy);
                const double v10 = lattice_value(seed, o, ix, iy + 1), v11 = lattice_value(seed, o, ix + 1, iy + 1);
                field[static_cast<std::size_t>(r) * cols + c] +=
                    amplitude * ((1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11));
            }
        }
        amplitude *= 0.5;
        wavelength = std::max(1.0, wavelength * 0.5);
    }
    const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
    const double lo_v = *lo, span = *hi - *lo;
    for (double& v : field) v = span > 0.0 ? (v - lo_v) / span : 0.0;
    return field;
}

}  // namespace

TerrainScene generate_terrain(std::uint64_t seed, const TerrainSpec& spec, double origin_lat, double origin_lon) {
    spec.validate();
    TerrainScene scene;
    scene.origin_lat = origin_lat;
    scene.origin_lon = origin_lon;
    scene.rows = spec.rows;
    scene.cols = spec.cols;
    scene.cell_size = spec.cell_size;
    scene.seed = seed;

    const auto elevation = fractal_field(stable_hash(seed, 1), spec.rows, spec.cols, spec.octaves, spec.feature_cells);
    const auto moisture = fractal_field(stable_hash(seed, 2), spec.rows, spec.cols, spec.octaves, spec.feature_cells);

    const std::size_t n = elevation.size();
    scene.height.resize(n);
    scene.landcover.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double h = elevation[i];
        Landcover cls;
        if (h < spec.water_level) {
            // Flooded basin: flat water surface at the water level.
            cls = Landcover::water;
            h = std::min(spec.water_level, 1.0);
        } else if (moisture[i] < spec.urban_moisture) {
            cls = Landcover::urban;
        } else if (moisture[i] > spec.forest_moisture) {
            cls = Landcover::forest;
        } else {
            cls = Landcover::grass;
        }
        scene.height[i] = spec.base_elevation + spec.relief * h;
        scene.landcover[i] = cls;
    }
    return scene;
}

std::vector<CellIllumination> illuminate(const TerrainScene& scene, const PlatformState& platform,
                                         bool shadowing) {
    platform.validate();
    scene.validate();
    const Enu plat = to_local(scene.origin(), {platform.lat, platform.lon, platform.height_agl});
    const double heading = platform.heading_deg * kPi / 180.0;
    std::vector<CellIllumination> out(scene.height.size());
    const double step = 0.75 * scene.cell_size;
    for (int r = 0; r < scene.rows; ++r) {
        for (int c = 0; c < scene.cols; ++c) {
            const Enu p = scene.cell_offset(r, c);
            CellIllumination& cell = out[scene.index(r, c)];
            cell.geometry = patch_geometry_local(plat, platform.speed, heading, p, scene.surface_normal(r, c));
            if (!shadowing) continue;
            // March from the patch toward the platform until the ray leaves the scene.
            const double de = plat.east - p.east, dn = plat.north - p.north;
            const double ground = std::hypot(de, dn);
            if (ground <= 0.0) continue;
            const double ue = de / ground, un = dn / ground;
            const double slope = (plat.up - p.up) / ground;
            for (double s = step; s < ground; s += step) {
                const double e = p.east + ue * s, nn = p.north + un * s;
                if (!scene.contains({e, nn, 0.0})) break;
                if (scene.height_at_offset(e, nn) > p.up + slope * s + 1e-6) {
                    cell.visible = false;
                    break;
                }
            }
        }
    }
    return out;
}

void export_scene(const TerrainScene& scene, const std::filesystem::path& dir) {
    scene.validate();
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["rows"] = scene.rows;
    j["cols"] = scene.cols;
    j["cell_size"] = scene.cell_size;
    j["origin_lat"] = scene.origin_lat;
    j["origin_lon"] = scene.origin_lon;
    j["seed"] = scene.seed;
    j["height_file"] = "height.f32";
    j["landcover_file"] = "landcover.u8";
    j["classes"] = {"water", "grass", "forest", "urban"};
    write_text(dir / "scene.json", j.dump(2));
    write_file(dir / "height.f32", to_f32_le(std::span<const double>(scene.height)));
    std::vector<std::uint8_t> cls(scene.landcover.size());
    std::transform(scene.landcover.begin(), scene.landcover.end(), cls.begin(),
                   [](Landcover c) { return static_cast<std::uint8_t>(c); });
    write_file(dir / "landcover.u8", cls);
}

TerrainScene import_scene(const std::filesystem::path& dir) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(dir / "scene.json"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("scene manifest: ") + e.what());
    }
    TerrainScene scene;
    scene.rows = j.at("rows").get<int>();
    scene.cols = j.at("cols").get<int>();
    scene.cell_size = j.at("cell_size").get<double>();
    scene.origin_lat = j.at("origin_lat").get<double>();
    scene.origin_lon = j.at("origin_lon").get<double>();
    scene.seed = j.value("seed", std::uint64_t{0});
    const auto heights = from_f32_le(read_file(dir / j.value("height_file", std::string("height.f32"))));
    const auto classes = read_file(dir / j.value("landcover_file", std::string("landcover.u8")));
    scene.height.assign(heights.begin(), heights.end());
    scene.landcover.resize(classes.size());
    for (std::size_t i = 0; i < classes.size(); ++i) {
        if (classes[i] >= kLandcoverCount) throw ConfigError("scene import: invalid class id");
        scene.landcover[i] = static_cast<Landcover>(classes[i]);
    }
    scene.validate();
    return scene;
}

}  // namespace detwin
