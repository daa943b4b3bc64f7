#pragma once

// Environment digital twin: synthetic terrain elevation + landcover, and the
// flat-earth geometry between an airborne platform and ground patches.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "detwin/common.hpp"

namespace detwin {

enum class Landcover : std::uint8_t { water = 0, grass = 1, forest = 2, urban = 3 };

inline constexpr int kLandcoverCount = 4;

/// Backscatter coefficient gamma (dB) per landcover class. Repo constants.
double backscatter_db(Landcover c);
const char* landcover_name(Landcover c);

struct GeoPoint {
    double lat = 0.0;  ///< degrees
    double lon = 0.0;  ///< degrees, east positive
    double height = 0.0;  ///< meters above datum
};

struct PlatformState {
    double lat = 32.4005;
    double lon = -117.1993;
    double height_agl = 1000.0;  ///< meters above the terrain datum
    double speed = 100.0;        ///< m/s
    double heading_deg = 0.0;    ///< degrees true

    void validate() const;
};

struct PatchGeometry {
    double slant_range = 0.0;    ///< m
    double azimuth = 0.0;        ///< bearing of the line of sight, rad clockwise from north
    double elevation = 0.0;      ///< line-of-sight elevation, rad (negative looking down)
    double grazing_angle = 0.0;  ///< rad in [0, pi/2]
    double radial_component = 0.0;  ///< cos(angle between platform velocity and LOS)
};

/// Local east/north/up offset in meters.
struct Enu {
    double east = 0.0;
    double north = 0.0;
    double up = 0.0;
};

/// Flat-earth tangent plane: 111320 m per degree north, 111320*cos(lat) east.
Enu to_local(const GeoPoint& reference, const GeoPoint& point);
GeoPoint from_local(const GeoPoint& reference, const Enu& offset);

/// Geometry between `platform` and a ground point, flat ground at the patch.
/// Throws GeometryError when the two coincide.
PatchGeometry patch_geometry(const PlatformState& platform, const GeoPoint& patch_center);

/// Same, in a shared local frame. `surface_normal` selects slope-aware grazing.
PatchGeometry patch_geometry_local(const Enu& platform_pos, double speed, double heading_rad,
                                   const Enu& patch, const Enu& surface_normal = {0.0, 0.0, 1.0});

struct TerrainSpec {
    int rows = 64;
    int cols = 64;
    double cell_size = 40.0;       ///< m
    double relief = 300.0;         ///< height span of the normalised heightmap, m
    double base_elevation = 0.0;   ///< m
    int octaves = 5;
    double feature_cells = 24.0;   ///< wavelength of the coarsest octave, in cells
    // Class thresholds. Heights and moisture are normalised to [0, 1] first.
    double water_level = 0.2;      ///< normalised height below which basins flood
    double urban_moisture = 0.3;   ///< moisture below which land is urban
    double forest_moisture = 0.6;  ///< moisture above which land is forest

    void validate() const;
};

struct TerrainScene {
    double origin_lat = 32.5505;  ///< scene center
    double origin_lon = -117.0493;
    int rows = 0;  ///< row 0 is the southern edge
    int cols = 0;  ///< col 0 is the western edge
    double cell_size = 0.0;
    std::uint64_t seed = 0;
    std::vector<double> height;         ///< row-major, meters
    std::vector<Landcover> landcover;   ///< row-major

    double height_at(int r, int c) const { return height[index(r, c)]; }
    Landcover class_at(int r, int c) const { return landcover[index(r, c)]; }
    std::size_t index(int r, int c) const {
        return static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c);
    }
    GeoPoint origin() const { return {origin_lat, origin_lon, 0.0}; }
    /// Offset of the center of cell (r, c) from the scene origin.
    Enu cell_offset(int r, int c) const;
    GeoPoint cell_center(int r, int c) const;
    /// Bilinear height at a local offset (clamped to the grid).
    double height_at_offset(double east, double north) const;
    /// Upward unit normal from central differences.
    Enu surface_normal(int r, int c) const;
    bool contains(const Enu& offset) const;
    double half_extent_east() const { return 0.5 * cols * cell_size; }
    double half_extent_north() const { return 0.5 * rows * cell_size; }
    double mean_height() const;

    void validate() const;
};

/// Fractal multi-octave heightmap with basins flooded below the water level and
/// land split into grass/forest/urban by an independent moisture field.
TerrainScene generate_terrain(std::uint64_t seed, const TerrainSpec& spec,
                              double origin_lat = 32.5505, double origin_lon = -117.0493);

/// Per-cell geometry plus terrain-masking (line-of-sight shadow) flag.
struct CellIllumination {
    PatchGeometry geometry;
    bool visible = true;
};

std::vector<CellIllumination> illuminate(const TerrainScene& scene, const PlatformState& platform,
                                         bool shadowing);

/// Writes `<dir>/scene.json`, `<dir>/height.f32`, `<dir>/landcover.u8`.
void export_scene(const TerrainScene& scene, const std::filesystem::path& dir);
TerrainScene import_scene(const std::filesystem::path& dir);

}  // namespace detwin
