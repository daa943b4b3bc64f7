#pragma once

// System-under-test digital twin: uniform rectangular array pattern, clutter
// and target returns, slow-time synthesis and Doppler processing into
// range-Doppler (RD) power maps.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "detwin/common.hpp"
#include "detwin/scene.hpp"

namespace detwin {

struct RadarConfig {
    double carrier_freq = 10.0e9;   ///< Hz
    double tx_power = 1.0;          ///< arbitrary linear units
    double element_spacing = 0.015; ///< m
    int n_horizontal = 10;
    int n_vertical = 5;
    double look_az = 0.0;  ///< electronic steering relative to array boresight, rad
    double look_el = 0.0;  ///< rad
    double boresight_bearing_deg = 0.0;  ///< world bearing of the array normal
    int n_pulses = 64;
    int n_range_bins = 128;
    double range_bin = 30.0;         ///< m
    double doppler_bin = 3.4375;     ///< Hz; prf() = n_pulses * doppler_bin
    double near_range = 20000.0;     ///< slant range of range bin 0, m
    double noise_power = 0.0;        ///< per-pulse complex noise power
    double clutter_scale = 1.0;      ///< multiplier on every patch's scattered power
    bool omnidirectional = false;
    bool terrain_shadowing = true;

    double wavelength() const { return kSpeedOfLight / carrier_freq; }
    double prf() const { return doppler_bin * n_pulses; }
    double cpi() const { return 1.0 / doppler_bin; }

    void validate() const;
    /// SHA-256 of the canonical JSON form.
    std::string hash() const;

    /// Full-size map from the reference scenario (680 x 320 bins).
    static RadarConfig paper_scale();
    /// 128 x 64 desk-scale map.
    static RadarConfig desk_scale();
};

nlohmann::json to_json(const RadarConfig& c);
/// Rejects unknown keys; missing keys keep their defaults from `base`.
RadarConfig radar_config_from_json(const nlohmann::json& j, const RadarConfig& base = {});

struct TargetSpec {
    double lat = 32.5505;
    double lon = -117.0493;
    double ground_speed = 7.0;  ///< m/s
    double heading_deg = 0.0;
    double rcs = 1.0;           ///< m^2

    void validate() const;
};

nlohmann::json to_json(const TargetSpec& t);
TargetSpec target_from_json(const nlohmann::json& j);

/// Range-Doppler power map. Rows are range bins, columns Doppler bins in DFT
/// order (column k holds k * doppler_bin Hz, folded modulo PRF).
struct RDMap {
    int n_range = 0;
    int n_doppler = 0;
    std::vector<double> power;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string window = "hann";
    bool doppler_ambiguous = false;

    double at(int r, int d) const { return power[static_cast<std::size_t>(r) * n_doppler + d]; }
    double& at(int r, int d) { return power[static_cast<std::size_t>(r) * n_doppler + d]; }
    /// SHA-256 of the float32 little-endian payload.
    std::string content_hash() const;
    void validate() const;
};

struct TruthLabel {
    int range_bin = 0;
    int doppler_bin = 0;
    double doppler_hz = 0.0;  ///< before folding
    double slant_range = 0.0;
    bool doppler_ambiguous = false;
    TargetSpec target;
};

nlohmann::json to_json(const TruthLabel& t);
TruthLabel truth_from_json(const nlohmann::json& j);

/// Uniform rectangular array power pattern steered to (look_az, look_el):
/// |AF_h(az)|^2 * |AF_v(el)|^2, peak N_h^2 * N_v^2. 1 when omnidirectional.
double array_gain(const RadarConfig& config, double az, double el);

/// One-dimensional |AF|^2 of an N-element line with spacing/wavelength ratio.
double line_array_power(int n, double spacing_over_lambda, double sin_offset);

/// Full 3 dB width of the horizontal pattern at boresight, rad (bisection on |AF|^2 = peak / 2).
double azimuth_beamwidth_3db(const RadarConfig& config);

/// Folds a frequency into [-prf/2, prf/2).
double wrap_doppler(double f, double prf);

struct SimOptions {
    bool clutter = true;
    bool target = true;
    bool noise = true;
};

/// Complex slow-time samples per range bin (n_range_bins x n_pulses, row-major).
struct SlowTimeCube {
    int n_range = 0;
    int n_pulses = 0;
    std::vector<cplx> samples;
    cplx& at(int r, int m) { return samples[static_cast<std::size_t>(r) * n_pulses + m]; }
    cplx at(int r, int m) const { return samples[static_cast<std::size_t>(r) * n_pulses + m]; }
};

struct SimResult {
    RDMap map;
    TruthLabel truth;
};

/// Geometry of the scene as seen by `platform`, reusable across samples that
/// share platform and scene.
struct SceneView {
    const TerrainScene* scene = nullptr;
    PlatformState platform;
    std::vector<CellIllumination> cells;
    bool shadowing = true;
};

SceneView view_scene(const TerrainScene& scene, const PlatformState& platform, bool shadowing);

/// Target geometry and quantised truth bins. Throws ConfigError when the
/// target lies outside the scene or the range window.
TruthLabel target_truth(const SceneView& view, const RadarConfig& config, const TargetSpec& target);

SlowTimeCube synthesize_slow_time(const SceneView& view, const RadarConfig& config, const TargetSpec* target,
                                  std::uint64_t seed, const SimOptions& options = {});

/// Periodic Hann window of length n.
std::vector<double> hann_window(int n);

/// Hann-windowed, unnormalised DFT over pulses followed by |.|^2.
RDMap doppler_process(const SlowTimeCube& cube);

SimResult simulate_rd_map(const SceneView& view, const RadarConfig& config, const TargetSpec& target,
                          std::uint64_t seed, const SimOptions& options = {});
SimResult simulate_rd_map(const TerrainScene& scene, const RadarConfig& config, const PlatformState& platform,
                          const TargetSpec& target, std::uint64_t seed, const SimOptions& options = {});

/// Scales every clutter patch's scattered power by 10^(delta_db/10).
RadarConfig perturb_clutter(const RadarConfig& config, double delta_db);
double db_to_power_ratio(double db);

/// Writes `<stem>.f32` (float32 LE, rows = range bins) and `<stem>.json`.
void write_rd_map(const std::filesystem::path& stem, const RDMap& map, const RadarConfig& config,
                  const std::optional<TruthLabel>& truth);
struct LoadedMap {
    RDMap map;
    std::optional<TruthLabel> truth;
};
LoadedMap read_rd_map(const std::filesystem::path& stem);

}  // namespace detwin
