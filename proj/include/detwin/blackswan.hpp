#pragma once

// Black-swan tooling: terrain-conditioned clutter pairs, a small conditional
// GAN that translates terrain to clutter, noise-distribution excursions and
// anomaly injection into RD maps.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "detwin/nnet.hpp"
#include "detwin/rfsim.hpp"

namespace detwin {

// ---------------------------------------------------------------------------
// Conditioning pairs

struct PairSpec {
    int size = 64;                      ///< polar grid is size x size (range rings x azimuth sectors)
    double min_ground_range = 300.0;    ///< m
    double max_ground_range = 3500.0;   ///< m
    double altitude_above_mean = 1000.0;
    int subsamples = 3;                 ///< sub-points per polar cell side, each with its own fluctuation draw
    double floor_rel = 1e-6;            ///< log floor relative to the map maximum
    double train_fraction = 2.0 / 3.0;

    void validate() const;
};

nlohmann::json to_json(const PairSpec& s);
PairSpec pair_spec_from_json(const nlohmann::json& j, const PairSpec& base = {});

struct ConditioningPair {
    int size = 0;
    std::vector<float> input;   ///< 2 x size x size: normalised height, landcover / 3
    std::vector<float> output;  ///< size x size: normalised log clutter
    double log_lo = 0.0;        ///< log10 range used by the min-max scaling
    double log_hi = 0.0;
    std::size_t scene_index = 0;
    PlatformState platform;
    std::uint64_t seed = 0;
};

struct PairSet {
    PairSpec spec;
    std::vector<ConditioningPair> pairs;
    std::vector<int> train;
    std::vector<int> val;
    std::string hash() const;
};

/// Range-compensated clutter power in normalised log units, with the scaling
/// used. Values are log10(p + floor_rel * max), min-max scaled to [0, 1].
struct NormalizedClutter {
    std::vector<float> values;
    double log_lo = 0.0;
    double log_hi = 0.0;
};
NormalizedClutter normalize_clutter(const std::vector<double>& power, double floor_rel);
/// Inverse of the min-max + log10 step: returns p + floor (linear).
std::vector<double> denormalize_clutter(const std::vector<float>& values, double log_lo, double log_hi);

/// Conditioning grids and range-compensated clutter power seen from `platform`
/// with an omnidirectional antenna.
struct PolarClutter {
    std::vector<float> height;     ///< normalised to [0, 1] over the polar grid
    std::vector<float> landcover;  ///< class id / 3
    std::vector<double> power;     ///< clutter power * range^2
};
PolarClutter polar_clutter(const TerrainScene& scene, const RadarConfig& config, const PlatformState& platform,
                           const PairSpec& spec, std::uint64_t seed);

/// Random platform positions (scene mean height + altitude), deterministic
/// train/validation split. Throws ConfigError when n < 2.
PairSet build_pairs(const std::vector<TerrainScene>& scenes, const RadarConfig& config, const PairSpec& spec, int n,
                    std::uint64_t seed, int workers = 1);

// ---------------------------------------------------------------------------
// Noise specs

/// Distribution of the generator's noise channel. `scale` is the standard
/// deviation for every family; `shape` is the Student-t degrees of freedom.
struct NoiseSpec {
    std::string family = "normal";  ///< normal | uniform | laplace | student_t
    double mean = 0.0;
    double scale = 1.0;
    double shape = 0.0;
    std::vector<std::string> provenance;

    void validate() const;
    double sample(Rng& rng) const;
    /// Distribution fields only; provenance is ignored.
    bool same_distribution(const NoiseSpec& other) const;
};

nlohmann::json to_json(const NoiseSpec& s);
NoiseSpec noise_spec_from_json(const nlohmann::json& j);

struct NoiseMutation {
    double scale_factor = 1.0;
    double mean_shift = 0.0;
    std::optional<std::string> family;
    std::optional<double> shape;
};

/// New spec with the mutation applied and recorded in the provenance chain.
NoiseSpec noise_excursion(const NoiseSpec& spec, const NoiseMutation& mutation);

// ---------------------------------------------------------------------------
// Conditional GAN

struct GanConfig {
    int epochs = 50;
    int batch_size = 8;
    double lambda_l1 = 100.0;
    double adversarial_weight = 1.0;  ///< 0 reduces training to pure L1 regression
    nn::AdamConfig g_adam{2e-4, 0.5, 0.999, 1e-8};
    nn::AdamConfig d_adam{2e-4, 0.5, 0.999, 1e-8};
    std::uint64_t seed = 0;
    NoiseSpec noise;

    void validate() const;
};

nlohmann::json to_json(const GanConfig& c);
GanConfig gan_config_from_json(const nlohmann::json& j, const GanConfig& base = {});

/// Encoder-decoder: three stride-2 conv blocks down, three upsample + conv
/// blocks up, sigmoid head. Input channels: height, landcover, noise.
std::vector<nn::LayerSpec> generator_arch();
/// Patch classifier on (height, landcover, clutter): 8x8 logits at 64x64.
std::vector<nn::LayerSpec> discriminator_arch();

struct GanHistory {
    std::vector<double> g_loss;    ///< adversarial + lambda * L1
    std::vector<double> g_l1;
    std::vector<double> d_loss;
    std::vector<double> val_l1;    ///< generator in inference mode, fixed noise
};

struct GeneratorBundle {
    nn::Net generator;
    nn::Net discriminator;
    NoiseSpec noise;
    PairSpec pair_spec;
    double mean_log_lo = 0.0;  ///< average scaling of the training pairs, used to de-normalise outputs
    double mean_log_hi = 0.0;
    nlohmann::json provenance;
};

struct GanResult {
    GeneratorBundle bundle;
    GanHistory history;
};

/// Alternating discriminator / generator Adam steps. Deterministic given the
/// seed. Throws TrainingFailure on a non-finite loss.
GanResult train_cgan(const PairSet& pairs, const GanConfig& config);

/// Fills the noise channel of a conditioning input with draws from `noise`.
nn::TensorF generator_input(const std::vector<const ConditioningPair*>& pairs, const NoiseSpec& noise,
                            std::uint64_t noise_seed);

struct GeneratedClutter {
    std::vector<float> map;  ///< size x size in [0, 1]
    double latency_ms = 0.0;
};

/// One generator forward pass on a 2 x size x size conditioning grid.
GeneratedClutter generate_clutter(GeneratorBundle& bundle, const std::vector<float>& conditioning,
                                  std::uint64_t noise_seed, const std::optional<NoiseSpec>& noise = std::nullopt);

/// Mean absolute error of the generator on the validation split (fixed noise seed).
double validation_l1(GeneratorBundle& bundle, const PairSet& pairs, std::uint64_t noise_seed);

/// Patch-level accuracy of the discriminator on real and generated validation pairs.
double discriminator_accuracy(GeneratorBundle& bundle, const PairSet& pairs, std::uint64_t noise_seed);

void save_bundle(const std::filesystem::path& dir, GeneratorBundle& bundle);
GeneratorBundle load_bundle(const std::filesystem::path& dir);

/// Converts a generated polar clutter map into the clutter part of an RD map:
/// rows are spread over the range bins, azimuth sectors are weighted by the
/// two-way array gain and placed at their platform-motion Doppler. The total
/// is scaled to `reference_clutter_power`.
RDMap clutter_to_rd(const GeneratorBundle& bundle, const std::vector<float>& generated, const RadarConfig& config,
                    const PlatformState& platform, double reference_clutter_power);

// ---------------------------------------------------------------------------
// Anomalies

enum class AnomalyKind { scatterer_swarm, doppler_streak, ood_noise_scale };

const char* anomaly_name(AnomalyKind k);
AnomalyKind anomaly_from_name(const std::string& s);

struct AnomalySpec {
    AnomalyKind kind = AnomalyKind::scatterer_swarm;
    int count = 20;             ///< swarm: scatterers; streak: length in Doppler bins
    int extent = 6;             ///< half-width of the placement box in bins
    int center_range = -1;      ///< placement box center; -1 means the map center
    int center_doppler = -1;
    double amplitude = 1.0;     ///< linear power per injected pixel; noise scale factor for ood_noise_scale
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const AnomalySpec& s);
AnomalySpec anomaly_from_json(const nlohmann::json& j);

struct InjectionResult {
    RDMap map;
    std::vector<std::pair<int, int>> pixels;  ///< injected (range, Doppler) cells
    bool clipped = false;  ///< placement box was clipped to the map
};

/// Additive power injection on a copy of `map`. Swarm pixels are distinct.
InjectionResult inject_anomaly(const RDMap& map, const AnomalySpec& spec);

/// Total-power bounds derived from the radar config: every scene cell at the
/// strongest backscatter class, normal incidence and the closest range
/// through the peak two-way gain, with a fluctuation margin.
struct PowerBounds {
    double min_total = 0.0;
    double max_total = 0.0;
};
PowerBounds physical_power_bounds(const SceneView& view, const RadarConfig& config, double target_rcs_max,
                                  double fluctuation_margin = 100.0);
bool admissible(const RDMap& map, const PowerBounds& bounds);

}  // namespace detwin
