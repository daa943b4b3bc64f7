#pragma once

// Three-phase test-and-evaluation pipeline: dataset construction with a
// diversity metric, excursion scaling, Phase I baseline with convergence and
// gating, Phase II excursion / redesign / retrain and the Phase III
// black-swan scan.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "detwin/blackswan.hpp"
#include "detwin/localize.hpp"
#include "detwin/metrics.hpp"
#include "detwin/rfsim.hpp"

namespace detwin {

/// Raised when the diversity target cannot be reached within the expansion cap.
class DiversityError : public std::runtime_error {
public:
    DiversityError(const std::string& what, double achieved, double required)
        : std::runtime_error(what), achieved_(achieved), required_(required) {}
    double achieved() const noexcept { return achieved_; }
    double required() const noexcept { return required_; }

private:
    double achieved_;
    double required_;
};

// ---------------------------------------------------------------------------
// Scenario space and datasets

struct ParamRange {
    double lo = 0.0;
    double hi = 0.0;
    double limit_lo = 0.0;  ///< hard bounds for expansion
    double limit_hi = 0.0;
    double width() const { return hi - lo; }
};

/// Target parameter ranges. Sample vectors are
/// (lat, lon, speed, heading, rcs_db, clutter_db).
struct ScenarioSpace {
    ParamRange lat{32.5439, 32.5571, 32.50, 32.60};
    ParamRange lon{-117.0583, -117.0403, -117.10, -117.00};
    std::vector<double> speeds{7.0, 14.0};
    double speed_limit = 40.0;
    ParamRange heading{0.0, 360.0, 0.0, 360.0};
    ParamRange rcs_db{22.0, 28.0, 0.0, 40.0};
    double clutter_db = 0.0;       ///< clutter perturbation applied to every sample
    int max_location_draws = 1000; ///< rejection sampling against the range window

    void validate() const;
    /// Every range widened about its center by `factor`, clipped to its limits.
    ScenarioSpace expanded(double factor) const;
    /// Per-coordinate standardisation widths (1 where a coordinate is degenerate).
    std::vector<double> widths() const;
};

inline constexpr int kParamCount = 6;
const std::vector<std::string>& param_names();

nlohmann::json to_json(const ScenarioSpace& s);
ScenarioSpace scenario_from_json(const nlohmann::json& j, const ScenarioSpace& base = {});

/// Mean pairwise Euclidean distance of the vectors divided per coordinate by
/// `widths`. 0 for fewer than two vectors.
double diversity(const std::vector<std::vector<double>>& vectors, const std::vector<double>& widths);

/// Scene, platform and radar shared by every sample of a dataset.
struct ScenarioContext {
    TerrainSpec terrain;
    std::uint64_t terrain_seed = 7;
    PlatformState platform;
    RadarConfig radar;
    TerrainScene scene;
    SceneView view;  ///< points at `scene`; copies rebind it

    ScenarioContext() = default;
    ScenarioContext(const ScenarioContext& other);
    ScenarioContext& operator=(const ScenarioContext& other);

    void build();  ///< generates the scene and its illumination
    std::string hash() const;
    nlohmann::json to_json() const;
};

/// Desk-scale defaults: 340 x 340 cells at 30 m, 128 x 64 maps, 32 Hz bins.
ScenarioContext desk_context();

struct SampleRecord {
    std::string stem;
    std::string map_sha256;
    std::uint64_t seed = 0;
    std::vector<double> params;
    double clutter_scale = 1.0;
    TruthLabel truth;
};

struct DatasetManifest {
    std::string name;
    std::uint64_t master_seed = 0;
    ScenarioSpace space;
    std::vector<double> reference_widths;
    double diversity = 0.0;
    double expansion = 1.0;
    std::string parent;       ///< name of the parent dataset, empty for a nominal set
    std::string parent_hash;
    std::string context_hash;
    nlohmann::json radar;
    std::vector<SampleRecord> samples;

    std::size_t count() const { return samples.size(); }
    std::vector<std::vector<double>> vectors() const;
    std::string hash() const;
};

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);

struct Dataset {
    DatasetManifest manifest;
    std::vector<RDMap> maps;
    std::vector<TruthLabel> truths;
};

/// Target parameters of sample `index`. Location draws are rejected until the
/// target falls inside the scene and the range window.
std::vector<double> sample_params(const ScenarioContext& ctx, const ScenarioSpace& space, std::uint64_t master_seed,
                                  std::size_t index);
TargetSpec target_from_params(const std::vector<double>& params);

struct BuildOptions {
    std::string name = "baseline";
    std::filesystem::path out_dir;  ///< empty: keep in memory only
    int workers = 1;
    std::vector<double> reference_widths;  ///< empty: the space's own widths
};

/// N samples with per-index seeds; the manifest stores every parameter vector and D.
Dataset build_dataset(const ScenarioContext& ctx, const ScenarioSpace& space, std::size_t n,
                      std::uint64_t master_seed, const BuildOptions& options = {});

/// Reads a dataset written by build_dataset and checks every file hash.
Dataset load_dataset(const std::filesystem::path& dir);

struct ExcursionSpec {
    double kappa1 = 2.0;
    double kappa2 = 1.5;
    double clutter_delta_db = 0.0;
    double max_expansion = 8.0;
    int bisection_steps = 30;

    void validate() const;
};

nlohmann::json to_json(const ExcursionSpec& e);

/// ceil(kappa1 * N_R) samples over a space widened (bisection on the
/// expansion factor) until D >= kappa2 * D_R, with the clutter delta applied.
/// Throws DiversityError when the cap is reached first.
Dataset scale_excursion(const ScenarioContext& ctx, const Dataset& reference, const ExcursionSpec& spec,
                        const BuildOptions& options = {});

// ---------------------------------------------------------------------------
// Pipeline configuration

struct TrainSettings {
    int folds = 5;
    int epochs = 100;
    int batch_size = 16;
    double lr = 1e-3;
    bool augment = true;
};

struct Phase1Settings {
    std::size_t count = 500;
    double gate_target = 0.05;  ///< lower 95% bound on the CNN joint within-1-bin rate
    double tolerance = 0.05;    ///< convergence half-width on that rate
    std::size_t min_samples = kDefaultMinSamples;
    std::size_t budget = 0;     ///< samples streamed through the convergence check; 0 = all
};

struct Phase2Settings {
    ExcursionSpec excursion{2.0, 1.5, 6.0, 8.0, 30};
    int redesign_horizontal = 20;
    int redesign_vertical = 10;
    double redesign_tx_factor = 1.0;
    int folds = 1;
    double gate_target = 0.05;
    double recovery_factor = 1.1;
};

struct Phase3Settings {
    std::size_t count = 40;
    double threshold = 5.0;  ///< Chebyshev localisation error in bins
    std::vector<std::string> anomalies{"scatterer_swarm"};
    int swarm_count = 20;
    int swarm_extent = 6;
    int swarm_offset = 10;             ///< range offset of the swarm box from the target, bins
    double swarm_amplitude_rel = 3.0;  ///< injected power per pixel / map maximum
    bool use_generator = false;
    double noise_scale_factor = 3.0;   ///< noise excursion applied to the generator
    std::uint64_t seed = 11;
};

struct GanSettings {
    int pairs = 300;
    int scenes = 8;
    int scene_cells = 200;
    double feature_cells = 48.0;
    GanConfig config;
    PairSpec pair_spec;
};

struct PipelineConfig {
    std::uint64_t seed = 1;
    int workers = 1;
    TerrainSpec terrain;
    std::uint64_t terrain_seed = 7;
    PlatformState platform;
    RadarConfig radar;
    ScenarioSpace scenario;
    PreprocessSpec preprocess;
    CfarParams cfar;
    TrainSettings train;
    Phase1Settings phase1;
    Phase2Settings phase2;
    Phase3Settings phase3;
    GanSettings gan;

    void validate() const;
    ScenarioContext context() const;
};

PipelineConfig default_pipeline_config();
nlohmann::json to_json(const PipelineConfig& c);
/// Rejects unknown keys at every level; missing keys keep the defaults.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
/// `dotted.key=value` override; the value is parsed as JSON, else taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Localizer training settings derived from the pipeline config.
LocalizerTrainConfig localizer_train_config(const PipelineConfig& c, int folds, std::uint64_t seed);

/// Terrain scenes the clutter GAN is trained on (seeded from the master seed).
std::vector<TerrainScene> gan_scenes(const PipelineConfig& c);
/// Conditioning pairs over `gan_scenes`.
PairSet gan_pairs(const PipelineConfig& c, int n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Phases

struct Evaluation {
    std::string label;
    MetricReport cnn;
    std::optional<MetricReport> argmax;
    std::optional<MetricReport> cfar;
};

nlohmann::json to_json(const Evaluation& e);

struct PhaseReport {
    int phase = 0;
    bool pass = false;
    std::string outcome;  ///< pass | gate_fail | budget_exceeded | non_gating
    nlohmann::json body;  ///< phase-specific content (metrics, hashes, gates, timing)

    nlohmann::json to_json() const;
};

/// Per-run state shared by the phases.
struct PipelineRun {
    PipelineConfig config;
    std::filesystem::path out_root;
    ScenarioContext context;

    std::optional<Dataset> baseline;
    std::vector<Localizer> phase1_models;
    std::vector<int> phase1_folds;
    std::optional<PhaseReport> phase1;

    std::optional<Dataset> excursion;
    std::optional<Dataset> redesign;
    std::optional<Localizer> phase2_model;
    std::vector<int> phase2_val;
    std::optional<PhaseReport> phase2;
};

PipelineRun make_run(const PipelineConfig& config, const std::filesystem::path& out_root);

/// The run's context with the redesigned array and transmit power.
ScenarioContext redesign_context(const PipelineRun& run);

/// Builds the baseline set, trains k-fold CNNs, evaluates CNN, ArgMax and
/// CFAR, streams per-sample successes through the convergence check and gates.
PhaseReport run_phase1(PipelineRun& run);

/// Requires a passed Phase I. (a) Phase I models on the excursion set,
/// (b) redesigned radar, regenerated data and a retrained model, (c) that
/// model with and without the clutter perturbation.
PhaseReport run_phase2(PipelineRun& run);

struct BlackSwanEvent {
    std::size_t index = 0;        ///< position in the scan stream
    std::size_t base_sample = 0;  ///< held-out sample the map starts from
    std::uint64_t seed = 0;       ///< reproduction seed of the scan sample
    std::string kind;
    nlohmann::json anomaly;
    double error_range = 0.0;
    double error_doppler = 0.0;
    double error = 0.0;  ///< max of the two
    std::string map_sha256;
};

nlohmann::json to_json(const BlackSwanEvent& e);

/// Held-out maps the scan perturbs, with the model under test.
struct ScanInputs {
    const Dataset* data = nullptr;
    std::vector<std::size_t> indices;      ///< held-out samples of `data`
    Localizer* model = nullptr;
    GeneratorBundle* generator = nullptr;  ///< optional clutter source
    const ScenarioContext* context = nullptr;  ///< scene and the radar that produced `data`
};

/// Map of scan sample `index`, regenerated from its seed.
RDMap scan_sample(const ScanInputs& in, const Phase3Settings& s, std::size_t index, nlohmann::json* anomaly = nullptr,
                  std::size_t* base = nullptr);

struct BlackSwanReport {
    std::size_t scanned = 0;
    std::size_t rejected = 0;  ///< maps outside the physical power bounds
    std::vector<BlackSwanEvent> events;  ///< sorted by descending error
    nlohmann::json to_json() const;
};

BlackSwanReport black_swan_scan(const ScanInputs& in, const Phase3Settings& s);

/// Phase III on top of a Phase II run (uses its retrained model and held-out maps).
PhaseReport run_phase3(PipelineRun& run, GeneratorBundle* generator);

PhaseReport phase_report_from_json(const nlohmann::json& j);
/// Reads `<out>/reports/phase<N>.json`; throws StateError when it is missing.
PhaseReport read_phase_report(const std::filesystem::path& out_root, int phase);

/// Writes `<out>/reports/phase<N>.json` and `.csv`.
void write_phase_report(const std::filesystem::path& out_root, const PhaseReport& report);
/// CSV rows for every metric report found in a phase report JSON.
std::string report_csv(const nlohmann::json& report);

}  // namespace detwin
