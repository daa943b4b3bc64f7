#pragma once

// Target localization over RD maps: ArgMax, cell-averaging CFAR with centroid
// clustering, and a convolutional regressor with k-fold training.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "detwin/metrics.hpp"
#include "detwin/nnet.hpp"
#include "detwin/rfsim.hpp"

namespace detwin {

/// Global maximum; ties go to the lowest (range, Doppler) index.
Estimate argmax_localize(const RDMap& map);

struct CfarParams {
    int train_range = 4;    ///< training cells each side, range
    int train_doppler = 4;  ///< training cells each side, Doppler
    int guard_range = 1;
    int guard_doppler = 1;
    double scale = 10.0;         ///< threshold = scale * mean(training cells)
    double merge_radius = 2.0;   ///< centroids closer than this (Chebyshev) are merged

    void validate() const;
    int training_cells() const;
};

nlohmann::json to_json(const CfarParams& p);
CfarParams cfar_params_from_json(const nlohmann::json& j, const CfarParams& base = {});

/// Threshold multiplier giving false-alarm probability `pfa` on exponential
/// (square-law) noise with n training cells: n * (pfa^(-1/n) - 1).
double cfar_scale_for_pfa(double pfa, int n_training);

/// Cells whose power exceeds their local threshold. Doppler wraps (circular
/// axis); range windows are truncated at the map edges.
std::vector<std::uint8_t> cfar_mask(const RDMap& map, const CfarParams& params);

/// Exceedances clustered (8-connected) to power-weighted centroids, then
/// merged until no two lie within merge_radius. Score is the peak
/// power-to-threshold ratio. Sorted by descending score.
DetectionSet cfar_detect(const RDMap& map, const CfarParams& params);

/// Strongest CFAR detection, or the ArgMax estimate when nothing is detected.
Estimate cfar_localize(const DetectionSet& detections, const RDMap& map);

// ---------------------------------------------------------------------------
// Neural localizer

/// Map -> network input transform. Recorded as a hash alongside every model.
struct PreprocessSpec {
    int map_range = 128;    ///< expected map rows
    int map_doppler = 64;   ///< expected map columns
    int factor = 1;         ///< block-average downsampling factor
    double floor_rel = 1e-12;  ///< epsilon in log10(p + eps), relative to the map maximum

    int input_range() const { return map_range / factor; }
    int input_doppler() const { return map_doppler / factor; }
    void validate() const;
    std::string hash() const;
};

nlohmann::json to_json(const PreprocessSpec& p);
PreprocessSpec preprocess_from_json(const nlohmann::json& j);

/// log10(p + eps), per-map min-max to [0, 1], block-average downsample.
std::vector<float> preprocess(const RDMap& map, const PreprocessSpec& spec);

/// Default regressor: five conv(3x3) / batch-norm / relu / 2x2 max-pool blocks
/// (8, 16, 32, 64, 64 channels), dense 128, dense 2 with a sigmoid head.
std::vector<nn::LayerSpec> default_localizer_arch();

struct Localizer {
    nn::Net net;
    PreprocessSpec prep;
    std::string prep_hash;  ///< hash recorded at training time
    nlohmann::json info;    ///< arch, dataset hash, fold id, ...
};

Localizer make_localizer(const PreprocessSpec& prep, const std::vector<nn::LayerSpec>& arch, std::uint64_t seed);

/// Throws CompatibilityError when the map or the recorded preprocessing hash
/// does not match the model's preprocessing spec. Estimates are clamped to the map.
Estimate predict(Localizer& model, const RDMap& map);
std::vector<Estimate> predict_batch(Localizer& model, std::span<const RDMap> maps, int batch_size = 32);

/// Writes `<stem>.bin` (model file) and `<stem>.json` (preprocessing spec + info).
void save_localizer(const std::filesystem::path& stem, Localizer& model);
Localizer load_localizer(const std::filesystem::path& stem);

/// Training targets: (range / (rows - 1), doppler / (cols - 1)).
nn::TensorF localizer_targets(std::span<const TruthLabel> truths, const PreprocessSpec& prep);
nn::TensorF localizer_inputs(std::span<const RDMap> maps, const PreprocessSpec& prep);

/// Label-consistent random shifts: circular in Doppler, bounded in range so the
/// target stays on the map.
void shift_augment(nn::TensorF& x, nn::TensorF& y, Rng& rng, const PreprocessSpec& prep);

/// Fold id per sample. folds >= 2: seeded permutation dealt round-robin.
/// folds == 1: 80/20 split, fold 0 is the 20% validation part, fold 1 the rest.
std::vector<int> fold_assignment(std::size_t n, int folds, std::uint64_t seed);
std::string fold_assignment_hash(const std::vector<int>& folds);

struct LocalizerTrainConfig {
    int folds = 5;
    std::uint64_t seed = 0;
    nn::FitConfig fit;
    bool augment = true;
    int workers = 1;  ///< concurrent fold jobs
    std::vector<nn::LayerSpec> arch = default_localizer_arch();
    CfarParams cfar;
};

nlohmann::json to_json(const LocalizerTrainConfig& c);

struct FoldResult {
    int fold = 0;
    std::vector<int> train_index;
    std::vector<int> val_index;
    Localizer model;
    nn::LossHistory history;
    MetricReport cnn;
    MetricReport argmax;
    MetricReport cfar;
};

struct TrainResult {
    std::vector<FoldResult> folds;
    std::string assignment_hash;
};

/// One model per fold (a single model for folds == 1), validated on the held-out part.
TrainResult train_localizer(std::span<const RDMap> maps, std::span<const TruthLabel> truths,
                            const PreprocessSpec& prep, const LocalizerTrainConfig& config,
                            const nlohmann::json& dataset_info = {});

/// Metric report for a set of estimates, with single-output FP/FN accounting
/// (a miss counts as one false positive and one false negative).
MetricReport evaluate_estimates(const std::string& algorithm, std::span<const Estimate> estimates,
                                std::span<const TruthLabel> truths);
MetricReport evaluate_cfar(std::span<const RDMap> maps, std::span<const TruthLabel> truths, const CfarParams& p);

std::vector<BinTruth> bin_truths(std::span<const TruthLabel> truths);

// ---------------------------------------------------------------------------
// Feature maps

struct FeatureStack {
    int layer = 0;          ///< index of the convolution layer
    int source_layer = 0;   ///< layer whose output was captured (end of the conv block)
    int channels = 0;
    int rows = 0;
    int cols = 0;
    std::vector<float> values;  ///< channel-major
};

/// Post-activation channel grids of the conv block starting at layer_index.
FeatureStack feature_maps(Localizer& model, const RDMap& map, int layer_index);
/// `<dir>/channel_<c>.f32` plus `<dir>/manifest.json`.
void export_feature_maps(const FeatureStack& stack, const std::filesystem::path& dir);

}  // namespace detwin
