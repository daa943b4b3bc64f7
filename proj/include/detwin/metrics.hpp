#pragma once

// Statistical evaluation of localizers: MAE with 1-sigma spread, within-one-bin
// proportions with exact binomial intervals, detection false positive /
// negative rates and sequential Monte Carlo convergence.

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace detwin {

/// Point estimate of a target position in (fractional) bin coordinates.
struct Estimate {
    double range_bin = 0.0;
    double doppler_bin = 0.0;
    double score = 0.0;
};

using DetectionSet = std::vector<Estimate>;

struct BinTruth {
    int range_bin = 0;
    int doppler_bin = 0;
};

struct MaeResult {
    double mae_range = 0.0;
    double mae_doppler = 0.0;
    double sigma_range = 0.0;  ///< sample standard deviation of |error|
    double sigma_doppler = 0.0;
    std::size_t n = 0;
};

/// Errors are taken on the rounded estimate (whole bins).
MaeResult mae(std::span<const Estimate> estimates, std::span<const BinTruth> truths);

struct Proportion {
    std::size_t successes = 0;
    std::size_t n = 0;
    double lower = 0.0;  ///< two-sided Clopper-Pearson bound
    double upper = 1.0;
    double value() const { return n ? static_cast<double>(successes) / static_cast<double>(n) : 0.0; }
    double percent() const { return 100.0 * value(); }
};

/// Exact binomial interval at `confidence` (two-sided).
Proportion clopper_pearson(std::size_t successes, std::size_t n, double confidence = 0.95);

struct WithinOneBin {
    Proportion range;
    Proportion doppler;
    Proportion joint;
};

WithinOneBin within_one_bin(std::span<const Estimate> estimates, std::span<const BinTruth> truths);

struct FpFnResult {
    double fp_per_map = 0.0;
    double fn_rate = 0.0;
    std::size_t false_positives = 0;
    std::size_t false_negatives = 0;
    std::size_t maps = 0;
    std::size_t truths = 0;
};

/// Greedy nearest matching (Chebyshev distance <= radius, closest pairs first).
FpFnResult fp_fn_rates(std::span<const DetectionSet> detections, std::span<const std::vector<BinTruth>> truths,
                       double match_radius);
/// Single-target convenience overload.
FpFnResult fp_fn_rates(std::span<const DetectionSet> detections, std::span<const BinTruth> truths,
                       double match_radius);

/// Running mean/variance with a 95% half-width stopping rule.
struct ConvergenceState {
    std::size_t n = 0;
    double mean = 0.0;
    double m2 = 0.0;
    double half_width = std::numeric_limits<double>::infinity();
    bool converged = false;

    double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
};

inline constexpr std::size_t kDefaultMinSamples = 30;

ConvergenceState convergence_update(ConvergenceState state, double value, double tolerance,
                                    std::size_t n_min = kDefaultMinSamples);
/// Combines two partial states (Chan et al. parallel update).
ConvergenceState convergence_merge(const ConvergenceState& a, const ConvergenceState& b, double tolerance,
                                   std::size_t n_min = kDefaultMinSamples);

/// Success gate: lower 95% bound on the success rate must reach `target`.
bool proportion_gate(const Proportion& p, double target);

struct MetricReport {
    std::string algorithm;
    MaeResult error;
    WithinOneBin within;
    bool has_detection_rates = false;
    FpFnResult detection;
};

MetricReport make_report(const std::string& algorithm, std::span<const Estimate> estimates,
                         std::span<const BinTruth> truths);

nlohmann::json to_json(const MetricReport& r);
nlohmann::json to_json(const Proportion& p);
nlohmann::json to_json(const ConvergenceState& s);

/// Header and one row per report: algorithm, MAE, sigma, within-1-bin %, bounds, FP/FN.
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricReport& r, const std::string& label = "");

}  // namespace detwin
