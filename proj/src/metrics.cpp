#include "detwin/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <tuple>

#include <boost/math/special_functions/beta.hpp>

#include "detwin/common.hpp"

namespace detwin {

namespace {

void check_pairs(std::size_t a, std::size_t b) {
    if (a != b) throw ConfigError("estimates and truths differ in length");
    if (a == 0) throw ConfigError("no samples");
}

double rounded_error(double est, int truth) { return std::abs(std::round(est) - static_cast<double>(truth)); }

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

MaeResult mae(std::span<const Estimate> estimates, std::span<const BinTruth> truths) {
    check_pairs(estimates.size(), truths.size());
    MaeResult r;
    r.n = estimates.size();
    const double n = static_cast<double>(r.n);
    for (std::size_t i = 0; i < r.n; ++i) {
        r.mae_range += rounded_error(estimates[i].range_bin, truths[i].range_bin);
        r.mae_doppler += rounded_error(estimates[i].doppler_bin, truths[i].doppler_bin);
    }
    r.mae_range /= n;
    r.mae_doppler /= n;
    if (r.n > 1) {
        double sr = 0.0, sd = 0.0;
        for (std::size_t i = 0; i < r.n; ++i) {
            const double er = rounded_error(estimates[i].range_bin, truths[i].range_bin) - r.mae_range;
            const double ed = rounded_error(estimates[i].doppler_bin, truths[i].doppler_bin) - r.mae_doppler;
            sr += er * er;
            sd += ed * ed;
        }
        r.sigma_range = std::sqrt(sr / (n - 1.0));
        r.sigma_doppler = std::sqrt(sd / (n - 1.0));
    }
    return r;
}

Proportion clopper_pearson(std::size_t successes, std::size_t n, double confidence) {
    if (n == 0) throw ConfigError("proportion over zero trials");
    if (successes > n) throw ConfigError("more successes than trials");
    if (!(confidence > 0.0 && confidence < 1.0)) throw ConfigError("confidence must lie in (0, 1)");
    const double alpha = 1.0 - confidence;
    const double k = static_cast<double>(successes);
    const double m = static_cast<double>(n);
    Proportion p;
    p.successes = successes;
    p.n = n;
    p.lower = successes == 0 ? 0.0 : boost::math::ibeta_inv(k, m - k + 1.0, alpha / 2.0);
    p.upper = successes == n ? 1.0 : boost::math::ibeta_inv(k + 1.0, m - k, 1.0 - alpha / 2.0);
    // ibeta_inv is accurate to a few ulps; keep the interval around the estimate.
    p.lower = std::min(p.lower, p.value());
    p.upper = std::max(p.upper, p.value());
    return p;
}

WithinOneBin within_one_bin(std::span<const Estimate> estimates, std::span<const BinTruth> truths) {
    check_pairs(estimates.size(), truths.size());
    std::size_t r = 0, d = 0, j = 0;
    for (std::size_t i = 0; i < estimates.size(); ++i) {
        const bool okr = rounded_error(estimates[i].range_bin, truths[i].range_bin) <= 1.0;
        const bool okd = rounded_error(estimates[i].doppler_bin, truths[i].doppler_bin) <= 1.0;
        r += okr;
        d += okd;
        j += okr && okd;
    }
    const std::size_t n = estimates.size();
    return {clopper_pearson(r, n), clopper_pearson(d, n), clopper_pearson(j, n)};
}

FpFnResult fp_fn_rates(std::span<const DetectionSet> detections, std::span<const std::vector<BinTruth>> truths,
                       double match_radius) {
    if (detections.size() != truths.size()) throw ConfigError("detections and truths differ in map count");
    if (detections.empty()) throw ConfigError("no maps");
    if (!(match_radius >= 0.0)) throw ConfigError("match radius must be >= 0");
    FpFnResult out;
    out.maps = detections.size();
    for (std::size_t m = 0; m < detections.size(); ++m) {
        const auto& dets = detections[m];
        const auto& tru = truths[m];
        std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
        for (std::size_t a = 0; a < dets.size(); ++a)
            for (std::size_t b = 0; b < tru.size(); ++b) {
                const double dist = std::max(std::abs(dets[a].range_bin - tru[b].range_bin),
                                             std::abs(dets[a].doppler_bin - tru[b].doppler_bin));
                if (dist <= match_radius) pairs.emplace_back(dist, a, b);
            }
        std::sort(pairs.begin(), pairs.end());
        std::vector<bool> used_d(dets.size(), false), used_t(tru.size(), false);
        std::size_t matched = 0;
        for (const auto& [dist, a, b] : pairs) {
            if (used_d[a] || used_t[b]) continue;
            used_d[a] = used_t[b] = true;
            ++matched;
        }
        out.false_positives += dets.size() - matched;
        out.false_negatives += tru.size() - matched;
        out.truths += tru.size();
    }
    out.fp_per_map = static_cast<double>(out.false_positives) / static_cast<double>(out.maps);
    out.fn_rate = out.truths ? static_cast<double>(out.false_negatives) / static_cast<double>(out.truths) : 0.0;
    return out;
}

FpFnResult fp_fn_rates(std::span<const DetectionSet> detections, std::span<const BinTruth> truths,
                       double match_radius) {
    std::vector<std::vector<BinTruth>> wrapped;
    wrapped.reserve(truths.size());
    for (const auto& t : truths) wrapped.push_back({t});
    return fp_fn_rates(detections, std::span<const std::vector<BinTruth>>(wrapped), match_radius);
}

namespace {
void refresh(ConvergenceState& s, double tolerance, std::size_t n_min) {
    s.half_width = s.n > 1 ? 1.96 * std::sqrt(s.variance()) / std::sqrt(static_cast<double>(s.n))
                           : std::numeric_limits<double>::infinity();
    s.converged = s.n >= std::max<std::size_t>(n_min, 2) && s.half_width < tolerance;
}
}  // namespace

ConvergenceState convergence_update(ConvergenceState s, double value, double tolerance, std::size_t n_min) {
    if (!std::isfinite(value)) throw ConfigError("non-finite convergence sample");
    ++s.n;
    const double delta = value - s.mean;
    s.mean += delta / static_cast<double>(s.n);
    s.m2 += delta * (value - s.mean);
    refresh(s, tolerance, n_min);
    return s;
}

ConvergenceState convergence_merge(const ConvergenceState& a, const ConvergenceState& b, double tolerance,
                                   std::size_t n_min) {
    if (a.n == 0) {
        ConvergenceState s = b;
        refresh(s, tolerance, n_min);
        return s;
    }
    if (b.n == 0) {
        ConvergenceState s = a;
        refresh(s, tolerance, n_min);
        return s;
    }
    ConvergenceState s;
    s.n = a.n + b.n;
    const double na = static_cast<double>(a.n), nb = static_cast<double>(b.n), n = static_cast<double>(s.n);
    const double delta = b.mean - a.mean;
    s.mean = a.mean + delta * nb / n;
    s.m2 = a.m2 + b.m2 + delta * delta * na * nb / n;
    refresh(s, tolerance, n_min);
    return s;
}

bool proportion_gate(const Proportion& p, double target) { return p.n > 0 && p.lower >= target; }

MetricReport make_report(const std::string& algorithm, std::span<const Estimate> estimates,
                         std::span<const BinTruth> truths) {
    MetricReport r;
    r.algorithm = algorithm;
    r.error = mae(estimates, truths);
    r.within = within_one_bin(estimates, truths);
    return r;
}

nlohmann::json to_json(const Proportion& p) {
    return {{"successes", p.successes}, {"n", p.n}, {"percent", p.percent()},
            {"ci95", {100.0 * p.lower, 100.0 * p.upper}}};
}

nlohmann::json to_json(const ConvergenceState& s) {
    return {{"n", s.n},
            {"mean", s.mean},
            {"variance", s.variance()},
            {"half_width", std::isfinite(s.half_width) ? nlohmann::json(s.half_width) : nlohmann::json(nullptr)},
            {"converged", s.converged}};
}

nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json j{{"algorithm", r.algorithm},
                     {"n", r.error.n},
                     {"mae_range", r.error.mae_range},
                     {"mae_doppler", r.error.mae_doppler},
                     {"sigma_range", r.error.sigma_range},
                     {"sigma_doppler", r.error.sigma_doppler},
                     {"within_1bin_range", to_json(r.within.range)},
                     {"within_1bin_doppler", to_json(r.within.doppler)},
                     {"within_1bin_joint", to_json(r.within.joint)}};
    if (r.has_detection_rates) {
        j["fp_per_map"] = r.detection.fp_per_map;
        j["fn_rate"] = r.detection.fn_rate;
    }
    return j;
}

std::string metrics_csv_header() {
    return "label,algorithm,n,mae_range,mae_doppler,sigma_range,sigma_doppler,within_1bin_range,"
           "within_1bin_doppler,within_1bin_joint,joint_ci_low,joint_ci_high,fp_per_map,fn_rate";
}

std::string metrics_csv_row(const MetricReport& r, const std::string& label) {
    std::ostringstream os;
    os << label << ',' << r.algorithm << ',' << r.error.n << ',' << fmt(r.error.mae_range) << ','
       << fmt(r.error.mae_doppler) << ',' << fmt(r.error.sigma_range) << ',' << fmt(r.error.sigma_doppler) << ','
       << fmt(r.within.range.percent()) << ',' << fmt(r.within.doppler.percent()) << ','
       << fmt(r.within.joint.percent()) << ',' << fmt(100.0 * r.within.joint.lower) << ','
       << fmt(100.0 * r.within.joint.upper) << ',';
    if (r.has_detection_rates) os << fmt(r.detection.fp_per_map) << ',' << fmt(r.detection.fn_rate);
    else os << ',';
    return os.str();
}

}  // namespace detwin
