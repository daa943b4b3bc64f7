#include "detwin/localize.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <mutex>

namespace detwin {

Estimate argmax_localize(const RDMap& map) {
    if (map.power.empty()) throw ConfigError("argmax on an empty map");
    std::size_t best = 0;
    for (std::size_t i = 1; i < map.power.size(); ++i)
        if (map.power[i] > map.power[best]) best = i;
    return {static_cast<double>(best / map.n_doppler), static_cast<double>(best % map.n_doppler), map.power[best]};
}

// ---------------------------------------------------------------------------
// CFAR

void CfarParams::validate() const {
    if (train_range < 0 || train_doppler < 0 || guard_range < 0 || guard_doppler < 0)
        throw ConfigError("cfar: window sizes must be >= 0");
    if (training_cells() <= 0) throw ConfigError("cfar: no training cells");
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("cfar: scale must be > 0");
    if (!(merge_radius >= 0.0)) throw ConfigError("cfar: merge_radius must be >= 0");
}

int CfarParams::training_cells() const {
    const int outer = (2 * (train_range + guard_range) + 1) * (2 * (train_doppler + guard_doppler) + 1);
    const int inner = (2 * guard_range + 1) * (2 * guard_doppler + 1);
    return outer - inner;
}

nlohmann::json to_json(const CfarParams& p) {
    return {{"train_range", p.train_range},   {"train_doppler", p.train_doppler}, {"guard_range", p.guard_range},
            {"guard_doppler", p.guard_doppler}, {"scale", p.scale},               {"merge_radius", p.merge_radius}};
}

CfarParams cfar_params_from_json(const nlohmann::json& j, const CfarParams& base) {
    CfarParams p = base;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        if (k == "train_range") p.train_range = it->get<int>();
        else if (k == "train_doppler") p.train_doppler = it->get<int>();
        else if (k == "guard_range") p.guard_range = it->get<int>();
        else if (k == "guard_doppler") p.guard_doppler = it->get<int>();
        else if (k == "scale") p.scale = it->get<double>();
        else if (k == "merge_radius") p.merge_radius = it->get<double>();
        else throw ConfigError("cfar: unknown key '" + k + "'");
    }
    p.validate();
    return p;
}

double cfar_scale_for_pfa(double pfa, int n_training) {
    if (!(pfa > 0.0 && pfa < 1.0)) throw ConfigError("pfa must lie in (0, 1)");
    if (n_training <= 0) throw ConfigError("n_training must be positive");
    const double n = static_cast<double>(n_training);
    return n * (std::pow(pfa, -1.0 / n) - 1.0);
}

namespace {

void check_window(const RDMap& map, const CfarParams& p) {
    p.validate();
    if (map.n_range <= 0 || map.n_doppler <= 0) throw ConfigError("cfar on an empty map");
    if (2 * (p.train_range + p.guard_range) + 1 > map.n_range ||
        2 * (p.train_doppler + p.guard_doppler) + 1 > map.n_doppler)
        throw ConfigError("cfar window larger than the map");
}

std::vector<double> cfar_thresholds(const RDMap& map, const CfarParams& p) {
    const int nr = map.n_range, nd = map.n_doppler;
    const int wr = p.train_range + p.guard_range, wd = p.train_doppler + p.guard_doppler;
    std::vector<double> thr(map.power.size());
    for (int r = 0; r < nr; ++r) {
        for (int d = 0; d < nd; ++d) {
            double sum = 0.0;
            int count = 0;
            for (int dr = -wr; dr <= wr; ++dr) {
                const int rr = r + dr;
                if (rr < 0 || rr >= nr) continue;
                for (int dd = -wd; dd <= wd; ++dd) {
                    if (std::abs(dr) <= p.guard_range && std::abs(dd) <= p.guard_doppler) continue;
                    const int cc = ((d + dd) % nd + nd) % nd;
                    sum += map.at(rr, cc);
                    ++count;
                }
            }
            thr[static_cast<std::size_t>(r) * nd + d] = count ? p.scale * sum / count : 0.0;
        }
    }
    return thr;
}

double circular_delta(double a, double b, int n) {
    double d = std::fmod(a - b, static_cast<double>(n));
    if (d > 0.5 * n) d -= n;
    if (d < -0.5 * n) d += n;
    return d;
}

struct Cluster {
    double r = 0.0;
    double d = 0.0;  // may lie outside [0, n) until normalised
    double weight = 0.0;
    double score = 0.0;
};

}  // namespace

std::vector<std::uint8_t> cfar_mask(const RDMap& map, const CfarParams& params) {
    check_window(map, params);
    const auto thr = cfar_thresholds(map, params);
    std::vector<std::uint8_t> mask(map.power.size(), 0);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = map.power[i] > thr[i];
    return mask;
}

DetectionSet cfar_detect(const RDMap& map, const CfarParams& params) {
    check_window(map, params);
    const int nr = map.n_range, nd = map.n_doppler;
    const auto thr = cfar_thresholds(map, params);
    std::vector<std::uint8_t> mask(map.power.size(), 0);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = map.power[i] > thr[i];

    std::vector<Cluster> clusters;
    std::vector<std::uint8_t> seen(mask.size(), 0);
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (!mask[start] || seen[start]) continue;
        const int r0 = static_cast<int>(start / nd), d0 = static_cast<int>(start % nd);
        Cluster c;
        double sr = 0.0, sd = 0.0;
        std::deque<std::size_t> queue{start};
        seen[start] = 1;
        while (!queue.empty()) {
            const std::size_t i = queue.front();
            queue.pop_front();
            const int r = static_cast<int>(i / nd), d = static_cast<int>(i % nd);
            const double w = map.power[i];
            sr += w * r;
            sd += w * (d0 + circular_delta(d, d0, nd));
            c.weight += w;
            c.score = std::max(c.score, thr[i] > 0.0 ? w / thr[i] : std::numeric_limits<double>::infinity());
            for (int dr = -1; dr <= 1; ++dr)
                for (int dd = -1; dd <= 1; ++dd) {
                    const int rr = r + dr;
                    if (rr < 0 || rr >= nr) continue;
                    const std::size_t j = static_cast<std::size_t>(rr) * nd + ((d + dd) % nd + nd) % nd;
                    if (mask[j] && !seen[j]) {
                        seen[j] = 1;
                        queue.push_back(j);
                    }
                }
        }
        c.r = c.weight > 0.0 ? sr / c.weight : r0;
        c.d = c.weight > 0.0 ? sd / c.weight : d0;
        clusters.push_back(c);
    }

    // Merge the closest pair within the radius until none remain.
    for (;;) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t ba = 0, bb = 0;
        for (std::size_t a = 0; a < clusters.size(); ++a)
            for (std::size_t b = a + 1; b < clusters.size(); ++b) {
                const double dist = std::max(std::abs(clusters[a].r - clusters[b].r),
                                             std::abs(circular_delta(clusters[a].d, clusters[b].d, nd)));
                if (dist < best) {
                    best = dist;
                    ba = a;
                    bb = b;
                }
            }
        if (!(best <= params.merge_radius)) break;
        Cluster& a = clusters[ba];
        const Cluster& b = clusters[bb];
        const double w = a.weight + b.weight;
        const double fa = w > 0.0 ? a.weight / w : 0.5;
        const double db = a.d + circular_delta(b.d, a.d, nd);
        a.r = fa * a.r + (1.0 - fa) * b.r;
        a.d = fa * a.d + (1.0 - fa) * db;
        a.weight = w;
        a.score = std::max(a.score, b.score);
        clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bb));
    }

    DetectionSet out;
    for (const auto& c : clusters) {
        double d = std::fmod(c.d, static_cast<double>(nd));
        if (d < 0) d += nd;
        out.push_back({std::clamp(c.r, 0.0, nr - 1.0), std::clamp(d, 0.0, nd - 1.0), c.score});
    }
    std::stable_sort(out.begin(), out.end(), [](const Estimate& a, const Estimate& b) { return a.score > b.score; });
    return out;
}

Estimate cfar_localize(const DetectionSet& detections, const RDMap& map) {
    if (detections.empty()) return argmax_localize(map);
    return detections.front();
}

// ---------------------------------------------------------------------------
// Preprocessing

void PreprocessSpec::validate() const {
    if (map_range <= 0 || map_doppler <= 0) throw ConfigError("preprocess: map dims must be positive");
    if (factor <= 0 || map_range % factor != 0 || map_doppler % factor != 0)
        throw ConfigError("preprocess: downsample factor must divide the map dims");
    if (!(floor_rel > 0.0 && floor_rel < 1.0)) throw ConfigError("preprocess: floor_rel must lie in (0, 1)");
}

nlohmann::json to_json(const PreprocessSpec& p) {
    return {{"scaling", "log10-minmax"},
            {"map_range", p.map_range},
            {"map_doppler", p.map_doppler},
            {"factor", p.factor},
            {"floor_rel", p.floor_rel}};
}

PreprocessSpec preprocess_from_json(const nlohmann::json& j) {
    if (j.value("scaling", std::string("log10-minmax")) != "log10-minmax")
        throw CompatibilityError("unsupported preprocessing scaling");
    PreprocessSpec p;
    p.map_range = j.at("map_range").get<int>();
    p.map_doppler = j.at("map_doppler").get<int>();
    p.factor = j.at("factor").get<int>();
    p.floor_rel = j.at("floor_rel").get<double>();
    p.validate();
    return p;
}

std::string PreprocessSpec::hash() const { return sha256_hex(to_json(*this).dump()); }

std::vector<float> preprocess(const RDMap& map, const PreprocessSpec& spec) {
    if (map.n_range != spec.map_range || map.n_doppler != spec.map_doppler)
        throw CompatibilityError("map is " + std::to_string(map.n_range) + "x" + std::to_string(map.n_doppler) +
                                 " but the preprocessing expects " + std::to_string(spec.map_range) + "x" +
                                 std::to_string(spec.map_doppler));
    const std::size_t n = map.power.size();
    const double mx = *std::max_element(map.power.begin(), map.power.end());
    std::vector<double> l(n, 0.0);
    if (mx > 0.0) {
        const double eps = spec.floor_rel * mx;
        for (std::size_t i = 0; i < n; ++i) l[i] = std::log10(map.power[i] + eps);
        const auto [lo_it, hi_it] = std::minmax_element(l.begin(), l.end());
        const double lo = *lo_it, hi = *hi_it;
        for (auto& v : l) v = hi > lo ? (v - lo) / (hi - lo) : 0.0;
    }
    const int f = spec.factor, ir = spec.input_range(), id = spec.input_doppler();
    std::vector<float> out(static_cast<std::size_t>(ir) * id);
    const double inv = 1.0 / (f * f);
    for (int r = 0; r < ir; ++r)
        for (int d = 0; d < id; ++d) {
            double s = 0.0;
            for (int a = 0; a < f; ++a)
                for (int b = 0; b < f; ++b) s += l[static_cast<std::size_t>(r * f + a) * spec.map_doppler + d * f + b];
            out[static_cast<std::size_t>(r) * id + d] = static_cast<float>(s * inv);
        }
    return out;
}

std::vector<nn::LayerSpec> default_localizer_arch() {
    std::vector<nn::LayerSpec> arch;
    for (int c : {8, 16, 32, 64, 64}) {
        arch.push_back(nn::LayerSpec::conv(c, 3, 1, 1));
        arch.push_back(nn::LayerSpec::batch_norm());
        arch.push_back(nn::LayerSpec::relu());
        arch.push_back(nn::LayerSpec::max_pool(2, 2));
    }
    arch.push_back(nn::LayerSpec::dense(128));
    arch.push_back(nn::LayerSpec::relu());
    arch.push_back(nn::LayerSpec::dense(2));
    arch.push_back(nn::LayerSpec::sigmoid());
    return arch;
}

Localizer make_localizer(const PreprocessSpec& prep, const std::vector<nn::LayerSpec>& arch, std::uint64_t seed) {
    prep.validate();
    Localizer m{nn::Net({1, prep.input_range(), prep.input_doppler()}, arch, seed), prep, prep.hash(), {}};
    if (m.net.output_shape() != nn::Shape{2}) throw ConfigError("localizer networks must output 2 values");
    nlohmann::json a = nlohmann::json::array();
    for (const auto& s : arch) a.push_back(nn::to_json(s));
    m.info["arch"] = a;
    m.info["init_seed"] = seed;
    return m;
}

namespace {

void check_compat(const Localizer& model, const RDMap& map) {
    if (model.prep_hash != model.prep.hash())
        throw CompatibilityError("model preprocessing hash " + model.prep_hash + " does not match its spec");
    if (map.n_range != model.prep.map_range || map.n_doppler != model.prep.map_doppler)
        throw CompatibilityError("map dims do not match the model's preprocessing spec");
}

Estimate decode(const float* y, const PreprocessSpec& p) {
    auto unit = [](float v) { return std::isfinite(v) ? std::clamp(static_cast<double>(v), 0.0, 1.0) : 0.5; };
    return {unit(y[0]) * (p.map_range - 1), unit(y[1]) * (p.map_doppler - 1), 1.0};
}

}  // namespace

std::vector<Estimate> predict_batch(Localizer& model, std::span<const RDMap> maps, int batch_size) {
    std::vector<Estimate> out;
    out.reserve(maps.size());
    const int ir = model.prep.input_range(), id = model.prep.input_doppler();
    const std::size_t plane = static_cast<std::size_t>(ir) * id;
    for (std::size_t start = 0; start < maps.size(); start += batch_size) {
        const std::size_t len = std::min<std::size_t>(batch_size, maps.size() - start);
        nn::TensorF x({static_cast<int>(len), 1, ir, id});
        for (std::size_t i = 0; i < len; ++i) {
            check_compat(model, maps[start + i]);
            const auto v = preprocess(maps[start + i], model.prep);
            std::copy(v.begin(), v.end(), x.values.begin() + static_cast<std::ptrdiff_t>(i * plane));
        }
        const auto y = model.net.forward(x, false);
        for (std::size_t i = 0; i < len; ++i) out.push_back(decode(y.sample(static_cast<int>(i)), model.prep));
    }
    return out;
}

Estimate predict(Localizer& model, const RDMap& map) { return predict_batch(model, std::span<const RDMap>(&map, 1)).front(); }

void save_localizer(const std::filesystem::path& stem, Localizer& model) {
    nlohmann::json meta{{"preprocess", to_json(model.prep)}, {"preprocess_hash", model.prep_hash}, {"info", model.info}};
    nn::save_model(stem.string() + ".bin", model.net, meta);
    meta["model_hash"] = nn::model_hash(model.net);
    write_text(stem.string() + ".json", meta.dump(2));
}

Localizer load_localizer(const std::filesystem::path& stem) {
    auto loaded = nn::load_model(stem.string() + ".bin");
    const auto& meta = loaded.metadata;
    if (!meta.contains("preprocess") || !meta.contains("preprocess_hash"))
        throw CompatibilityError("model file carries no preprocessing spec");
    Localizer m{std::move(loaded.net), preprocess_from_json(meta.at("preprocess")),
                meta.at("preprocess_hash").get<std::string>(), meta.value("info", nlohmann::json::object())};
    return m;
}

nn::TensorF localizer_targets(std::span<const TruthLabel> truths, const PreprocessSpec& prep) {
    nn::TensorF y({static_cast<int>(truths.size()), 2});
    for (std::size_t i = 0; i < truths.size(); ++i) {
        y.values[2 * i] = static_cast<float>(truths[i].range_bin / static_cast<double>(prep.map_range - 1));
        y.values[2 * i + 1] = static_cast<float>(truths[i].doppler_bin / static_cast<double>(prep.map_doppler - 1));
    }
    return y;
}

nn::TensorF localizer_inputs(std::span<const RDMap> maps, const PreprocessSpec& prep) {
    const int ir = prep.input_range(), id = prep.input_doppler();
    nn::TensorF x({static_cast<int>(maps.size()), 1, ir, id});
    const std::size_t plane = static_cast<std::size_t>(ir) * id;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const auto v = preprocess(maps[i], prep);
        std::copy(v.begin(), v.end(), x.values.begin() + static_cast<std::ptrdiff_t>(i * plane));
    }
    return x;
}

void shift_augment(nn::TensorF& x, nn::TensorF& y, Rng& rng, const PreprocessSpec& prep) {
    const int ir = prep.input_range(), id = prep.input_doppler(), f = prep.factor;
    const int R = prep.map_range, D = prep.map_doppler;
    std::vector<float> tmp(static_cast<std::size_t>(ir) * id);
    for (int b = 0; b < x.batch(); ++b) {
        float* img = x.sample(b);
        float* lab = y.sample(b);
        const int rbin = static_cast<int>(std::lround(lab[0] * (R - 1)));
        const int dbin = static_cast<int>(std::lround(lab[1] * (D - 1)));
        const int lo = -(rbin / f), hi = (R - 1 - rbin) / f;
        const int sr = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
        const int sd = static_cast<int>(rng.below(static_cast<std::uint64_t>(id)));
        for (int r = 0; r < ir; ++r) {
            const int r0 = ((r - sr) % ir + ir) % ir;
            for (int d = 0; d < id; ++d) {
                const int d0 = ((d - sd) % id + id) % id;
                tmp[static_cast<std::size_t>(r) * id + d] = img[static_cast<std::size_t>(r0) * id + d0];
            }
        }
        std::copy(tmp.begin(), tmp.end(), img);
        lab[0] = static_cast<float>((rbin + sr * f) / static_cast<double>(R - 1));
        lab[1] = static_cast<float>(((dbin + sd * f) % D) / static_cast<double>(D - 1));
    }
}

std::vector<int> fold_assignment(std::size_t n, int folds, std::uint64_t seed) {
    if (folds < 1) throw ConfigError("folds must be >= 1");
    if (n < static_cast<std::size_t>(std::max(folds, 2)))
        throw ConfigError("dataset of " + std::to_string(n) + " samples is smaller than " +
                          std::to_string(std::max(folds, 2)) + " folds");
    std::vector<int> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<int>(i);
    Rng rng(seed);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    std::vector<int> fold(n);
    if (folds == 1) {
        const std::size_t n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(0.2 * n)), 1, n - 1);
        for (std::size_t i = 0; i < n; ++i) fold[perm[i]] = i < n_val ? 0 : 1;
    } else {
        for (std::size_t i = 0; i < n; ++i) fold[perm[i]] = static_cast<int>(i % folds);
    }
    return fold;
}

std::string fold_assignment_hash(const std::vector<int>& folds) {
    std::string s;
    for (int f : folds) s += std::to_string(f) + ',';
    return sha256_hex(s);
}

nlohmann::json to_json(const LocalizerTrainConfig& c) {
    nlohmann::json arch = nlohmann::json::array();
    for (const auto& s : c.arch) arch.push_back(nn::to_json(s));
    return {{"folds", c.folds},
            {"seed", c.seed},
            {"epochs", c.fit.epochs},
            {"batch_size", c.fit.batch_size},
            {"lr", c.fit.adam.lr},
            {"beta1", c.fit.adam.beta1},
            {"beta2", c.fit.adam.beta2},
            {"eps", c.fit.adam.eps},
            {"augment", c.augment},
            {"arch", arch},
            {"cfar", to_json(c.cfar)}};
}

std::vector<BinTruth> bin_truths(std::span<const TruthLabel> truths) {
    std::vector<BinTruth> out;
    out.reserve(truths.size());
    for (const auto& t : truths) out.push_back({t.range_bin, t.doppler_bin});
    return out;
}

MetricReport evaluate_estimates(const std::string& algorithm, std::span<const Estimate> estimates,
                                std::span<const TruthLabel> truths) {
    const auto bt = bin_truths(truths);
    MetricReport r = make_report(algorithm, estimates, bt);
    std::vector<DetectionSet> sets;
    sets.reserve(estimates.size());
    for (const auto& e : estimates) sets.push_back({{std::round(e.range_bin), std::round(e.doppler_bin), e.score}});
    r.detection = fp_fn_rates(sets, bt, 1.0);
    r.has_detection_rates = true;
    return r;
}

MetricReport evaluate_cfar(std::span<const RDMap> maps, std::span<const TruthLabel> truths, const CfarParams& p) {
    std::vector<DetectionSet> sets;
    std::vector<Estimate> est;
    for (const auto& m : maps) {
        sets.push_back(cfar_detect(m, p));
        est.push_back(cfar_localize(sets.back(), m));
    }
    const auto bt = bin_truths(truths);
    MetricReport r = make_report("cfar", est, bt);
    r.detection = fp_fn_rates(sets, bt, 1.0);
    r.has_detection_rates = true;
    return r;
}

TrainResult train_localizer(std::span<const RDMap> maps, std::span<const TruthLabel> truths,
                            const PreprocessSpec& prep, const LocalizerTrainConfig& config,
                            const nlohmann::json& dataset_info) {
    if (maps.size() != truths.size()) throw ConfigError("maps and truths differ in length");
    const auto assignment = fold_assignment(maps.size(), config.folds, config.seed);
    const auto x_all = localizer_inputs(maps, prep);
    const auto y_all = localizer_targets(truths, prep);
    const int jobs = config.folds == 1 ? 1 : config.folds;

    TrainResult result;
    result.assignment_hash = fold_assignment_hash(assignment);
    result.folds.resize(jobs);
    parallel_for(static_cast<std::size_t>(jobs), config.workers, [&](std::size_t job) {
        const int fold = static_cast<int>(job);
        FoldResult fr;
        fr.fold = fold;
        for (std::size_t i = 0; i < assignment.size(); ++i)
            (assignment[i] == fold ? fr.val_index : fr.train_index).push_back(static_cast<int>(i));

        fr.model = make_localizer(prep, config.arch, stable_hash(config.seed, 1000 + job));
        fr.model.info["fold"] = fold;
        fr.model.info["folds"] = config.folds;
        fr.model.info["dataset"] = dataset_info;
        fr.model.info["train"] = to_json(config);

        nn::FitConfig fit = config.fit;
        fit.seed = stable_hash(config.seed, 2000 + job);
        if (config.augment)
            fit.augment = [&prep](nn::TensorF& x, nn::TensorF& y, Rng& rng) { shift_augment(x, y, rng, prep); };
        const auto xt = nn::slice_batch(x_all, fr.train_index);
        const auto yt = nn::slice_batch(y_all, fr.train_index);
        const auto xv = nn::slice_batch(x_all, fr.val_index);
        const auto yv = nn::slice_batch(y_all, fr.val_index);
        fr.history = nn::fit(fr.model.net, xt, yt, fit, &xv, &yv);

        std::vector<RDMap> vmaps;
        std::vector<TruthLabel> vtruth;
        for (int i : fr.val_index) {
            vmaps.push_back(maps[i]);
            vtruth.push_back(truths[i]);
        }
        const auto cnn = predict_batch(fr.model, vmaps);
        std::vector<Estimate> am;
        for (const auto& m : vmaps) am.push_back(argmax_localize(m));
        fr.cnn = evaluate_estimates("cnn", cnn, vtruth);
        fr.argmax = evaluate_estimates("argmax", am, vtruth);
        fr.cfar = evaluate_cfar(vmaps, vtruth, config.cfar);
        result.folds[job] = std::move(fr);
    });
    return result;
}

// ---------------------------------------------------------------------------
// Feature maps

FeatureStack feature_maps(Localizer& model, const RDMap& map, int layer_index) {
    const auto& specs = model.net.specs();
    if (layer_index < 0 || layer_index >= static_cast<int>(specs.size()) ||
        specs[layer_index].kind != nn::LayerKind::conv2d)
        throw ConfigError("layer " + std::to_string(layer_index) + " is not a convolution layer");
    int last = layer_index;
    while (last + 1 < static_cast<int>(specs.size())) {
        const auto k = specs[last + 1].kind;
        if (k == nn::LayerKind::batch_norm || k == nn::LayerKind::relu || k == nn::LayerKind::leaky_relu ||
            k == nn::LayerKind::sigmoid || k == nn::LayerKind::tanh)
            ++last;
        else
            break;
    }
    check_compat(model, map);
    nn::TensorF x({1, 1, model.prep.input_range(), model.prep.input_doppler()});
    x.values = preprocess(map, model.prep);
    model.net.forward(x, false);
    const auto& act = model.net.activations()[last + 1];
    FeatureStack fs;
    fs.layer = layer_index;
    fs.source_layer = last;
    fs.channels = act.shape[1];
    fs.rows = act.shape[2];
    fs.cols = act.shape[3];
    fs.values = act.values;
    return fs;
}

void export_feature_maps(const FeatureStack& stack, const std::filesystem::path& dir) {
    const std::size_t plane = static_cast<std::size_t>(stack.rows) * stack.cols;
    nlohmann::json files = nlohmann::json::array();
    for (int c = 0; c < stack.channels; ++c) {
        const std::string name = "channel_" + std::to_string(c) + ".f32";
        const auto bytes = to_f32_le(std::span<const float>(stack.values.data() + c * plane, plane));
        write_file(dir / name, bytes);
        files.push_back({{"channel", c}, {"file", name}, {"sha256", sha256_hex(bytes)}});
    }
    nlohmann::json manifest{{"layer", stack.layer},     {"source_layer", stack.source_layer},
                            {"channels", stack.channels}, {"rows", stack.rows},
                            {"cols", stack.cols},         {"dtype", "float32-le"},
                            {"files", files}};
    write_text(dir / "manifest.json", manifest.dump(2));
}

}  // namespace detwin
