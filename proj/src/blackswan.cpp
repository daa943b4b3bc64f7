#include "detwin/blackswan.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

namespace detwin {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
    if (!j.is_object()) throw ConfigError(std::string(what) + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw ConfigError(std::string(what) + ": unknown key '" + it.key() + "'");
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

double cell_gamma(Landcover c) { return std::pow(10.0, backscatter_db(c) / 10.0); }

}  // namespace

// ---------------------------------------------------------------------------
// Conditioning pairs

void PairSpec::validate() const {
    if (size < 8) throw ConfigError("pairs: size must be >= 8");
    if (!(min_ground_range >= 0.0 && max_ground_range > min_ground_range))
        throw ConfigError("pairs: ground range interval is empty");
    if (!(altitude_above_mean > 0.0)) throw ConfigError("pairs: altitude must be > 0");
    if (subsamples < 1) throw ConfigError("pairs: subsamples must be >= 1");
    if (!(floor_rel > 0.0 && floor_rel < 1.0)) throw ConfigError("pairs: floor_rel must lie in (0, 1)");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("pairs: train_fraction must lie in (0, 1)");
}

nlohmann::json to_json(const PairSpec& s) {
    return {{"size", s.size},
            {"min_ground_range", s.min_ground_range},
            {"max_ground_range", s.max_ground_range},
            {"altitude_above_mean", s.altitude_above_mean},
            {"subsamples", s.subsamples},
            {"floor_rel", s.floor_rel},
            {"train_fraction", s.train_fraction}};
}

PairSpec pair_spec_from_json(const nlohmann::json& j, const PairSpec& base) {
    reject_unknown(j, {"size", "min_ground_range", "max_ground_range", "altitude_above_mean", "subsamples",
                       "floor_rel", "train_fraction"},
                   "pairs");
    PairSpec s = base;
    read(j, "size", s.size);
    read(j, "min_ground_range", s.min_ground_range);
    read(j, "max_ground_range", s.max_ground_range);
    read(j, "altitude_above_mean", s.altitude_above_mean);
    read(j, "subsamples", s.subsamples);
    read(j, "floor_rel", s.floor_rel);
    read(j, "train_fraction", s.train_fraction);
    s.validate();
    return s;
}

std::string PairSet::hash() const {
    std::vector<std::uint8_t> bytes;
    for (const auto& p : pairs) {
        const auto a = to_f32_le(std::span<const float>(p.input));
        const auto b = to_f32_le(std::span<const float>(p.output));
        bytes.insert(bytes.end(), a.begin(), a.end());
        bytes.insert(bytes.end(), b.begin(), b.end());
    }
    const std::string text = to_json(spec).dump();
    bytes.insert(bytes.end(), text.begin(), text.end());
    for (int i : train) bytes.push_back(static_cast<std::uint8_t>(i & 0xff));
    return sha256_hex(bytes);
}

NormalizedClutter normalize_clutter(const std::vector<double>& power, double floor_rel) {
    if (power.empty()) throw ConfigError("normalize: empty map");
    NormalizedClutter out;
    const double mx = *std::max_element(power.begin(), power.end());
    const double eps = mx > 0.0 ? floor_rel * mx : floor_rel;
    std::vector<double> l(power.size());
    for (std::size_t i = 0; i < power.size(); ++i) l[i] = std::log10(std::max(power[i], 0.0) + eps);
    const auto [lo, hi] = std::minmax_element(l.begin(), l.end());
    out.log_lo = *lo;
    out.log_hi = *hi;
    const double span = out.log_hi - out.log_lo;
    out.values.resize(l.size());
    for (std::size_t i = 0; i < l.size(); ++i)
        out.values[i] = span > 0.0 ? static_cast<float>((l[i] - out.log_lo) / span) : 0.0f;
    return out;
}

std::vector<double> denormalize_clutter(const std::vector<float>& values, double log_lo, double log_hi) {
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        out[i] = std::pow(10.0, log_lo + static_cast<double>(values[i]) * (log_hi - log_lo));
    return out;
}

PolarClutter polar_clutter(const TerrainScene& scene, const RadarConfig& config, const PlatformState& platform,
                           const PairSpec& spec, std::uint64_t seed) {
    spec.validate();
    const SceneView view = view_scene(scene, platform, config.terrain_shadowing);
    const Enu plat = to_local(scene.origin(), {platform.lat, platform.lon, platform.height_agl});
    const int n = spec.size, s = spec.subsamples;
    const double dr = (spec.max_ground_range - spec.min_ground_range) / n;
    const double da = 2.0 * kPi / n;
    const double half_e = scene.half_extent_east(), half_n = scene.half_extent_north();

    auto cell_of = [&](double e, double nn) -> std::optional<std::size_t> {
        const int c = static_cast<int>(std::floor((e + half_e) / scene.cell_size));
        const int r = static_cast<int>(std::floor((nn + half_n) / scene.cell_size));
        if (r < 0 || c < 0 || r >= scene.rows || c >= scene.cols) return std::nullopt;
        return scene.index(r, c);
    };

    PolarClutter out;
    out.height.resize(static_cast<std::size_t>(n) * n);
    out.landcover.resize(out.height.size());
    out.power.assign(out.height.size(), 0.0);
    std::vector<double> heights(out.height.size());
    Rng rng(stable_hash(seed, 0));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * n + j;
            const double rho = spec.min_ground_range + (i + 0.5) * dr;
            const double az = (j + 0.5) * da;
            const auto center = cell_of(plat.east + rho * std::sin(az), plat.north + rho * std::cos(az));
            if (!center) throw ConfigError("pairs: polar grid leaves the scene");
            heights[k] = scene.height[*center];
            out.landcover[k] = static_cast<float>(static_cast<int>(scene.landcover[*center])) / 3.0f;

            double total = 0.0;
            for (int a = 0; a < s; ++a) {
                for (int b = 0; b < s; ++b) {
                    const double rr = spec.min_ground_range + (i + (a + 0.5) / s) * dr;
                    const double aa = (j + (b + 0.5) / s) * da;
                    const double sub_area = rr * (dr / s) * (da / s);
                    const cplx fluct = rng.complex_normal();
                    const auto idx = cell_of(plat.east + rr * std::sin(aa), plat.north + rr * std::cos(aa));
                    if (!idx) continue;
                    const auto& cell = view.cells[*idx];
                    if (!cell.visible) continue;
                    const auto& g = cell.geometry;
                    const double sigma = config.clutter_scale * cell_gamma(scene.landcover[*idx]) * sub_area *
                                         std::sin(g.grazing_angle) * std::norm(fluct);
                    const double lambda = config.wavelength();
                    const double r2 = g.slant_range * g.slant_range;
                    const double p = config.tx_power * lambda * lambda * sigma / (std::pow(4.0 * kPi, 3) * r2 * r2);
                    total += p * r2;
                }
            }
            out.power[k] = total;
        }
    }
    const auto [lo, hi] = std::minmax_element(heights.begin(), heights.end());
    const double span = *hi - *lo;
    for (std::size_t k = 0; k < heights.size(); ++k)
        out.height[k] = span > 0.0 ? static_cast<float>((heights[k] - *lo) / span) : 0.0f;
    return out;
}

PairSet build_pairs(const std::vector<TerrainScene>& scenes, const RadarConfig& config, const PairSpec& spec, int n,
                    std::uint64_t seed, int workers) {
    spec.validate();
    if (n < 2) throw ConfigError("pairs: need at least 2 pairs for a train/validation split");
    if (scenes.empty()) throw ConfigError("pairs: no scenes");
    RadarConfig omni = config;
    omni.omnidirectional = true;

    PairSet set;
    set.spec = spec;
    set.pairs.resize(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), workers, [&](std::size_t i) {
        const std::size_t si = i % scenes.size();
        const TerrainScene& scene = scenes[si];
        Rng rng(stable_hash(seed, 2 * i));
        const double slack_e = scene.half_extent_east() - spec.max_ground_range - scene.cell_size;
        const double slack_n = scene.half_extent_north() - spec.max_ground_range - scene.cell_size;
        if (slack_e < 0.0 || slack_n < 0.0) throw ConfigError("pairs: scene smaller than the polar grid");
        const Enu offset{rng.uniform(-slack_e, slack_e), rng.uniform(-slack_n, slack_n), 0.0};
        const GeoPoint at = from_local(scene.origin(), offset);
        PlatformState p;
        p.lat = at.lat;
        p.lon = at.lon;
        p.height_agl = scene.mean_height() + spec.altitude_above_mean;
        p.heading_deg = rng.uniform(0.0, 360.0);
        p.speed = 0.0;

        ConditioningPair pair;
        pair.size = spec.size;
        pair.scene_index = si;
        pair.platform = p;
        pair.seed = stable_hash(seed, 2 * i + 1);
        const PolarClutter pc = polar_clutter(scene, omni, p, spec, pair.seed);
        pair.input.reserve(2 * pc.height.size());
        pair.input.insert(pair.input.end(), pc.height.begin(), pc.height.end());
        pair.input.insert(pair.input.end(), pc.landcover.begin(), pc.landcover.end());
        auto norm = normalize_clutter(pc.power, spec.floor_rel);
        pair.output = std::move(norm.values);
        pair.log_lo = norm.log_lo;
        pair.log_hi = norm.log_hi;
        set.pairs[i] = std::move(pair);
    });

    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(stable_hash(seed, 0xffffffffULL));
    for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    const int n_train = std::clamp(static_cast<int>(std::lround(spec.train_fraction * n)), 1, n - 1);
    set.train.assign(perm.begin(), perm.begin() + n_train);
    set.val.assign(perm.begin() + n_train, perm.end());
    std::sort(set.train.begin(), set.train.end());
    std::sort(set.val.begin(), set.val.end());
    return set;
}

// ---------------------------------------------------------------------------
// Noise specs

void NoiseSpec::validate() const {
    static const std::set<std::string> families{"normal", "uniform", "laplace", "student_t"};
    if (!families.count(family)) throw ConfigError("noise: unknown family '" + family + "'");
    if (!std::isfinite(mean) || !std::isfinite(scale) || !std::isfinite(shape))
        throw ConfigError("noise: parameters must be finite");
    if (scale < 0.0) throw ConfigError("noise: scale must be >= 0");
    if (family == "student_t" && !(shape > 2.0)) throw ConfigError("noise: student_t needs shape > 2");
}

namespace {

// Marsaglia-Tsang gamma(k, 1) for k >= 1.
double gamma_draw(Rng& rng, double k) {
    const double d = k - 1.0 / 3.0, c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = rng.normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = rng.uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

}  // namespace

double NoiseSpec::sample(Rng& rng) const {
    if (family == "normal") return mean + scale * rng.normal();
    if (family == "uniform") return mean + scale * std::sqrt(3.0) * (2.0 * rng.uniform() - 1.0);
    if (family == "laplace") {
        const double u = rng.uniform() - 0.5;
        const double b = scale / std::sqrt(2.0);
        return mean - b * (u < 0 ? -1.0 : 1.0) * std::log(1.0 - 2.0 * std::abs(u));
    }
    // Student-t scaled to unit variance, then to `scale`.
    const double nu = shape;
    const double k = 0.5 * nu;
    const double g = k >= 1.0 ? gamma_draw(rng, k) : gamma_draw(rng, k + 1.0) * std::pow(rng.uniform(), 1.0 / k);
    const double t = rng.normal() / std::sqrt(2.0 * g / nu);
    return mean + scale * t * std::sqrt((nu - 2.0) / nu);
}

bool NoiseSpec::same_distribution(const NoiseSpec& o) const {
    return family == o.family && mean == o.mean && scale == o.scale && shape == o.shape;
}

nlohmann::json to_json(const NoiseSpec& s) {
    return {{"family", s.family}, {"mean", s.mean}, {"scale", s.scale}, {"shape", s.shape}, {"provenance", s.provenance}};
}

NoiseSpec noise_spec_from_json(const nlohmann::json& j) {
    reject_unknown(j, {"family", "mean", "scale", "shape", "provenance"}, "noise");
    NoiseSpec s;
    read(j, "family", s.family);
    read(j, "mean", s.mean);
    read(j, "scale", s.scale);
    read(j, "shape", s.shape);
    read(j, "provenance", s.provenance);
    s.validate();
    return s;
}

NoiseSpec noise_excursion(const NoiseSpec& spec, const NoiseMutation& m) {
    spec.validate();
    if (!std::isfinite(m.scale_factor) || m.scale_factor < 0.0 || !std::isfinite(m.mean_shift))
        throw ConfigError("noise mutation parameters must be finite and non-negative in scale");
    NoiseSpec out = spec;
    out.scale *= m.scale_factor;
    out.mean += m.mean_shift;
    if (m.family) out.family = *m.family;
    if (m.shape) out.shape = *m.shape;
    out.validate();
    nlohmann::json step{{"scale_factor", m.scale_factor}, {"mean_shift", m.mean_shift}};
    if (m.family) step["family"] = *m.family;
    if (m.shape) step["shape"] = *m.shape;
    out.provenance.push_back(step.dump());
    return out;
}

// ---------------------------------------------------------------------------
// Conditional GAN

void GanConfig::validate() const {
    if (epochs < 0) throw ConfigError("gan: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("gan: batch_size must be >= 1");
    if (!(lambda_l1 >= 0.0) || !(adversarial_weight >= 0.0)) throw ConfigError("gan: loss weights must be >= 0");
    noise.validate();
}

nlohmann::json to_json(const GanConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lambda_l1", c.lambda_l1},
            {"adversarial_weight", c.adversarial_weight},
            {"g_lr", c.g_adam.lr},
            {"d_lr", c.d_adam.lr},
            {"beta1", c.g_adam.beta1},
            {"beta2", c.g_adam.beta2},
            {"seed", c.seed},
            {"noise", to_json(c.noise)}};
}

GanConfig gan_config_from_json(const nlohmann::json& j, const GanConfig& base) {
    reject_unknown(j, {"epochs", "batch_size", "lambda_l1", "adversarial_weight", "g_lr", "d_lr", "beta1", "beta2",
                       "seed", "noise"},
                   "gan");
    GanConfig c = base;
    read(j, "epochs", c.epochs);
    read(j, "batch_size", c.batch_size);
    read(j, "lambda_l1", c.lambda_l1);
    read(j, "adversarial_weight", c.adversarial_weight);
    read(j, "g_lr", c.g_adam.lr);
    read(j, "d_lr", c.d_adam.lr);
    if (j.contains("beta1")) c.g_adam.beta1 = c.d_adam.beta1 = j.at("beta1").get<double>();
    if (j.contains("beta2")) c.g_adam.beta2 = c.d_adam.beta2 = j.at("beta2").get<double>();
    read(j, "seed", c.seed);
    if (j.contains("noise")) c.noise = noise_spec_from_json(j.at("noise"));
    c.validate();
    return c;
}

std::vector<nn::LayerSpec> generator_arch() {
    using nn::LayerSpec;
    return {LayerSpec::conv(16, 3, 2, 1), LayerSpec::leaky_relu(0.2),
            LayerSpec::conv(32, 3, 2, 1), LayerSpec::batch_norm(), LayerSpec::leaky_relu(0.2),
            LayerSpec::conv(64, 3, 2, 1), LayerSpec::batch_norm(), LayerSpec::leaky_relu(0.2),
            LayerSpec::upsample(2),       LayerSpec::conv(32, 3, 1, 1), LayerSpec::batch_norm(), LayerSpec::relu(),
            LayerSpec::upsample(2),       LayerSpec::conv(16, 3, 1, 1), LayerSpec::batch_norm(), LayerSpec::relu(),
            LayerSpec::upsample(2),       LayerSpec::conv(1, 3, 1, 1),  LayerSpec::sigmoid()};
}

std::vector<nn::LayerSpec> discriminator_arch() {
    using nn::LayerSpec;
    return {LayerSpec::conv(16, 3, 2, 1), LayerSpec::leaky_relu(0.2),
            LayerSpec::conv(32, 3, 2, 1), LayerSpec::batch_norm(), LayerSpec::leaky_relu(0.2),
            LayerSpec::conv(64, 3, 2, 1), LayerSpec::batch_norm(), LayerSpec::leaky_relu(0.2),
            LayerSpec::conv(1, 3, 1, 1)};
}

nn::TensorF generator_input(const std::vector<const ConditioningPair*>& pairs, const NoiseSpec& noise,
                            std::uint64_t noise_seed) {
    if (pairs.empty()) throw ConfigError("generator input: no pairs");
    const int n = pairs.front()->size;
    const std::size_t plane = static_cast<std::size_t>(n) * n;
    nn::TensorF x({static_cast<int>(pairs.size()), 3, n, n});
    Rng rng(noise_seed);
    for (std::size_t b = 0; b < pairs.size(); ++b) {
        if (pairs[b]->input.size() != 2 * plane) throw ConfigError("generator input: conditioning shape mismatch");
        float* dst = x.sample(static_cast<int>(b));
        std::copy(pairs[b]->input.begin(), pairs[b]->input.end(), dst);
        for (std::size_t k = 0; k < plane; ++k) dst[2 * plane + k] = static_cast<float>(noise.sample(rng));
    }
    return x;
}

namespace {

// (conditioning, clutter) discriminator input from a generator input and a map batch.
nn::TensorF pair_input(const nn::TensorF& g_in, const nn::TensorF& maps) {
    const int b = g_in.batch(), h = g_in.shape[2], w = g_in.shape[3];
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    nn::TensorF x({b, 3, h, w});
    for (int i = 0; i < b; ++i) {
        std::copy(g_in.sample(i), g_in.sample(i) + 2 * plane, x.sample(i));
        std::copy(maps.sample(i), maps.sample(i) + plane, x.sample(i) + 2 * plane);
    }
    return x;
}

nn::TensorF target_batch(const std::vector<const ConditioningPair*>& pairs) {
    const int n = pairs.front()->size;
    nn::TensorF y({static_cast<int>(pairs.size()), 1, n, n});
    for (std::size_t b = 0; b < pairs.size(); ++b)
        std::copy(pairs[b]->output.begin(), pairs[b]->output.end(), y.sample(static_cast<int>(b)));
    return y;
}

std::vector<const ConditioningPair*> select(const PairSet& set, std::span<const int> idx) {
    std::vector<const ConditioningPair*> out;
    for (int i : idx) out.push_back(&set.pairs.at(static_cast<std::size_t>(i)));
    return out;
}

}  // namespace

GanResult train_cgan(const PairSet& pairs, const GanConfig& config) {
    config.validate();
    if (pairs.train.empty()) throw ConfigError("gan: empty training split");
    const int n = pairs.spec.size;
    GanResult result;
    GeneratorBundle& b = result.bundle;
    b.generator = nn::Net({3, n, n}, generator_arch(), stable_hash(config.seed, 1));
    b.discriminator = nn::Net({3, n, n}, discriminator_arch(), stable_hash(config.seed, 2));
    b.noise = config.noise;
    b.pair_spec = pairs.spec;
    for (int i : pairs.train) {
        b.mean_log_lo += pairs.pairs[i].log_lo;
        b.mean_log_hi += pairs.pairs[i].log_hi;
    }
    b.mean_log_lo /= static_cast<double>(pairs.train.size());
    b.mean_log_hi /= static_cast<double>(pairs.train.size());
    b.provenance = {{"pairs_hash", pairs.hash()},
                    {"train", pairs.train.size()},
                    {"val", pairs.val.size()},
                    {"config", to_json(config)}};

    nn::Adam<float> g_opt(config.g_adam), d_opt(config.d_adam);
    std::vector<int> order = pairs.train;
    // Fixed-noise training inputs for resetting the generator's batch-norm statistics each epoch.
    const auto calib = generator_input(select(pairs, pairs.train), config.noise, stable_hash(config.seed, 3));
    const std::size_t plane = static_cast<std::size_t>(n) * n;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Rng rng(stable_hash(config.seed, 100 + static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
        double g_sum = 0.0, l1_sum = 0.0, d_sum = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t len = std::min<std::size_t>(config.batch_size, order.size() - start);
            const auto batch = select(pairs, std::span<const int>(order.data() + start, len));
            const auto g_in = generator_input(batch, config.noise, rng.next_u64());
            const auto real = target_batch(batch);

            const auto fake = b.generator.forward(g_in, true);

            // Discriminator: real pairs toward 1, generated pairs toward 0.
            b.discriminator.zero_grad();
            auto d_real = b.discriminator.forward(pair_input(g_in, real), true);
            auto lr = nn::bce_logits_loss(d_real, 1.0);
            for (auto& g : lr.grad.values) g *= 0.5f;
            b.discriminator.backward(lr.grad);
            auto d_fake = b.discriminator.forward(pair_input(g_in, fake), true);
            auto lf = nn::bce_logits_loss(d_fake, 0.0);
            for (auto& g : lf.grad.values) g *= 0.5f;
            b.discriminator.backward(lf.grad);
            d_opt.step(b.discriminator);
            const double d_loss = 0.5 * (lr.value + lf.value);

            // Generator: fool the updated discriminator plus lambda * L1.
            b.generator.zero_grad();
            auto l1 = nn::l1_loss(fake, real);
            nn::TensorF grad = l1.grad;
            for (auto& g : grad.values) g *= static_cast<float>(config.lambda_l1);
            double adv = 0.0;
            if (config.adversarial_weight > 0.0) {
                auto d_out = b.discriminator.forward(pair_input(g_in, fake), true);
                auto la = nn::bce_logits_loss(d_out, 1.0);
                adv = la.value;
                for (auto& g : la.grad.values) g *= static_cast<float>(config.adversarial_weight);
                const auto d_in = b.discriminator.backward(la.grad);
                b.discriminator.zero_grad();
                for (int s = 0; s < grad.batch(); ++s) {
                    const float* src = d_in.sample(s) + 2 * plane;
                    float* dst = grad.sample(s);
                    for (std::size_t k = 0; k < plane; ++k) dst[k] += src[k];
                }
            }
            b.generator.backward(grad);
            g_opt.step(b.generator);

            const double g_loss = config.adversarial_weight * adv + config.lambda_l1 * l1.value;
            if (!std::isfinite(g_loss) || !std::isfinite(d_loss))
                throw TrainingFailure("gan: non-finite loss at epoch " + std::to_string(epoch), epoch);
            g_sum += g_loss;
            l1_sum += l1.value;
            d_sum += d_loss;
            ++batches;
        }
        nn::recalibrate_batch_norm(b.generator, calib, config.batch_size);
        result.history.g_loss.push_back(g_sum / batches);
        result.history.g_l1.push_back(l1_sum / batches);
        result.history.d_loss.push_back(d_sum / batches);
        result.history.val_l1.push_back(pairs.val.empty() ? 0.0 : validation_l1(b, pairs, config.seed));
    }
    b.provenance["epochs"] = config.epochs;
    return result;
}

GeneratedClutter generate_clutter(GeneratorBundle& bundle, const std::vector<float>& conditioning,
                                  std::uint64_t noise_seed, const std::optional<NoiseSpec>& noise) {
    const auto& in = bundle.generator.input_shape();
    const int n = in[1];
    if (conditioning.size() != 2 * static_cast<std::size_t>(n) * n)
        throw ConfigError("generate: conditioning must be 2 x " + std::to_string(n) + " x " + std::to_string(n));
    ConditioningPair tmp;
    tmp.size = n;
    tmp.input = conditioning;
    const auto t0 = std::chrono::steady_clock::now();
    const auto x = generator_input({&tmp}, noise.value_or(bundle.noise), noise_seed);
    const auto y = bundle.generator.forward(x, false);
    GeneratedClutter out;
    out.map = y.values;
    out.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

double validation_l1(GeneratorBundle& bundle, const PairSet& pairs, std::uint64_t noise_seed) {
    if (pairs.val.empty()) throw ConfigError("validation split is empty");
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < pairs.val.size(); start += 16) {
        const std::size_t len = std::min<std::size_t>(16, pairs.val.size() - start);
        const auto batch = select(pairs, std::span<const int>(pairs.val.data() + start, len));
        const auto x = generator_input(batch, bundle.noise, stable_hash(noise_seed, start));
        const auto y = bundle.generator.forward(x, false);
        const auto t = target_batch(batch);
        for (std::size_t k = 0; k < y.size(); ++k) sum += std::abs(y.values[k] - t.values[k]);
        count += y.size();
    }
    return sum / static_cast<double>(count);
}

double discriminator_accuracy(GeneratorBundle& bundle, const PairSet& pairs, std::uint64_t noise_seed) {
    if (pairs.val.empty()) throw ConfigError("validation split is empty");
    std::size_t correct = 0, total = 0;
    for (std::size_t start = 0; start < pairs.val.size(); start += 16) {
        const std::size_t len = std::min<std::size_t>(16, pairs.val.size() - start);
        const auto batch = select(pairs, std::span<const int>(pairs.val.data() + start, len));
        const auto x = generator_input(batch, bundle.noise, stable_hash(noise_seed, start));
        const auto fake = bundle.generator.forward(x, false);
        const auto real = target_batch(batch);
        const auto dr = bundle.discriminator.forward(pair_input(x, real), false);
        for (float v : dr.values) correct += v > 0.0f;
        total += dr.size();
        const auto df = bundle.discriminator.forward(pair_input(x, fake), false);
        for (float v : df.values) correct += v < 0.0f;
        total += df.size();
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

void save_bundle(const std::filesystem::path& dir, GeneratorBundle& bundle) {
    std::filesystem::create_directories(dir);
    nn::save_model(dir / "generator.bin", bundle.generator);
    nn::save_model(dir / "discriminator.bin", bundle.discriminator);
    nlohmann::json j{{"noise", to_json(bundle.noise)},
                     {"pairs", to_json(bundle.pair_spec)},
                     {"mean_log_lo", bundle.mean_log_lo},
                     {"mean_log_hi", bundle.mean_log_hi},
                     {"provenance", bundle.provenance},
                     {"generator_hash", nn::model_hash(bundle.generator)},
                     {"discriminator_hash", nn::model_hash(bundle.discriminator)}};
    write_text(dir / "bundle.json", j.dump(2));
}

GeneratorBundle load_bundle(const std::filesystem::path& dir) {
    const auto j = nlohmann::json::parse(read_text(dir / "bundle.json"));
    GeneratorBundle b;
    b.generator = nn::load_model(dir / "generator.bin").net;
    b.discriminator = nn::load_model(dir / "discriminator.bin").net;
    b.noise = noise_spec_from_json(j.at("noise"));
    b.pair_spec = pair_spec_from_json(j.at("pairs"));
    b.mean_log_lo = j.at("mean_log_lo").get<double>();
    b.mean_log_hi = j.at("mean_log_hi").get<double>();
    b.provenance = j.value("provenance", nlohmann::json::object());
    return b;
}

RDMap clutter_to_rd(const GeneratorBundle& bundle, const std::vector<float>& generated, const RadarConfig& config,
                    const PlatformState& platform, double reference_clutter_power) {
    const int n = bundle.pair_spec.size;
    if (generated.size() != static_cast<std::size_t>(n) * n) throw ConfigError("clutter_to_rd: map size mismatch");
    const auto power = denormalize_clutter(generated, bundle.mean_log_lo, bundle.mean_log_hi);
    RDMap map;
    map.n_range = config.n_range_bins;
    map.n_doppler = config.n_pulses;
    map.power.assign(static_cast<std::size_t>(map.n_range) * map.n_doppler, 0.0);
    map.config_hash = config.hash();
    map.window = "generated";

    const double prf = config.prf();
    const double lambda = config.wavelength();
    const double boresight = config.boresight_bearing_deg * kPi / 180.0;
    const double heading = platform.heading_deg * kPi / 180.0;
    const int sub = 16;  // azimuth sub-steps per sector, smooths the narrow main beam
    for (int rb = 0; rb < map.n_range; ++rb) {
        const double pos = (rb + 0.5) / map.n_range * n - 0.5;
        const int r0 = std::clamp(static_cast<int>(std::floor(pos)), 0, n - 1);
        const int r1 = std::min(r0 + 1, n - 1);
        const double fr = std::clamp(pos - r0, 0.0, 1.0);
        for (int j = 0; j < n; ++j) {
            const double p = (1.0 - fr) * power[static_cast<std::size_t>(r0) * n + j] +
                             fr * power[static_cast<std::size_t>(r1) * n + j];
            for (int s = 0; s < sub; ++s) {
                // Polar sectors are bearings from north; the gain is taken relative to the array boresight.
                const double bearing = (j + (s + 0.5) / sub) * 2.0 * kPi / n;
                const double rel = std::remainder(bearing - boresight, 2.0 * kPi);
                if (std::abs(rel) > 0.5 * kPi && !config.omnidirectional) continue;
                const double g = array_gain(config, rel, config.look_el);
                const double fd = wrap_doppler(2.0 * platform.speed * std::cos(bearing - heading) / lambda, prf);
                double bin = fd / config.doppler_bin;
                if (bin < 0) bin += map.n_doppler;
                const int d0 = static_cast<int>(std::floor(bin)) % map.n_doppler;
                const int d1 = (d0 + 1) % map.n_doppler;
                const double fd_frac = bin - std::floor(bin);
                const double w = p * g * g / sub;
                map.at(rb, d0) += (1.0 - fd_frac) * w;
                map.at(rb, d1) += fd_frac * w;
            }
        }
    }
    const double total = std::accumulate(map.power.begin(), map.power.end(), 0.0);
    if (total > 0.0 && reference_clutter_power > 0.0)
        for (auto& v : map.power) v *= reference_clutter_power / total;
    return map;
}

// ---------------------------------------------------------------------------
// Anomalies

const char* anomaly_name(AnomalyKind k) {
    switch (k) {
        case AnomalyKind::scatterer_swarm: return "scatterer_swarm";
        case AnomalyKind::doppler_streak: return "doppler_streak";
        case AnomalyKind::ood_noise_scale: return "ood_noise_scale";
    }
    return "?";
}

AnomalyKind anomaly_from_name(const std::string& s) {
    if (s == "scatterer_swarm") return AnomalyKind::scatterer_swarm;
    if (s == "doppler_streak") return AnomalyKind::doppler_streak;
    if (s == "ood_noise_scale") return AnomalyKind::ood_noise_scale;
    throw ConfigError("unknown anomaly kind '" + s + "'");
}

void AnomalySpec::validate() const {
    if (count < 0) throw ConfigError("anomaly: count must be >= 0");
    if (extent < 0) throw ConfigError("anomaly: extent must be >= 0");
    if (!std::isfinite(amplitude) || amplitude < 0.0) throw ConfigError("anomaly: amplitude must be finite and >= 0");
    if (kind == AnomalyKind::scatterer_swarm && count > (2 * extent + 1) * (2 * extent + 1))
        throw ConfigError("anomaly: swarm does not fit its placement box");
}

nlohmann::json to_json(const AnomalySpec& s) {
    return {{"kind", anomaly_name(s.kind)}, {"count", s.count},
            {"extent", s.extent},           {"center_range", s.center_range},
            {"center_doppler", s.center_doppler}, {"amplitude", s.amplitude},
            {"seed", s.seed}};
}

AnomalySpec anomaly_from_json(const nlohmann::json& j) {
    reject_unknown(j, {"kind", "count", "extent", "center_range", "center_doppler", "amplitude", "seed"}, "anomaly");
    AnomalySpec s;
    if (j.contains("kind")) s.kind = anomaly_from_name(j.at("kind").get<std::string>());
    read(j, "count", s.count);
    read(j, "extent", s.extent);
    read(j, "center_range", s.center_range);
    read(j, "center_doppler", s.center_doppler);
    read(j, "amplitude", s.amplitude);
    read(j, "seed", s.seed);
    s.validate();
    return s;
}

InjectionResult inject_anomaly(const RDMap& map, const AnomalySpec& spec) {
    spec.validate();
    if (map.n_range <= 0 || map.n_doppler <= 0) throw ConfigError("anomaly: empty map");
    InjectionResult out;
    out.map = map;
    const int cr = spec.center_range < 0 ? map.n_range / 2 : spec.center_range;
    const int cd = spec.center_doppler < 0 ? map.n_doppler / 2 : spec.center_doppler;
    Rng rng(spec.seed);

    switch (spec.kind) {
        case AnomalyKind::scatterer_swarm: {
            // Placement box clipped in range; Doppler wraps.
            const int r_lo = std::max(0, cr - spec.extent), r_hi = std::min(map.n_range - 1, cr + spec.extent);
            out.clipped = r_lo != cr - spec.extent || r_hi != cr + spec.extent;
            const int width = std::min(2 * spec.extent + 1, map.n_doppler);
            std::vector<std::pair<int, int>> cells;
            for (int r = r_lo; r <= r_hi; ++r)
                for (int k = 0; k < width; ++k) cells.emplace_back(r, ((cd - spec.extent + k) % map.n_doppler + map.n_doppler) % map.n_doppler);
            const std::size_t want = std::min<std::size_t>(static_cast<std::size_t>(spec.count), cells.size());
            if (want < static_cast<std::size_t>(spec.count)) out.clipped = true;
            for (std::size_t i = 0; i < want; ++i) {
                const std::size_t pick = i + rng.below(cells.size() - i);
                std::swap(cells[i], cells[pick]);
                out.map.at(cells[i].first, cells[i].second) += spec.amplitude;
                out.pixels.push_back(cells[i]);
            }
            break;
        }
        case AnomalyKind::doppler_streak: {
            const int r = std::clamp(cr + static_cast<int>(rng.below(2 * spec.extent + 1)) - spec.extent, 0, map.n_range - 1);
            out.clipped = r != cr;
            const int len = std::min(spec.count, map.n_doppler);
            for (int k = 0; k < len; ++k) {
                const int d = ((cd - len / 2 + k) % map.n_doppler + map.n_doppler) % map.n_doppler;
                out.map.at(r, d) += spec.amplitude;
                out.pixels.emplace_back(r, d);
            }
            break;
        }
        case AnomalyKind::ood_noise_scale: {
            // Exponential (square-law) noise at `amplitude` times the map's median power.
            std::vector<double> sorted = map.power;
            std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
            const double level = spec.amplitude * sorted[sorted.size() / 2];
            for (int r = 0; r < map.n_range; ++r)
                for (int d = 0; d < map.n_doppler; ++d) {
                    const double e = -std::log(1.0 - rng.uniform());
                    if (level * e > 0.0) {
                        out.map.at(r, d) += level * e;
                        out.pixels.emplace_back(r, d);
                    }
                }
            break;
        }
    }
    return out;
}

PowerBounds physical_power_bounds(const SceneView& view, const RadarConfig& config, double target_rcs_max,
                                  double fluctuation_margin) {
    const TerrainScene& scene = *view.scene;
    const double gmax = static_cast<double>(config.n_horizontal) * config.n_vertical;
    const double gain2 = config.omnidirectional ? 1.0 : gmax * gmax * gmax * gmax;
    const double r = std::max(config.near_range, 1.0);
    const double lambda = config.wavelength();
    const double k = config.tx_power * gain2 * lambda * lambda / (std::pow(4.0 * kPi, 3) * r * r * r * r);
    const double gamma_max = std::pow(10.0, backscatter_db(Landcover::urban) / 10.0);
    const double clutter = k * config.clutter_scale * gamma_max * scene.cell_size * scene.cell_size *
                           static_cast<double>(scene.height.size());
    const double target = k * target_rcs_max;
    // Parseval: total map power = n_pulses * sum of windowed slow-time energy.
    const double window = 0.375 * config.n_pulses;  // sum of Hann^2
    const double per_pulse = fluctuation_margin * (clutter + target) + config.noise_power * config.n_range_bins;
    PowerBounds b;
    b.min_total = 0.0;
    b.max_total = config.n_pulses * window * per_pulse;
    return b;
}

bool admissible(const RDMap& map, const PowerBounds& bounds) {
    double total = 0.0;
    for (double v : map.power) {
        if (!std::isfinite(v) || v < 0.0) return false;
        total += v;
    }
    return total >= bounds.min_total && total <= bounds.max_total;
}

}  // namespace detwin
