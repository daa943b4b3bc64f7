#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "detwin/blackswan.hpp"
#include "detwin/scene.hpp"

using namespace detwin;

namespace {

TerrainScene small_scene(std::uint64_t seed) {
    TerrainSpec ts;
    ts.rows = 200;
    ts.cols = 200;
    ts.cell_size = 30.0;
    ts.feature_cells = 48.0;
    return generate_terrain(seed, ts);
}

PairSpec small_pairs() {
    PairSpec ps;
    ps.min_ground_range = 200.0;
    ps.max_ground_range = 2500.0;
    return ps;
}

const PairSet& shared_pairs() {
    static const PairSet set = build_pairs({small_scene(100), small_scene(101)}, RadarConfig::desk_scale(),
                                           small_pairs(), 18, 5);
    return set;
}

double sample_variance(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

std::vector<double> draws(const NoiseSpec& spec, int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = spec.sample(rng);
    return v;
}

RDMap zero_map(int nr, int nd) {
    RDMap m;
    m.n_range = nr;
    m.n_doppler = nd;
    m.power.assign(static_cast<std::size_t>(nr) * nd, 0.0);
    return m;
}

}  // namespace

TEST_CASE("pairs: outputs are normalised and the round trip is idempotent") {
    const auto& set = shared_pairs();
    REQUIRE(set.pairs.size() == 18);
    CHECK(set.train.size() + set.val.size() == 18);
    for (const auto& p : set.pairs) {
        REQUIRE(p.output.size() == 64u * 64u);
        REQUIRE(p.input.size() == 2u * 64u * 64u);
        const auto [lo, hi] = std::minmax_element(p.output.begin(), p.output.end());
        CHECK(*lo >= 0.0f);
        CHECK(*hi <= 1.0f);
        const auto lin = denormalize_clutter(p.output, p.log_lo, p.log_hi);
        const auto again = normalize_clutter(lin, 0.0);
        CHECK(again.log_lo == doctest::Approx(p.log_lo).epsilon(1e-9));
        CHECK(again.log_hi == doctest::Approx(p.log_hi).epsilon(1e-9));
        double worst = 0.0;
        for (std::size_t i = 0; i < p.output.size(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(again.values[i]) - p.output[i]));
        CHECK(worst <= 1e-6);
    }
}

TEST_CASE("pairs: fewer than two pairs is an error") {
    CHECK_THROWS_AS(build_pairs({small_scene(100)}, RadarConfig::desk_scale(), small_pairs(), 1, 5), ConfigError);
    CHECK_THROWS_AS(build_pairs({}, RadarConfig::desk_scale(), small_pairs(), 4, 5), ConfigError);
}

TEST_CASE("pairs: an all-water scene gives a flatter clutter map than mixed terrain") {
    TerrainScene land = small_scene(100);
    TerrainScene water = land;
    std::fill(water.height.begin(), water.height.end(), 0.0);
    std::fill(water.landcover.begin(), water.landcover.end(), Landcover::water);
    PlatformState p;
    p.lat = land.origin_lat;
    p.lon = land.origin_lon;
    p.speed = 0.0;
    RadarConfig omni = RadarConfig::desk_scale();
    omni.omnidirectional = true;

    const auto spread = [&](const TerrainScene& s) {
        PlatformState q = p;
        q.height_agl = s.mean_height() + 1000.0;
        const auto pc = polar_clutter(s, omni, q, small_pairs(), 3);
        const auto n = normalize_clutter(pc.power, 1e-6);
        for (float v : n.values) REQUIRE((v >= 0.0f && v <= 1.0f));
        if (&s == &water)
            for (float v : pc.landcover) REQUIRE(v == 0.0f);
        std::vector<double> logs;
        for (double x : pc.power) logs.push_back(std::log10(x));
        return std::sqrt(sample_variance(logs));
    };
    const double s_water = spread(water);
    const double s_land = spread(land);
    CHECK(s_water < s_land);
}

TEST_CASE("noise excursion: identity, scale and family swap") {
    NoiseSpec unit;
    const auto same = noise_excursion(unit, NoiseMutation{});
    CHECK(same.same_distribution(unit));
    CHECK(same.family == unit.family);
    CHECK(same.mean == unit.mean);
    CHECK(same.scale == unit.scale);
    CHECK(same.shape == unit.shape);

    NoiseMutation triple;
    triple.scale_factor = 3.0;
    const auto wide = noise_excursion(unit, triple);
    CHECK(wide.scale == 3.0);
    CHECK(wide.provenance.size() == unit.provenance.size() + 1);
    const double sd = std::sqrt(sample_variance(draws(wide, 100000, 17)));
    CHECK(std::abs(sd - 3.0) <= 0.02 * 3.0);

    NoiseMutation swap;
    swap.family = "uniform";
    const auto uni = noise_excursion(unit, swap);
    CHECK(uni.family == "uniform");
    CHECK(!uni.same_distribution(unit));
    // Matched variance: the uniform family is parameterised by its standard deviation.
    const double var = sample_variance(draws(uni, 100000, 19));
    CHECK(std::abs(var - 1.0) <= 0.02);
    const auto v = draws(uni, 1000, 23);
    const double half = std::sqrt(3.0);
    for (double x : v) CHECK(std::abs(x) <= half + 1e-12);
}

TEST_CASE("anomaly injection: zero count, single scatterer, 20-scatterer swarm") {
    const RDMap zero = zero_map(32, 16);
    RDMap base = zero;
    Rng rng(4);
    for (auto& x : base.power) x = rng.uniform(0.0, 1.0);

    AnomalySpec none;
    none.count = 0;
    CHECK(inject_anomaly(base, none).map.power == base.power);

    AnomalySpec one;
    one.count = 1;
    one.extent = 0;
    one.center_range = 7;
    one.center_doppler = 3;
    one.amplitude = 2.5;
    const auto r1 = inject_anomaly(zero, one);
    int nonzero = 0;
    for (int r = 0; r < zero.n_range; ++r)
        for (int d = 0; d < zero.n_doppler; ++d)
            if (r1.map.at(r, d) != 0.0) {
                ++nonzero;
                CHECK(r == 7);
                CHECK(d == 3);
                CHECK(r1.map.at(r, d) == 2.5);
            }
    CHECK(nonzero == 1);

    AnomalySpec swarm;
    swarm.count = 20;
    swarm.extent = 6;
    swarm.amplitude = 1.0;
    swarm.seed = 9;
    const auto r20 = inject_anomaly(base, swarm);
    std::set<std::pair<int, int>> distinct(r20.pixels.begin(), r20.pixels.end());
    CHECK(distinct.size() == 20);
    std::size_t changed = 0;
    for (int r = 0; r < base.n_range; ++r)
        for (int d = 0; d < base.n_doppler; ++d) {
            const bool injected = distinct.count({r, d}) > 0;
            if (injected) CHECK(r20.map.at(r, d) == doctest::Approx(base.at(r, d) + 1.0));
            else CHECK(r20.map.at(r, d) == base.at(r, d));
            changed += r20.map.at(r, d) != base.at(r, d);
        }
    CHECK(changed == 20);
    const auto z20 = inject_anomaly(zero, swarm);
    int peaks = 0;
    for (double x : z20.map.power) peaks += x > 0.0;
    CHECK(peaks == 20);
    CHECK(inject_anomaly(base, swarm).map.power == r20.map.power);
}

TEST_CASE("gan: zero learning rate leaves the parameters unchanged") {
    GanConfig gc;
    gc.epochs = 1;
    gc.seed = 3;
    gc.g_adam.lr = 0.0;
    gc.d_adam.lr = 0.0;
    auto r = train_cgan(shared_pairs(), gc);
    nn::Net g0({3, 64, 64}, generator_arch(), stable_hash(3, 1));
    nn::Net d0({3, 64, 64}, discriminator_arch(), stable_hash(3, 2));
    const auto compare = [](nn::Net& a, nn::Net& b) {
        auto pa = a.params();
        auto pb = b.params();
        REQUIRE(pa.size() == pb.size());
        for (std::size_t i = 0; i < pa.size(); ++i)
            CHECK(std::equal(pa[i].values.begin(), pa[i].values.end(), pb[i].values.begin()));
    };
    compare(r.bundle.generator, g0);
    compare(r.bundle.discriminator, d0);
}

TEST_CASE("gan: pure L1 training lowers validation L1 every epoch, outputs stay in [0, 1]") {
    GanConfig gc;
    gc.epochs = 5;
    gc.seed = 5;
    gc.batch_size = 2;
    gc.adversarial_weight = 0.0;
    const auto& set = shared_pairs();
    auto r = train_cgan(set, gc);
    REQUIRE(r.history.val_l1.size() == 5);
    for (std::size_t e = 1; e < r.history.val_l1.size(); ++e) CHECK(r.history.val_l1[e] < r.history.val_l1[e - 1]);

    Rng rng(8);
    std::vector<float> wild(2 * 64 * 64);
    for (auto& x : wild) x = static_cast<float>(rng.uniform(-50.0, 50.0));
    for (const std::vector<float>* cond : {&set.pairs[0].input, static_cast<const std::vector<float>*>(&wild)}) {
        const auto g = generate_clutter(r.bundle, *cond, 1);
        REQUIRE(g.map.size() == 64u * 64u);
        for (float v : g.map) REQUIRE((v >= 0.0f && v <= 1.0f));
    }
    const auto a = generate_clutter(r.bundle, set.pairs[1].input, 42);
    const auto b = generate_clutter(r.bundle, set.pairs[1].input, 42);
    CHECK(a.map == b.map);

    auto again = train_cgan(set, gc);
    CHECK(nn::model_hash(again.bundle.generator) == nn::model_hash(r.bundle.generator));
    CHECK(again.history.val_l1 == r.history.val_l1);
}
