#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "detwin/localize.hpp"

using namespace detwin;

namespace {

RDMap blank_map(int nr, int nd, double fill = 0.0) {
    RDMap m;
    m.n_range = nr;
    m.n_doppler = nd;
    m.power.assign(static_cast<std::size_t>(nr) * nd, fill);
    return m;
}

RDMap random_map(int nr, int nd, std::uint64_t seed) {
    RDMap m = blank_map(nr, nd);
    Rng rng(seed);
    for (auto& v : m.power) v = rng.uniform();
    return m;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("detwin_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

std::vector<nn::LayerSpec> tiny_arch() {
    return {nn::LayerSpec::conv(4, 3, 2, 1), nn::LayerSpec::relu(), nn::LayerSpec::conv(4, 3, 2, 1),
            nn::LayerSpec::relu(), nn::LayerSpec::dense(2), nn::LayerSpec::sigmoid()};
}

}  // namespace

TEST_CASE("argmax picks the single nonzero pixel and breaks ties low") {
    auto m = blank_map(32, 64);
    m.at(17, 40) = 3.0;
    auto e = argmax_localize(m);
    CHECK(e.range_bin == 17);
    CHECK(e.doppler_bin == 40);

    auto u = blank_map(8, 8, 1.0);
    e = argmax_localize(u);
    CHECK(e.range_bin == 0);
    CHECK(e.doppler_bin == 0);

    auto two = blank_map(8, 8);
    two.at(5, 1) = 2.0;
    two.at(3, 7) = 2.0;
    e = argmax_localize(two);
    CHECK(e.range_bin == 3);
    CHECK(e.doppler_bin == 7);
}

TEST_CASE("argmax equals a brute-force scan and ignores monotone rescaling") {
    for (std::uint64_t s = 0; s < 200; ++s) {
        auto m = random_map(16, 16, s);
        int br = 0, bd = 0;
        for (int r = 0; r < 16; ++r)
            for (int d = 0; d < 16; ++d)
                if (m.at(r, d) > m.at(br, bd)) {
                    br = r;
                    bd = d;
                }
        const auto e = argmax_localize(m);
        CHECK(e.range_bin == br);
        CHECK(e.doppler_bin == bd);

        auto t = m;
        for (auto& v : t.power) v = 10.0 * std::log10(v + 1e-12) + std::exp(v);
        const auto et = argmax_localize(t);
        CHECK(et.range_bin == br);
        CHECK(et.doppler_bin == bd);
    }
}

TEST_CASE("cfar detections on simple maps") {
    CfarParams p;
    CHECK(cfar_detect(blank_map(32, 32), p).empty());

    auto one = blank_map(32, 32, 1.0);
    one.at(10, 20) = 100.0;
    // Training mean around (10, 20) is 1, threshold 10: only the spike exceeds.
    auto mask = cfar_mask(one, p);
    CHECK(std::count(mask.begin(), mask.end(), 1) == 1);
    auto dets = cfar_detect(one, p);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].range_bin == doctest::Approx(10.0));
    CHECK(dets[0].doppler_bin == doctest::Approx(20.0));
    CHECK(dets[0].score == doctest::Approx(10.0));

    auto two = one;
    two.at(25, 5) = 50.0;
    dets = cfar_detect(two, p);
    REQUIRE(dets.size() == 2);
    CHECK(dets[0].range_bin == doctest::Approx(10.0));
    CHECK(dets[1].range_bin == doctest::Approx(25.0));
    CHECK(dets[1].doppler_bin == doctest::Approx(5.0));
}

TEST_CASE("cfar wraps Doppler and merges close clusters") {
    CfarParams p;
    auto m = blank_map(32, 32, 1.0);
    m.at(8, 0) = 100.0;
    m.at(8, 31) = 100.0;
    auto dets = cfar_detect(m, p);
    REQUIRE(dets.size() == 1);
    CHECK((dets[0].doppler_bin == doctest::Approx(31.5) || dets[0].doppler_bin == doctest::Approx(0.0) ||
           dets[0].doppler_bin == doctest::Approx(31.0)));

    auto close = blank_map(32, 32, 1.0);
    close.at(8, 10) = 100.0;
    close.at(10, 12) = 100.0;  // not 8-connected, but within the merge radius
    dets = cfar_detect(close, p);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].range_bin == doctest::Approx(9.0));
    CHECK(dets[0].doppler_bin == doctest::Approx(11.0));

    p.merge_radius = 1.0;
    CHECK(cfar_detect(close, p).size() == 2);
}

TEST_CASE("cfar window larger than the map is a configuration error") {
    CfarParams p;
    p.train_range = 10;
    CHECK_THROWS_AS(cfar_detect(blank_map(16, 64), p), ConfigError);
    CHECK_THROWS_AS(cfar_mask(blank_map(16, 64), p), ConfigError);
    CfarParams bad;
    bad.scale = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("cfar false alarms on exponential noise match the configured rate") {
    CfarParams p;
    p.train_range = 8;
    p.train_doppler = 8;
    p.guard_range = 0;
    p.guard_doppler = 0;
    const double pfa = 1e-2;
    p.scale = cfar_scale_for_pfa(pfa, p.training_cells());
    // Only interior rows see the full training window.
    const int nr = 200, nd = 128;
    Rng rng(99);
    std::size_t alarms = 0, trials = 0;
    for (int map = 0; map < 5; ++map) {
        auto m = blank_map(nr, nd);
        for (auto& v : m.power) v = -std::log(1.0 - rng.uniform());
        const auto mask = cfar_mask(m, p);
        for (int r = p.train_range; r < nr - p.train_range; ++r)
            for (int d = 0; d < nd; ++d) {
                alarms += mask[static_cast<std::size_t>(r) * nd + d];
                ++trials;
            }
    }
    const double expect = pfa * static_cast<double>(trials);
    const double sigma = std::sqrt(static_cast<double>(trials) * pfa * (1.0 - pfa));
    CHECK(std::abs(static_cast<double>(alarms) - expect) < 3.0 * sigma);
}

TEST_CASE("cfar localize falls back to argmax") {
    auto m = blank_map(16, 16);
    m.at(3, 4) = 1.0;
    const auto e = cfar_localize({}, m);
    CHECK(e.range_bin == 3);
    CHECK(e.doppler_bin == 4);
}

TEST_CASE("fold assignment partitions the dataset") {
    const auto f = fold_assignment(100, 5, 42);
    std::vector<int> count(5, 0);
    for (int v : f) ++count.at(v);
    for (int c : count) CHECK(c == 20);
    CHECK(fold_assignment_hash(f) == fold_assignment_hash(fold_assignment(100, 5, 42)));
    CHECK(fold_assignment_hash(f) != fold_assignment_hash(fold_assignment(100, 5, 43)));

    const auto one = fold_assignment(100, 1, 7);
    CHECK(std::count(one.begin(), one.end(), 0) == 20);
    CHECK(std::count(one.begin(), one.end(), 1) == 80);

    CHECK_THROWS_AS(fold_assignment(4, 5, 1), ConfigError);
    CHECK_THROWS_AS(fold_assignment(10, 0, 1), ConfigError);
}

TEST_CASE("preprocessing scales to the unit interval and downsamples") {
    auto m = random_map(16, 8, 3);
    PreprocessSpec p;
    p.map_range = 16;
    p.map_doppler = 8;
    auto v = preprocess(m, p);
    REQUIRE(v.size() == 128);
    CHECK(*std::min_element(v.begin(), v.end()) == doctest::Approx(0.0));
    CHECK(*std::max_element(v.begin(), v.end()) == doctest::Approx(1.0));

    p.factor = 2;
    const auto half = preprocess(m, p);
    REQUIRE(half.size() == 32);
    CHECK(half[0] == doctest::Approx((v[0] + v[1] + v[8] + v[9]) / 4.0).epsilon(1e-6));

    CHECK(std::all_of(preprocess(blank_map(16, 8), p).begin(), preprocess(blank_map(16, 8), p).end(),
                      [](float x) { return x == 0.0f; }));
    CHECK_THROWS_AS(preprocess(blank_map(8, 8), p), CompatibilityError);
    PreprocessSpec q = p;
    q.floor_rel = 1e-9;
    CHECK(q.hash() != p.hash());
}

TEST_CASE("predict clamps and checks compatibility") {
    PreprocessSpec p;
    p.map_range = 16;
    p.map_doppler = 16;
    auto model = make_localizer(p, tiny_arch(), 5);
    // Push the head far outside the sigmoid range: outputs stay on the map.
    for (auto& pv : model.net.params())
        for (auto& v : pv.values) v *= 50.0f;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto e = predict(model, random_map(16, 16, s));
        CHECK(e.range_bin >= 0.0);
        CHECK(e.range_bin <= 15.0);
        CHECK(e.doppler_bin >= 0.0);
        CHECK(e.doppler_bin <= 15.0);
    }
    CHECK_THROWS_AS(predict(model, random_map(32, 16, 1)), CompatibilityError);
    model.prep_hash = "deadbeef";
    CHECK_THROWS_AS(predict(model, random_map(16, 16, 1)), CompatibilityError);
}

TEST_CASE("a model overfit on one sample returns its truth") {
    PreprocessSpec p;
    p.map_range = 16;
    p.map_doppler = 16;
    auto model = make_localizer(p, tiny_arch(), 9);
    auto m = random_map(16, 16, 4);
    TruthLabel t;
    t.range_bin = 11;
    t.doppler_bin = 3;
    std::vector<RDMap> maps{m};
    std::vector<TruthLabel> truths{t};
    nn::FitConfig fit;
    fit.epochs = 400;
    fit.batch_size = 1;
    fit.adam.lr = 1e-2;
    nn::fit(model.net, localizer_inputs(maps, p), localizer_targets(truths, p), fit);
    const auto e = predict(model, m);
    CHECK(std::round(e.range_bin) == 11);
    CHECK(std::round(e.doppler_bin) == 3);
}

TEST_CASE("localizer save and load round-trip") {
    PreprocessSpec p;
    p.map_range = 16;
    p.map_doppler = 16;
    auto model = make_localizer(p, tiny_arch(), 2);
    model.info["fold"] = 3;
    const auto dir = temp_dir("localizer");
    save_localizer(dir / "model", model);
    CHECK(std::filesystem::exists(dir / "model.bin"));
    CHECK(std::filesystem::exists(dir / "model.json"));
    auto back = load_localizer(dir / "model");
    CHECK(back.prep_hash == model.prep_hash);
    CHECK(back.info["fold"] == 3);
    const auto m = random_map(16, 16, 8);
    const auto a = predict(model, m), b = predict(back, m);
    CHECK(a.range_bin == b.range_bin);
    CHECK(a.doppler_bin == b.doppler_bin);
}

TEST_CASE("shift augmentation keeps labels on their pixels") {
    PreprocessSpec p;
    p.map_range = 16;
    p.map_doppler = 8;
    std::vector<RDMap> maps;
    std::vector<TruthLabel> truths;
    for (int i = 0; i < 20; ++i) {
        auto m = blank_map(16, 8, 1e-3);
        TruthLabel t;
        t.range_bin = i % 16;
        t.doppler_bin = (3 * i) % 8;
        m.at(t.range_bin, t.doppler_bin) = 1.0;
        maps.push_back(m);
        truths.push_back(t);
    }
    auto x = localizer_inputs(maps, p);
    auto y = localizer_targets(truths, p);
    Rng rng(1);
    for (int round = 0; round < 10; ++round) {
        shift_augment(x, y, rng, p);
        for (int b = 0; b < x.batch(); ++b) {
            const float* img = x.sample(b);
            const int peak = static_cast<int>(std::max_element(img, img + 128) - img);
            CHECK(peak / 8 == static_cast<int>(std::lround(y.sample(b)[0] * 15)));
            CHECK(peak % 8 == static_cast<int>(std::lround(y.sample(b)[1] * 7)));
        }
    }
}

TEST_CASE("feature maps match the forward activations") {
    PreprocessSpec p;
    p.map_range = 16;
    p.map_doppler = 16;
    auto model = make_localizer(p, tiny_arch(), 3);
    const auto m = random_map(16, 16, 6);
    const auto fs = feature_maps(model, m, 0);
    CHECK(fs.channels == 4);
    CHECK(fs.rows == 8);
    CHECK(fs.cols == 8);
    CHECK(fs.source_layer == 1);
    nn::TensorF x({1, 1, 16, 16});
    x.values = preprocess(m, p);
    model.net.forward(x, false);
    CHECK(fs.values == model.net.activations()[2].values);

    CHECK_THROWS_AS(feature_maps(model, m, 1), ConfigError);
    CHECK_THROWS_AS(feature_maps(model, m, 99), ConfigError);

    const auto dir = temp_dir("features");
    export_feature_maps(fs, dir);
    for (int c = 0; c < 4; ++c) {
        const auto bytes = read_file(dir / ("channel_" + std::to_string(c) + ".f32"));
        const auto v = from_f32_le(bytes);
        CHECK(std::equal(v.begin(), v.end(), fs.values.begin() + c * 64));
    }
    const auto manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
    CHECK(manifest["channels"] == 4);
}

TEST_CASE("zero input through a zero-bias net gives zero activations") {
    PreprocessSpec p;
    p.map_range = 16;
    p.map_doppler = 16;
    auto model = make_localizer(p, tiny_arch(), 3);
    // Biases are the second parameter buffer of each conv/dense layer.
    auto params = model.net.params();
    for (std::size_t i = 1; i < params.size(); i += 2) std::fill(params[i].values.begin(), params[i].values.end(), 0.0f);
    const auto fs = feature_maps(model, blank_map(16, 16), 0);
    CHECK(std::all_of(fs.values.begin(), fs.values.end(), [](float v) { return v == 0.0f; }));
}

TEST_CASE("single-output accounting counts a miss as one fp and one fn") {
    std::vector<Estimate> est{{5, 5, 1}, {0, 0, 1}};
    std::vector<TruthLabel> tr(2);
    tr[0].range_bin = 5;
    tr[0].doppler_bin = 6;
    tr[1].range_bin = 9;
    tr[1].doppler_bin = 9;
    const auto r = evaluate_estimates("x", est, tr);
    CHECK(r.detection.false_positives == 1);
    CHECK(r.detection.false_negatives == 1);
    CHECK(r.detection.fp_per_map == doctest::Approx(0.5));
    CHECK(r.detection.fn_rate == doctest::Approx(0.5));
}
