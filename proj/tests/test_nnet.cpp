#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "detwin/nnet.hpp"

using namespace detwin;
using namespace detwin::nn;

namespace {

TensorD random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    TensorD t(std::move(s));
    Rng rng(seed);
    for (auto& v : t.values) v = rng.uniform(lo, hi);
    return t;
}

// Loss = sum(out * w) for a fixed random w, so d(loss)/d(out) = w.
double probe_loss(NetD& net, const TensorD& x, const TensorD& w) {
    const auto out = net.forward(x, true);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out.values[i] * w.values[i];
    return s;
}

struct CheckResult {
    double max_param_err = 0.0;
    double max_input_err = 0.0;
};

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

CheckResult gradient_check(NetD& net, TensorD x, std::uint64_t seed, int samples = 100) {
    const double eps = 1e-5;
    auto out_shape = net.forward(x, true).shape;
    const auto w = random_tensor(out_shape, seed + 1);
    net.zero_grad();
    probe_loss(net, x, w);
    const auto dx = net.backward(w);

    CheckResult r;
    auto params = net.params();
    std::vector<std::pair<std::size_t, std::size_t>> slots;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p].values.size(); ++i) slots.emplace_back(p, i);
    std::vector<double> analytic;
    for (auto [p, i] : slots) analytic.push_back(params[p].grads[i]);
    Rng rng(seed + 2);
    const int n_param = std::min<int>(samples, static_cast<int>(slots.size()));
    for (int k = 0; k < n_param; ++k) {
        const std::size_t pick = slots.size() <= static_cast<std::size_t>(samples) ? k : rng.below(slots.size());
        auto [p, i] = slots[pick];
        double& v = params[p].values[i];
        const double keep = v;
        v = keep + eps;
        const double up = probe_loss(net, x, w);
        v = keep - eps;
        const double down = probe_loss(net, x, w);
        v = keep;
        r.max_param_err = std::max(r.max_param_err, rel_err((up - down) / (2 * eps), analytic[pick]));
    }
    const int n_in = std::min<int>(samples, static_cast<int>(x.size()));
    for (int k = 0; k < n_in; ++k) {
        const std::size_t i = x.size() <= static_cast<std::size_t>(samples) ? k : rng.below(x.size());
        const double keep = x.values[i];
        x.values[i] = keep + eps;
        const double up = probe_loss(net, x, w);
        x.values[i] = keep - eps;
        const double down = probe_loss(net, x, w);
        x.values[i] = keep;
        r.max_input_err = std::max(r.max_input_err, rel_err((up - down) / (2 * eps), dx.values[i]));
    }
    return r;
}

}  // namespace

TEST_CASE("shape ladder follows the conv arithmetic") {
    CHECK(conv_out(128, 3, 2, 1) == 64);
    CHECK(conv_out(680, 3, 2, 1) == 340);
    CHECK(conv_out(320, 3, 2, 1) == 160);

    const auto ladder = shape_ladder({1, 680, 320}, {LayerSpec::conv(8, 3, 2, 1)});
    CHECK(ladder.back() == Shape{8, 340, 160});

    NetD net({1, 128, 64}, {LayerSpec::conv(6, 3, 2, 1)}, 1);
    CHECK(net.forward(TensorD({2, 1, 128, 64}), false).shape == Shape{2, 6, 64, 32});

    std::vector<LayerSpec> arch;
    for (int c : {8, 16, 32, 64, 64}) {
        arch.push_back(LayerSpec::conv(c, 3, 2, 1));
        arch.push_back(LayerSpec::relu());
    }
    arch.push_back(LayerSpec::dense(128));
    arch.push_back(LayerSpec::dense(2));
    Net cnn({1, 128, 64}, arch, 3);
    const auto& l = cnn.ladder();
    CHECK(l[1] == Shape{8, 64, 32});
    CHECK(l[3] == Shape{16, 32, 16});
    CHECK(l[9] == Shape{64, 4, 2});
    CHECK(cnn.output_shape() == Shape{2});
    const auto out = cnn.forward(Tensor<float>({3, 1, 128, 64}, 0.5f), false);
    CHECK(out.shape == Shape{3, 2});
}

TEST_CASE("identity network returns its input") {
    Net net({2, 3}, {}, 0);
    Tensor<float> x({1, 2, 3});
    for (std::size_t i = 0; i < x.size(); ++i) x.values[i] = static_cast<float>(i) - 2.5f;
    CHECK(net.forward(x).values == x.values);
}

TEST_CASE("incompatible shapes are configuration errors") {
    CHECK_THROWS_AS(shape_ladder({1, 4, 4}, {LayerSpec::conv(2, 7, 1, 0)}), ConfigError);
    CHECK_THROWS_AS(shape_ladder({16}, {LayerSpec::conv(2, 3, 1, 1)}), ConfigError);
    Net net({1, 8, 8}, {LayerSpec::conv(2, 3, 1, 1)}, 0);
    CHECK_THROWS_AS(net.forward(Tensor<float>({1, 1, 8, 9})), ConfigError);
}

TEST_CASE("backward before forward is a state error") {
    Net net({4}, {LayerSpec::dense(2)}, 0);
    CHECK_THROWS_AS(net.backward(Tensor<float>({1, 2})), StateError);
    net.forward(Tensor<float>({1, 4}), false);
    CHECK_THROWS_AS(net.backward(Tensor<float>({1, 2})), StateError);
}

TEST_CASE("dense layer gradient matches hand algebra") {
    NetD net({2}, {LayerSpec::dense(2)}, 0);
    auto ps = net.params();
    // W = [[1, 2], [3, 4]], b = 0
    const double W[4] = {1, 2, 3, 4};
    std::copy(W, W + 4, ps[0].values.begin());
    TensorD x({1, 2});
    x.values = {0.5, -1.0};
    const double y[2] = {1.0, 2.0};
    const auto out = net.forward(x, true);
    // Wx = [1*0.5 - 2, 3*0.5 - 4] = [-1.5, -2.5]
    CHECK(out.values[0] == doctest::Approx(-1.5));
    CHECK(out.values[1] == doctest::Approx(-2.5));
    TensorD g({1, 2});
    for (int i = 0; i < 2; ++i) g.values[i] = 2.0 * (out.values[i] - y[i]);
    net.zero_grad();
    net.backward(g);
    // dW = 2(Wx - y) x^T = [[-5, -2.5]...] row i: g_i * x_j
    const double expect[4] = {-5.0 * 0.5, -5.0 * -1.0, -9.0 * 0.5, -9.0 * -1.0};
    for (int i = 0; i < 4; ++i) CHECK(ps[0].grads[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    CHECK(ps[1].grads[0] == doctest::Approx(-5.0));
    CHECK(ps[1].grads[1] == doctest::Approx(-9.0));
}

TEST_CASE("zero loss gradient gives zero parameter gradients") {
    NetD net({1, 6, 6}, {LayerSpec::conv(3, 3, 1, 1), LayerSpec::relu(), LayerSpec::dense(4)}, 2);
    net.forward(random_tensor({2, 1, 6, 6}, 3), true);
    net.zero_grad();
    net.backward(TensorD({2, 4}));
    for (auto& p : net.params())
        for (double g : p.grads) CHECK(g == 0.0);
}

TEST_CASE("every layer type passes a central-difference gradient check") {
    struct Case {
        const char* name;
        Shape input;
        std::vector<LayerSpec> layers;
    };
    // Smooth nonlinearities are checked on inputs kept away from their kinks.
    const std::vector<Case> cases = {
        {"conv2d stride 1", {2, 5, 6}, {LayerSpec::conv(3, 3, 1, 1)}},
        {"conv2d stride 2", {2, 7, 6}, {LayerSpec::conv(4, 3, 2, 1)}},
        {"conv2d no padding", {1, 6, 6}, {LayerSpec::conv(2, 2, 2, 0)}},
        {"dense", {3, 2, 2}, {LayerSpec::dense(5)}},
        {"relu", {12}, {LayerSpec::relu()}},
        {"leaky_relu", {12}, {LayerSpec::leaky_relu(0.2)}},
        {"sigmoid", {12}, {LayerSpec::sigmoid()}},
        {"tanh", {12}, {LayerSpec::tanh()}},
        {"max_pool", {2, 6, 6}, {LayerSpec::max_pool(2, 2)}},
        {"batch_norm spatial", {3, 4, 4}, {LayerSpec::batch_norm()}},
        {"batch_norm features", {6}, {LayerSpec::batch_norm()}},
        {"upsample", {2, 3, 3}, {LayerSpec::upsample(2)}},
        {"stack",
         {1, 8, 8},
         {LayerSpec::conv(4, 3, 2, 1), LayerSpec::batch_norm(), LayerSpec::leaky_relu(0.1),
          LayerSpec::upsample(2), LayerSpec::conv(2, 3, 2, 1), LayerSpec::tanh(), LayerSpec::dense(3),
          LayerSpec::sigmoid()}},
    };
    std::uint64_t seed = 10;
    for (const auto& c : cases) {
        CAPTURE(c.name);
        NetD net(c.input, c.layers, seed);
        Shape in{3};
        in.insert(in.end(), c.input.begin(), c.input.end());
        auto x = random_tensor(in, seed + 100);
        // Keep |x| >= 0.05 so relu kinks and max_pool ties are not straddled by eps.
        for (auto& v : x.values)
            if (std::abs(v) < 0.05) v = v < 0 ? -0.05 - std::abs(v) : 0.05 + v;
        if (c.layers[0].kind == LayerKind::max_pool) {
            Rng rng(seed);
            for (std::size_t i = 0; i < x.size(); ++i) x.values[i] = static_cast<double>(i % 7) + 0.1 * rng.uniform();
        }
        const auto r = gradient_check(net, x, seed);
        CHECK(r.max_param_err < 1e-4);
        CHECK(r.max_input_err < 1e-4);
        ++seed;
    }
}

TEST_CASE("adam leaves parameters unchanged for zero gradient or zero learning rate") {
    Net net({1, 6, 6}, {LayerSpec::conv(2, 3, 1, 1), LayerSpec::dense(2)}, 4);
    const auto before = model_hash(net);
    Adam<float> adam;
    net.zero_grad();
    for (int i = 0; i < 5; ++i) adam.step(net);
    CHECK(model_hash(net) == before);

    Tensor<float> x({4, 1, 6, 6}, 0.3f), y({4, 2}, 0.7f);
    FitConfig fc;
    fc.adam.lr = 0.0;
    fc.epochs = 3;
    fit(net, x, y, fc);
    CHECK(model_hash(net) == before);
}

TEST_CASE("fit learns y = 2x") {
    Tensor<float> x({50, 1}), y({50, 1});
    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
        x.values[i] = static_cast<float>(rng.uniform(-1, 1));
        y.values[i] = 2.0f * x.values[i];
    }
    Net net({1}, {LayerSpec::dense(1)}, 9);
    FitConfig fc;
    fc.epochs = 200;
    fc.adam.lr = 1e-2;
    const auto h = fit(net, x, y, fc);
    CHECK(h.train.size() == 200);
    CHECK(mse_loss(net.forward(x), y).value < 1e-3);
}

TEST_CASE("fit is deterministic for a fixed seed") {
    Tensor<float> x({40, 1, 8, 8}), y({40, 2});
    Rng rng(3);
    for (auto& v : x.values) v = static_cast<float>(rng.uniform());
    for (auto& v : y.values) v = static_cast<float>(rng.uniform());
    const std::vector<LayerSpec> arch = {LayerSpec::conv(4, 3, 2, 1), LayerSpec::relu(), LayerSpec::dense(2)};
    FitConfig fc;
    fc.epochs = 4;
    fc.seed = 17;
    Net a({1, 8, 8}, arch, 5), b({1, 8, 8}, arch, 5);
    const auto ha = fit(a, x, y, fc);
    const auto hb = fit(b, x, y, fc);
    CHECK(ha.train == hb.train);
    CHECK(model_hash(a) == model_hash(b));
}

TEST_CASE("divergence is reported with its epoch") {
    Tensor<float> x({8, 1}, 1.0f), y({8, 1}, 1.0f);
    y.values[3] = std::numeric_limits<float>::infinity();
    Net net({1}, {LayerSpec::dense(1)}, 0);
    FitConfig fc;
    fc.epochs = 2;
    try {
        fit(net, x, y, fc);
        FAIL("expected a training failure");
    } catch (const TrainingFailure& e) {
        CHECK(e.epoch() == 0);
    }
}

TEST_CASE("model file round-trips bit-exactly") {
    std::vector<LayerSpec> arch = {LayerSpec::conv(4, 3, 2, 1), LayerSpec::batch_norm(), LayerSpec::relu(),
                                   LayerSpec::max_pool(), LayerSpec::dense(3), LayerSpec::tanh()};
    Net net({2, 12, 10}, arch, 21);
    Tensor<float> x({5, 2, 12, 10});
    Rng rng(2);
    for (auto& v : x.values) v = static_cast<float>(rng.normal());
    net.forward(x, true);  // moves batch-norm running statistics off their defaults
    const auto bytes = serialize_model(net, {{"note", "fixture"}});
    auto loaded = deserialize_model(bytes);
    CHECK(loaded.metadata.at("note") == "fixture");
    CHECK(loaded.net.forward(x).values == net.forward(x).values);
    CHECK(model_hash(loaded.net) == model_hash(net));

    auto bad = bytes;
    bad[4] = 9;
    CHECK_THROWS_AS(deserialize_model(bad), CompatibilityError);
    bad = bytes;
    bad.resize(bad.size() - 4);
    CHECK_THROWS_AS(deserialize_model(bad), IoError);
}

TEST_CASE("cast to double keeps the forward pass") {
    Net net({1, 6, 6}, {LayerSpec::conv(2, 3, 1, 1), LayerSpec::sigmoid(), LayerSpec::dense(2)}, 8);
    Tensor<float> x({2, 1, 6, 6}, 0.25f);
    TensorD xd({2, 1, 6, 6}, 0.25);
    const auto a = net.forward(x);
    const auto b = net.cast<double>().forward(xd);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.values[i] == doctest::Approx(b.values[i]).epsilon(1e-5));
}

TEST_CASE("losses") {
    Tensor<float> p({1, 2}), t({1, 2});
    p.values = {1.0f, 3.0f};
    t.values = {0.0f, 1.0f};
    CHECK(mse_loss(p, t).value == doctest::Approx(2.5));
    CHECK(l1_loss(p, t).value == doctest::Approx(1.5));
    Tensor<float> z({1, 1}, 0.0f);
    CHECK(bce_logits_loss(z, 1.0).value == doctest::Approx(std::log(2.0)));
    CHECK(bce_logits_loss(z, 1.0).grad.values[0] == doctest::Approx(-0.5));
}

TEST_CASE("batch-norm recalibration sets exact input statistics") {
    Net net({2, 6, 6}, {LayerSpec::conv(3, 3, 1, 1), LayerSpec::batch_norm(), LayerSpec::relu(), LayerSpec::dense(2)}, 4);
    TensorF x({10, 2, 6, 6});
    Rng rng(8);
    for (auto& v : x.values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    recalibrate_batch_norm(net, x, 3);

    // Oracle: per-channel statistics of the conv output over all samples.
    net.forward(x, false);
    const auto& a = net.activations()[1];
    const auto bufs = net.buffers();
    const std::size_t inner = 36;
    for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int b = 0; b < 10; ++b)
            for (std::size_t i = 0; i < inner; ++i) s += a.sample(b)[c * inner + i];
        const double m = s / 360.0;
        double q = 0.0;
        for (int b = 0; b < 10; ++b)
            for (std::size_t i = 0; i < inner; ++i) q += std::pow(a.sample(b)[c * inner + i] - m, 2);
        CHECK(bufs[0][c] == doctest::Approx(m).epsilon(1e-5));
        CHECK(bufs[1][c] == doctest::Approx(q / 359.0).epsilon(1e-5));
    }
}
