#include "detwin/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace detwin::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

Shape without_batch(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

}  // namespace

std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw ConfigError("negative tensor dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

template <typename T>
bool Tensor<T>::all_finite() const {
    for (T v : values)
        if (!std::isfinite(v)) return false;
    return true;
}

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::relu: return "relu";
        case LayerKind::leaky_relu: return "leaky_relu";
        case LayerKind::max_pool: return "max_pool";
        case LayerKind::batch_norm: return "batch_norm";
        case LayerKind::dense: return "dense";
        case LayerKind::sigmoid: return "sigmoid";
        case LayerKind::tanh: return "tanh";
        case LayerKind::upsample: return "upsample";
    }
    return "?";
}

LayerKind layer_kind_from_name(const std::string& name) {
    for (auto k : {LayerKind::conv2d, LayerKind::relu, LayerKind::leaky_relu, LayerKind::max_pool,
                   LayerKind::batch_norm, LayerKind::dense, LayerKind::sigmoid, LayerKind::tanh,
                   LayerKind::upsample})
        if (name == layer_kind_name(k)) return k;
    throw ConfigError("unknown layer kind: " + name);
}

LayerSpec LayerSpec::conv(int channels, int kernel, int stride, int padding) {
    LayerSpec s{LayerKind::conv2d};
    s.channels = channels;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    return s;
}

LayerSpec LayerSpec::dense(int units) {
    LayerSpec s{LayerKind::dense};
    s.units = units;
    return s;
}

LayerSpec LayerSpec::leaky_relu(double slope) {
    LayerSpec s{LayerKind::leaky_relu};
    s.slope = slope;
    return s;
}

LayerSpec LayerSpec::max_pool(int window, int stride) {
    LayerSpec s{LayerKind::max_pool};
    s.kernel = window;
    s.stride = stride;
    return s;
}

LayerSpec LayerSpec::upsample(int scale) {
    LayerSpec s{LayerKind::upsample};
    s.scale = scale;
    return s;
}

nlohmann::json to_json(const LayerSpec& s) {
    nlohmann::json j{{"kind", layer_kind_name(s.kind)}};
    switch (s.kind) {
        case LayerKind::conv2d:
            j["channels"] = s.channels;
            j["kernel"] = s.kernel;
            j["stride"] = s.stride;
            j["padding"] = s.padding;
            break;
        case LayerKind::dense: j["units"] = s.units; break;
        case LayerKind::leaky_relu: j["slope"] = s.slope; break;
        case LayerKind::max_pool:
            j["kernel"] = s.kernel;
            j["stride"] = s.stride;
            break;
        case LayerKind::upsample: j["scale"] = s.scale; break;
        default: break;
    }
    return j;
}

LayerSpec layer_spec_from_json(const nlohmann::json& j) {
    LayerSpec s{layer_kind_from_name(j.at("kind").get<std::string>())};
    s.channels = j.value("channels", s.channels);
    s.kernel = j.value("kernel", s.kernel);
    s.stride = j.value("stride", s.stride);
    s.padding = j.value("padding", s.padding);
    s.units = j.value("units", s.units);
    s.slope = j.value("slope", s.slope);
    s.scale = j.value("scale", s.scale);
    return s;
}

int conv_out(int n, int kernel, int stride, int padding) {
    if (stride <= 0 || kernel <= 0) throw ConfigError("kernel and stride must be positive");
    const int span = n + 2 * padding - kernel;
    if (span < 0) return 0;
    return span / stride + 1;
}

std::vector<Shape> shape_ladder(const Shape& sample_input, const std::vector<LayerSpec>& layers) {
    std::vector<Shape> ladder{sample_input};
    if (shape_size(sample_input) == 0) throw ConfigError("empty input shape");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& s = layers[i];
        const Shape& in = ladder.back();
        Shape out = in;
        auto fail = [&](const std::string& why) {
            throw ConfigError("layer " + std::to_string(i) + " (" + layer_kind_name(s.kind) + ") on input " +
                              shape_str(in) + ": " + why);
        };
        switch (s.kind) {
            case LayerKind::conv2d: {
                if (in.size() != 3) fail("expects [C,H,W]");
                if (s.channels <= 0) fail("channels must be positive");
                if (s.padding < 0) fail("negative padding");
                const int h = conv_out(in[1], s.kernel, s.stride, s.padding);
                const int w = conv_out(in[2], s.kernel, s.stride, s.padding);
                if (h <= 0 || w <= 0) fail("kernel larger than padded input");
                out = {s.channels, h, w};
                break;
            }
            case LayerKind::max_pool: {
                if (in.size() != 3) fail("expects [C,H,W]");
                const int h = conv_out(in[1], s.kernel, s.stride, 0);
                const int w = conv_out(in[2], s.kernel, s.stride, 0);
                if (h <= 0 || w <= 0) fail("window larger than input");
                out = {in[0], h, w};
                break;
            }
            case LayerKind::upsample:
                if (in.size() != 3) fail("expects [C,H,W]");
                if (s.scale <= 0) fail("scale must be positive");
                out = {in[0], in[1] * s.scale, in[2] * s.scale};
                break;
            case LayerKind::dense:
                if (s.units <= 0) fail("units must be positive");
                out = {s.units};
                break;
            case LayerKind::batch_norm:
                if (in.size() != 1 && in.size() != 3) fail("expects [F] or [C,H,W]");
                break;
            case LayerKind::leaky_relu:
                if (!(s.slope >= 0.0 && s.slope < 1.0)) fail("slope must lie in [0, 1)");
                break;
            default: break;
        }
        ladder.push_back(out);
    }
    return ladder;
}

// ---------------------------------------------------------------------------
// Layers

namespace {

template <typename T>
class LayerBase : public Layer<T> {
public:
    explicit LayerBase(LayerSpec spec) : spec_(spec) {}
    const LayerSpec& spec() const override { return spec_; }

protected:
    LayerSpec spec_;
};

template <typename T>
void he_uniform(std::vector<T>& w, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
class Conv2d final : public LayerBase<T> {
public:
    Conv2d(LayerSpec spec, const Shape& in, Rng& rng) : LayerBase<T>(spec) {
        c_in_ = in[0];
        h_in_ = in[1];
        w_in_ = in[2];
        h_out_ = conv_out(h_in_, spec.kernel, spec.stride, spec.padding);
        w_out_ = conv_out(w_in_, spec.kernel, spec.stride, spec.padding);
        k_ = static_cast<std::size_t>(c_in_) * spec.kernel * spec.kernel;
        weight_.resize(static_cast<std::size_t>(spec.channels) * k_);
        he_uniform(weight_, k_, rng);
        bias_.assign(spec.channels, T{0});
        gw_.assign(weight_.size(), T{0});
        gb_.assign(bias_.size(), T{0});
    }

    void forward(const Tensor<T>& in, Tensor<T>& out, bool) override {
        const int n = in.batch();
        const int co = this->spec_.channels;
        const std::size_t p = static_cast<std::size_t>(h_out_) * w_out_;
        out = Tensor<T>({n, co, h_out_, w_out_});
        std::vector<T> cols(k_ * p);
        for (int b = 0; b < n; ++b) {
            im2col(in.sample(b), cols.data());
            MapMat<T> o(out.sample(b), co, p);
            o.noalias() = CMapMat<T>(weight_.data(), co, k_) * CMapMat<T>(cols.data(), k_, p);
            for (int c = 0; c < co; ++c) o.row(c).array() += bias_[c];
        }
    }

    void backward(const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& grad_out, Tensor<T>& grad_in) override {
        const int n = in.batch();
        const int co = this->spec_.channels;
        const std::size_t p = static_cast<std::size_t>(h_out_) * w_out_;
        grad_in = Tensor<T>(in.shape);
        std::vector<T> cols(k_ * p), dcols(k_ * p);
        for (int b = 0; b < n; ++b) {
            im2col(in.sample(b), cols.data());
            CMapMat<T> g(grad_out.sample(b), co, p);
            CMapMat<T> x(cols.data(), k_, p);
            MapMat<T>(gw_.data(), co, k_).noalias() += g * x.transpose();
            for (int c = 0; c < co; ++c) gb_[c] += g.row(c).sum();
            MapMat<T>(dcols.data(), k_, p).noalias() = CMapMat<T>(weight_.data(), co, k_).transpose() * g;
            col2im(dcols.data(), grad_in.sample(b));
        }
    }

    std::vector<ParamView<T>> params() override {
        return {{std::span<T>(weight_), std::span<T>(gw_)}, {std::span<T>(bias_), std::span<T>(gb_)}};
    }
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }

private:
    void im2col(const T* x, T* cols) const {
        const int k = this->spec_.kernel, s = this->spec_.stride, pad = this->spec_.padding;
        const std::size_t p = static_cast<std::size_t>(h_out_) * w_out_;
        std::size_t row = 0;
        for (int c = 0; c < c_in_; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx, ++row) {
                    T* dst = cols + row * p;
                    const T* plane = x + static_cast<std::size_t>(c) * h_in_ * w_in_;
                    for (int oy = 0; oy < h_out_; ++oy) {
                        const int iy = oy * s + ky - pad;
                        T* d = dst + static_cast<std::size_t>(oy) * w_out_;
                        if (iy < 0 || iy >= h_in_) {
                            std::fill(d, d + w_out_, T{0});
                            continue;
                        }
                        const T* src = plane + static_cast<std::size_t>(iy) * w_in_;
                        for (int ox = 0; ox < w_out_; ++ox) {
                            const int ix = ox * s + kx - pad;
                            d[ox] = (ix < 0 || ix >= w_in_) ? T{0} : src[ix];
                        }
                    }
                }
    }

    void col2im(const T* cols, T* dx) const {
        const int k = this->spec_.kernel, s = this->spec_.stride, pad = this->spec_.padding;
        const std::size_t p = static_cast<std::size_t>(h_out_) * w_out_;
        std::size_t row = 0;
        for (int c = 0; c < c_in_; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx, ++row) {
                    const T* src = cols + row * p;
                    T* plane = dx + static_cast<std::size_t>(c) * h_in_ * w_in_;
                    for (int oy = 0; oy < h_out_; ++oy) {
                        const int iy = oy * s + ky - pad;
                        if (iy < 0 || iy >= h_in_) continue;
                        const T* srow = src + static_cast<std::size_t>(oy) * w_out_;
                        T* drow = plane + static_cast<std::size_t>(iy) * w_in_;
                        for (int ox = 0; ox < w_out_; ++ox) {
                            const int ix = ox * s + kx - pad;
                            if (ix >= 0 && ix < w_in_) drow[ix] += srow[ox];
                        }
                    }
                }
    }

    int c_in_, h_in_, w_in_, h_out_, w_out_;
    std::size_t k_;
    std::vector<T> weight_, bias_, gw_, gb_;
};

template <typename T>
class Dense final : public LayerBase<T> {
public:
    Dense(LayerSpec spec, const Shape& in, Rng& rng) : LayerBase<T>(spec) {
        f_ = shape_size(in);
        weight_.resize(static_cast<std::size_t>(spec.units) * f_);
        he_uniform(weight_, f_, rng);
        bias_.assign(spec.units, T{0});
        gw_.assign(weight_.size(), T{0});
        gb_.assign(bias_.size(), T{0});
    }

    void forward(const Tensor<T>& in, Tensor<T>& out, bool) override {
        const int n = in.batch(), u = this->spec_.units;
        out = Tensor<T>({n, u});
        MapMat<T> o(out.values.data(), n, u);
        o.noalias() = CMapMat<T>(in.values.data(), n, f_) * CMapMat<T>(weight_.data(), u, f_).transpose();
        for (int b = 0; b < n; ++b)
            for (int j = 0; j < u; ++j) o(b, j) += bias_[j];
    }

    void backward(const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& grad_out, Tensor<T>& grad_in) override {
        const int n = in.batch(), u = this->spec_.units;
        grad_in = Tensor<T>(in.shape);
        CMapMat<T> g(grad_out.values.data(), n, u);
        CMapMat<T> x(in.values.data(), n, f_);
        CMapMat<T> w(weight_.data(), u, f_);
        MapMat<T>(gw_.data(), u, f_).noalias() += g.transpose() * x;
        for (int b = 0; b < n; ++b)
            for (int j = 0; j < u; ++j) gb_[j] += g(b, j);
        MapMat<T>(grad_in.values.data(), n, f_).noalias() = g * w;
    }

    std::vector<ParamView<T>> params() override {
        return {{std::span<T>(weight_), std::span<T>(gw_)}, {std::span<T>(bias_), std::span<T>(gb_)}};
    }
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this); }

private:
    std::size_t f_;
    std::vector<T> weight_, bias_, gw_, gb_;
};

template <typename T>
class Elementwise final : public LayerBase<T> {
public:
    using LayerBase<T>::LayerBase;

    void forward(const Tensor<T>& in, Tensor<T>& out, bool) override {
        out = Tensor<T>(in.shape);
        const T a = static_cast<T>(this->spec_.slope);
        const std::size_t n = in.size();
        const T* x = in.values.data();
        T* y = out.values.data();
        switch (this->spec_.kind) {
            case LayerKind::relu:
                for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0 ? x[i] : T{0};
                break;
            case LayerKind::leaky_relu:
                for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0 ? x[i] : a * x[i];
                break;
            case LayerKind::sigmoid:
                for (std::size_t i = 0; i < n; ++i)
                    y[i] = x[i] >= 0 ? T{1} / (T{1} + std::exp(-x[i])) : std::exp(x[i]) / (T{1} + std::exp(x[i]));
                break;
            case LayerKind::tanh:
                for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
                break;
            default: throw StateError("not an elementwise layer");
        }
    }

    void backward(const Tensor<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out, Tensor<T>& grad_in) override {
        grad_in = Tensor<T>(in.shape);
        const T a = static_cast<T>(this->spec_.slope);
        const std::size_t n = in.size();
        const T* x = in.values.data();
        const T* y = out.values.data();
        const T* g = grad_out.values.data();
        T* d = grad_in.values.data();
        switch (this->spec_.kind) {
            case LayerKind::relu:
                for (std::size_t i = 0; i < n; ++i) d[i] = x[i] > 0 ? g[i] : T{0};
                break;
            case LayerKind::leaky_relu:
                for (std::size_t i = 0; i < n; ++i) d[i] = x[i] > 0 ? g[i] : a * g[i];
                break;
            case LayerKind::sigmoid:
                for (std::size_t i = 0; i < n; ++i) d[i] = g[i] * y[i] * (T{1} - y[i]);
                break;
            case LayerKind::tanh:
                for (std::size_t i = 0; i < n; ++i) d[i] = g[i] * (T{1} - y[i] * y[i]);
                break;
            default: throw StateError("not an elementwise layer");
        }
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Elementwise>(*this); }
};

template <typename T>
class MaxPool final : public LayerBase<T> {
public:
    MaxPool(LayerSpec spec, const Shape& in) : LayerBase<T>(spec) {
        c_ = in[0];
        h_in_ = in[1];
        w_in_ = in[2];
        h_out_ = conv_out(h_in_, spec.kernel, spec.stride, 0);
        w_out_ = conv_out(w_in_, spec.kernel, spec.stride, 0);
    }

    void forward(const Tensor<T>& in, Tensor<T>& out, bool) override {
        const int n = in.batch();
        const int k = this->spec_.kernel, s = this->spec_.stride;
        out = Tensor<T>({n, c_, h_out_, w_out_});
        argmax_.assign(out.size(), 0);
        std::size_t o = 0;
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < c_; ++c) {
                const std::size_t base = (static_cast<std::size_t>(b) * c_ + c) * h_in_ * w_in_;
                for (int oy = 0; oy < h_out_; ++oy)
                    for (int ox = 0; ox < w_out_; ++ox, ++o) {
                        std::size_t best = base + static_cast<std::size_t>(oy * s) * w_in_ + ox * s;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const std::size_t idx = base + static_cast<std::size_t>(oy * s + ky) * w_in_ + ox * s + kx;
                                if (in.values[idx] > in.values[best]) best = idx;
                            }
                        out.values[o] = in.values[best];
                        argmax_[o] = best;
                    }
            }
    }

    void backward(const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& grad_out, Tensor<T>& grad_in) override {
        if (argmax_.size() != grad_out.size()) throw StateError("max_pool backward without matching forward");
        grad_in = Tensor<T>(in.shape);
        for (std::size_t o = 0; o < grad_out.size(); ++o) grad_in.values[argmax_[o]] += grad_out.values[o];
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool>(*this); }

private:
    int c_, h_in_, w_in_, h_out_, w_out_;
    std::vector<std::size_t> argmax_;
};

template <typename T>
class Upsample final : public LayerBase<T> {
public:
    Upsample(LayerSpec spec, const Shape& in) : LayerBase<T>(spec) {
        c_ = in[0];
        h_ = in[1];
        w_ = in[2];
    }

    void forward(const Tensor<T>& in, Tensor<T>& out, bool) override {
        const int s = this->spec_.scale, n = in.batch();
        const int ho = h_ * s, wo = w_ * s;
        out = Tensor<T>({n, c_, ho, wo});
        std::size_t o = 0;
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < c_; ++c) {
                const T* plane = in.values.data() + (static_cast<std::size_t>(b) * c_ + c) * h_ * w_;
                for (int y = 0; y < ho; ++y)
                    for (int x = 0; x < wo; ++x, ++o) out.values[o] = plane[(y / s) * w_ + x / s];
            }
    }

    void backward(const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& grad_out, Tensor<T>& grad_in) override {
        const int s = this->spec_.scale, n = in.batch();
        const int ho = h_ * s, wo = w_ * s;
        grad_in = Tensor<T>(in.shape);
        std::size_t o = 0;
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < c_; ++c) {
                T* plane = grad_in.values.data() + (static_cast<std::size_t>(b) * c_ + c) * h_ * w_;
                for (int y = 0; y < ho; ++y)
                    for (int x = 0; x < wo; ++x, ++o) plane[(y / s) * w_ + x / s] += grad_out.values[o];
            }
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Upsample>(*this); }

private:
    int c_, h_, w_;
};

// Normalises per channel (4-D input) or per feature (2-D input).
template <typename T>
class BatchNorm final : public LayerBase<T> {
public:
    BatchNorm(LayerSpec spec, const Shape& in) : LayerBase<T>(spec) {
        channels_ = in[0];
        inner_ = in.size() == 3 ? static_cast<std::size_t>(in[1]) * in[2] : 1;
        gamma_.assign(channels_, T{1});
        beta_.assign(channels_, T{0});
        ggamma_.assign(channels_, T{0});
        gbeta_.assign(channels_, T{0});
        running_mean_.assign(channels_, T{0});
        running_var_.assign(channels_, T{1});
    }

    void forward(const Tensor<T>& in, Tensor<T>& out, bool training) override {
        const int n = in.batch();
        out = Tensor<T>(in.shape);
        const std::size_t m = static_cast<std::size_t>(n) * inner_;
        if (training) {
            if (m < 2) throw ConfigError("batch_norm needs at least two values per channel in training");
            xhat_ = Tensor<T>(in.shape);
            inv_std_.assign(channels_, T{0});
        }
        for (int c = 0; c < channels_; ++c) {
            double mean, var;
            if (training) {
                double s = 0.0;
                for (int b = 0; b < n; ++b) {
                    const T* x = in.sample(b) + c * inner_;
                    for (std::size_t i = 0; i < inner_; ++i) s += x[i];
                }
                mean = s / m;
                double q = 0.0;
                for (int b = 0; b < n; ++b) {
                    const T* x = in.sample(b) + c * inner_;
                    for (std::size_t i = 0; i < inner_; ++i) q += (x[i] - mean) * (x[i] - mean);
                }
                var = q / m;
                running_mean_[c] = static_cast<T>((1.0 - kMomentum) * running_mean_[c] + kMomentum * mean);
                running_var_[c] =
                    static_cast<T>((1.0 - kMomentum) * running_var_[c] + kMomentum * var * m / (m - 1.0));
            } else {
                mean = running_mean_[c];
                var = running_var_[c];
            }
            const T inv = static_cast<T>(1.0 / std::sqrt(var + kEps));
            if (training) inv_std_[c] = inv;
            const T mu = static_cast<T>(mean);
            for (int b = 0; b < n; ++b) {
                const T* x = in.sample(b) + c * inner_;
                T* y = out.sample(b) + c * inner_;
                T* xh = training ? xhat_.sample(b) + c * inner_ : nullptr;
                for (std::size_t i = 0; i < inner_; ++i) {
                    const T h = (x[i] - mu) * inv;
                    if (xh) xh[i] = h;
                    y[i] = gamma_[c] * h + beta_[c];
                }
            }
        }
    }

    void backward(const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& grad_out, Tensor<T>& grad_in) override {
        if (xhat_.shape != in.shape) throw StateError("batch_norm backward without a training forward");
        const int n = in.batch();
        const double m = static_cast<double>(n) * inner_;
        grad_in = Tensor<T>(in.shape);
        for (int c = 0; c < channels_; ++c) {
            double sg = 0.0, sgx = 0.0;
            for (int b = 0; b < n; ++b) {
                const T* g = grad_out.sample(b) + c * inner_;
                const T* xh = xhat_.sample(b) + c * inner_;
                for (std::size_t i = 0; i < inner_; ++i) {
                    sg += g[i];
                    sgx += g[i] * xh[i];
                }
            }
            gbeta_[c] += static_cast<T>(sg);
            ggamma_[c] += static_cast<T>(sgx);
            const double k = gamma_[c] * inv_std_[c] / m;
            for (int b = 0; b < n; ++b) {
                const T* g = grad_out.sample(b) + c * inner_;
                const T* xh = xhat_.sample(b) + c * inner_;
                T* d = grad_in.sample(b) + c * inner_;
                for (std::size_t i = 0; i < inner_; ++i) d[i] = static_cast<T>(k * (m * g[i] - sg - xh[i] * sgx));
            }
        }
    }

    std::vector<ParamView<T>> params() override {
        return {{std::span<T>(gamma_), std::span<T>(ggamma_)}, {std::span<T>(beta_), std::span<T>(gbeta_)}};
    }
    std::vector<std::span<T>> buffers() override { return {std::span<T>(running_mean_), std::span<T>(running_var_)}; }
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm>(*this); }

private:
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;
    int channels_;
    std::size_t inner_;
    std::vector<T> gamma_, beta_, ggamma_, gbeta_, running_mean_, running_var_;
    Tensor<T> xhat_;
    std::vector<T> inv_std_;
};

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& s, const Shape& in, Rng& rng) {
    switch (s.kind) {
        case LayerKind::conv2d: return std::make_unique<Conv2d<T>>(s, in, rng);
        case LayerKind::dense: return std::make_unique<Dense<T>>(s, in, rng);
        case LayerKind::max_pool: return std::make_unique<MaxPool<T>>(s, in);
        case LayerKind::upsample: return std::make_unique<Upsample<T>>(s, in);
        case LayerKind::batch_norm: return std::make_unique<BatchNorm<T>>(s, in);
        default: return std::make_unique<Elementwise<T>>(s);
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Network

template <typename T>
Network<T>::Network(Shape sample_input, std::vector<LayerSpec> specs, std::uint64_t init_seed)
    : input_shape_(std::move(sample_input)), specs_(std::move(specs)) {
    ladder_ = shape_ladder(input_shape_, specs_);
    Rng rng(init_seed);
    for (std::size_t i = 0; i < specs_.size(); ++i) layers_.push_back(make_layer<T>(specs_[i], ladder_[i], rng));
}

template <typename T>
Network<T>::Network(const Network& other)
    : input_shape_(other.input_shape_), specs_(other.specs_), ladder_(other.ladder_) {
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

template <typename T>
Network<T>& Network<T>::operator=(const Network& other) {
    if (this != &other) {
        Network copy(other);
        *this = std::move(copy);
    }
    return *this;
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& input, bool training) {
    if (layers_.empty() && input_shape_.empty()) throw StateError("network not initialised");
    if (input.shape.size() != input_shape_.size() + 1 || without_batch(input.shape) != input_shape_)
        throw ConfigError("input shape " + shape_str(input.shape) + " does not match network input " +
                          shape_str(input_shape_));
    if (input.batch() <= 0) throw ConfigError("empty batch");
    acts_.resize(layers_.size() + 1);
    acts_[0] = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->forward(acts_[i], acts_[i + 1], training);
    has_forward_ = training;
    return acts_.back();
}

template <typename T>
Tensor<T> Network<T>::backward(const Tensor<T>& loss_grad) {
    if (!has_forward_) throw StateError("backward called before a training forward pass");
    if (loss_grad.shape != acts_.back().shape)
        throw ConfigError("loss gradient shape " + shape_str(loss_grad.shape) + " does not match output " +
                          shape_str(acts_.back().shape));
    Tensor<T> grad = loss_grad, next;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        layers_[i]->backward(acts_[i], acts_[i + 1], grad, next);
        std::swap(grad, next);
    }
    return grad;
}

template <typename T>
void Network<T>::zero_grad() {
    for (auto& p : params()) std::fill(p.grads.begin(), p.grads.end(), T{0});
}

template <typename T>
std::vector<ParamView<T>> Network<T>::params() {
    std::vector<ParamView<T>> out;
    for (auto& l : layers_)
        for (auto& p : l->params()) out.push_back(p);
    return out;
}

template <typename T>
std::size_t Network<T>::parameter_count() {
    std::size_t n = 0;
    for (auto& p : params()) n += p.values.size();
    return n;
}

template <typename T>
std::vector<std::span<T>> Network<T>::buffers() {
    std::vector<std::span<T>> out;
    for (auto& l : layers_)
        for (auto& b : l->buffers()) out.push_back(b);
    return out;
}

template <typename T>
template <typename U>
Network<U> Network<T>::cast() const {
    Network<U> out(input_shape_, specs_, 0);
    Network<T> self(*this);
    auto src = self.params();
    auto dst = out.params();
    for (std::size_t i = 0; i < src.size(); ++i)
        std::transform(src[i].values.begin(), src[i].values.end(), dst[i].values.begin(),
                       [](T v) { return static_cast<U>(v); });
    auto sb = self.buffers();
    auto db = out.buffers();
    for (std::size_t i = 0; i < sb.size(); ++i)
        std::transform(sb[i].begin(), sb[i].end(), db[i].begin(), [](T v) { return static_cast<U>(v); });
    return out;
}

template struct Tensor<float>;
template struct Tensor<double>;
template class Network<float>;
template class Network<double>;
template Network<double> Network<float>::cast<double>() const;
template Network<float> Network<double>::cast<float>() const;

// ---------------------------------------------------------------------------
// Losses

namespace {
template <typename T>
void check_same(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape) throw ConfigError("loss shapes differ: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    if (a.size() == 0) throw ConfigError("loss on empty tensor");
}
}  // namespace

template <typename T>
LossResult<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    check_same(pred, target);
    LossResult<T> r{0.0, Tensor<T>(pred.shape)};
    const double n = static_cast<double>(pred.size());
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred.values[i]) - target.values[i];
        s += d * d;
        r.grad.values[i] = static_cast<T>(2.0 * d / n);
    }
    r.value = s / n;
    return r;
}

template <typename T>
LossResult<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    check_same(pred, target);
    LossResult<T> r{0.0, Tensor<T>(pred.shape)};
    const double n = static_cast<double>(pred.size());
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred.values[i]) - target.values[i];
        s += std::abs(d);
        r.grad.values[i] = static_cast<T>((d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0) / n);
    }
    r.value = s / n;
    return r;
}

template <typename T>
LossResult<T> bce_logits_loss(const Tensor<T>& logits, double label) {
    if (logits.size() == 0) throw ConfigError("loss on empty tensor");
    if (!(label >= 0.0 && label <= 1.0)) throw ConfigError("label must lie in [0, 1]");
    LossResult<T> r{0.0, Tensor<T>(logits.shape)};
    const double n = static_cast<double>(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double x = logits.values[i];
        s += std::max(x, 0.0) - x * label + std::log1p(std::exp(-std::abs(x)));
        const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        r.grad.values[i] = static_cast<T>((sig - label) / n);
    }
    r.value = s / n;
    return r;
}

template LossResult<float> mse_loss(const Tensor<float>&, const Tensor<float>&);
template LossResult<double> mse_loss(const Tensor<double>&, const Tensor<double>&);
template LossResult<float> l1_loss(const Tensor<float>&, const Tensor<float>&);
template LossResult<double> l1_loss(const Tensor<double>&, const Tensor<double>&);
template LossResult<float> bce_logits_loss(const Tensor<float>&, double);
template LossResult<double> bce_logits_loss(const Tensor<double>&, double);

// ---------------------------------------------------------------------------
// Adam

template <typename T>
void Adam<T>::step(Network<T>& net) {
    auto ps = net.params();
    if (m_.empty()) {
        for (auto& p : ps) {
            m_.emplace_back(p.values.size(), 0.0);
            v_.emplace_back(p.values.size(), 0.0);
        }
    }
    if (m_.size() != ps.size()) throw StateError("optimiser bound to a different network");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < ps.size(); ++k) {
        auto& m = m_[k];
        auto& v = v_[k];
        auto vals = ps[k].values;
        auto grads = ps[k].grads;
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double g = grads[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double update = cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
            vals[i] = static_cast<T>(vals[i] - update);
        }
    }
}

template class Adam<float>;
template class Adam<double>;

// ---------------------------------------------------------------------------
// Training loop

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& t, std::span<const int> rows) {
    Shape s = t.shape;
    s[0] = static_cast<int>(rows.size());
    Tensor<T> out(s);
    const std::size_t st = t.stride();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= t.batch()) throw ConfigError("batch row out of range");
        std::copy_n(t.sample(rows[i]), st, out.values.data() + i * st);
    }
    return out;
}

template Tensor<float> slice_batch(const Tensor<float>&, std::span<const int>);
template Tensor<double> slice_batch(const Tensor<double>&, std::span<const int>);

void recalibrate_batch_norm(Net& net, const Tensor<float>& inputs, int batch_size) {
    if (batch_size <= 0) throw ConfigError("batch_size must be > 0");
    const int n = inputs.batch();
    if (n < 2) return;
    const auto& specs = net.specs();
    auto bufs = net.buffers();
    std::size_t b = 0;
    std::vector<int> rows;
    for (std::size_t layer = 0; layer < specs.size(); ++layer) {
        if (specs[layer].kind != LayerKind::batch_norm) continue;
        auto mean_buf = bufs.at(b);
        auto var_buf = bufs.at(b + 1);
        b += 2;
        const std::size_t channels = mean_buf.size();
        std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
        double count = 0.0;
        for (int start = 0; start < n; start += batch_size) {
            const int len = std::min(batch_size, n - start);
            rows.resize(len);
            std::iota(rows.begin(), rows.end(), start);
            net.forward(slice_batch(inputs, rows), false);
            const auto& a = net.activations()[layer];
            const std::size_t inner = a.values.size() / (static_cast<std::size_t>(len) * channels);
            for (int s = 0; s < len; ++s) {
                const float* x = a.sample(s);
                for (std::size_t c = 0; c < channels; ++c)
                    for (std::size_t i = 0; i < inner; ++i) {
                        const double v = x[c * inner + i];
                        sum[c] += v;
                        sq[c] += v * v;
                    }
            }
            count += static_cast<double>(len) * static_cast<double>(inner);
        }
        for (std::size_t c = 0; c < channels; ++c) {
            const double mean = sum[c] / count;
            const double var = std::max(0.0, sq[c] / count - mean * mean) * count / (count - 1.0);
            mean_buf[c] = static_cast<float>(mean);
            var_buf[c] = static_cast<float>(var);
        }
    }
}

LossHistory fit(Net& net, const Tensor<float>& inputs, const Tensor<float>& targets, const FitConfig& cfg,
                const Tensor<float>* val_inputs, const Tensor<float>* val_targets) {
    if (inputs.batch() != targets.batch()) throw ConfigError("inputs and targets differ in sample count");
    if (inputs.batch() == 0) throw ConfigError("empty training set");
    if (cfg.epochs < 0 || cfg.batch_size <= 0) throw ConfigError("epochs must be >= 0 and batch_size > 0");
    if ((val_inputs == nullptr) != (val_targets == nullptr)) throw ConfigError("validation inputs without targets");
    auto loss_fn = [&](const Tensor<float>& p, const Tensor<float>& t) {
        return cfg.loss == LossKind::mse ? mse_loss(p, t) : l1_loss(p, t);
    };

    Adam<float> adam(cfg.adam);
    LossHistory hist;
    const int n = inputs.batch();
    std::vector<int> order(n);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(stable_hash(cfg.seed, static_cast<std::uint64_t>(epoch)));
        for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);

        std::vector<double> losses;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int len = std::min(cfg.batch_size, n - start);
            std::span<const int> rows(order.data() + start, len);
            auto x = slice_batch(inputs, rows);
            auto y = slice_batch(targets, rows);
            if (cfg.augment) cfg.augment(x, y, rng);
            net.zero_grad();
            const auto pred = net.forward(x, true);
            auto loss = loss_fn(pred, y);
            if (!std::isfinite(loss.value))
                throw TrainingFailure("non-finite training loss at epoch " + std::to_string(epoch), epoch);
            net.backward(loss.grad);
            adam.step(net);
            losses.push_back(loss.value);
        }
        double mean = 0.0;
        for (double l : losses) mean += l;
        mean /= losses.size();
        double var = 0.0;
        for (double l : losses) var += (l - mean) * (l - mean);
        hist.train.push_back(mean);
        hist.train_sigma.push_back(losses.size() > 1 ? std::sqrt(var / (losses.size() - 1)) : 0.0);

        if (val_inputs) {
            double total = 0.0;
            const int nv = val_inputs->batch();
            std::vector<int> rows;
            for (int start = 0; start < nv; start += cfg.batch_size) {
                const int len = std::min(cfg.batch_size, nv - start);
                rows.resize(len);
                std::iota(rows.begin(), rows.end(), start);
                const auto pred = net.forward(slice_batch(*val_inputs, rows), false);
                total += loss_fn(pred, slice_batch(*val_targets, rows)).value * len;
            }
            const double v = total / nv;
            if (!std::isfinite(v))
                throw TrainingFailure("non-finite validation loss at epoch " + std::to_string(epoch), epoch);
            hist.validation.push_back(v);
        }
    }
    if (cfg.recalibrate_batch_norm && cfg.epochs > 0) recalibrate_batch_norm(net, inputs, cfg.batch_size);
    return hist;
}

// ---------------------------------------------------------------------------
// Model file

namespace {
constexpr char kMagic[4] = {'D', 'T', 'N', 'N'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
    return v;
}
}  // namespace

std::vector<std::uint8_t> serialize_model(Net& net, const nlohmann::json& metadata) {
    nlohmann::json header;
    header["input_shape"] = net.input_shape();
    header["layers"] = nlohmann::json::array();
    for (const auto& s : net.specs()) header["layers"].push_back(to_json(s));
    std::vector<float> payload;
    for (auto& p : net.params()) payload.insert(payload.end(), p.values.begin(), p.values.end());
    const std::size_t n_params = payload.size();
    for (auto& b : net.buffers()) payload.insert(payload.end(), b.begin(), b.end());
    header["parameter_count"] = n_params;
    header["buffer_count"] = payload.size() - n_params;
    header["metadata"] = metadata.is_null() ? nlohmann::json::object() : metadata;
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    const auto body = to_f32_le(std::span<const float>(payload));
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

LoadedModel deserialize_model(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw IoError("not a model file");
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != kVersion)
        throw CompatibilityError("model file version " + std::to_string(version) + " unsupported (expected " +
                                 std::to_string(kVersion) + ")");
    const std::uint32_t hlen = get_u32(bytes, 8);
    if (bytes.size() < 12 + static_cast<std::size_t>(hlen)) throw IoError("truncated model header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("corrupt model header: ") + e.what());
    }
    std::vector<LayerSpec> specs;
    for (const auto& l : header.at("layers")) specs.push_back(layer_spec_from_json(l));
    LoadedModel out{Net(header.at("input_shape").get<Shape>(), specs, 0), header.value("metadata", nlohmann::json::object())};
    const auto payload = from_f32_le(bytes.subspan(12 + hlen));
    const std::size_t n_params = header.at("parameter_count").get<std::size_t>();
    const std::size_t n_buffers = header.at("buffer_count").get<std::size_t>();
    if (payload.size() != n_params + n_buffers || out.net.parameter_count() != n_params)
        throw IoError("model payload size does not match its layer specs");
    std::size_t at = 0;
    for (auto& p : out.net.params())
        for (auto& v : p.values) v = payload[at++];
    for (auto& b : out.net.buffers())
        for (auto& v : b) v = payload[at++];
    if (at != payload.size()) throw IoError("model buffer size does not match its layer specs");
    return out;
}

void save_model(const std::filesystem::path& path, Net& net, const nlohmann::json& metadata) {
    const auto bytes = serialize_model(net, metadata);
    write_file(path, bytes);
}

LoadedModel load_model(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return deserialize_model(bytes);
}

std::string model_hash(Net& net) {
    const auto bytes = serialize_model(net);
    return sha256_hex(bytes);
}

}  // namespace detwin::nn
