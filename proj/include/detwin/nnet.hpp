#pragma once

// Minimal sequential neural engine: tensors, layers with hand-written
// backward passes, Adam, a deterministic training loop and a versioned model
// file. Scalar type is float for training and double for gradient checks.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "detwin/common.hpp"

namespace detwin::nn {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major tensor. Images are [N, C, H, W]; feature vectors [N, F].
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> values;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), values(shape_size(shape), fill) {}

    std::size_t size() const { return values.size(); }
    int batch() const { return shape.empty() ? 0 : shape[0]; }
    /// Elements per sample.
    std::size_t stride() const { return shape.empty() || shape[0] == 0 ? 0 : values.size() / shape[0]; }
    T* sample(int n) { return values.data() + static_cast<std::size_t>(n) * stride(); }
    const T* sample(int n) const { return values.data() + static_cast<std::size_t>(n) * stride(); }
    bool all_finite() const;
};

enum class LayerKind { conv2d, relu, leaky_relu, max_pool, batch_norm, dense, sigmoid, tanh, upsample };

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    int channels = 0;   ///< conv2d output channels
    int kernel = 3;     ///< conv2d kernel; max_pool window
    int stride = 1;     ///< conv2d / max_pool stride
    int padding = 0;    ///< conv2d zero padding
    int units = 0;      ///< dense outputs
    double slope = 0.2; ///< leaky_relu negative slope
    int scale = 2;      ///< upsample factor (nearest)

    static LayerSpec conv(int channels, int kernel, int stride, int padding);
    static LayerSpec dense(int units);
    static LayerSpec relu() { return {LayerKind::relu}; }
    static LayerSpec leaky_relu(double slope = 0.2);
    static LayerSpec max_pool(int window = 2, int stride = 2);
    static LayerSpec batch_norm() { return {LayerKind::batch_norm}; }
    static LayerSpec sigmoid() { return {LayerKind::sigmoid}; }
    static LayerSpec tanh() { return {LayerKind::tanh}; }
    static LayerSpec upsample(int scale = 2);
};

nlohmann::json to_json(const LayerSpec& s);
LayerSpec layer_spec_from_json(const nlohmann::json& j);

/// Output spatial size of a conv/pool: floor((n + 2p - k) / s) + 1.
int conv_out(int n, int kernel, int stride, int padding);

/// Per-sample output shape ladder (input shape first) for a layer stack. Throws
/// ConfigError when adjacent shapes are incompatible.
std::vector<Shape> shape_ladder(const Shape& sample_input, const std::vector<LayerSpec>& layers);

template <typename T>
struct ParamView {
    std::span<T> values;
    std::span<T> grads;
};

template <typename T>
class Layer {
public:
    virtual ~Layer() = default;
    virtual const LayerSpec& spec() const = 0;
    /// in/out include the batch dimension.
    virtual void forward(const Tensor<T>& in, Tensor<T>& out, bool training) = 0;
    /// Accumulates parameter gradients and writes d(loss)/d(in).
    virtual void backward(const Tensor<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                          Tensor<T>& grad_in) = 0;
    virtual std::vector<ParamView<T>> params() { return {}; }
    /// Non-trainable state saved with the model (batch-norm running statistics).
    virtual std::vector<std::span<T>> buffers() { return {}; }
    virtual std::unique_ptr<Layer<T>> clone() const = 0;
};

/// Sequential network. forward(training=true) retains activations for backward.
template <typename T>
class Network {
public:
    Network() = default;
    Network(Shape sample_input, std::vector<LayerSpec> specs, std::uint64_t init_seed);
    Network(const Network& other);
    Network& operator=(const Network& other);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    const Shape& input_shape() const { return input_shape_; }
    Shape output_shape() const { return ladder_.back(); }
    const std::vector<Shape>& ladder() const { return ladder_; }
    const std::vector<LayerSpec>& specs() const { return specs_; }
    std::size_t layer_count() const { return layers_.size(); }

    Tensor<T> forward(const Tensor<T>& input, bool training = false);
    /// Gradient of the loss w.r.t. the network input. Parameter gradients
    /// accumulate until zero_grad().
    Tensor<T> backward(const Tensor<T>& loss_grad);
    void zero_grad();

    /// Activations retained by the last forward; [0] is the input.
    const std::vector<Tensor<T>>& activations() const { return acts_; }

    std::vector<ParamView<T>> params();
    std::size_t parameter_count();
    std::vector<std::span<T>> buffers();

    template <typename U>
    Network<U> cast() const;

private:
    Shape input_shape_;
    std::vector<LayerSpec> specs_;
    std::vector<Shape> ladder_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;
    std::vector<Tensor<T>> acts_;
    bool has_forward_ = false;
};

using Net = Network<float>;
using NetD = Network<double>;
using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// Losses: value plus gradient w.r.t. the prediction (mean reduction).

template <typename T>
struct LossResult {
    double value = 0.0;
    Tensor<T> grad;
};

template <typename T>
LossResult<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target);
template <typename T>
LossResult<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target);
/// Binary cross-entropy on logits against a constant label in [0, 1].
template <typename T>
LossResult<T> bce_logits_loss(const Tensor<T>& logits, double label);

// ---------------------------------------------------------------------------
// Optimiser

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
    void step(Network<T>& net);
    long steps() const { return t_; }

private:
    AdamConfig cfg_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training

enum class LossKind { mse, l1 };

struct FitConfig {
    AdamConfig adam;
    int epochs = 10;
    int batch_size = 16;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::mse;
    /// Optional per-batch transform of (inputs, targets), drawn from the epoch's stream.
    std::function<void(Tensor<float>&, Tensor<float>&, Rng&)> augment;
    /// Re-estimate batch-norm statistics on the training inputs after the last epoch.
    bool recalibrate_batch_norm = true;
};

struct LossHistory {
    std::vector<double> train;        ///< mean batch loss per epoch
    std::vector<double> train_sigma;  ///< std of batch losses per epoch
    std::vector<double> validation;   ///< empty unless validation data given
};

/// Shuffled mini-batch Adam. Deterministic given cfg.seed. Throws
/// TrainingFailure on a non-finite loss.
LossHistory fit(Net& net, const Tensor<float>& inputs, const Tensor<float>& targets, const FitConfig& cfg,
                const Tensor<float>* val_inputs = nullptr, const Tensor<float>* val_targets = nullptr);

/// Sets every batch-norm layer's running mean and variance to the exact
/// statistics of its input over `inputs` (eval-mode pass, layer by layer).
void recalibrate_batch_norm(Net& net, const Tensor<float>& inputs, int batch_size = 32);

/// Rows [begin, end) of a batch-major tensor, or selected rows.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& t, std::span<const int> rows);

// ---------------------------------------------------------------------------
// Model file: "DTNN" magic, u32 version, u32 header length, JSON header
// (input shape, layer specs, parameter counts, user metadata), then float32
// little-endian parameters and buffers in layer order.

void save_model(const std::filesystem::path& path, Net& net, const nlohmann::json& metadata = {});
struct LoadedModel {
    Net net;
    nlohmann::json metadata;
};
LoadedModel load_model(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_model(Net& net, const nlohmann::json& metadata = {});
LoadedModel deserialize_model(std::span<const std::uint8_t> bytes);

/// SHA-256 of the serialized parameters and specs.
std::string model_hash(Net& net);

}  // namespace detwin::nn
