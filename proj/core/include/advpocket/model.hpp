#pragma once

#include "advpocket/tensor.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace advpocket {

enum class LayerKind { affine, conv2d, relu, dropout, softmax };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

/// One entry of the fixed layer vocabulary.
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    // affine: in_features -> out_features. conv2d: in_channels -> out_channels.
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t kernel = 0;  // conv2d only, square kernel, valid padding
    std::size_t stride = 1;  // conv2d only
    double rate = 0.0;       // dropout only

    static LayerSpec affine(std::size_t in, std::size_t out) { return {LayerKind::affine, in, out}; }
    static LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride = 1) {
        return {LayerKind::conv2d, in_ch, out_ch, kernel, stride};
    }
    static LayerSpec relu() { return {LayerKind::relu}; }
    static LayerSpec dropout(double rate) { return {LayerKind::dropout, 0, 0, 0, 1, rate}; }
    static LayerSpec softmax() { return {LayerKind::softmax}; }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSpec {
    std::vector<LayerSpec> layers;
    Shape input_shape;
    std::size_t num_classes = 0;

    /// Throws ShapeError naming the first incompatible layer.
    void validate() const;

    /// Shape of the tensor entering each layer, plus the final output; size layers.size() + 1.
    std::vector<Shape> activation_shapes() const;

    std::size_t logits_index() const;    // index of the softmax marker (its input are the logits)
    std::size_t features_index() const;  // index of the final affine layer (its input are the features)
    std::vector<std::size_t> dropout_layers() const;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Weight/bias for one layer; both empty for parameter-free layers.
struct LayerParams {
    Tensor weight;
    Tensor bias;
};

struct ModelParams {
    std::vector<LayerParams> layers;

    /// Zero-valued parameters with the shapes the spec requires.
    static ModelParams zeros_like(const ModelSpec& spec);
    std::size_t count() const;
    void validate(const ModelSpec& spec) const;
};

/// Explicit dropout masks, one binary tensor per dropout layer. Masked units are scaled by 1/(1-rate)
/// so that a rate-0 (all-ones) mask reproduces the unmasked forward pass exactly.
struct DropoutMask {
    std::vector<Tensor> masks;
    double rate = 0.0;
    std::uint64_t seed = 0;

    double scale() const noexcept { return 1.0 / (1.0 - rate); }
};

/// Bernoulli(1-rate) keep-mask for every dropout layer of `spec`, reproducible from `seed`.
DropoutMask sample_dropout_mask(const ModelSpec& spec, double rate, std::uint64_t seed);

struct TrainingMetadata {
    std::uint64_t seed = 0;
    int epochs = 0;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    std::string dataset;
};

class Model;

/// Cached activations of one forward pass; input to Model::backward.
struct ForwardPass {
    std::vector<Tensor> activations;  // activations[i] enters layer i
    std::vector<double> logits;
    std::vector<double> probs;

    const Tensor& features(const Model& model) const;
};

/// Immutable classifier h (probabilities) / Z (logits). Reentrant: forward and backward keep no state.
class Model {
public:
    Model(ModelSpec spec, ModelParams params, TrainingMetadata metadata = {});

    const ModelSpec& spec() const noexcept { return spec_; }
    const ModelParams& params() const noexcept { return params_; }
    const TrainingMetadata& metadata() const noexcept { return metadata_; }
    std::size_t num_classes() const noexcept { return spec_.num_classes; }
    std::size_t input_size() const noexcept { return input_size_; }

    /// FNV-1a digest of spec and weights; identifies a model in calibration files.
    std::uint64_t checksum() const noexcept { return checksum_; }

    ForwardPass forward(const Tensor& x, const DropoutMask* mask = nullptr) const;
    std::vector<double> probabilities(const Tensor& x, const DropoutMask* mask = nullptr) const;
    std::vector<double> features(const Tensor& x) const;
    std::size_t predict(const Tensor& x) const;

    /// Vector-Jacobian product. `upstream` is dL/d(activation entering layer `from_layer`); returns dL/dx.
    /// Parameter gradients of layers below `from_layer` are accumulated into `param_grads` when given.
    Tensor backward(const ForwardPass& pass, std::size_t from_layer, std::span<const double> upstream,
                    const DropoutMask* mask = nullptr, ModelParams* param_grads = nullptr) const;

    /// backward() starting from dL/dlogits.
    Tensor backward_logits(const ForwardPass& pass, std::span<const double> logit_grad,
                           const DropoutMask* mask = nullptr, ModelParams* param_grads = nullptr) const;

    /// dL/dx for L = <g, h(x)>, i.e. the VJP of the probability map.
    Tensor backward_probs(const ForwardPass& pass, std::span<const double> prob_grad,
                          const DropoutMask* mask = nullptr) const;

private:
    void check_mask(const DropoutMask& mask) const;

    ModelSpec spec_;
    ModelParams params_;
    TrainingMetadata metadata_;
    std::vector<Shape> shapes_;
    std::size_t input_size_ = 0;
    std::uint64_t checksum_ = 0;
};

/// dL/dz for L = <g, softmax(z)>.
std::vector<double> softmax_vjp(std::span<const double> probs, std::span<const double> prob_grad);

/// He-normal weights, zero biases.
ModelParams initialize_params(const ModelSpec& spec, std::uint64_t seed);

/// The desk classifier: 784 -> 256 -> relu -> dropout -> 128 -> relu -> dropout -> 10.
ModelSpec desk_mlp_spec(std::size_t hidden1 = 256, std::size_t hidden2 = 128, double dropout = 0.5);

}  // namespace advpocket
