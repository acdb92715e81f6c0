#include "advpocket/model.hpp"

#include "advpocket/error.hpp"
#include "advpocket/rng.hpp"

#include <Eigen/Core>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace advpocket {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;

std::string layer_name(std::size_t index, const LayerSpec& layer) {
    return fmt::format("layer {} ({})", index, to_string(layer.kind));
}

class Fnv1a {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001b3ULL;
        }
    }
    template <typename T>
    void value(const T& v) {
        bytes(&v, sizeof(T));
    }
    std::uint64_t digest() const { return hash_; }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

// Output spatial extent of a valid-padding convolution.
std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride) { return (in - kernel) / stride + 1; }

}  // namespace

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::affine: return "affine";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::relu: return "relu";
        case LayerKind::dropout: return "dropout";
        case LayerKind::softmax: return "softmax";
    }
    return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
    for (auto kind : {LayerKind::affine, LayerKind::conv2d, LayerKind::relu, LayerKind::dropout, LayerKind::softmax}) {
        if (to_string(kind) == name) return kind;
    }
    throw ConfigError(fmt::format("unknown layer kind '{}'", name));
}

std::vector<Shape> ModelSpec::activation_shapes() const {
    std::vector<Shape> shapes;
    shapes.reserve(layers.size() + 1);
    Shape current = input_shape;
    shapes.push_back(current);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& layer = layers[i];
        switch (layer.kind) {
            case LayerKind::affine:
                if (shape_size(current) != layer.in) {
                    throw ShapeError(fmt::format("{}: expects {} inputs, receives {} {}", layer_name(i, layer), layer.in,
                                                 shape_size(current), shape_string(current)));
                }
                if (layer.out == 0) throw ShapeError(fmt::format("{}: zero outputs", layer_name(i, layer)));
                current = {layer.out};
                break;
            case LayerKind::conv2d: {
                if (current.size() != 3 || current[0] != layer.in) {
                    throw ShapeError(fmt::format("{}: expects [{},H,W], receives {}", layer_name(i, layer), layer.in,
                                                 shape_string(current)));
                }
                if (layer.kernel == 0 || layer.stride == 0 || layer.kernel > current[1] || layer.kernel > current[2] ||
                    layer.out == 0) {
                    throw ShapeError(fmt::format("{}: kernel {} stride {} incompatible with {}", layer_name(i, layer),
                                                 layer.kernel, layer.stride, shape_string(current)));
                }
                current = {layer.out, conv_extent(current[1], layer.kernel, layer.stride),
                           conv_extent(current[2], layer.kernel, layer.stride)};
                break;
            }
            case LayerKind::relu:
            case LayerKind::softmax: break;
            case LayerKind::dropout:
                if (!(layer.rate >= 0.0 && layer.rate < 1.0)) {
                    throw ShapeError(fmt::format("{}: rate {} outside [0,1)", layer_name(i, layer), layer.rate));
                }
                break;
        }
        shapes.push_back(current);
    }
    return shapes;
}

void ModelSpec::validate() const {
    if (layers.empty()) throw ShapeError("model has no layers");
    if (num_classes < 2) throw ShapeError("model needs at least two classes");
    const auto softmax_count = std::count_if(layers.begin(), layers.end(),
                                             [](const LayerSpec& l) { return l.kind == LayerKind::softmax; });
    if (softmax_count != 1 || layers.back().kind != LayerKind::softmax) {
        throw ShapeError("model must end in exactly one softmax output layer");
    }
    const auto shapes = activation_shapes();
    if (shape_size(shapes.back()) != num_classes) {
        throw ShapeError(fmt::format("layer {} (softmax): receives {} logits, model declares {} classes",
                                     layers.size() - 1, shape_size(shapes.back()), num_classes));
    }
    if (layers[layers.size() - 2].kind != LayerKind::affine) {
        throw ShapeError("the layer feeding the softmax must be affine");
    }
}

std::size_t ModelSpec::logits_index() const { return layers.size() - 1; }

std::size_t ModelSpec::features_index() const { return layers.size() - 2; }

std::vector<std::size_t> ModelSpec::dropout_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].kind == LayerKind::dropout) out.push_back(i);
    }
    return out;
}

ModelParams ModelParams::zeros_like(const ModelSpec& spec) {
    ModelParams params;
    params.layers.resize(spec.layers.size());
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        if (l.kind == LayerKind::affine) {
            params.layers[i].weight = Tensor({l.out, l.in});
            params.layers[i].bias = Tensor({l.out});
        } else if (l.kind == LayerKind::conv2d) {
            params.layers[i].weight = Tensor({l.out, l.in, l.kernel, l.kernel});
            params.layers[i].bias = Tensor({l.out});
        }
    }
    return params;
}

std::size_t ModelParams::count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
}

void ModelParams::validate(const ModelSpec& spec) const {
    if (layers.size() != spec.layers.size()) {
        throw ShapeError(fmt::format("parameters cover {} layers, spec has {}", layers.size(), spec.layers.size()));
    }
    const ModelParams expected = zeros_like(spec);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].weight.shape() != expected.layers[i].weight.shape() ||
            layers[i].bias.shape() != expected.layers[i].bias.shape()) {
            throw ShapeError(fmt::format("{}: parameter shapes {} / {} do not match spec {} / {}",
                                         layer_name(i, spec.layers[i]), shape_string(layers[i].weight.shape()),
                                         shape_string(layers[i].bias.shape()),
                                         shape_string(expected.layers[i].weight.shape()),
                                         shape_string(expected.layers[i].bias.shape())));
        }
        if (!layers[i].weight.all_finite() || !layers[i].bias.all_finite()) {
            throw NumericError(fmt::format("{}: non-finite parameters", layer_name(i, spec.layers[i])));
        }
    }
}

DropoutMask sample_dropout_mask(const ModelSpec& spec, double rate, std::uint64_t seed) {
    const auto indices = spec.dropout_layers();
    if (indices.empty()) throw ConfigError("model has no dropout layers to mask");
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError(fmt::format("dropout rate {} outside [0,1)", rate));
    const auto shapes = spec.activation_shapes();
    DropoutMask mask;
    mask.rate = rate;
    mask.seed = seed;
    Rng rng(seed);
    std::bernoulli_distribution keep(1.0 - rate);
    for (std::size_t idx : indices) {
        Tensor m(shapes[idx]);
        for (double& v : m.values()) v = keep(rng) ? 1.0 : 0.0;
        mask.masks.push_back(std::move(m));
    }
    return mask;
}

const Tensor& ForwardPass::features(const Model& model) const {
    return activations[model.spec().features_index()];
}

Model::Model(ModelSpec spec, ModelParams params, TrainingMetadata metadata)
    : spec_(std::move(spec)), params_(std::move(params)), metadata_(std::move(metadata)) {
    spec_.validate();
    params_.validate(spec_);
    shapes_ = spec_.activation_shapes();
    input_size_ = shape_size(spec_.input_shape);

    Fnv1a h;
    for (std::size_t d : spec_.input_shape) h.value(d);
    h.value(spec_.num_classes);
    for (const auto& l : spec_.layers) {
        h.value(static_cast<int>(l.kind));
        h.value(l.in);
        h.value(l.out);
        h.value(l.kernel);
        h.value(l.stride);
        h.value(l.rate);
    }
    for (const auto& l : params_.layers) {
        h.bytes(l.weight.data(), l.weight.size() * sizeof(double));
        h.bytes(l.bias.data(), l.bias.size() * sizeof(double));
    }
    checksum_ = h.digest();
}

void Model::check_mask(const DropoutMask& mask) const {
    const auto indices = spec_.dropout_layers();
    if (mask.masks.size() != indices.size()) {
        throw ShapeError(fmt::format("dropout mask has {} tensors, model has {} dropout layers", mask.masks.size(),
                                     indices.size()));
    }
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (mask.masks[k].shape() != shapes_[indices[k]]) {
            throw ShapeError(fmt::format("{}: mask shape {} does not match activation {}",
                                         layer_name(indices[k], spec_.layers[indices[k]]),
                                         shape_string(mask.masks[k].shape()), shape_string(shapes_[indices[k]])));
        }
    }
}

ForwardPass Model::forward(const Tensor& x, const DropoutMask* mask) const {
    if (x.size() != input_size_) {
        throw ShapeError(fmt::format("layer 0 ({}): input has {} values, model expects {} {}",
                                     to_string(spec_.layers[0].kind), x.size(), input_size_,
                                     shape_string(spec_.input_shape)));
    }
    if (mask != nullptr) check_mask(*mask);

    ForwardPass pass;
    pass.activations.reserve(spec_.layers.size() + 1);
    pass.activations.push_back(x.shape() == shapes_[0] ? x : x.reshaped(shapes_[0]));

    std::size_t dropout_k = 0;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const LayerSpec& layer = spec_.layers[i];
        const Tensor& in = pass.activations.back();
        Tensor out(shapes_[i + 1]);
        switch (layer.kind) {
            case LayerKind::affine: {
                const auto& p = params_.layers[i];
                ConstMatrixMap w(p.weight.data(), static_cast<Eigen::Index>(layer.out),
                                 static_cast<Eigen::Index>(layer.in));
                VectorMap y(out.data(), static_cast<Eigen::Index>(layer.out));
                y.noalias() = w * ConstVectorMap(in.data(), static_cast<Eigen::Index>(layer.in));
                y += ConstVectorMap(p.bias.data(), static_cast<Eigen::Index>(layer.out));
                break;
            }
            case LayerKind::conv2d: {
                const auto& p = params_.layers[i];
                const std::size_t C = layer.in, H = shapes_[i][1], W = shapes_[i][2];
                const std::size_t O = layer.out, K = layer.kernel, S = layer.stride;
                const std::size_t Ho = shapes_[i + 1][1], Wo = shapes_[i + 1][2];
                for (std::size_t o = 0; o < O; ++o) {
                    for (std::size_t r = 0; r < Ho; ++r) {
                        for (std::size_t c = 0; c < Wo; ++c) {
                            double acc = p.bias[o];
                            for (std::size_t ch = 0; ch < C; ++ch) {
                                for (std::size_t kr = 0; kr < K; ++kr) {
                                    const double* row = in.data() + (ch * H + r * S + kr) * W + c * S;
                                    const double* wrow = p.weight.data() + ((o * C + ch) * K + kr) * K;
                                    for (std::size_t kc = 0; kc < K; ++kc) acc += wrow[kc] * row[kc];
                                }
                            }
                            out[(o * Ho + r) * Wo + c] = acc;
                        }
                    }
                }
                break;
            }
            case LayerKind::relu:
                for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] > 0.0 ? in[k] : 0.0;
                break;
            case LayerKind::dropout:
                if (mask != nullptr) {
                    const Tensor& m = mask->masks[dropout_k];
                    const double s = mask->scale();
                    for (std::size_t k = 0; k < in.size(); ++k) out[k] = m[k] != 0.0 ? in[k] * s : 0.0;
                } else {
                    out = in;
                }
                ++dropout_k;
                break;
            case LayerKind::softmax: out = in; break;
        }
        pass.activations.push_back(std::move(out));
    }

    const Tensor& z = pass.activations[spec_.logits_index()];
    pass.logits.assign(z.values().begin(), z.values().end());
    pass.probs = softmax(pass.logits);
    return pass;
}

std::vector<double> Model::probabilities(const Tensor& x, const DropoutMask* mask) const {
    return forward(x, mask).probs;
}

std::vector<double> Model::features(const Tensor& x) const {
    const auto pass = forward(x);
    const Tensor& f = pass.features(*this);
    return {f.values().begin(), f.values().end()};
}

std::size_t Model::predict(const Tensor& x) const { return argmax(forward(x).logits); }

Tensor Model::backward(const ForwardPass& pass, std::size_t from_layer, std::span<const double> upstream,
                       const DropoutMask* mask, ModelParams* param_grads) const {
    if (from_layer > spec_.layers.size() || upstream.size() != shape_size(shapes_[from_layer])) {
        throw ShapeError(fmt::format("backward: upstream gradient of size {} does not match activation {} at layer {}",
                                     upstream.size(), shape_string(shapes_[std::min(from_layer, shapes_.size() - 1)]),
                                     from_layer));
    }
    if (mask != nullptr) check_mask(*mask);
    if (param_grads != nullptr && param_grads->layers.size() != spec_.layers.size()) {
        *param_grads = ModelParams::zeros_like(spec_);
    }

    const auto dropout_idx = spec_.dropout_layers();
    Tensor grad(shapes_[from_layer], std::vector<double>(upstream.begin(), upstream.end()));
    for (std::size_t i = from_layer; i-- > 0;) {
        const LayerSpec& layer = spec_.layers[i];
        const Tensor& in = pass.activations[i];
        switch (layer.kind) {
            case LayerKind::affine: {
                const auto& p = params_.layers[i];
                const auto out_n = static_cast<Eigen::Index>(layer.out);
                const auto in_n = static_cast<Eigen::Index>(layer.in);
                ConstMatrixMap w(p.weight.data(), out_n, in_n);
                ConstVectorMap g(grad.data(), out_n);
                if (param_grads != nullptr) {
                    auto& pg = param_grads->layers[i];
                    MatrixMap(pg.weight.data(), out_n, in_n).noalias() += g * ConstVectorMap(in.data(), in_n).transpose();
                    VectorMap(pg.bias.data(), out_n) += g;
                }
                Tensor next(shapes_[i]);
                VectorMap(next.data(), in_n).noalias() = w.transpose() * g;
                grad = std::move(next);
                break;
            }
            case LayerKind::conv2d: {
                const auto& p = params_.layers[i];
                const std::size_t C = layer.in, H = shapes_[i][1], W = shapes_[i][2];
                const std::size_t O = layer.out, K = layer.kernel, S = layer.stride;
                const std::size_t Ho = shapes_[i + 1][1], Wo = shapes_[i + 1][2];
                Tensor next(shapes_[i]);
                LayerParams* pg = param_grads != nullptr ? &param_grads->layers[i] : nullptr;
                for (std::size_t o = 0; o < O; ++o) {
                    for (std::size_t r = 0; r < Ho; ++r) {
                        for (std::size_t c = 0; c < Wo; ++c) {
                            const double g = grad[(o * Ho + r) * Wo + c];
                            if (g == 0.0) continue;
                            if (pg != nullptr) pg->bias[o] += g;
                            for (std::size_t ch = 0; ch < C; ++ch) {
                                for (std::size_t kr = 0; kr < K; ++kr) {
                                    const std::size_t in_off = (ch * H + r * S + kr) * W + c * S;
                                    const std::size_t w_off = ((o * C + ch) * K + kr) * K;
                                    for (std::size_t kc = 0; kc < K; ++kc) {
                                        next[in_off + kc] += g * p.weight[w_off + kc];
                                        if (pg != nullptr) pg->weight[w_off + kc] += g * in[in_off + kc];
                                    }
                                }
                            }
                        }
                    }
                }
                grad = std::move(next);
                break;
            }
            case LayerKind::relu:
                for (std::size_t k = 0; k < grad.size(); ++k) {
                    if (!(in[k] > 0.0)) grad[k] = 0.0;
                }
                break;
            case LayerKind::dropout:
                if (mask != nullptr) {
                    const auto k_mask = static_cast<std::size_t>(
                        std::find(dropout_idx.begin(), dropout_idx.end(), i) - dropout_idx.begin());
                    const Tensor& m = mask->masks[k_mask];
                    const double s = mask->scale();
                    for (std::size_t k = 0; k < grad.size(); ++k) grad[k] = m[k] != 0.0 ? grad[k] * s : 0.0;
                }
                break;
            case LayerKind::softmax: break;
        }
    }
    if (grad.shape() != shapes_[0]) grad = grad.reshaped(shapes_[0]);
    return grad;
}

Tensor Model::backward_logits(const ForwardPass& pass, std::span<const double> logit_grad, const DropoutMask* mask,
                              ModelParams* param_grads) const {
    return backward(pass, spec_.logits_index(), logit_grad, mask, param_grads);
}

Tensor Model::backward_probs(const ForwardPass& pass, std::span<const double> prob_grad,
                             const DropoutMask* mask) const {
    const auto g = softmax_vjp(pass.probs, prob_grad);
    return backward_logits(pass, g, mask);
}

std::vector<double> softmax_vjp(std::span<const double> probs, std::span<const double> prob_grad) {
    const double inner = dot(probs, prob_grad);
    std::vector<double> out(probs.size());
    for (std::size_t k = 0; k < probs.size(); ++k) out[k] = probs[k] * (prob_grad[k] - inner);
    return out;
}

ModelParams initialize_params(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    ModelParams params = ModelParams::zeros_like(spec);
    Rng rng = make_rng(seed, {stream::init});
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        std::size_t fan_in = 0;
        if (l.kind == LayerKind::affine) fan_in = l.in;
        if (l.kind == LayerKind::conv2d) fan_in = l.in * l.kernel * l.kernel;
        if (fan_in == 0) continue;
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (double& w : params.layers[i].weight.values()) w = normal(rng);
    }
    return params;
}

ModelSpec desk_mlp_spec(std::size_t hidden1, std::size_t hidden2, double dropout) {
    ModelSpec spec;
    spec.input_shape = {1, 28, 28};
    spec.num_classes = 10;
    spec.layers = {LayerSpec::affine(784, hidden1), LayerSpec::relu(),    LayerSpec::dropout(dropout),
                   LayerSpec::affine(hidden1, hidden2), LayerSpec::relu(), LayerSpec::dropout(dropout),
                   LayerSpec::affine(hidden2, 10),     LayerSpec::softmax()};
    return spec;
}

}  // namespace advpocket
