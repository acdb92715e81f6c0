#pragma once

#include "advpocket/model.hpp"
#include "advpocket/tensor.hpp"

#include <cmath>
#include <functional>
#include <random>

namespace advpocket::testing {

/// conv -> relu -> affine -> relu -> dropout -> affine -> softmax on a 1x6x6 input, 4 classes.
inline ModelSpec small_conv_spec() {
    ModelSpec spec;
    spec.input_shape = {1, 6, 6};
    spec.num_classes = 4;
    spec.layers = {LayerSpec::conv2d(1, 2, 3), LayerSpec::relu(),         LayerSpec::affine(32, 10),
                   LayerSpec::relu(),          LayerSpec::dropout(0.5),   LayerSpec::affine(10, 4),
                   LayerSpec::softmax()};
    return spec;
}

inline ModelSpec small_mlp_spec(std::size_t in = 12, std::size_t classes = 5) {
    ModelSpec spec;
    spec.input_shape = {1, 1, in};
    spec.num_classes = classes;
    spec.layers = {LayerSpec::affine(in, 9), LayerSpec::relu(), LayerSpec::dropout(0.3), LayerSpec::affine(9, classes),
                   LayerSpec::softmax()};
    return spec;
}

inline ModelSpec linear_spec(std::size_t in, std::size_t classes) {
    ModelSpec spec;
    spec.input_shape = {in};
    spec.num_classes = classes;
    spec.layers = {LayerSpec::affine(in, classes), LayerSpec::softmax()};
    return spec;
}

inline Model random_model(const ModelSpec& spec, std::uint64_t seed, double scale = 1.0) {
    ModelParams p = initialize_params(spec, seed);
    std::mt19937_64 rng(seed ^ 0x5eed);
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto& l : p.layers) {
        for (auto& w : l.weight.values()) w *= scale;
        for (auto& b : l.bias.values()) b = n(rng);
    }
    return Model(spec, std::move(p));
}

inline Tensor random_input(const Shape& shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(shape);
    for (auto& v : t.values()) v = u(rng);
    return t;
}

/// Central differences of f at x, coordinate by coordinate.
inline Tensor finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-6) {
    Tensor g(x.shape());
    Tensor p = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + h;
        const double up = f(p);
        p[i] = orig - h;
        const double down = f(p);
        p[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// ||a - b|| / max(||a||, ||b||, floor).
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace advpocket::testing
