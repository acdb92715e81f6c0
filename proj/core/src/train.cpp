#include "advpocket/train.hpp"

#include "advpocket/error.hpp"
#include "advpocket/losses.hpp"
#include "advpocket/rng.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace advpocket {

namespace {

DropoutMask training_mask(const ModelSpec& spec, Rng& rng) {
    DropoutMask mask;
    const auto indices = spec.dropout_layers();
    if (indices.empty()) return mask;
    // All dropout layers in a spec share one rate in practice; use each layer's own rate anyway.
    const auto shapes = spec.activation_shapes();
    mask.rate = spec.layers[indices.front()].rate;
    for (std::size_t idx : indices) {
        std::bernoulli_distribution keep(1.0 - spec.layers[idx].rate);
        Tensor m(shapes[idx]);
        for (double& v : m.values()) v = keep(rng) ? 1.0 : 0.0;
        mask.masks.push_back(std::move(m));
    }
    return mask;
}

nlohmann::json tensor_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.values()}}; }

Tensor tensor_from_json(const nlohmann::json& j) {
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

}  // namespace

double accuracy(const Model& model, const Dataset& data) {
    if (data.size() == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (model.predict(data.image(i)) == static_cast<std::size_t>(data.labels[i])) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

Model train(const ModelSpec& spec, const Dataset& train_set, const TrainingConfig& config, const Dataset* test_set,
            const std::function<void(int, double, double)>& on_epoch) {
    spec.validate();
    train_set.validate(spec.num_classes);
    if (train_set.sample_size() != shape_size(spec.input_shape)) {
        throw ShapeError(fmt::format("training images have {} values, model expects {}", train_set.sample_size(),
                                     shape_size(spec.input_shape)));
    }
    if (config.batch_size == 0) throw ConfigError("batch_size must be positive");

    ModelParams params = initialize_params(spec, config.seed);
    ModelParams velocity = ModelParams::zeros_like(spec);
    Rng rng = make_rng(config.seed, {stream::shuffle});
    const bool has_dropout = !spec.dropout_layers().empty();

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    double lr = config.learning_rate;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const Model current(spec, params);
            ModelParams grads = ModelParams::zeros_like(spec);
            for (std::size_t b = start; b < end; ++b) {
                const std::size_t i = order[b];
                const Tensor x = train_set.image(i);
                const auto label = static_cast<std::size_t>(train_set.labels[i]);
                DropoutMask mask;
                if (has_dropout) mask = training_mask(spec, rng);
                const DropoutMask* mp = has_dropout ? &mask : nullptr;
                const ForwardPass pass = current.forward(x, mp);
                const LossValue lv = evaluate_loss(CrossEntropyLoss{label}, pass.logits);
                if (!std::isfinite(lv.value)) {
                    throw NumericError(fmt::format("training diverged: loss {} at epoch {}, example {}", lv.value,
                                                   epoch, i));
                }
                epoch_loss += lv.value;
                if (argmax(pass.logits) == label) ++correct;
                current.backward_logits(pass, lv.logit_grad, mp, &grads);
            }
            const double scale = 1.0 / static_cast<double>(end - start);
            for (std::size_t l = 0; l < params.layers.size(); ++l) {
                for (auto [p, v, g] : {std::tuple{&params.layers[l].weight, &velocity.layers[l].weight,
                                                  &grads.layers[l].weight},
                                       std::tuple{&params.layers[l].bias, &velocity.layers[l].bias,
                                                  &grads.layers[l].bias}}) {
                    for (std::size_t k = 0; k < p->size(); ++k) {
                        (*v)[k] = config.momentum * (*v)[k] - lr * scale * (*g)[k];
                        (*p)[k] += (*v)[k];
                    }
                }
            }
        }
        if (!std::isfinite(epoch_loss)) throw NumericError(fmt::format("training diverged at epoch {}", epoch));
        lr *= config.lr_decay;
        if (on_epoch) {
            on_epoch(epoch, epoch_loss / static_cast<double>(order.size()),
                     static_cast<double>(correct) / static_cast<double>(order.size()));
        }
    }

    TrainingMetadata meta;
    meta.seed = config.seed;
    meta.epochs = config.epochs;
    meta.dataset = train_set.source;
    Model trained(spec, params, meta);
    meta.train_accuracy = accuracy(trained, train_set);
    meta.test_accuracy = test_set != nullptr ? accuracy(trained, *test_set) : 0.0;
    return Model(spec, std::move(params), meta);
}

void save_model(const Model& model, const std::filesystem::path& path) {
    nlohmann::json spec;
    spec["input_shape"] = model.spec().input_shape;
    spec["num_classes"] = model.spec().num_classes;
    for (const LayerSpec& l : model.spec().layers) {
        nlohmann::json jl = {{"kind", to_string(l.kind)}};
        if (l.kind == LayerKind::affine || l.kind == LayerKind::conv2d) {
            jl["in"] = l.in;
            jl["out"] = l.out;
        }
        if (l.kind == LayerKind::conv2d) {
            jl["kernel"] = l.kernel;
            jl["stride"] = l.stride;
        }
        if (l.kind == LayerKind::dropout) jl["rate"] = l.rate;
        spec["layers"].push_back(jl);
    }
    nlohmann::json params = nlohmann::json::array();
    for (const LayerParams& p : model.params().layers) {
        if (p.weight.empty()) {
            params.push_back(nullptr);
        } else {
            params.push_back({{"weight", tensor_json(p.weight)}, {"bias", tensor_json(p.bias)}});
        }
    }
    const TrainingMetadata& m = model.metadata();
    nlohmann::json j = {{"format", kModelFormat},
                        {"spec", spec},
                        {"params", params},
                        {"metadata",
                         {{"seed", m.seed},
                          {"epochs", m.epochs},
                          {"train_accuracy", m.train_accuracy},
                          {"test_accuracy", m.test_accuracy},
                          {"dataset", m.dataset},
                          {"checksum", fmt::format("{:016x}", model.checksum())}}}};
    std::ofstream out(path);
    if (!out) throw Error(fmt::format("cannot write checkpoint {}", path.string()));
    out << j.dump() << '\n';
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open checkpoint {}", path.string()));
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(fmt::format("checkpoint {} is not valid JSON: {}", path.string(), e.what()));
    }
    if (j.value("format", std::string{}) != kModelFormat) {
        throw Error(fmt::format("checkpoint {} has format '{}', expected '{}'", path.string(),
                                j.value("format", std::string{"<none>"}), kModelFormat));
    }
    ModelSpec spec;
    spec.input_shape = j.at("spec").at("input_shape").get<Shape>();
    spec.num_classes = j.at("spec").at("num_classes").get<std::size_t>();
    for (const auto& jl : j.at("spec").at("layers")) {
        LayerSpec l;
        l.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
        l.in = jl.value("in", std::size_t{0});
        l.out = jl.value("out", std::size_t{0});
        l.kernel = jl.value("kernel", std::size_t{0});
        l.stride = jl.value("stride", std::size_t{1});
        l.rate = jl.value("rate", 0.0);
        spec.layers.push_back(l);
    }
    ModelParams params;
    for (const auto& jp : j.at("params")) {
        LayerParams p;
        if (!jp.is_null()) {
            p.weight = tensor_from_json(jp.at("weight"));
            p.bias = tensor_from_json(jp.at("bias"));
        }
        params.layers.push_back(std::move(p));
    }
    const auto& jm = j.at("metadata");
    TrainingMetadata meta;
    meta.seed = jm.value("seed", std::uint64_t{0});
    meta.epochs = jm.value("epochs", 0);
    meta.train_accuracy = jm.value("train_accuracy", 0.0);
    meta.test_accuracy = jm.value("test_accuracy", 0.0);
    meta.dataset = jm.value("dataset", std::string{});
    return Model(std::move(spec), std::move(params), std::move(meta));
}

}  // namespace advpocket
