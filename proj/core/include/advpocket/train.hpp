#pragma once

#include "advpocket/data.hpp"
#include "advpocket/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

namespace advpocket {

struct TrainingConfig {
    int epochs = 15;
    std::size_t batch_size = 32;
    double learning_rate = 0.02;
    double momentum = 0.9;
    double lr_decay = 0.9;  // per-epoch multiplicative decay
    std::uint64_t seed = 1;
};

/// Minibatch SGD with momentum on the cross-entropy of labels; dropout layers are sampled at their
/// spec rate during training only. Deterministic given `config.seed`. Throws NumericError on a
/// non-finite loss.
Model train(const ModelSpec& spec, const Dataset& train_set, const TrainingConfig& config,
            const Dataset* test_set = nullptr,
            const std::function<void(int epoch, double loss, double accuracy)>& on_epoch = {});

double accuracy(const Model& model, const Dataset& data);

/// JSON checkpoint: {"format": "advpocket-model/1", "spec": ..., "params": ..., "metadata": ...}.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

inline constexpr const char* kModelFormat = "advpocket-model/1";

}  // namespace advpocket
