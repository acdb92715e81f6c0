#pragma once

#include "advpocket/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace advpocket {

class Model;

/// Images in [0,1] stacked along the first axis, with integer labels.
struct Dataset {
    Tensor images;  // [N, ...sample shape]
    std::vector<int> labels;
    std::string split;
    std::string source;

    std::size_t size() const noexcept { return labels.size(); }
    Shape sample_shape() const;
    std::size_t sample_size() const;
    std::size_t num_classes() const;  // max label + 1

    Tensor image(std::size_t i) const;
    Dataset subset(const std::vector<std::size_t>& indices, std::string split_name) const;

    /// Throws DataError if labels or pixels violate the invariants.
    void validate(std::size_t classes) const;
};

/// Parse a pair of big-endian IDX files (magic 2051 images, 2049 labels). Pixels are scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Write `dataset` as an IDX pair; pixels are rounded to bytes.
void save_idx(const Dataset& dataset, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path);

/// Gaussian blobs (std 0.1) around 0.5 + separation * v_c, where v_c are centered simplex vertices
/// (or evenly spaced directions when dim < classes); clamped to [0,1].
Dataset synth_blobs(std::size_t n_per_class, std::size_t classes, std::size_t dim, double separation,
                    std::uint64_t seed);

/// Versioned binary container: magic "APDS", version, rank, shape, labels, float64 payload.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// FNV-1a digest of a file's bytes, hex-encoded.
std::string file_checksum(const std::filesystem::path& path);

/// Correctly classified, class-balanced evaluation images with an assigned attack target each.
struct PassSet {
    std::vector<std::size_t> indices;  // into the evaluation dataset
    std::vector<int> targets;
    std::uint64_t seed = 0;

    std::size_t size() const noexcept { return indices.size(); }
};

/// Draws `n` correctly classified images, spread evenly across classes (lower classes take the
/// remainder), from `candidates` (all of `dataset` when empty). Targets are uniform over wrong labels.
PassSet build_pass_set(const Model& model, const Dataset& dataset, std::size_t n, std::uint64_t seed,
                       const std::vector<std::size_t>& candidates = {});

/// Disjoint calibration / audit / evaluation index sets drawn from one test split.
struct EvaluationSplits {
    std::vector<std::size_t> calibration;
    std::vector<std::size_t> audit;
    std::vector<std::size_t> evaluation;
};

/// Shuffles [0, n) with `seed` and cuts it into consecutive blocks. Calibration and audit members are
/// restricted to correctly classified images when a model is given.
EvaluationSplits make_splits(const Dataset& test, std::size_t n_calibration, std::size_t n_audit,
                             std::uint64_t seed, const Model* model = nullptr);

}  // namespace advpocket
