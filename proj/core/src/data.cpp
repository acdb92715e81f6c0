#include "advpocket/data.hpp"

#include "advpocket/error.hpp"
#include "advpocket/model.hpp"
#include "advpocket/rng.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

namespace advpocket {

namespace {

constexpr std::uint32_t kImageMagic = 2051;
constexpr std::uint32_t kLabelMagic = 2049;
constexpr std::array<char, 4> kContainerMagic = {'A', 'P', 'D', 'S'};
constexpr std::uint32_t kContainerVersion = 1;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(DataError::Kind::io, fmt::format("cannot open {}", path.string()));
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::filesystem::path& path) {
    if (offset + 4 > bytes.size()) {
        throw DataError(DataError::Kind::truncated, fmt::format("{}: header truncated at byte {}", path.string(), offset));
    }
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
    const std::array<char, 4> b = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                                   static_cast<char>(v)};
    out.write(b.data(), 4);
}

template <typename T>
void write_raw(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const std::filesystem::path& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
        throw DataError(DataError::Kind::truncated, fmt::format("{}: unexpected end of file", path.string()));
    }
    return v;
}

}  // namespace

Shape Dataset::sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

std::size_t Dataset::sample_size() const { return shape_size(sample_shape()); }

std::size_t Dataset::num_classes() const {
    if (labels.empty()) return 0;
    return static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
}

Tensor Dataset::image(std::size_t i) const {
    const std::size_t n = sample_size();
    const auto first = images.values().begin() + static_cast<std::ptrdiff_t>(i * n);
    return Tensor(sample_shape(), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices, std::string split_name) const {
    const std::size_t n = sample_size();
    Shape shape = images.shape();
    shape[0] = indices.size();
    std::vector<double> data;
    data.reserve(indices.size() * n);
    Dataset out;
    for (std::size_t i : indices) {
        const auto first = images.values().begin() + static_cast<std::ptrdiff_t>(i * n);
        data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(n));
        out.labels.push_back(labels.at(i));
    }
    out.images = Tensor(std::move(shape), std::move(data));
    out.split = std::move(split_name);
    out.source = source;
    return out;
}

void Dataset::validate(std::size_t classes) const {
    if (images.shape().empty() || images.shape()[0] != labels.size()) {
        throw DataError(DataError::Kind::count_mismatch, "image and label counts differ");
    }
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= classes) {
            throw DataError(DataError::Kind::bad_format, fmt::format("label {} outside [0, {})", l, classes));
        }
    }
    for (double v : images.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw DataError(DataError::Kind::bad_format, "pixel outside [0,1]");
    }
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
    const auto img = read_file(images_path);
    const auto lab = read_file(labels_path);

    const std::uint32_t img_magic = read_be32(img, 0, images_path);
    if (img_magic != kImageMagic) {
        throw DataError(DataError::Kind::bad_magic, fmt::format("{}: magic {} is not an IDX image file ({})",
                                                                images_path.string(), img_magic, kImageMagic));
    }
    const std::uint32_t lab_magic = read_be32(lab, 0, labels_path);
    if (lab_magic != kLabelMagic) {
        throw DataError(DataError::Kind::bad_magic, fmt::format("{}: magic {} is not an IDX label file ({})",
                                                                labels_path.string(), lab_magic, kLabelMagic));
    }

    const std::size_t n_images = read_be32(img, 4, images_path);
    const std::size_t rows = read_be32(img, 8, images_path);
    const std::size_t cols = read_be32(img, 12, images_path);
    const std::size_t n_labels = read_be32(lab, 4, labels_path);

    if (img.size() < 16 + n_images * rows * cols) {
        throw DataError(DataError::Kind::truncated,
                        fmt::format("{}: header declares {} images of {}x{} but only {} payload bytes", images_path.string(),
                                    n_images, rows, cols, img.size() - 16));
    }
    if (lab.size() < 8 + n_labels) {
        throw DataError(DataError::Kind::truncated, fmt::format("{}: header declares {} labels but only {} bytes",
                                                                labels_path.string(), n_labels, lab.size() - 8));
    }
    if (n_images != n_labels) {
        throw DataError(DataError::Kind::count_mismatch,
                        fmt::format("{} images but {} labels", n_images, n_labels));
    }

    Dataset ds;
    std::vector<double> pixels(n_images * rows * cols);
    for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = img[16 + i] / 255.0;
    ds.images = Tensor({n_images, 1, rows, cols}, std::move(pixels));
    ds.labels.resize(n_labels);
    for (std::size_t i = 0; i < n_labels; ++i) ds.labels[i] = lab[8 + i];
    ds.split = images_path.stem().string();
    ds.source = images_path.string();
    return ds;
}

void save_idx(const Dataset& dataset, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path) {
    const Shape s = dataset.sample_shape();
    const std::size_t rows = s.size() >= 2 ? s[s.size() - 2] : 1;
    const std::size_t cols = s.empty() ? 1 : s.back();
    std::ofstream img(images_path, std::ios::binary);
    std::ofstream lab(labels_path, std::ios::binary);
    if (!img || !lab) throw DataError(DataError::Kind::io, "cannot open IDX output files");
    write_be32(img, kImageMagic);
    write_be32(img, static_cast<std::uint32_t>(dataset.size()));
    write_be32(img, static_cast<std::uint32_t>(rows));
    write_be32(img, static_cast<std::uint32_t>(cols));
    for (double v : dataset.images.values()) {
        img.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    }
    write_be32(lab, kLabelMagic);
    write_be32(lab, static_cast<std::uint32_t>(dataset.size()));
    for (int l : dataset.labels) lab.put(static_cast<char>(l));
}

Dataset synth_blobs(std::size_t n_per_class, std::size_t classes, std::size_t dim, double separation,
                    std::uint64_t seed) {
    if (dim < 1) throw ConfigError("synth_blobs: dim must be >= 1");
    if (classes < 2) throw ConfigError("synth_blobs: need at least two classes");
    constexpr double kPi = 3.14159265358979323846;

    std::vector<std::vector<double>> directions(classes, std::vector<double>(dim, 0.0));
    if (dim >= classes) {
        for (std::size_t c = 0; c < classes; ++c) {
            for (std::size_t d = 0; d < classes; ++d) {
                directions[c][d] = (c == d ? 1.0 : 0.0) - 1.0 / static_cast<double>(classes);
            }
        }
    } else if (dim == 1) {
        for (std::size_t c = 0; c < classes; ++c) {
            directions[c][0] = -0.5 + static_cast<double>(c) / static_cast<double>(classes - 1);
        }
    } else {
        for (std::size_t c = 0; c < classes; ++c) {
            const double angle = 2.0 * kPi * static_cast<double>(c) / static_cast<double>(classes);
            directions[c][0] = 0.5 * std::cos(angle);
            directions[c][1] = 0.5 * std::sin(angle);
        }
    }

    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, 0.1);
    Dataset ds;
    std::vector<double> data;
    data.reserve(n_per_class * classes * dim);
    for (std::size_t i = 0; i < n_per_class; ++i) {
        for (std::size_t c = 0; c < classes; ++c) {
            for (std::size_t d = 0; d < dim; ++d) {
                data.push_back(std::clamp(0.5 + separation * directions[c][d] + noise(rng), 0.0, 1.0));
            }
            ds.labels.push_back(static_cast<int>(c));
        }
    }
    ds.images = Tensor({n_per_class * classes, dim}, std::move(data));
    ds.split = "synthetic";
    ds.source = fmt::format("blobs(n={},C={},d={},sep={},seed={})", n_per_class, classes, dim, separation, seed);
    return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(DataError::Kind::io, fmt::format("cannot write {}", path.string()));
    out.write(kContainerMagic.data(), 4);
    write_raw(out, kContainerVersion);
    const auto rank = static_cast<std::uint32_t>(dataset.images.shape().size());
    write_raw(out, rank);
    for (std::size_t d : dataset.images.shape()) write_raw(out, static_cast<std::uint64_t>(d));
    const auto n_labels = static_cast<std::uint64_t>(dataset.labels.size());
    write_raw(out, n_labels);
    for (int l : dataset.labels) write_raw(out, static_cast<std::int32_t>(l));
    for (const std::string* s : {&dataset.split, &dataset.source}) {
        write_raw(out, static_cast<std::uint32_t>(s->size()));
        out.write(s->data(), static_cast<std::streamsize>(s->size()));
    }
    out.write(reinterpret_cast<const char*>(dataset.images.data()),
              static_cast<std::streamsize>(dataset.images.size() * sizeof(double)));
    if (!out) throw DataError(DataError::Kind::io, fmt::format("write to {} failed", path.string()));
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(DataError::Kind::io, fmt::format("cannot open {}", path.string()));
    std::array<char, 4> magic{};
    if (!in.read(magic.data(), 4) || magic != kContainerMagic) {
        throw DataError(DataError::Kind::bad_magic, fmt::format("{}: not a dataset container", path.string()));
    }
    const auto version = read_raw<std::uint32_t>(in, path);
    if (version != kContainerVersion) {
        throw DataError(DataError::Kind::bad_format,
                        fmt::format("{}: unsupported container version {}", path.string(), version));
    }
    const auto rank = read_raw<std::uint32_t>(in, path);
    if (rank == 0 || rank > 8) throw DataError(DataError::Kind::bad_format, "container rank out of range");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(read_raw<std::uint64_t>(in, path));
    const auto n_labels = read_raw<std::uint64_t>(in, path);
    if (n_labels != shape[0]) {
        throw DataError(DataError::Kind::count_mismatch,
                        fmt::format("{}: {} images but {} labels", path.string(), shape[0], n_labels));
    }
    Dataset ds;
    ds.labels.resize(n_labels);
    for (auto& l : ds.labels) l = read_raw<std::int32_t>(in, path);
    for (std::string* s : {&ds.split, &ds.source}) {
        const auto len = read_raw<std::uint32_t>(in, path);
        s->resize(len);
        if (!in.read(s->data(), len)) throw DataError(DataError::Kind::truncated, "container string truncated");
    }
    std::vector<double> data(shape_size(shape));
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)))) {
        throw DataError(DataError::Kind::truncated, fmt::format("{}: payload truncated", path.string()));
    }
    ds.images = Tensor(std::move(shape), std::move(data));
    return ds;
}

std::string file_checksum(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return fmt::format("{:016x}", h);
}

PassSet build_pass_set(const Model& model, const Dataset& dataset, std::size_t n, std::uint64_t seed,
                       const std::vector<std::size_t>& candidates) {
    const std::size_t classes = model.num_classes();
    std::vector<std::size_t> pool = candidates;
    if (pool.empty()) {
        pool.resize(dataset.size());
        std::iota(pool.begin(), pool.end(), std::size_t{0});
    }
    Rng rng = make_rng(seed, {stream::pass_target});
    std::shuffle(pool.begin(), pool.end(), rng);

    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i : pool) {
        const auto label = static_cast<std::size_t>(dataset.labels.at(i));
        if (label < classes && model.predict(dataset.image(i)) == label) by_class[label].push_back(i);
    }

    PassSet ps;
    ps.seed = seed;
    for (std::size_t c = 0; c < classes; ++c) {
        const std::size_t want = n / classes + (c < n % classes ? 1 : 0);
        if (by_class[c].size() < want) {
            throw DataError(DataError::Kind::insufficient,
                            fmt::format("class {} has {} correctly classified images, pass set needs {}", c,
                                        by_class[c].size(), want));
        }
        ps.indices.insert(ps.indices.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(want));
    }
    std::sort(ps.indices.begin(), ps.indices.end());
    std::uniform_int_distribution<std::size_t> pick(0, classes - 2);
    for (std::size_t i : ps.indices) {
        const auto label = static_cast<std::size_t>(dataset.labels[i]);
        std::size_t t = pick(rng);
        if (t >= label) ++t;
        ps.targets.push_back(static_cast<int>(t));
    }
    return ps;
}

EvaluationSplits make_splits(const Dataset& test, std::size_t n_calibration, std::size_t n_audit, std::uint64_t seed,
                             const Model* model) {
    std::vector<std::size_t> order(test.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(seed, {stream::split});
    std::shuffle(order.begin(), order.end(), rng);

    EvaluationSplits s;
    for (std::size_t i : order) {
        const bool eligible =
            model == nullptr || model->predict(test.image(i)) == static_cast<std::size_t>(test.labels[i]);
        if (eligible && s.calibration.size() < n_calibration) {
            s.calibration.push_back(i);
        } else if (eligible && s.audit.size() < n_audit) {
            s.audit.push_back(i);
        } else {
            s.evaluation.push_back(i);
        }
    }
    if (s.calibration.size() < n_calibration || s.audit.size() < n_audit) {
        throw DataError(DataError::Kind::insufficient,
                        fmt::format("test split yields {} calibration / {} audit images, need {} / {}",
                                    s.calibration.size(), s.audit.size(), n_calibration, n_audit));
    }
    return s;
}

}  // namespace advpocket
