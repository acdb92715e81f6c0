#include "advpocket/baselines.hpp"

#include "advpocket/error.hpp"
#include "advpocket/hash.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

namespace advpocket {

namespace {

// numpy-style "reflect": the edge pixel is not repeated.
std::ptrdiff_t reflect(std::ptrdiff_t i, std::ptrdiff_t n) {
    if (n == 1) return 0;
    const std::ptrdiff_t period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

struct ImageDims {
    std::size_t channels, rows, cols;
};

ImageDims image_dims(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw ShapeError(fmt::format("squeezing expects a [C,H,W] image, got {}", shape_string(s)));
    return {s[0], s[1], s[2]};
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const char* what) {
    if (!j.is_object()) throw ConfigError(fmt::format("{} must be a JSON object", what));
    for (const auto& item : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return item.key() == k; })) {
            throw ConfigError(fmt::format("unknown {} key '{}'", what, item.key()));
        }
    }
}

double squared_distance(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::filesystem::path& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
        throw DataError(DataError::Kind::truncated, fmt::format("{}: truncated KDE file", path.string()));
    }
    return v;
}

constexpr char kKdeMagic[4] = {'A', 'P', 'K', 'D'};
constexpr std::uint32_t kKdeVersion = 1;

}  // namespace

void SqueezeConfig::validate() const {
    if (median_window != 0 && (median_window < 3 || median_window % 2 == 0)) {
        throw ConfigError(fmt::format("median window {} must be odd and >= 3", median_window));
    }
    if (bit_depth != 0 && (bit_depth < 1 || bit_depth > 8)) {
        throw ConfigError(fmt::format("bit depth {} outside [1, 8]", bit_depth));
    }
    if (nlm) {
        if (nlm->patch % 2 == 0 || nlm->search % 2 == 0) throw ConfigError("NLM patch and search sizes must be odd");
        if (!(nlm->strength > 0.0)) throw ConfigError("NLM strength must be positive");
    }
}

std::size_t SqueezeConfig::transform_count() const noexcept {
    return (median_window != 0 ? 1 : 0) + (bit_depth != 0 ? 1 : 0) + (nlm ? 1 : 0);
}

void to_json(nlohmann::json& j, const SqueezeConfig& c) {
    j = {{"median_window", c.median_window}, {"bit_depth", c.bit_depth}};
    if (c.nlm) {
        j["nlm"] = {{"patch", c.nlm->patch}, {"search", c.nlm->search}, {"strength", c.nlm->strength}};
    } else {
        j["nlm"] = nullptr;
    }
}

void from_json(const nlohmann::json& j, SqueezeConfig& c) {
    check_keys(j, {"median_window", "bit_depth", "nlm"}, "squeeze");
    SqueezeConfig out;
    out.median_window = j.value("median_window", out.median_window);
    out.bit_depth = j.value("bit_depth", out.bit_depth);
    if (j.contains("nlm")) {
        const auto& n = j.at("nlm");
        if (n.is_null() || (n.is_boolean() && !n.get<bool>())) {
            out.nlm.reset();
        } else if (!n.is_boolean()) {
            check_keys(n, {"patch", "search", "strength"}, "nlm");
            NlmParams p;
            p.patch = n.value("patch", p.patch);
            p.search = n.value("search", p.search);
            p.strength = n.value("strength", p.strength);
            out.nlm = p;
        }
    }
    out.validate();
    c = out;
}

Tensor median_filter(const Tensor& x, std::size_t window, std::vector<std::size_t>* source) {
    const auto [C, H, W] = image_dims(x);
    if (window < 1 || window % 2 == 0) throw ConfigError(fmt::format("median window {} must be odd", window));
    const auto r = static_cast<std::ptrdiff_t>(window / 2);
    Tensor out(x.shape());
    if (source) source->assign(x.size(), 0);
    std::vector<std::pair<double, std::size_t>> buf;
    buf.reserve(window * window);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < H; ++i) {
            for (std::size_t j = 0; j < W; ++j) {
                buf.clear();
                for (std::ptrdiff_t di = -r; di <= r; ++di) {
                    const auto ii = static_cast<std::size_t>(reflect(static_cast<std::ptrdiff_t>(i) + di, H));
                    for (std::ptrdiff_t dj = -r; dj <= r; ++dj) {
                        const auto jj = static_cast<std::size_t>(reflect(static_cast<std::ptrdiff_t>(j) + dj, W));
                        const std::size_t idx = (c * H + ii) * W + jj;
                        buf.emplace_back(x[idx], idx);
                    }
                }
                auto mid = buf.begin() + static_cast<std::ptrdiff_t>(buf.size() / 2);
                std::nth_element(buf.begin(), mid, buf.end());
                const std::size_t o = (c * H + i) * W + j;
                out[o] = mid->first;
                if (source) (*source)[o] = mid->second;
            }
        }
    }
    return out;
}

Tensor bit_quantize(const Tensor& x, int bits) {
    if (bits < 1 || bits > 30) throw ConfigError(fmt::format("bit depth {} out of range", bits));
    const double levels = std::ldexp(1.0, bits) - 1.0;
    Tensor out = x;
    for (double& v : out.values()) v = std::clamp(std::round(v * levels) / levels, 0.0, 1.0);
    return out;
}

Tensor non_local_means(const Tensor& x, const NlmParams& params) {
    const auto [C, H, W] = image_dims(x);
    const auto pr = static_cast<std::ptrdiff_t>(params.patch / 2);
    const auto sr = static_cast<std::ptrdiff_t>(params.search / 2);
    const std::size_t plen = params.patch * params.patch;
    const double inv_h2 = 1.0 / (params.strength * params.strength);

    // Patch vectors for every pixel, gathered once.
    std::vector<double> patches(C * H * W * plen);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < H; ++i) {
            for (std::size_t j = 0; j < W; ++j) {
                double* p = &patches[((c * H + i) * W + j) * plen];
                for (std::ptrdiff_t di = -pr; di <= pr; ++di) {
                    const auto ii = static_cast<std::size_t>(reflect(static_cast<std::ptrdiff_t>(i) + di, H));
                    for (std::ptrdiff_t dj = -pr; dj <= pr; ++dj) {
                        const auto jj = static_cast<std::size_t>(reflect(static_cast<std::ptrdiff_t>(j) + dj, W));
                        *p++ = x[(c * H + ii) * W + jj];
                    }
                }
            }
        }
    }
    Tensor out(x.shape());
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < H; ++i) {
            for (std::size_t j = 0; j < W; ++j) {
                const double* pi = &patches[((c * H + i) * W + j) * plen];
                double num = 0.0;
                double den = 0.0;
                for (std::ptrdiff_t di = -sr; di <= sr; ++di) {
                    const auto ii = static_cast<std::size_t>(reflect(static_cast<std::ptrdiff_t>(i) + di, H));
                    for (std::ptrdiff_t dj = -sr; dj <= sr; ++dj) {
                        const auto jj = static_cast<std::size_t>(reflect(static_cast<std::ptrdiff_t>(j) + dj, W));
                        const std::size_t q = (c * H + ii) * W + jj;
                        const double d2 = squared_distance(pi, &patches[q * plen], plen) / static_cast<double>(plen);
                        const double w = std::exp(-d2 * inv_h2);
                        num += w * x[q];
                        den += w;
                    }
                }
                out[(c * H + i) * W + j] = std::clamp(num / den, 0.0, 1.0);
            }
        }
    }
    return out;
}

std::string to_string(SqueezeKind k) {
    switch (k) {
        case SqueezeKind::median: return "median";
        case SqueezeKind::bit_depth: return "bit_depth";
        case SqueezeKind::nlm: return "nlm";
    }
    return "unknown";
}

std::vector<SqueezedInput> squeeze_transforms(const Tensor& x, const SqueezeConfig& config) {
    config.validate();
    std::vector<SqueezedInput> out;
    if (config.median_window != 0) {
        SqueezedInput s{SqueezeKind::median, {}, {}};
        s.image = median_filter(x, config.median_window, &s.median_source);
        out.push_back(std::move(s));
    }
    if (config.bit_depth != 0) out.push_back({SqueezeKind::bit_depth, bit_quantize(x, config.bit_depth), {}});
    if (config.nlm) out.push_back({SqueezeKind::nlm, non_local_means(x, *config.nlm), {}});
    return out;
}

double fs_statistic(const Model& model, const Tensor& x, const SqueezeConfig& config) {
    if (config.transform_count() == 0) throw ConfigError("feature squeezing needs at least one transform");
    const std::vector<double> p = model.probabilities(x);
    double best = 0.0;
    for (const auto& s : squeeze_transforms(x, config)) best = std::max(best, l1_distance(p, model.probabilities(s.image)));
    return best;
}

void ArtifactsConfig::validate() const {
    if (!std::isfinite(kde_bandwidth)) throw ConfigError("KDE bandwidth must be finite");
    if (n_dropout_masks < 2) throw ConfigError(fmt::format("n_dropout_masks {} must be >= 2", n_dropout_masks));
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout rate outside [0, 1)");
}

void to_json(nlohmann::json& j, const ArtifactsConfig& c) {
    j = {{"kde_bandwidth", c.kde_bandwidth}, {"n_dropout_masks", c.n_dropout_masks}, {"dropout_rate", c.dropout_rate}};
}

void from_json(const nlohmann::json& j, ArtifactsConfig& c) {
    check_keys(j, {"kde_bandwidth", "n_dropout_masks", "dropout_rate"}, "artifacts");
    ArtifactsConfig out;
    out.kde_bandwidth = j.value("kde_bandwidth", out.kde_bandwidth);
    out.n_dropout_masks = j.value("n_dropout_masks", out.n_dropout_masks);
    out.dropout_rate = j.value("dropout_rate", out.dropout_rate);
    out.validate();
    c = out;
}

double median_heuristic_bandwidth(const std::vector<std::vector<double>>& rows, std::size_t max_points) {
    if (rows.size() < 2) throw ConfigError("median heuristic needs at least two points");
    const std::size_t stride = (rows.size() + max_points - 1) / std::max<std::size_t>(max_points, 1);
    std::vector<const std::vector<double>*> pts;
    for (std::size_t i = 0; i < rows.size(); i += std::max<std::size_t>(stride, 1)) pts.push_back(&rows[i]);
    std::vector<double> d;
    d.reserve(pts.size() * (pts.size() - 1) / 2);
    for (std::size_t a = 0; a < pts.size(); ++a) {
        for (std::size_t b = a + 1; b < pts.size(); ++b) {
            d.push_back(std::sqrt(squared_distance(pts[a]->data(), pts[b]->data(), pts[a]->size())));
        }
    }
    const double m = median(std::move(d));
    if (!(m > 0.0)) throw NumericError("median pairwise distance is zero; set the KDE bandwidth explicitly");
    return m;
}

KdeModel kde_fit(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                 std::size_t num_classes, double bandwidth) {
    if (features.size() != labels.size()) throw ShapeError("one label per feature row expected");
    if (features.empty()) throw DataError(DataError::Kind::insufficient, "KDE fit on an empty feature set");
    KdeModel kde;
    kde.dim = features.front().size();
    kde.bandwidth = bandwidth > 0.0 ? bandwidth : median_heuristic_bandwidth(features);
    kde.class_features.assign(num_classes, {});
    for (std::size_t i = 0; i < features.size(); ++i) {
        if (features[i].size() != kde.dim) throw ShapeError("feature rows differ in length");
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw DataError(DataError::Kind::bad_format, "label out of range");
        auto& bucket = kde.class_features[static_cast<std::size_t>(y)];
        bucket.insert(bucket.end(), features[i].begin(), features[i].end());
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (kde.class_features[c].empty()) {
            throw DataError(DataError::Kind::insufficient, fmt::format("no training features for class {}", c));
        }
    }
    return kde;
}

KdeModel kde_fit(const Model& model, const Dataset& train_set, double bandwidth) {
    std::vector<std::vector<double>> feats;
    feats.reserve(train_set.size());
    for (std::size_t i = 0; i < train_set.size(); ++i) feats.push_back(model.features(train_set.image(i)));
    KdeModel kde = kde_fit(feats, train_set.labels, model.num_classes(), bandwidth);
    kde.model_checksum = model.checksum();
    return kde;
}

double kde_log_density(const KdeModel& kde, std::span<const double> feature, std::size_t cls) {
    if (cls >= kde.num_classes()) throw ConfigError(fmt::format("KDE class {} out of range", cls));
    if (feature.size() != kde.dim) throw ShapeError("feature dimension differs from the KDE");
    const auto& pts = kde.class_features[cls];
    const std::size_t n = kde.count(cls);
    const double inv = 1.0 / (2.0 * kde.bandwidth * kde.bandwidth);
    std::vector<double> e(n);
    for (std::size_t i = 0; i < n; ++i) e[i] = -squared_distance(feature.data(), &pts[i * kde.dim], kde.dim) * inv;
    return log_sum_exp(e) - std::log(static_cast<double>(n));
}

double kde_density(const KdeModel& kde, std::span<const double> feature, std::size_t cls) {
    return std::exp(kde_log_density(kde, feature, cls));
}

KdeValue kde_density_with_gradient(const KdeModel& kde, std::span<const double> feature, std::size_t cls) {
    if (cls >= kde.num_classes()) throw ConfigError(fmt::format("KDE class {} out of range", cls));
    if (feature.size() != kde.dim) throw ShapeError("feature dimension differs from the KDE");
    const auto& pts = kde.class_features[cls];
    const std::size_t n = kde.count(cls);
    const double b2 = kde.bandwidth * kde.bandwidth;
    KdeValue out;
    out.gradient.assign(kde.dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* p = &pts[i * kde.dim];
        const double k = std::exp(-squared_distance(feature.data(), p, kde.dim) / (2.0 * b2)) / static_cast<double>(n);
        out.density += k;
        for (std::size_t d = 0; d < kde.dim; ++d) out.gradient[d] -= k * (feature[d] - p[d]) / b2;
    }
    return out;
}

void save_kde(const KdeModel& kde, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(DataError::Kind::io, fmt::format("cannot write {}", path.string()));
    out.write(kKdeMagic, 4);
    write_pod(out, kKdeVersion);
    write_pod(out, kde.bandwidth);
    write_pod(out, static_cast<std::uint64_t>(kde.dim));
    write_pod(out, kde.model_checksum);
    write_pod(out, static_cast<std::uint64_t>(kde.num_classes()));
    for (std::size_t c = 0; c < kde.num_classes(); ++c) write_pod(out, static_cast<std::uint64_t>(kde.count(c)));
    for (const auto& bucket : kde.class_features) {
        out.write(reinterpret_cast<const char*>(bucket.data()), static_cast<std::streamsize>(bucket.size() * sizeof(double)));
    }
    if (!out) throw DataError(DataError::Kind::io, fmt::format("write to {} failed", path.string()));
}

KdeModel load_kde(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(DataError::Kind::io, fmt::format("cannot open {}", path.string()));
    char magic[4];
    if (!in.read(magic, 4)) throw DataError(DataError::Kind::truncated, fmt::format("{}: truncated KDE file", path.string()));
    if (std::memcmp(magic, kKdeMagic, 4) != 0) {
        throw DataError(DataError::Kind::bad_magic, fmt::format("{} is not a KDE file", path.string()));
    }
    if (read_pod<std::uint32_t>(in, path) != kKdeVersion) {
        throw DataError(DataError::Kind::bad_format, fmt::format("{}: unsupported KDE version", path.string()));
    }
    KdeModel kde;
    kde.bandwidth = read_pod<double>(in, path);
    kde.dim = read_pod<std::uint64_t>(in, path);
    kde.model_checksum = read_pod<std::uint64_t>(in, path);
    const auto classes = read_pod<std::uint64_t>(in, path);
    if (classes > 1u << 20 || kde.dim > 1u << 24) throw DataError(DataError::Kind::bad_format, "implausible KDE header");
    std::vector<std::uint64_t> counts(classes);
    for (auto& n : counts) n = read_pod<std::uint64_t>(in, path);
    kde.class_features.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        kde.class_features[c].resize(counts[c] * kde.dim);
        const auto bytes = static_cast<std::streamsize>(kde.class_features[c].size() * sizeof(double));
        if (!in.read(reinterpret_cast<char*>(kde.class_features[c].data()), bytes)) {
            throw DataError(DataError::Kind::truncated, fmt::format("{}: truncated KDE payload", path.string()));
        }
    }
    return kde;
}

Uncertainty dropout_uncertainty(const Model& model, const Tensor& x, const ArtifactsConfig& config, Rng& rng) {
    config.validate();
    if (model.spec().dropout_layers().empty()) throw ConfigError("dropout uncertainty needs a model with dropout layers");
    const std::size_t N = static_cast<std::size_t>(config.n_dropout_masks);
    const std::size_t C = model.num_classes();
    std::vector<std::vector<double>> probs;
    probs.reserve(N);
    for (std::size_t n = 0; n < N; ++n) {
        const DropoutMask mask = sample_dropout_mask(model.spec(), config.dropout_rate, rng());
        probs.push_back(model.probabilities(x, &mask));
    }
    Uncertainty u;
    u.mu.assign(C, 0.0);
    for (const auto& p : probs) {
        for (std::size_t c = 0; c < C; ++c) u.mu[c] += p[c] / static_cast<double>(N);
    }
    for (const auto& p : probs) {
        for (std::size_t c = 0; c < C; ++c) u.trace_sigma += (p[c] - u.mu[c]) * (p[c] - u.mu[c]);
    }
    u.trace_sigma /= static_cast<double>(N - 1);
    return u;
}

BaselineStats compute_baseline_stats(const Model& model, const Tensor& x, const SqueezeConfig& squeeze,
                                     const KdeModel& kde, const ArtifactsConfig& artifacts, std::uint64_t seed,
                                     std::uint64_t input_id) {
    BaselineStats s;
    s.fs = fs_statistic(model, x, squeeze);
    const ForwardPass pass = model.forward(x);
    s.predicted = argmax(pass.logits);
    s.log_density = kde_log_density(kde, pass.features(model).values(), s.predicted);
    Rng rng = make_rng(seed, {stream::dropout, input_id});
    s.trace_sigma = dropout_uncertainty(model, x, artifacts, rng).trace_sigma;
    return s;
}

std::string to_string(BaselineKind k) { return k == BaselineKind::artifacts ? "artifacts" : "feature_squeezing"; }

void to_json(nlohmann::json& j, const BaselineThresholds& t) {
    j = {{"kind", to_string(t.kind)},
         {"t_fs", t.t_fs},
         {"t_log_density", t.t_log_density},
         {"t_trace", t.t_trace},
         {"target_fpr", t.target_fpr},
         {"achieved_fpr", t.achieved_fpr},
         {"calibration_size", t.calibration_size},
         {"model_checksum", hex64(t.model_checksum)}};
}

void from_json(const nlohmann::json& j, BaselineThresholds& t) {
    check_keys(j, {"kind", "t_fs", "t_log_density", "t_trace", "target_fpr", "achieved_fpr", "calibration_size", "model_checksum"},
               "baseline thresholds");
    BaselineThresholds out;
    try {
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "artifacts") {
            out.kind = BaselineKind::artifacts;
        } else if (kind == "feature_squeezing") {
            out.kind = BaselineKind::feature_squeezing;
        } else {
            throw ConfigError(fmt::format("unknown baseline kind '{}'", kind));
        }
        out.t_fs = j.value("t_fs", 0.0);
        out.t_log_density = j.value("t_log_density", 0.0);
        out.t_trace = j.value("t_trace", 0.0);
        out.target_fpr = j.at("target_fpr").get<double>();
        out.achieved_fpr = j.value("achieved_fpr", 0.0);
        out.calibration_size = j.value("calibration_size", std::size_t{0});
        out.model_checksum = parse_hex64(j.at("model_checksum").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("malformed baseline thresholds: {}", e.what()));
    }
    t = out;
}

BaselineThresholds calibrate_baseline(BaselineKind kind, const std::vector<BaselineStats>& clean, double target_fpr,
                                      std::uint64_t model_checksum) {
    std::vector<std::vector<double>> scores;
    if (kind == BaselineKind::feature_squeezing) {
        scores.resize(1);
        for (const auto& s : clean) scores[0].push_back(s.fs);
    } else {
        scores.resize(2);
        for (const auto& s : clean) {
            scores[0].push_back(-s.log_density);
            scores[1].push_back(s.trace_sigma);
        }
    }
    const QuantileCalibration q = calibrate_shared_quantile(scores, target_fpr);
    BaselineThresholds t;
    t.kind = kind;
    if (kind == BaselineKind::feature_squeezing) {
        t.t_fs = q.thresholds[0];
    } else {
        t.t_log_density = -q.thresholds[0];
        t.t_trace = q.thresholds[1];
    }
    t.target_fpr = target_fpr;
    t.achieved_fpr = q.achieved_fpr;
    t.calibration_size = clean.size();
    t.model_checksum = model_checksum;
    return t;
}

BaselineVerdict baseline_detect(const BaselineStats& stats, const BaselineThresholds& thresholds) {
    BaselineVerdict v;
    if (thresholds.kind == BaselineKind::feature_squeezing) {
        if (stats.fs > thresholds.t_fs) v.reasons.emplace_back("fs");
    } else {
        if (stats.log_density < thresholds.t_log_density) v.reasons.emplace_back("density");
        if (stats.trace_sigma > thresholds.t_trace) v.reasons.emplace_back("uncertainty");
    }
    v.is_adversarial = !v.reasons.empty();
    return v;
}

BaselineVerdict baseline_detect(const BaselineStats& stats, const BaselineThresholds& thresholds,
                                std::uint64_t model_checksum) {
    if (thresholds.model_checksum != model_checksum) {
        throw CalibrationError(fmt::format("{} thresholds were calibrated for model {}, not {}", to_string(thresholds.kind),
                                           hex64(thresholds.model_checksum), hex64(model_checksum)));
    }
    return baseline_detect(stats, thresholds);
}

}  // namespace advpocket
