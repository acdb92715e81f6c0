#include "advpocket/data.hpp"
#include "advpocket/error.hpp"
#include "advpocket/rng.hpp"
#include "advpocket/train.hpp"
#include "helpers.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace advpocket;
using namespace advpocket::testing;

namespace {

std::filesystem::path tmp(const std::string& name) { return std::filesystem::temp_directory_path() / ("advpocket_" + name); }

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST(Idx, HandWrittenBigEndianFilesParse) {
    // 2 images of 2x3, labels 7 and 1.
    write_bytes(tmp("img"), {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 255, 51, 0, 0, 0, 1, 2, 3, 4, 5, 6});
    write_bytes(tmp("lbl"), {0, 0, 8, 1, 0, 0, 0, 2, 7, 1});
    const Dataset d = load_idx(tmp("img"), tmp("lbl"));
    ASSERT_EQ(d.size(), 2u);
    EXPECT_EQ(d.sample_shape(), (Shape{1, 2, 3}));
    EXPECT_EQ(d.labels, (std::vector<int>{7, 1}));
    EXPECT_DOUBLE_EQ(d.images[1], 1.0);
    EXPECT_DOUBLE_EQ(d.images[2], 0.2);
    EXPECT_DOUBLE_EQ(d.images[11], 6.0 / 255.0);
}

TEST(Idx, MalformedFilesAreRejected) {
    write_bytes(tmp("lbl"), {0, 0, 8, 1, 0, 0, 0, 2, 7, 1});
    write_bytes(tmp("bad"), {0, 0, 8, 9, 0, 0, 0, 1});
    try {
        load_idx(tmp("bad"), tmp("lbl"));
        FAIL();
    } catch (const DataError& e) {
        EXPECT_EQ(e.kind(), DataError::Kind::bad_magic);
    }
    write_bytes(tmp("short"), {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3, 1, 2, 3});
    try {
        load_idx(tmp("short"), tmp("lbl"));
        FAIL();
    } catch (const DataError& e) {
        EXPECT_EQ(e.kind(), DataError::Kind::truncated);
    }
    write_bytes(tmp("one"), {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 9});
    try {
        load_idx(tmp("one"), tmp("lbl"));
        FAIL();
    } catch (const DataError& e) {
        EXPECT_EQ(e.kind(), DataError::Kind::count_mismatch);
    }
    EXPECT_THROW(load_idx(tmp("missing_file"), tmp("lbl")), DataError);
}

TEST(Idx, SaveLoadRoundTripsBytePixels) {
    const Dataset d = synth_blobs(3, 3, 4, 0.3, 1);
    Dataset img = d;
    img.images = d.images.reshaped({d.size(), 1, 2, 2});
    for (auto& v : img.images.values()) v = std::round(v * 255.0) / 255.0;
    save_idx(img, tmp("rt_img"), tmp("rt_lbl"));
    const Dataset back = load_idx(tmp("rt_img"), tmp("rt_lbl"));
    EXPECT_EQ(back.labels, img.labels);
    for (std::size_t i = 0; i < img.images.size(); ++i) EXPECT_NEAR(back.images[i], img.images[i], 1e-15);
}

TEST(Dataset, BinaryContainerRoundTrip) {
    const Dataset d = synth_blobs(5, 2, 3, 0.2, 9);
    save_dataset(d, tmp("ds.apds"));
    const Dataset back = load_dataset(tmp("ds.apds"));
    EXPECT_EQ(back.images, d.images);
    EXPECT_EQ(back.labels, d.labels);
    EXPECT_EQ(file_checksum(tmp("ds.apds")).size(), 16u);
}

TEST(Splits, DisjointAndCorrectlyClassified) {
    const Dataset blobs = synth_blobs(60, 3, 5, 0.4, 2);
    TrainingConfig tc;
    tc.epochs = 3;
    const Model m = train(linear_spec(5, 3), blobs, tc);
    const EvaluationSplits s = make_splits(blobs, 40, 30, 7, &m);
    EXPECT_EQ(s.calibration.size(), 40u);
    EXPECT_EQ(s.audit.size(), 30u);
    std::set<std::size_t> all(s.calibration.begin(), s.calibration.end());
    all.insert(s.audit.begin(), s.audit.end());
    all.insert(s.evaluation.begin(), s.evaluation.end());
    EXPECT_EQ(all.size(), s.calibration.size() + s.audit.size() + s.evaluation.size());
    for (auto i : s.calibration) EXPECT_EQ(static_cast<int>(m.predict(blobs.image(i))), blobs.labels[i]);
    const EvaluationSplits again = make_splits(blobs, 40, 30, 7, &m);
    EXPECT_EQ(again.audit, s.audit);
}

TEST(PassSet, BalancedCorrectAndTargetsExcludeLabel) {
    const Dataset blobs = synth_blobs(50, 4, 6, 0.6, 3);
    TrainingConfig tc;
    tc.epochs = 10;
    const Model m = train(linear_spec(6, 4), blobs, tc);
    const PassSet p = build_pass_set(m, blobs, 22, 5);
    ASSERT_EQ(p.size(), 22u);
    std::vector<int> per_class(4, 0);
    for (std::size_t k = 0; k < p.size(); ++k) {
        const int y = blobs.labels[p.indices[k]];
        ++per_class[static_cast<std::size_t>(y)];
        EXPECT_EQ(static_cast<int>(m.predict(blobs.image(p.indices[k]))), y);
        EXPECT_NE(p.targets[k], y);
    }
    EXPECT_EQ(per_class, (std::vector<int>{6, 6, 5, 5}));
    EXPECT_THROW(build_pass_set(m, blobs, 1000, 5), DataError);
}

TEST(Rng, DerivedSeedsAreStableAndDistinct) {
    static_assert(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
    EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
    EXPECT_NE(derive_seed(1, {2}), derive_seed(2, {2}));
}

TEST(Model, CheckpointRoundTripAndForwardAgreement) {
    const Model m = random_model(small_conv_spec(), 4);
    save_model(m, tmp("m.json"));
    const Model back = load_model(tmp("m.json"));
    EXPECT_EQ(back.checksum(), m.checksum());
    const Tensor x = Tensor::filled(m.spec().input_shape, 0.4);
    EXPECT_EQ(back.probabilities(x), m.probabilities(x));
    DropoutMask ones = sample_dropout_mask(m.spec(), 0.0, 1);
    EXPECT_EQ(m.probabilities(x, &ones), m.probabilities(x));
}
