#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <cstring>
#include <set>

#include "ssp/data/dataset.hpp"

using namespace ssp;
using namespace ssp::data;

namespace {

std::vector<std::uint8_t> random_records(std::size_t n, Philox& rng, std::size_t pixels = 3072) {
    std::vector<std::uint8_t> bytes;
    for (std::size_t r = 0; r < n; ++r) {
        bytes.push_back(static_cast<std::uint8_t>(rng.below(10)));
        for (std::size_t k = 0; k < pixels; ++k) bytes.push_back(static_cast<std::uint8_t>(rng.below(256)));
    }
    return bytes;
}

Tensor random_batch(std::size_t n, std::size_t c, std::size_t h, std::size_t w, Philox& rng) {
    std::vector<float> v(n * c * h * w);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return Tensor({n, c, h, w}, std::move(v));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin(),
                                                 [](float x, float y) { return std::memcmp(&x, &y, sizeof x) == 0; });
}

}  // namespace

TEST(Cifar, TwoRecordFixtureParsesExactly) {
    // Record 0: label 0, pixel k = k mod 256. Record 1: label 9, pixel k = 255 - (k mod 256).
    std::vector<std::uint8_t> bytes;
    bytes.push_back(0);
    for (int k = 0; k < 3072; ++k) bytes.push_back(static_cast<std::uint8_t>(k % 256));
    bytes.push_back(9);
    for (int k = 0; k < 3072; ++k) bytes.push_back(static_cast<std::uint8_t>(255 - k % 256));

    const Dataset d = parse_cifar10_binary(bytes);
    ASSERT_EQ(d.size(), 2u);
    EXPECT_EQ(d.labels, (std::vector<int>{0, 9}));
    EXPECT_EQ(d.shape, (ImageShape{3, 32, 32}));
    for (int k = 0; k < 3072; ++k) {
        ASSERT_EQ(d.image(0)[k], static_cast<float>(k % 256) / 255.0f);
        ASSERT_EQ(d.image(1)[k], static_cast<float>(255 - k % 256) / 255.0f);
    }
    // Plane layout: red plane first, then green, then blue, each row-major.
    EXPECT_EQ(d.image(0)[1024], static_cast<float>(1024 % 256) / 255.0f);
    EXPECT_EQ(d.image(0)[32 * 5 + 7], static_cast<float>((32 * 5 + 7) % 256) / 255.0f);
    EXPECT_EQ(d.image(1)[0], 1.0f);
    EXPECT_EQ(d.image(0)[0], 0.0f);
}

TEST(Cifar, RoundTripIsBitExact) {
    Philox rng(7);
    const auto bytes = random_records(25, rng);
    EXPECT_EQ(serialize_cifar10_binary(parse_cifar10_binary(bytes)), bytes);
}

TEST(Cifar, EmptyStreamIsEmptyDataset) {
    const Dataset d = parse_cifar10_binary(std::span<const std::uint8_t>());
    EXPECT_EQ(d.size(), 0u);
    EXPECT_TRUE(d.images.empty());
}

TEST(Cifar, RejectsMalformedLengths) {
    for (std::size_t n : {1u, 3072u, 3074u, 2u * 3073u - 1u}) {
        std::vector<std::uint8_t> bytes(n, 0);
        EXPECT_THROW(parse_cifar10_binary(bytes), DataError) << n;
    }
}

TEST(Cifar, RejectsLabelAboveNine) {
    Philox rng(8);
    auto bytes = random_records(3, rng);
    bytes[3073] = 10;
    try {
        parse_cifar10_binary(bytes);
        FAIL() << "label 10 accepted";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("record 1"), std::string::npos) << e.what();
    }
    bytes[3073] = 255;
    EXPECT_THROW(parse_cifar10_binary(bytes), DataError);
}

TEST(Cifar, MultipleFilesConcatenateInOrder) {
    Philox rng(9);
    const auto a = random_records(2, rng), b = random_records(3, rng);
    const Dataset d = parse_cifar10_binary(std::vector<std::vector<std::uint8_t>>{a, b});
    ASSERT_EQ(d.size(), 5u);
    std::vector<std::uint8_t> joined = a;
    joined.insert(joined.end(), b.begin(), b.end());
    EXPECT_EQ(serialize_cifar10_binary(d), joined);
}

TEST(Cifar, PositionalSplitOf50000Records) {
    // One-pixel records keep the fixture small; the split only looks at order.
    std::vector<std::uint8_t> bytes;
    for (std::size_t r = 0; r < 50000; ++r) {
        bytes.push_back(static_cast<std::uint8_t>(r % 10));
        bytes.push_back(static_cast<std::uint8_t>(r % 251));
    }
    const ImageShape one{1, 1, 1};
    const Dataset all = parse_cifar10_binary(bytes, one);
    const auto [train, val] = split_by_position(all, 5000);
    ASSERT_EQ(train.size(), 45000u);
    ASSERT_EQ(val.size(), 5000u);
    for (std::size_t r = 0; r < 45000; r += 997) EXPECT_EQ(train.image(r)[0], static_cast<float>(r % 251) / 255.0f);
    for (std::size_t r = 0; r < 5000; r += 97) {
        EXPECT_EQ(val.image(r)[0], static_cast<float>((45000 + r) % 251) / 255.0f);
        EXPECT_EQ(val.labels[r], static_cast<int>((45000 + r) % 10));
    }
    // No randomness: a second parse splits identically.
    const auto [train2, val2] = split_by_position(parse_cifar10_binary(bytes, one), 5000);
    EXPECT_EQ(train2.images, train.images);
    EXPECT_EQ(val2.labels, val.labels);
}

TEST(Cifar, LoadsDirectoryLayout) {
    const auto dir = std::filesystem::temp_directory_path() / "ssp_cifar_dir_test";
    std::filesystem::create_directories(dir);
    Philox rng(10);
    std::vector<std::uint8_t> all;
    for (int i = 1; i <= 5; ++i) {
        const auto part = random_records(4, rng);
        all.insert(all.end(), part.begin(), part.end());
        write_file(dir / ("data_batch_" + std::to_string(i) + ".bin"), part);
    }
    const auto test = random_records(3, rng);
    write_file(dir / "test_batch.bin", test);
    const SplitData s = load_cifar10_dir(dir, 5);
    EXPECT_EQ(s.train.size(), 15u);
    EXPECT_EQ(s.val.size(), 5u);
    EXPECT_EQ(s.test.size(), 3u);
    auto joined = serialize_cifar10_binary(s.train);
    const auto tail = serialize_cifar10_binary(s.val);
    joined.insert(joined.end(), tail.begin(), tail.end());
    EXPECT_EQ(joined, all);
    EXPECT_EQ(serialize_cifar10_binary(s.test), test);
    std::filesystem::remove_all(dir);
}

TEST(Cifar, MissingFileIsAnError) {
    EXPECT_THROW(load_cifar10_dir("/nonexistent/ssp/cifar"), DataError);
}

TEST(Normalization, TrainSplitIsStandardized) {
    SplitData s = make_synthetic_splits({});
    const ChannelStats after = channel_stats(s.train);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_GE(after.mean[c], -0.01);
        EXPECT_LE(after.mean[c], 0.01);
        EXPECT_GE(after.std[c], 0.99);
        EXPECT_LE(after.std[c], 1.01);
    }
}

TEST(Normalization, HandComputedStats) {
    // Two 1x1x2 images, values {0, 2} and {4, 6}: mean 3, population std sqrt(5).
    Dataset d{{1, 1, 2}, 2, {0, 2, 4, 6}, {0, 1}};
    const ChannelStats s = channel_stats(d);
    EXPECT_DOUBLE_EQ(s.mean[0], 3.0);
    EXPECT_DOUBLE_EQ(s.std[0], std::sqrt(5.0));
    normalize(d, s);
    EXPECT_FLOAT_EQ(d.images[0], static_cast<float>(-3.0 / std::sqrt(5.0)));
    EXPECT_FLOAT_EQ(d.images[3], static_cast<float>(3.0 / std::sqrt(5.0)));
}

TEST(Augment, EvalBatchesPassThroughBitwise) {
    Philox rng(11), data_rng(12);
    const Tensor x = random_batch(4, 3, 8, 8, data_rng);
    EXPECT_TRUE(bitwise_equal(augment(x, Split::Val, rng), x));
    EXPECT_TRUE(bitwise_equal(augment(x, Split::Test, rng), x));
}

TEST(Augment, FlipIsAnInvolution) {
    Philox rng(13);
    const Tensor x = random_batch(6, 3, 5, 7, rng);
    const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1};
    EXPECT_TRUE(bitwise_equal(flip_horizontal(flip_horizontal(x, mask), mask), x));
    const Tensor once = flip_horizontal(x, mask);
    EXPECT_EQ(once[0], x[6]);  // image 0, row 0: column 0 takes column 6
    EXPECT_EQ(once[5 * 7 * 3 + 2], x[5 * 7 * 3 + 2]);  // image 1 untouched
}

TEST(Augment, AllEightyOneCropOffsetsOccur) {
    Philox rng(14);
    std::set<std::pair<std::size_t, std::size_t>> seen;
    std::size_t flips = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        const auto d = draw_augmentation(rng);
        ASSERT_LE(d.dy, 8u);
        ASSERT_LE(d.dx, 8u);
        seen.emplace(d.dy, d.dx);
        flips += d.flip;
    }
    EXPECT_EQ(seen.size(), 81u);
    EXPECT_NEAR(static_cast<double>(flips) / draws, 0.5, 0.02);
}

TEST(Augment, CropMatchesPaddedReference) {
    Philox rng(15);
    const std::size_t h = 6, w = 5;
    const Tensor x = random_batch(1, 2, h, w, rng);
    for (std::size_t dy = 0; dy <= 8; ++dy) {
        for (std::size_t dx = 0; dx <= 8; ++dx) {
            for (bool flip : {false, true}) {
                const AugmentDraw d{dy, dx, flip};
                const Tensor out = apply_augmentation(x, std::span<const AugmentDraw>(&d, 1));
                // Reference: build the zero-padded image explicitly, then crop and mirror.
                const std::size_t hp = h + 8, wp = w + 8;
                for (std::size_t c = 0; c < 2; ++c) {
                    std::vector<float> padded(hp * wp, 0.0f);
                    for (std::size_t y = 0; y < h; ++y)
                        for (std::size_t xx = 0; xx < w; ++xx) padded[(y + 4) * wp + xx + 4] = x[(c * h + y) * w + xx];
                    for (std::size_t y = 0; y < h; ++y) {
                        for (std::size_t xx = 0; xx < w; ++xx) {
                            const float want = padded[(y + dy) * wp + (xx + dx)];
                            const std::size_t col = flip ? w - 1 - xx : xx;
                            ASSERT_EQ(out[(c * h + y) * w + col], want) << dy << "," << dx << "," << flip;
                        }
                    }
                }
            }
        }
    }
}

TEST(Augment, CentredCropWithoutFlipIsIdentity) {
    Philox rng(16);
    const Tensor x = random_batch(2, 3, 4, 4, rng);
    const std::vector<AugmentDraw> d(2);
    EXPECT_TRUE(bitwise_equal(apply_augmentation(x, d), x));
}

TEST(Batching, EveryRecordOncePerPass) {
    Philox rng(17);
    Dataset d{{1, 1, 1}, 10, {}, {}};
    for (int i = 0; i < 23; ++i) {
        d.images.push_back(static_cast<float>(i));
        d.labels.push_back(i % 10);
    }
    BatchStream stream(d, 5, rng);
    EXPECT_EQ(stream.batches_per_pass(), 5u);
    for (int pass = 0; pass < 2; ++pass) {
        std::multiset<float> seen;
        for (std::size_t b = 0; b < stream.batches_per_pass(); ++b) {
            const Batch batch = stream.next();
            EXPECT_EQ(batch.images.dim(0), b + 1 < 5 ? 5u : 3u);
            for (std::size_t i = 0; i < batch.labels.size(); ++i) {
                seen.insert(batch.images[i]);
                EXPECT_EQ(batch.labels[i], static_cast<int>(batch.images[i]) % 10);
            }
        }
        EXPECT_EQ(seen.size(), 23u);
        EXPECT_EQ(std::set<float>(seen.begin(), seen.end()).size(), 23u);
    }
}

TEST(Batching, SequentialCoversInOrder) {
    Dataset d{{1, 1, 1}, 10, {0, 1, 2, 3, 4}, {0, 1, 2, 3, 4}};
    const auto batches = sequential_batches(d, 2);
    ASSERT_EQ(batches.size(), 3u);
    EXPECT_EQ(batches[2].labels, (std::vector<int>{4}));
    EXPECT_EQ(batches[1].images[1], 3.0f);
}

TEST(Synthetic, BalancedCounts) {
    SyntheticSpec spec;
    spec.n_classes = 4;
    spec.per_class = 256;
    Philox rng(18);
    const Dataset d = make_synthetic(spec, rng);
    ASSERT_EQ(d.size(), 1024u);
    std::vector<int> counts(4, 0);
    for (int l : d.labels) ++counts[static_cast<std::size_t>(l)];
    EXPECT_EQ(counts, (std::vector<int>(4, 256)));
}

TEST(Synthetic, SameSeedSameData) {
    SyntheticSpec spec;
    spec.per_class = 32;
    const SplitData a = make_synthetic_splits(spec), b = make_synthetic_splits(spec);
    EXPECT_EQ(a.train.images, b.train.images);
    EXPECT_EQ(a.val.labels, b.val.labels);
    EXPECT_EQ(a.test.images, b.test.images);
    spec.seed += 1;
    EXPECT_NE(make_synthetic_splits(spec).train.images, a.train.images);
}

TEST(Synthetic, DefaultSplitSizes) {
    const SplitData s = make_synthetic_splits({});
    EXPECT_EQ(s.train.size() + s.val.size(), 4096u);
    EXPECT_EQ(s.val.size(), 409u);
    EXPECT_EQ(s.test.size(), 8u * 128u);
    EXPECT_EQ(s.train.shape, (ImageShape{3, 16, 16}));
}

TEST(Synthetic, NearestTemplateOracleAbove95Percent) {
    SyntheticSpec spec;
    Philox rng(19);
    const Dataset d = make_synthetic(spec, rng);
    const auto templates = synthetic_templates(spec);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto img = d.image(i);
        double best = INFINITY;
        int arg = -1;
        for (std::size_t c = 0; c < templates.size(); ++c) {
            double dist = 0.0;
            for (std::size_t k = 0; k < img.size(); ++k) dist += (img[k] - templates[c][k]) * (img[k] - templates[c][k]);
            if (dist < best) {
                best = dist;
                arg = static_cast<int>(c);
            }
        }
        correct += arg == d.labels[i];
    }
    EXPECT_GT(static_cast<double>(correct) / static_cast<double>(d.size()), 0.95);
}

TEST(Synthetic, DumpsToBinaryFormat) {
    SyntheticSpec spec;
    spec.per_class = 4;
    Philox rng(20);
    const Dataset d = make_synthetic(spec, rng);
    const auto bytes = serialize_cifar10_binary(d);
    EXPECT_EQ(bytes.size(), d.size() * (1 + 3 * 16 * 16));
    const Dataset back = parse_cifar10_binary(bytes, spec.shape, spec.n_classes);
    EXPECT_EQ(back.labels, d.labels);
    for (std::size_t k = 0; k < d.images.size(); ++k) {
        ASSERT_NEAR(back.images[k], std::clamp(d.images[k], 0.0f, 1.0f), 0.5 / 255.0 + 1e-6);
    }
}
