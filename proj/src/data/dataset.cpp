#include "ssp/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

namespace ssp::data {

std::string_view split_name(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "unknown";
}

Tensor Dataset::gather(std::span<const std::size_t> indices, std::vector<int>* labels_out) const {
    const std::size_t px = shape.pixels();
    std::vector<float> out(indices.size() * px);
    if (labels_out) labels_out->clear();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const std::size_t i = indices[k];
        if (i >= size()) throw DataError("record index " + std::to_string(i) + " out of range");
        std::copy_n(images.begin() + static_cast<std::ptrdiff_t>(i * px), px, out.begin() + static_cast<std::ptrdiff_t>(k * px));
        if (labels_out) labels_out->push_back(labels[i]);
    }
    return Tensor({indices.size(), shape.channels, shape.height, shape.width}, std::move(out));
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
    end = std::min(end, size());
    begin = std::min(begin, end);
    const std::size_t px = shape.pixels();
    Dataset out{shape, n_classes, {}, {}};
    out.images.assign(images.begin() + static_cast<std::ptrdiff_t>(begin * px),
                      images.begin() + static_cast<std::ptrdiff_t>(end * px));
    out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
}

// ---- CIFAR-10 binary format ----------------------------------------------

Dataset parse_cifar10_binary(std::span<const std::uint8_t> bytes, ImageShape shape, std::size_t n_classes) {
    const std::size_t record = 1 + shape.pixels();
    if (bytes.size() % record != 0) {
        throw DataError("stream length " + std::to_string(bytes.size()) + " is not a multiple of the " +
                        std::to_string(record) + "-byte record size");
    }
    const std::size_t n = bytes.size() / record;
    Dataset out{shape, n_classes, std::vector<float>(n * shape.pixels()), std::vector<int>(n)};
    for (std::size_t r = 0; r < n; ++r) {
        const std::uint8_t* rec = bytes.data() + r * record;
        if (rec[0] >= n_classes) {
            throw DataError("record " + std::to_string(r) + " has label " + std::to_string(rec[0]) + ", expected 0.." +
                            std::to_string(n_classes - 1));
        }
        out.labels[r] = rec[0];
        float* dst = out.images.data() + r * shape.pixels();
        for (std::size_t k = 0; k < shape.pixels(); ++k) dst[k] = static_cast<float>(rec[1 + k]) / 255.0f;
    }
    return out;
}

Dataset parse_cifar10_binary(const std::vector<std::vector<std::uint8_t>>& files, ImageShape shape,
                             std::size_t n_classes) {
    Dataset all{shape, n_classes, {}, {}};
    for (const auto& file : files) {
        Dataset part = parse_cifar10_binary(std::span<const std::uint8_t>(file), shape, n_classes);
        all.images.insert(all.images.end(), part.images.begin(), part.images.end());
        all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
    }
    return all;
}

std::vector<std::uint8_t> serialize_cifar10_binary(const Dataset& dataset) {
    const std::size_t px = dataset.shape.pixels();
    std::vector<std::uint8_t> out;
    out.reserve(dataset.size() * (px + 1));
    for (std::size_t r = 0; r < dataset.size(); ++r) {
        if (dataset.labels[r] < 0 || dataset.labels[r] > 255) {
            throw DataError("label " + std::to_string(dataset.labels[r]) + " does not fit in a byte");
        }
        out.push_back(static_cast<std::uint8_t>(dataset.labels[r]));
        for (float v : dataset.image(r)) {
            const double b = std::clamp(std::round(static_cast<double>(v) * 255.0), 0.0, 255.0);
            out.push_back(static_cast<std::uint8_t>(b));
        }
    }
    return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + path.string());
}

std::pair<Dataset, Dataset> split_by_position(const Dataset& all, std::size_t n_val) {
    if (n_val > all.size()) {
        throw DataError("validation size " + std::to_string(n_val) + " exceeds " + std::to_string(all.size()) +
                        " records");
    }
    const std::size_t n_train = all.size() - n_val;
    return {all.slice(0, n_train), all.slice(n_train, all.size())};
}

SplitData load_cifar10_dir(const std::filesystem::path& dir, std::size_t n_val) {
    std::vector<std::vector<std::uint8_t>> train_files;
    for (int i = 1; i <= 5; ++i) train_files.push_back(read_file(dir / ("data_batch_" + std::to_string(i) + ".bin")));
    SplitData out;
    auto [train, val] = split_by_position(parse_cifar10_binary(train_files), n_val);
    out.train = std::move(train);
    out.val = std::move(val);
    out.test = parse_cifar10_binary(std::span<const std::uint8_t>(read_file(dir / "test_batch.bin")));
    return out;
}

// ---- normalization -------------------------------------------------------

ChannelStats channel_stats(const Dataset& dataset) {
    const auto [c, h, w] = dataset.shape;
    ChannelStats stats{std::vector<double>(c, 0.0), std::vector<double>(c, 1.0)};
    if (dataset.size() == 0) return stats;
    const std::size_t plane = h * w;
    const double count = static_cast<double>(dataset.size() * plane);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (std::size_t n = 0; n < dataset.size(); ++n) {
            const float* p = dataset.images.data() + (n * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) sum += p[k];
        }
        const double mean = sum / count;
        double sq = 0.0;
        for (std::size_t n = 0; n < dataset.size(); ++n) {
            const float* p = dataset.images.data() + (n * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) sq += (p[k] - mean) * (p[k] - mean);
        }
        stats.mean[ch] = mean;
        stats.std[ch] = std::sqrt(sq / count);
        if (stats.std[ch] == 0.0) stats.std[ch] = 1.0;
    }
    return stats;
}

void normalize(Dataset& dataset, const ChannelStats& stats) {
    const auto [c, h, w] = dataset.shape;
    if (stats.mean.size() != c || stats.std.size() != c) throw DataError("channel statistics do not match the images");
    const std::size_t plane = h * w;
    for (std::size_t n = 0; n < dataset.size(); ++n) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            float* p = dataset.images.data() + (n * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) p[k] = static_cast<float>((p[k] - stats.mean[ch]) / stats.std[ch]);
        }
    }
}

ChannelStats normalize_splits(SplitData& splits) {
    const ChannelStats stats = channel_stats(splits.train);
    normalize(splits.train, stats);
    normalize(splits.val, stats);
    normalize(splits.test, stats);
    return stats;
}

// ---- augmentation --------------------------------------------------------

AugmentDraw draw_augmentation(Philox& rng) {
    AugmentDraw d;
    d.dy = static_cast<std::size_t>(rng.below(2 * kPad + 1));
    d.dx = static_cast<std::size_t>(rng.below(2 * kPad + 1));
    d.flip = rng.bernoulli(0.5);
    return d;
}

Tensor apply_augmentation(const Tensor& batch, std::span<const AugmentDraw> draws) {
    if (batch.rank() != 4 || draws.size() != batch.dim(0)) {
        throw DataError("augmentation needs one draw per image of an (N, C, H, W) batch");
    }
    const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    std::vector<float> out(batch.numel(), 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& d = draws[i];
        if (d.dy > 2 * kPad || d.dx > 2 * kPad) throw DataError("crop offset outside the padded image");
        for (std::size_t ch = 0; ch < c; ++ch) {
            const float* src = batch.data() + (i * c + ch) * h * w;
            float* dst = out.data() + (i * c + ch) * h * w;
            for (std::size_t y = 0; y < h; ++y) {
                // Row y of the crop is padded row y + dy, i.e. source row y + dy - kPad.
                const auto sy = static_cast<std::ptrdiff_t>(y + d.dy) - static_cast<std::ptrdiff_t>(kPad);
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t x = 0; x < w; ++x) {
                    const auto sx = static_cast<std::ptrdiff_t>(x + d.dx) - static_cast<std::ptrdiff_t>(kPad);
                    if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                    const std::size_t tx = d.flip ? w - 1 - x : x;
                    dst[y * w + tx] = src[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)];
                }
            }
        }
    }
    return Tensor(batch.shape(), std::move(out));
}

Tensor flip_horizontal(const Tensor& batch, std::span<const std::uint8_t> mask) {
    if (batch.rank() != 4 || mask.size() != batch.dim(0)) throw DataError("flip mask must have one entry per image");
    const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    std::vector<float> out(batch.values().begin(), batch.values().end());
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        for (std::size_t r = 0; r < c * h; ++r) {
            float* row = out.data() + (i * c * h + r) * w;
            std::reverse(row, row + w);
        }
    }
    return Tensor(batch.shape(), std::move(out));
}

Tensor augment(const Tensor& batch, Split split, Philox& rng) {
    if (split != Split::Train) return batch;
    std::vector<AugmentDraw> draws(batch.dim(0));
    for (auto& d : draws) d = draw_augmentation(rng);
    return apply_augmentation(batch, draws);
}

// ---- batching ------------------------------------------------------------

BatchStream::BatchStream(const Dataset& dataset, std::size_t batch_size, Philox rng, bool shuffle)
    : dataset_(&dataset), batch_size_(batch_size), rng_(rng), shuffle_(shuffle), order_(dataset.size()) {
    if (batch_size == 0) throw DataError("batch size must be positive");
    if (dataset.size() == 0) throw DataError("cannot batch an empty dataset");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
}

void BatchStream::reshuffle() {
    if (!shuffle_) return;
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
}

std::size_t BatchStream::batches_per_pass() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

Batch BatchStream::next() {
    if (cursor_ >= order_.size()) {
        cursor_ = 0;
        reshuffle();
    }
    const std::size_t end = std::min(cursor_ + batch_size_, order_.size());
    Batch b;
    b.images = dataset_->gather(std::span<const std::size_t>(order_).subspan(cursor_, end - cursor_), &b.labels);
    cursor_ = end;
    return b;
}

std::vector<Batch> sequential_batches(const Dataset& dataset, std::size_t batch_size) {
    if (batch_size == 0) throw DataError("batch size must be positive");
    std::vector<Batch> out;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
        idx.resize(std::min(batch_size, dataset.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        Batch b;
        b.images = dataset.gather(idx, &b.labels);
        out.push_back(std::move(b));
    }
    return out;
}

// ---- synthetic data ------------------------------------------------------

namespace {

// Class colours in [0.2, 0.8]^C, spread out by rejection: a candidate must be
// at least `gap` from every accepted colour; the gap shrinks if the cube gets
// crowded.
std::vector<std::vector<double>> class_colours(std::size_t n_classes, std::size_t channels, Philox& rng) {
    std::vector<std::vector<double>> colours;
    double gap = 0.45;
    std::size_t rejected = 0;
    while (colours.size() < n_classes) {
        std::vector<double> c(channels);
        for (auto& v : c) v = 0.2 + 0.6 * rng.uniform();
        bool far = true;
        for (const auto& other : colours) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < channels; ++k) d2 += (c[k] - other[k]) * (c[k] - other[k]);
            far = far && d2 >= gap * gap;
        }
        if (far) {
            colours.push_back(std::move(c));
        } else if (++rejected % 200 == 0) {
            gap *= 0.9;
        }
    }
    return colours;
}

}  // namespace

std::vector<std::vector<float>> synthetic_templates(const SyntheticSpec& spec) {
    Philox rng = Philox(spec.seed).split(0);
    const auto [c, h, w] = spec.shape;
    const auto colours = class_colours(spec.n_classes, c, rng);
    std::vector<std::vector<float>> templates(spec.n_classes, std::vector<float>(spec.shape.pixels()));
    constexpr int kWaves = 3;
    for (std::size_t cls = 0; cls < spec.n_classes; ++cls) {
        auto& t = templates[cls];
        for (std::size_t ch = 0; ch < c; ++ch) {
            double fy[kWaves], fx[kWaves], phase[kWaves];
            for (int k = 0; k < kWaves; ++k) {
                fy[k] = static_cast<double>(rng.below(3));
                fx[k] = static_cast<double>(rng.below(3));
                phase[k] = 2.0 * std::numbers::pi * rng.uniform();
            }
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    double v = 0.0;
                    for (int k = 0; k < kWaves; ++k) {
                        v += std::cos(2.0 * std::numbers::pi * (fy[k] * static_cast<double>(y) / static_cast<double>(h) +
                                                                fx[k] * static_cast<double>(x) / static_cast<double>(w)) +
                                      phase[k]);
                    }
                    const double value = colours[cls][ch] + v / (3.0 * kWaves);
                    t[(ch * h + y) * w + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
                }
            }
        }
    }
    return templates;
}

Dataset make_synthetic(const SyntheticSpec& spec, Philox& rng) {
    if (spec.n_classes == 0) throw DataError("synthetic data needs at least one class");
    const auto templates = synthetic_templates(spec);
    const std::size_t n = spec.n_classes * spec.per_class, px = spec.shape.pixels();
    Dataset out{spec.shape, spec.n_classes, std::vector<float>(n * px), std::vector<int>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = i % spec.n_classes;
        out.labels[i] = static_cast<int>(cls);
        float* dst = out.images.data() + i * px;
        for (std::size_t k = 0; k < px; ++k) dst[k] = templates[cls][k] + static_cast<float>(spec.noise * rng.normal());
    }
    return out;
}

SplitData make_synthetic_splits(const SyntheticSpec& spec) {
    Philox root(spec.seed);
    Philox train_rng = root.split(1), test_rng = root.split(2);
    const Dataset all = make_synthetic(spec, train_rng);
    const std::size_t n_val = spec.n_val ? spec.n_val : all.size() / 10;
    SplitData out;
    auto [train, val] = split_by_position(all, n_val);
    out.train = std::move(train);
    out.val = std::move(val);
    SyntheticSpec test_spec = spec;
    test_spec.per_class = spec.test_per_class;
    out.test = make_synthetic(test_spec, test_rng);
    normalize_splits(out);
    return out;
}

}  // namespace ssp::data
