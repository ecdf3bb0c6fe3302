#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssp/autograd/tensor.hpp"
#include "ssp/rng.hpp"

namespace ssp::data {

using autograd::Tensor;

enum class Split { Train, Val, Test };

std::string_view split_name(Split split);

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ImageShape {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;

    std::size_t pixels() const { return channels * height * width; }
    bool operator==(const ImageShape&) const = default;
};

/// Images stored contiguously in (N, C, H, W) order.
struct Dataset {
    ImageShape shape;
    std::size_t n_classes = 10;
    std::vector<float> images;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::span<const float> image(std::size_t i) const {
        return {images.data() + i * shape.pixels(), shape.pixels()};
    }
    /// Rows `indices` as an (n, C, H, W) tensor plus their labels.
    Tensor gather(std::span<const std::size_t> indices, std::vector<int>* labels_out) const;
    /// Records [begin, end).
    Dataset slice(std::size_t begin, std::size_t end) const;
};

struct SplitData {
    Dataset train, val, test;
};

// ---- CIFAR-10 binary format ----------------------------------------------

/// Record layout: one label byte, then the pixel bytes as C planes of H×W,
/// row-major. 3073 bytes per record for CIFAR-10.
Dataset parse_cifar10_binary(std::span<const std::uint8_t> bytes, ImageShape shape = {}, std::size_t n_classes = 10);
/// Concatenation of several streams, in order.
Dataset parse_cifar10_binary(const std::vector<std::vector<std::uint8_t>>& files, ImageShape shape = {},
                             std::size_t n_classes = 10);
/// Pixels are written as round(255·v) clamped to [0, 255].
std::vector<std::uint8_t> serialize_cifar10_binary(const Dataset& dataset);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Reads data_batch_1..5.bin and test_batch.bin from `dir` and splits the
/// training records by position: the last `n_val` become validation.
SplitData load_cifar10_dir(const std::filesystem::path& dir, std::size_t n_val = 5000);

/// First size − n_val records for training, the rest for validation.
std::pair<Dataset, Dataset> split_by_position(const Dataset& all, std::size_t n_val);

// ---- normalization -------------------------------------------------------

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> std;
};

ChannelStats channel_stats(const Dataset& dataset);
void normalize(Dataset& dataset, const ChannelStats& stats);
/// Statistics from the training split applied to all three splits.
ChannelStats normalize_splits(SplitData& splits);

// ---- augmentation --------------------------------------------------------

inline constexpr std::size_t kPad = 4;

struct AugmentDraw {
    std::size_t dy = kPad;  // crop origin in the padded image, 0..2·kPad
    std::size_t dx = kPad;
    bool flip = false;
};

AugmentDraw draw_augmentation(Philox& rng);
/// Zero-pad by kPad, crop back to H×W at (dy, dx), then mirror columns if
/// `flip`. One draw per image.
Tensor apply_augmentation(const Tensor& batch, std::span<const AugmentDraw> draws);
/// Mirror the columns of every image whose mask entry is set.
Tensor flip_horizontal(const Tensor& batch, std::span<const std::uint8_t> mask);
/// Training batches get a fresh draw per image; other splits pass through.
Tensor augment(const Tensor& batch, Split split, Philox& rng);

// ---- batching ------------------------------------------------------------

struct Batch {
    Tensor images;
    std::vector<int> labels;
};

/// Endless minibatch stream over one dataset: reshuffles at every pass and
/// keeps the final short batch of each pass.
class BatchStream {
public:
    BatchStream(const Dataset& dataset, std::size_t batch_size, Philox rng, bool shuffle = true);

    Batch next();
    std::size_t batches_per_pass() const;

private:
    void reshuffle();

    const Dataset* dataset_;
    std::size_t batch_size_;
    Philox rng_;
    bool shuffle_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

/// Consecutive batches over the whole dataset in record order.
std::vector<Batch> sequential_batches(const Dataset& dataset, std::size_t batch_size);

// ---- synthetic data ------------------------------------------------------

struct SyntheticSpec {
    std::size_t n_classes = 8;
    std::size_t per_class = 512;
    ImageShape shape{3, 16, 16};
    std::uint64_t seed = 69;
    double noise = 0.25;
    std::size_t test_per_class = 128;
    /// Validation records taken from the end of the generated set; 0 means
    /// a tenth of it, rounded down.
    std::size_t n_val = 0;
};

/// Per-class templates: a class colour per channel plus a smooth random
/// spatial pattern, all in [0, 1].
std::vector<std::vector<float>> synthetic_templates(const SyntheticSpec& spec);

/// `per_class` samples of every class, interleaved (sample i has class
/// i mod n_classes), each its template plus N(0, noise²) pixel noise.
Dataset make_synthetic(const SyntheticSpec& spec, Philox& rng);

/// Train/val from make_synthetic with a stream derived from the seed, test
/// from an independent stream; normalized with train statistics.
SplitData make_synthetic_splits(const SyntheticSpec& spec);

}  // namespace ssp::data
