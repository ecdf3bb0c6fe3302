#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ssp/autograd/ops.hpp"
#include "ssp/autograd/optim.hpp"
#include "ssp/controller/controller.hpp"
#include "ssp/layers/operations.hpp"
#include "ssp/rng.hpp"
#include "ssp/space/search_space.hpp"

namespace ssp::supernet {

using autograd::Parameter;
using autograd::Tensor;
using controller::ArchitectureSample;
using layers::Mode;

struct SupernetConfig {
    std::size_t num_layers = 12;
    std::size_t out_filters = 36;
    std::size_t n_classes = 10;
    std::size_t in_channels = 3;
    double keep_prob = 0.9;  // drop-path on skip branches while training
};

/// Architecture does not fit the bank (wrong layer count, bad index, bad
/// skip mask).
class ArchError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite loss. `layer()` is the first layer whose output holds a NaN or
/// infinity: -1 for the stem, num_layers for the classifier head.
class ChildNanError : public std::runtime_error {
public:
    ChildNanError(const std::string& message, int layer) : std::runtime_error(message), layer_(layer) {}
    int layer() const { return layer_; }

private:
    int layer_;
};

/// One parameter set per (layer, action slot), plus the stem, one batch norm
/// per layer applied after skip aggregation, and the classifier head.
class SharedBank {
public:
    SharedBank(const space::SearchSpace& space, SupernetConfig config, Philox& init_rng);
    SharedBank(const SharedBank&) = delete;
    SharedBank& operator=(const SharedBank&) = delete;

    const SupernetConfig& config() const { return config_; }
    const space::SearchSpace& space() const { return space_; }

    layers::OperationModule& slot(std::size_t layer, std::size_t action);
    const layers::OperationModule& slot(std::size_t layer, std::size_t action) const;

    std::vector<Parameter*> parameters();
    /// Stem, layer norms, head and the chosen slot of every layer.
    std::vector<Parameter*> parameters_for(const ArchitectureSample& arch);
    std::size_t parameter_count() const;

    void validate(const ArchitectureSample& arch) const;

private:
    friend struct ForwardPass;

    struct LayerNorm {
        Parameter gamma, beta;
        autograd::BatchNormStats stats;
    };

    space::SearchSpace space_;
    SupernetConfig config_;
    Parameter stem_weight_, stem_gamma_, stem_beta_;
    autograd::BatchNormStats stem_stats_;
    std::vector<std::vector<layers::OperationModule>> slots_;  // [layer][action]
    std::vector<LayerNorm> norms_;
    Parameter head_weight_, head_bias_;
};

struct ForwardOptions {
    autograd::Tape* tape = nullptr;
    Mode mode = Mode::Train;
    Philox* rng = nullptr;
    bool update_stats = false;
    /// Keep probability for skip branches in training mode; 1 disables.
    double skip_keep_prob = 1.0;
};

struct ChildOutput {
    Tensor logits;  // (batch, n_classes)
    Tensor loss;    // scalar mean cross-entropy
    double accuracy = 0.0;
};

/// Layer ℓ: out_ℓ = BN_ℓ(op_ℓ(out_{ℓ-1}) + Σ_{j: skip(j→ℓ)} out_j), with
/// out_{-1} the stem output. Head: global average pool then a dense layer.
ChildOutput child_forward(SharedBank& bank, const ArchitectureSample& arch, const Tensor& images,
                          std::span<const int> labels, const ForwardOptions& options);

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
double accuracy(const Tensor& logits, std::span<const int> labels);

struct TrainStepResult {
    double loss = 0.0;
    double accuracy = 0.0;
    autograd::StepReport step;
};

/// Training-mode forward with drop-path on skips, backward, and one clipped
/// SGD step on the parameters used by `arch`. Throws ChildNanError before
/// touching any weight if the loss is not finite.
TrainStepResult child_train_step(SharedBank& bank, const ArchitectureSample& arch, const Tensor& images,
                                 std::span<const int> labels, autograd::OptimizerState& opt, double learning_rate,
                                 Philox& rng);

/// One line per layer: `layer 3: op=dropout(p=1.0) skips=[0,1,0]`.
std::string format_architecture(const ArchitectureSample& arch, const space::SearchSpace& space);
/// Inverse of format_architecture. Each op maps to its first slot in the
/// action table.
ArchitectureSample parse_architecture(std::string_view text, const space::SearchSpace& space);

}  // namespace ssp::supernet
