#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ssp/autograd/ops.hpp"
#include "ssp/autograd/tape.hpp"
#include "ssp/layers/operation_spec.hpp"
#include "ssp/rng.hpp"

namespace ssp::layers {

using autograd::Parameter;
using autograd::Tensor;

enum class Mode { Train, Eval };

/// Everything a forward pass needs besides the input. With `tape` set,
/// parameters are watched so gradients reach them; `rng` is required
/// whenever a stochastic operation runs in training mode.
struct ForwardContext {
    autograd::Tape* tape = nullptr;
    Mode mode = Mode::Train;
    Philox* rng = nullptr;
    /// Fold training-mode batch statistics into running averages.
    bool update_stats = true;

    bool training() const { return mode == Mode::Train; }
    Tensor use(Parameter& param) const;
    autograd::BatchNormAttrs batch_norm_attrs() const;
};

// Kernels over NCHW batches. Rank-3 (C,H,W) inputs are accepted and treated
// as a batch of one.

Tensor identity_forward(const Tensor& x);

/// ReLU -> depthwise k×k -> pointwise 1×1 -> batch norm.
/// depthwise: (C,1,k,k); pointwise: (C_out,C,1,1); gamma, beta: (C_out).
Tensor sep_conv_forward(const Tensor& x, const Tensor& depthwise, const Tensor& pointwise, const Tensor& gamma,
                        const Tensor& beta, autograd::BatchNormStats* stats, autograd::BatchNormAttrs bn);

enum class PoolMode { Max, Avg };
Tensor pool_forward(const Tensor& x, PoolMode mode);

/// x + N(0, σ²) noise in training mode, x in eval mode.
Tensor gaussian_noise_forward(const Tensor& x, double sigma, Philox* rng, Mode mode);

/// Inverted dropout in training mode, x in eval mode. p = 1 yields exact
/// zeros with a zero gradient.
Tensor dropout_forward(const Tensor& x, double p, Philox* rng, Mode mode);

/// Stride-1 transposed convolution with padding (k-1)/2. weight: (C,C_out,k,k).
Tensor trans_conv_forward(const Tensor& x, const Tensor& weight);

/// Dilated convolution with the given padding and dilation. weight: (C_out,C,k,k).
Tensor stretched_conv_forward(const Tensor& x, const Tensor& weight, std::size_t padding, std::size_t dilation);

/// An operation instance with its own trainable weights and batch-norm
/// statistics, sized for a fixed channel count.
class OperationModule {
public:
    OperationModule(OperationSpec spec, std::size_t channels, Philox& init_rng, const std::string& name = "");

    Tensor forward(const Tensor& x, const ForwardContext& ctx);

    const OperationSpec& spec() const { return spec_; }
    std::size_t channels() const { return channels_; }
    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    autograd::BatchNormStats& batch_norm_stats() { return stats_; }

    /// Replace the weights so the operation passes its input through: center
    /// taps set to the identity matrix, batch norm γ=1, β=0.
    void set_identity_weights();

private:
    OperationSpec spec_;
    std::size_t channels_;
    std::vector<Parameter> params_;
    autograd::BatchNormStats stats_;
};

struct ProbeStats {
    double mean = 0.0;
    double std = 0.0;
    double zero_fraction = 0.0;
    double grad_norm = 0.0;      // ‖∂L/∂x‖ averaged over trials
    double input_std = 0.0;
    double upstream_norm = 0.0;  // ‖∂L/∂out‖ averaged over trials
};

struct ProbeOptions {
    std::size_t batch = 8;
    std::size_t channels = 4;
    std::size_t size = 8;
};

/// Runs `spec` in training mode on standard-normal inputs with identity
/// weights, back-propagating a standard-normal upstream gradient.
ProbeStats output_variance_probe(const OperationSpec& spec, std::size_t trials, Philox& rng,
                                 ProbeOptions options = {});

}  // namespace ssp::layers
