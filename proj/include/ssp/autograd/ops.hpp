#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "ssp/autograd/tape.hpp"
#include "ssp/autograd/tensor.hpp"

namespace ssp::autograd {

// Differentiable primitives. Each one records a node on the tape of its
// inputs when any input is recorded; otherwise it is a plain computation.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor add_n(std::span<const Tensor> terms);

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
/// Natural log; inputs must be positive for a finite result.
Tensor log(const Tensor& x);
/// log(sigmoid(x)), evaluated stably.
Tensor log_sigmoid(const Tensor& x);

/// Row-wise log-softmax of a (rows, cols) tensor.
Tensor log_softmax(const Tensor& x);

/// Sum / mean of all elements to a scalar (64-bit accumulation).
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Single element of x as a scalar tensor.
Tensor pick(const Tensor& x, std::size_t index);
/// Row `row` of a (rows, cols) matrix as a (1, cols) tensor.
Tensor row(const Tensor& x, std::size_t row);
/// Concatenate (1, n_i) row vectors into a (1, Σ n_i) row vector.
Tensor concat_columns(std::span<const Tensor> parts);

/// (M,K)·(K,N) -> (M,N).
Tensor matmul(const Tensor& a, const Tensor& b);
/// x (N,F), weight (K,F), bias (K) -> (N,K).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Elementwise product with a constant mask (no gradient to the mask).
/// Where the mask is zero the output and the gradient are exactly +0.
Tensor mask_multiply(const Tensor& x, const Tensor& mask);
/// Elementwise sum with a constant offset (no gradient to the offset).
Tensor add_constant(const Tensor& x, const Tensor& offset);

struct ConvAttrs {
    std::size_t padding = 0;
    std::size_t dilation = 1;
    std::size_t groups = 1;
};

/// Stride-1 NCHW convolution. weight: (C_out, C_in / groups, K, K).
Tensor conv2d(const Tensor& x, const Tensor& weight, ConvAttrs attrs);

/// Stride-1 transposed convolution, the adjoint of conv2d with the same
/// kernel. weight: (C_in, C_out, K, K). Output spatial size is
/// H - 2·padding + dilation·(K-1).
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, ConvAttrs attrs);

struct BatchNormStats {
    std::vector<float> mean;
    std::vector<float> var;

    explicit BatchNormStats(std::size_t channels = 0) : mean(channels, 0.0f), var(channels, 1.0f) {}
};

struct BatchNormAttrs {
    bool training = true;
    float momentum = 0.9f;
    float eps = 1e-5f;
};

/// Per-channel batch normalization of NCHW input. In training mode the batch
/// statistics are used and, if `running` is non-null, folded into it as
/// running = momentum·running + (1-momentum)·batch.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats* running,
                  BatchNormAttrs attrs);

/// 3x3, stride 1, padding 1 pooling over NCHW input. Average pooling divides
/// by the number of in-bounds cells.
Tensor max_pool3(const Tensor& x);
Tensor avg_pool3(const Tensor& x);

/// (N,C,H,W) -> (N,C).
Tensor global_avg_pool(const Tensor& x);

/// Mean softmax cross-entropy of (N,K) logits against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// -------------------------------------------------------------------------
// Kind-based dispatch over the same primitives, used by generic tooling such
// as the gradient checker.

enum class Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    LogSigmoid,
    LogSoftmax,
    Sum,
    Mean,
    Pick,
    Row,
    ConcatColumns,
    Matmul,
    Linear,
    MaskMultiply,
    AddConstant,
    Conv2d,
    ConvTranspose2d,
    BatchNorm,
    MaxPool3,
    AvgPool3,
    GlobalAvgPool,
    SoftmaxCrossEntropy,
};

std::string_view primitive_name(Primitive kind);
std::vector<Primitive> all_primitives();

struct PrimitiveAttrs {
    float factor = 1.0f;
    std::size_t index = 0;
    ConvAttrs conv;
    BatchNormAttrs batch_norm;
    std::vector<int> labels;
    Tensor constant;
};

Tensor forward_primitive(Primitive kind, std::span<const Tensor> inputs, const PrimitiveAttrs& attrs = {});

}  // namespace ssp::autograd
