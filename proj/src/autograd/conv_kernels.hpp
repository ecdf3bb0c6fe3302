#pragma once

#include <cstddef>
#include <vector>

namespace ssp::autograd::kernels {

// Stride-1 NCHW convolution geometry. The transposed convolution reuses the
// same three kernels with the roles of input and output swapped.
struct ConvGeometry {
    std::size_t batch = 0;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t in_h = 0, in_w = 0;
    std::size_t out_h = 0, out_w = 0;
    std::size_t kernel = 0;
    std::size_t padding = 0;
    std::size_t dilation = 1;
    std::size_t groups = 1;

    std::size_t in_per_group() const { return in_channels / groups; }
    std::size_t out_per_group() const { return out_channels / groups; }
};

/// out = conv(in, weight); out is overwritten.
void conv_forward(const ConvGeometry& g, const float* in, const float* weight, float* out);

/// grad_in += conv^T(grad_out, weight).
void conv_backward_data(const ConvGeometry& g, const float* grad_out, const float* weight, float* grad_in);

/// grad_weight += correlation of in with grad_out (64-bit accumulation).
void conv_backward_weight(const ConvGeometry& g, const float* in, const float* grad_out, float* grad_weight);

}  // namespace ssp::autograd::kernels
