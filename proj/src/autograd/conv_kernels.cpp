#include "conv_kernels.hpp"

#include <algorithm>
#include <cstring>

#include <Eigen/Core>

namespace ssp::autograd::kernels {
namespace {

// Output rows/cols [lo, hi) for which input index out + offset is in range.
struct Span {
    std::size_t lo = 0;
    std::size_t hi = 0;
};

Span valid_span(std::ptrdiff_t offset, std::size_t out_len, std::size_t in_len) {
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -offset);
    const std::ptrdiff_t hi =
        std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out_len), static_cast<std::ptrdiff_t>(in_len) - offset);
    if (hi <= lo) return {};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Start of input row oh + dh; callers only read columns ow + dw in range.
std::size_t shifted_row(std::size_t oh, std::ptrdiff_t dh, std::size_t width) {
    return static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oh) + dh) * width;
}

std::ptrdiff_t tap_offset(const ConvGeometry& g, std::size_t k) {
    return static_cast<std::ptrdiff_t>(k * g.dilation) - static_cast<std::ptrdiff_t>(g.padding);
}

// Dense (single group) convolutions go through im2col and a GEMM:
// out_n (C_out × P) = W (C_out × C_in·k·k) · col_n (C_in·k·k × P).
using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

bool pointwise(const ConvGeometry& g) {
    return g.kernel == 1 && g.padding == 0 && g.in_h == g.out_h && g.in_w == g.out_w;
}

void im2col(const ConvGeometry& g, const float* in, float* col) {
    const std::size_t out_plane = g.out_h * g.out_w;
    const std::size_t in_plane = g.in_h * g.in_w;
    for (std::size_t ic = 0; ic < g.in_channels; ++ic) {
        const float* src = in + ic * in_plane;
        for (std::size_t kh = 0; kh < g.kernel; ++kh) {
            const auto dh = tap_offset(g, kh);
            const Span rows = valid_span(dh, g.out_h, g.in_h);
            for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                const auto dw = tap_offset(g, kw);
                const Span cols = valid_span(dw, g.out_w, g.in_w);
                float* dst = col + ((ic * g.kernel + kh) * g.kernel + kw) * out_plane;
                std::fill(dst, dst + out_plane, 0.0f);
                for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
                    const float* srow = src + shifted_row(oh, dh, g.in_w);
                    float* drow = dst + oh * g.out_w;
                    for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) drow[ow] = srow[static_cast<std::ptrdiff_t>(ow) + dw];
                }
            }
        }
    }
}

void col2im_add(const ConvGeometry& g, const float* col, float* in) {
    const std::size_t out_plane = g.out_h * g.out_w;
    const std::size_t in_plane = g.in_h * g.in_w;
    for (std::size_t ic = 0; ic < g.in_channels; ++ic) {
        float* dst = in + ic * in_plane;
        for (std::size_t kh = 0; kh < g.kernel; ++kh) {
            const auto dh = tap_offset(g, kh);
            const Span rows = valid_span(dh, g.out_h, g.in_h);
            for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                const auto dw = tap_offset(g, kw);
                const Span cols = valid_span(dw, g.out_w, g.in_w);
                const float* src = col + ((ic * g.kernel + kh) * g.kernel + kw) * out_plane;
                for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
                    const float* srow = src + oh * g.out_w;
                    float* drow = dst + shifted_row(oh, dh, g.in_w);
                    for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) drow[static_cast<std::ptrdiff_t>(ow) + dw] += srow[ow];
                }
            }
        }
    }
}

void gemm_forward(const ConvGeometry& g, const float* in, const float* weight, float* out) {
    const auto k = static_cast<Eigen::Index>(g.in_channels * g.kernel * g.kernel);
    const auto p = static_cast<Eigen::Index>(g.out_h * g.out_w);
    const auto co = static_cast<Eigen::Index>(g.out_channels);
    const ConstMap w(weight, co, k);
    std::vector<float> col(pointwise(g) ? 0 : static_cast<std::size_t>(k * p));
    for (std::size_t n = 0; n < g.batch; ++n) {
        const float* src = in + n * g.in_channels * g.in_h * g.in_w;
        if (!pointwise(g)) {
            im2col(g, src, col.data());
            src = col.data();
        }
        MutMap(out + n * g.out_channels * g.out_h * g.out_w, co, p).noalias() = w * ConstMap(src, k, p);
    }
}

void gemm_backward_data(const ConvGeometry& g, const float* grad_out, const float* weight, float* grad_in) {
    const auto k = static_cast<Eigen::Index>(g.in_channels * g.kernel * g.kernel);
    const auto p = static_cast<Eigen::Index>(g.out_h * g.out_w);
    const auto co = static_cast<Eigen::Index>(g.out_channels);
    const ConstMap w(weight, co, k);
    std::vector<float> col(static_cast<std::size_t>(k * p));
    for (std::size_t n = 0; n < g.batch; ++n) {
        const ConstMap gout(grad_out + n * g.out_channels * g.out_h * g.out_w, co, p);
        float* dst = grad_in + n * g.in_channels * g.in_h * g.in_w;
        if (pointwise(g)) {
            MutMap(dst, k, p).noalias() += w.transpose() * gout;
        } else {
            MutMap(col.data(), k, p).noalias() = w.transpose() * gout;
            col2im_add(g, col.data(), dst);
        }
    }
}

void gemm_backward_weight(const ConvGeometry& g, const float* in, const float* grad_out, float* grad_weight) {
    const auto k = static_cast<Eigen::Index>(g.in_channels * g.kernel * g.kernel);
    const auto p = static_cast<Eigen::Index>(g.out_h * g.out_w);
    const auto co = static_cast<Eigen::Index>(g.out_channels);
    std::vector<float> col(pointwise(g) ? 0 : static_cast<std::size_t>(k * p));
    RowMatrix partial(co, k);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> total =
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(co, k);
    // Per-sample products in float, summed across the batch in double.
    for (std::size_t n = 0; n < g.batch; ++n) {
        const float* src = in + n * g.in_channels * g.in_h * g.in_w;
        if (!pointwise(g)) {
            im2col(g, src, col.data());
            src = col.data();
        }
        partial.noalias() = ConstMap(grad_out + n * g.out_channels * g.out_h * g.out_w, co, p) *
                            ConstMap(src, k, p).transpose();
        total += partial.cast<double>();
    }
    MutMap(grad_weight, co, k) += total.cast<float>();
}

// Grouped convolutions (depthwise in practice) work on zero-padded planes
// laid out with row stride Wp = W + 2·pad. In that layout every tap is a
// constant offset, so each tap is one long contiguous loop; output rows are
// computed at stride Wp and the last Wp - out_w columns are discarded.
struct PaddedLayout {
    std::size_t hp, wp, span;  // span: flat length covering every valid output

    explicit PaddedLayout(const ConvGeometry& g)
        : hp(g.in_h + 2 * g.padding), wp(g.in_w + 2 * g.padding), span((g.out_h - 1) * wp + g.out_w) {}

    std::size_t offset(const ConvGeometry& g, std::size_t kh, std::size_t kw) const {
        return kh * g.dilation * wp + kw * g.dilation;
    }
};

void pad_plane(const ConvGeometry& g, const PaddedLayout& L, const float* src, float* dst) {
    std::fill(dst, dst + L.hp * L.wp, 0.0f);
    for (std::size_t h = 0; h < g.in_h; ++h) {
        std::copy(src + h * g.in_w, src + (h + 1) * g.in_w, dst + (h + g.padding) * L.wp + g.padding);
    }
}

void grouped_forward(const ConvGeometry& g, const float* in, const float* weight, float* out) {
    const PaddedLayout L(g);
    const std::size_t in_plane = g.in_h * g.in_w, out_plane = g.out_h * g.out_w, kk = g.kernel * g.kernel;
    std::vector<float> padded(g.in_channels * L.hp * L.wp);
    std::vector<float> acc(L.span);
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t ic = 0; ic < g.in_channels; ++ic) {
            pad_plane(g, L, in + (n * g.in_channels + ic) * in_plane, padded.data() + ic * L.hp * L.wp);
        }
        for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
            const std::size_t group = oc / g.out_per_group();
            std::fill(acc.begin(), acc.end(), 0.0f);
            float* __restrict a = acc.data();
            for (std::size_t icg = 0; icg < g.in_per_group(); ++icg) {
                const std::size_t ic = group * g.in_per_group() + icg;
                const float* w = weight + (oc * g.in_per_group() + icg) * kk;
                for (std::size_t kh = 0; kh < g.kernel; ++kh) {
                    for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                        const float wv = w[kh * g.kernel + kw];
                        const float* __restrict src = padded.data() + ic * L.hp * L.wp + L.offset(g, kh, kw);
                        for (std::size_t i = 0; i < L.span; ++i) a[i] += wv * src[i];
                    }
                }
            }
            float* dst = out + (n * g.out_channels + oc) * out_plane;
            for (std::size_t h = 0; h < g.out_h; ++h) std::copy_n(a + h * L.wp, g.out_w, dst + h * g.out_w);
        }
    }
}

void grouped_backward_data(const ConvGeometry& g, const float* grad_out, const float* weight, float* grad_in) {
    const PaddedLayout L(g);
    const std::size_t in_plane = g.in_h * g.in_w, out_plane = g.out_h * g.out_w, kk = g.kernel * g.kernel;
    std::vector<float> spread(L.span);        // grad_out at row stride wp
    std::vector<float> padded(L.hp * L.wp);   // gradient w.r.t. the padded input plane
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t ic = 0; ic < g.in_channels; ++ic) {
            const std::size_t group = ic / g.in_per_group();
            const std::size_t icg = ic % g.in_per_group();
            std::fill(padded.begin(), padded.end(), 0.0f);
            for (std::size_t ocg = 0; ocg < g.out_per_group(); ++ocg) {
                const std::size_t oc = group * g.out_per_group() + ocg;
                const float* src = grad_out + (n * g.out_channels + oc) * out_plane;
                std::fill(spread.begin(), spread.end(), 0.0f);
                for (std::size_t h = 0; h < g.out_h; ++h) std::copy_n(src + h * g.out_w, g.out_w, spread.data() + h * L.wp);
                const float* w = weight + (oc * g.in_per_group() + icg) * kk;
                const float* __restrict s = spread.data();
                for (std::size_t kh = 0; kh < g.kernel; ++kh) {
                    for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                        const float wv = w[kh * g.kernel + kw];
                        float* __restrict d = padded.data() + L.offset(g, kh, kw);
                        for (std::size_t i = 0; i < L.span; ++i) d[i] += wv * s[i];
                    }
                }
            }
            float* dst = grad_in + (n * g.in_channels + ic) * in_plane;
            for (std::size_t h = 0; h < g.in_h; ++h) {
                const float* row = padded.data() + (h + g.padding) * L.wp + g.padding;
                for (std::size_t w = 0; w < g.in_w; ++w) dst[h * g.in_w + w] += row[w];
            }
        }
    }
}

// Eight-lane float dot product folded into double.
double lane_dot(const float* a, const float* b, std::size_t n) {
    constexpr std::size_t lanes = 8;
    float acc[lanes] = {};
    std::size_t i = 0;
    for (; i + lanes <= n; i += lanes)
        for (std::size_t l = 0; l < lanes; ++l) acc[l] += a[i + l] * b[i + l];
    double total = 0.0;
    for (float v : acc) total += v;
    for (; i < n; ++i) total += static_cast<double>(a[i]) * b[i];
    return total;
}

void grouped_backward_weight(const ConvGeometry& g, const float* in, const float* grad_out, float* grad_weight) {
    const PaddedLayout L(g);
    const std::size_t in_plane = g.in_h * g.in_w, out_plane = g.out_h * g.out_w, kk = g.kernel * g.kernel;
    std::vector<float> padded(g.in_channels * L.hp * L.wp);
    std::vector<float> spread(L.span);
    std::vector<double> acc(g.out_channels * g.in_per_group() * kk, 0.0);
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t ic = 0; ic < g.in_channels; ++ic) {
            pad_plane(g, L, in + (n * g.in_channels + ic) * in_plane, padded.data() + ic * L.hp * L.wp);
        }
        for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
            const std::size_t group = oc / g.out_per_group();
            const float* src = grad_out + (n * g.out_channels + oc) * out_plane;
            std::fill(spread.begin(), spread.end(), 0.0f);
            for (std::size_t h = 0; h < g.out_h; ++h) std::copy_n(src + h * g.out_w, g.out_w, spread.data() + h * L.wp);
            for (std::size_t icg = 0; icg < g.in_per_group(); ++icg) {
                const std::size_t ic = group * g.in_per_group() + icg;
                double* a = acc.data() + (oc * g.in_per_group() + icg) * kk;
                for (std::size_t kh = 0; kh < g.kernel; ++kh) {
                    for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                        a[kh * g.kernel + kw] +=
                            lane_dot(spread.data(), padded.data() + ic * L.hp * L.wp + L.offset(g, kh, kw), L.span);
                    }
                }
            }
        }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) grad_weight[i] += static_cast<float>(acc[i]);
}

}  // namespace

void conv_forward(const ConvGeometry& g, const float* in, const float* weight, float* out) {
    if (g.groups == 1) {
        gemm_forward(g, in, weight, out);
    } else {
        grouped_forward(g, in, weight, out);
    }
}

void conv_backward_data(const ConvGeometry& g, const float* grad_out, const float* weight, float* grad_in) {
    if (g.groups == 1) {
        gemm_backward_data(g, grad_out, weight, grad_in);
    } else {
        grouped_backward_data(g, grad_out, weight, grad_in);
    }
}

void conv_backward_weight(const ConvGeometry& g, const float* in, const float* grad_out, float* grad_weight) {
    if (g.groups == 1) {
        gemm_backward_weight(g, in, grad_out, grad_weight);
    } else {
        grouped_backward_weight(g, in, grad_out, grad_weight);
    }
}

}  // namespace ssp::autograd::kernels
