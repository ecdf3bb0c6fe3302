#include "ssp/autograd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "conv_kernels.hpp"

namespace ssp::autograd {
namespace {

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
    throw ShapeError(std::string(op) + ": " + detail);
}

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        shape_fail(op, "shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
}

void require_rank(std::string_view op, const Tensor& x, std::size_t rank, std::string_view what) {
    if (x.rank() != rank) {
        shape_fail(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                           shape_string(x.shape()));
    }
}

// Initializer lists copy their elements; build the result by moving.
template <typename... B>
std::vector<Buffer> buffers(B&&... parts) {
    std::vector<Buffer> out;
    out.reserve(sizeof...(parts));
    (out.push_back(std::forward<B>(parts)), ...);
    return out;
}

Buffer copy_of(const Tensor& t) { return Buffer(t.values().begin(), t.values().end()); }

// Record when any input is on a tape, otherwise return a plain tensor.
Tensor emit(Shape shape, Buffer values, std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
    if (Tape* tape = common_tape(inputs)) {
        return tape->record(std::move(shape), std::move(values), inputs, std::move(backward));
    }
    return Tensor(std::move(shape), std::move(values));
}

Tensor emit(Shape shape, Buffer values, const std::vector<const Tensor*>& inputs, BackwardFn backward) {
    if (Tape* tape = common_tape(inputs)) {
        return tape->record(std::move(shape), std::move(values), inputs, std::move(backward));
    }
    return Tensor(std::move(shape), std::move(values));
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
    Buffer out(x.numel());
    const auto in = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
    if (!common_tape({&x})) return Tensor(x.shape(), std::move(out));
    Tensor saved_in = x.detach();
    auto saved_out = std::make_shared<Buffer>(out);
    return emit(x.shape(), std::move(out), {&x}, [saved_in, saved_out, deriv](const Buffer& g, const std::vector<bool>&) {
        Buffer gx(g.size());
        const float* __restrict in = saved_in.data();
        const float* __restrict out = saved_out->data();
        const float* __restrict gr = g.data();
        float* __restrict dst = gx.data();
        const std::size_t n = g.size();
        for (std::size_t i = 0; i < n; ++i) dst[i] = gr[i] * deriv(in[i], out[i]);
        return buffers(std::move(gx));
    });
}

kernels::ConvGeometry conv_geometry(std::string_view op, const Tensor& x, const Tensor& w, ConvAttrs attrs) {
    require_rank(op, x, 4, "input");
    require_rank(op, w, 4, "weight");
    if (w.dim(2) != w.dim(3)) shape_fail(op, "kernel must be square, got " + shape_string(w.shape()));
    if (attrs.groups == 0 || attrs.dilation == 0) shape_fail(op, "groups and dilation must be positive");
    kernels::ConvGeometry g;
    g.batch = x.dim(0);
    g.in_channels = x.dim(1);
    g.in_h = x.dim(2);
    g.in_w = x.dim(3);
    g.out_channels = w.dim(0);
    g.kernel = w.dim(2);
    g.padding = attrs.padding;
    g.dilation = attrs.dilation;
    g.groups = attrs.groups;
    if (g.in_channels % g.groups || g.out_channels % g.groups) {
        shape_fail(op, "channels " + std::to_string(g.in_channels) + "->" + std::to_string(g.out_channels) +
                           " not divisible by groups " + std::to_string(g.groups));
    }
    if (w.dim(1) != g.in_per_group()) {
        shape_fail(op, "channel mismatch: input has " + std::to_string(g.in_channels) + " channels, weight " +
                           shape_string(w.shape()) + " expects " + std::to_string(w.dim(1) * g.groups));
    }
    const auto extent = static_cast<std::ptrdiff_t>(g.dilation * (g.kernel - 1));
    const auto oh = static_cast<std::ptrdiff_t>(g.in_h + 2 * g.padding) - extent;
    const auto ow = static_cast<std::ptrdiff_t>(g.in_w + 2 * g.padding) - extent;
    if (oh < 1 || ow < 1) {
        shape_fail(op, "kernel extent " + std::to_string(extent + 1) + " exceeds padded input " +
                           shape_string(x.shape()));
    }
    g.out_h = static_cast<std::size_t>(oh);
    g.out_w = static_cast<std::size_t>(ow);
    return g;
}

// Geometry of the ordinary convolution whose backward-data pass is the
// transposed convolution of x: the conv "output" is x, its "input" is the
// transposed result.
kernels::ConvGeometry transpose_geometry(std::string_view op, const Tensor& x, const Tensor& w, ConvAttrs attrs) {
    require_rank(op, x, 4, "input");
    require_rank(op, w, 4, "weight");
    if (attrs.groups != 1) shape_fail(op, "only groups=1 is supported");
    if (w.dim(2) != w.dim(3)) shape_fail(op, "kernel must be square, got " + shape_string(w.shape()));
    if (w.dim(0) != x.dim(1)) {
        shape_fail(op, "channel mismatch: input has " + std::to_string(x.dim(1)) + " channels, weight " +
                           shape_string(w.shape()) + " expects " + std::to_string(w.dim(0)));
    }
    kernels::ConvGeometry g;
    g.batch = x.dim(0);
    g.out_channels = x.dim(1);
    g.in_channels = w.dim(1);
    g.kernel = w.dim(2);
    g.padding = attrs.padding;
    g.dilation = attrs.dilation;
    g.out_h = x.dim(2);
    g.out_w = x.dim(3);
    const auto extent = static_cast<std::ptrdiff_t>(g.dilation * (g.kernel - 1));
    const auto ih = static_cast<std::ptrdiff_t>(g.out_h) - static_cast<std::ptrdiff_t>(2 * g.padding) + extent;
    const auto iw = static_cast<std::ptrdiff_t>(g.out_w) - static_cast<std::ptrdiff_t>(2 * g.padding) + extent;
    if (ih < 1 || iw < 1) shape_fail(op, "padding too large for input " + shape_string(x.shape()));
    g.in_h = static_cast<std::size_t>(ih);
    g.in_w = static_cast<std::size_t>(iw);
    return g;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    Buffer out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return emit(a.shape(), std::move(out), {&a, &b}, [](const Buffer& g, const std::vector<bool>& wanted) {
        return buffers(wanted[0] ? g : Buffer{}, wanted[1] ? g : Buffer{});
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    Buffer out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return emit(a.shape(), std::move(out), {&a, &b}, [](const Buffer& g, const std::vector<bool>& wanted) {
        Buffer gb;
        if (wanted[1]) {
            gb.resize(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
        }
        return buffers(wanted[0] ? g : Buffer{}, std::move(gb));
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    Buffer out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Tensor sa = a.detach(), sb = b.detach();
    return emit(a.shape(), std::move(out), {&a, &b}, [sa, sb](const Buffer& g, const std::vector<bool>& wanted) {
        Buffer ga, gb;
        if (wanted[0]) {
            ga.resize(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * sb[i];
        }
        if (wanted[1]) {
            gb.resize(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * sa[i];
        }
        return buffers(std::move(ga), std::move(gb));
    });
}

Tensor scale(const Tensor& x, float factor) {
    Buffer out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    return emit(x.shape(), std::move(out), {&x}, [factor](const Buffer& g, const std::vector<bool>&) {
        Buffer gx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * factor;
        return buffers(std::move(gx));
    });
}

Tensor add_n(std::span<const Tensor> terms) {
    if (terms.empty()) throw ShapeError("add_n: no terms");
    if (terms.size() == 1) return terms[0];
    std::vector<const Tensor*> inputs;
    Buffer out = copy_of(terms[0]);
    inputs.push_back(&terms[0]);
    for (std::size_t t = 1; t < terms.size(); ++t) {
        require_same_shape("add_n", terms[0], terms[t]);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += terms[t][i];
        inputs.push_back(&terms[t]);
    }
    const auto n = terms.size();
    return emit(terms[0].shape(), std::move(out), inputs, [n](const Buffer& g, const std::vector<bool>& wanted) {
        std::vector<Buffer> grads(n);
        for (std::size_t t = 0; t < n; ++t) {
            if (wanted[t]) grads[t] = g;
        }
        return grads;
    });
}

Tensor relu(const Tensor& x) {
    const std::size_t n = x.numel();
    Buffer out(n);
    {
        const float* __restrict in = x.data();
        float* __restrict dst = out.data();
        for (std::size_t i = 0; i < n; ++i) dst[i] = in[i] > 0.0f ? in[i] : 0.0f;
    }
    Tensor saved = x.detach();
    return emit(x.shape(), std::move(out), {&x}, [saved, n](const Buffer& g, const std::vector<bool>&) {
        Buffer gx(n);
        const float* __restrict in = saved.data();
        const float* __restrict gr = g.data();
        float* __restrict dst = gx.data();
        for (std::size_t i = 0; i < n; ++i) {
            const float m = in[i] > 0.0f ? 1.0f : 0.0f;
            dst[i] = gr[i] * m;
        }
        return buffers(std::move(gx));
    });
}

Tensor tanh(const Tensor& x) {
    return unary(
        x, [](float v) { return std::tanh(v); }, [](float, float out) { return 1.0f - out * out; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x, [](float v) { return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); },
        [](float, float out) { return out * (1.0f - out); });
}

Tensor exp(const Tensor& x) {
    return unary(
        x, [](float v) { return std::exp(v); }, [](float, float out) { return out; });
}

Tensor log(const Tensor& x) {
    return unary(
        x, [](float v) { return std::log(v); }, [](float in, float) { return 1.0f / in; });
}

Tensor log_sigmoid(const Tensor& x) {
    return unary(
        x,
        [](float v) {
            const double d = v;
            return static_cast<float>(d >= 0 ? -std::log1p(std::exp(-d)) : d - std::log1p(std::exp(d)));
        },
        [](float in, float) { return static_cast<float>(1.0 / (1.0 + std::exp(static_cast<double>(in)))); });
}

Tensor log_softmax(const Tensor& x) {
    require_rank("log_softmax", x, 2, "input");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    Buffer out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const float* in = x.data() + r * cols;
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) peak = std::max(peak, static_cast<double>(in[c]));
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += std::exp(in[c] - peak);
        const double lse = peak + std::log(total);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = static_cast<float>(in[c] - lse);
    }
    auto saved = std::make_shared<Buffer>(out);
    return emit(x.shape(), std::move(out), {&x}, [saved, rows, cols](const Buffer& g, const std::vector<bool>&) {
        Buffer gx(g.size());
        for (std::size_t r = 0; r < rows; ++r) {
            double gsum = 0.0;
            for (std::size_t c = 0; c < cols; ++c) gsum += g[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) {
                const auto i = r * cols + c;
                gx[i] = static_cast<float>(g[i] - std::exp(static_cast<double>((*saved)[i])) * gsum);
            }
        }
        return buffers(std::move(gx));
    });
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (float v : x.values()) total += v;
    const auto n = x.numel();
    return emit({1}, {static_cast<float>(total)}, {&x}, [n](const Buffer& g, const std::vector<bool>&) {
        return buffers(Buffer(n, g[0]));
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw ShapeError("mean: empty tensor");
    double total = 0.0;
    for (float v : x.values()) total += v;
    const auto n = x.numel();
    return emit({1}, {static_cast<float>(total / static_cast<double>(n))}, {&x},
                [n](const Buffer& g, const std::vector<bool>&) {
                    return buffers(Buffer(n, static_cast<float>(g[0] / static_cast<double>(n))));
                });
}

Tensor pick(const Tensor& x, std::size_t index) {
    if (index >= x.numel()) {
        shape_fail("pick", "index " + std::to_string(index) + " out of range for " + shape_string(x.shape()));
    }
    const auto n = x.numel();
    return emit({1}, {x[index]}, {&x}, [n, index](const Buffer& g, const std::vector<bool>&) {
        Buffer gx(n, 0.0f);
        gx[index] = g[0];
        return buffers(std::move(gx));
    });
}

Tensor row(const Tensor& x, std::size_t r) {
    require_rank("row", x, 2, "input");
    if (r >= x.dim(0)) shape_fail("row", "row " + std::to_string(r) + " out of range for " + shape_string(x.shape()));
    const std::size_t cols = x.dim(1);
    const auto n = x.numel();
    Buffer out(x.data() + r * cols, x.data() + (r + 1) * cols);
    return emit({1, cols}, std::move(out), {&x}, [n, r, cols](const Buffer& g, const std::vector<bool>&) {
        Buffer gx(n, 0.0f);
        std::copy(g.begin(), g.end(), gx.begin() + static_cast<std::ptrdiff_t>(r * cols));
        return buffers(std::move(gx));
    });
}

Tensor concat_columns(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_columns: no parts");
    std::vector<const Tensor*> inputs;
    std::vector<std::size_t> widths;
    Buffer out;
    for (const auto& p : parts) {
        require_rank("concat_columns", p, 2, "part");
        if (p.dim(0) != 1) shape_fail("concat_columns", "parts must be row vectors, got " + shape_string(p.shape()));
        out.insert(out.end(), p.values().begin(), p.values().end());
        widths.push_back(p.numel());
        inputs.push_back(&p);
    }
    const auto total = out.size();
    return emit({1, total}, std::move(out), inputs, [widths](const Buffer& g, const std::vector<bool>& wanted) {
        std::vector<Buffer> grads(widths.size());
        std::size_t offset = 0;
        for (std::size_t i = 0; i < widths.size(); ++i) {
            if (wanted[i]) grads[i].assign(g.begin() + static_cast<std::ptrdiff_t>(offset),
                                           g.begin() + static_cast<std::ptrdiff_t>(offset + widths[i]));
            offset += widths[i];
        }
        return grads;
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2, "lhs");
    require_rank("matmul", b, 2, "rhs");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        shape_fail("matmul", "inner dimensions differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    }
    Buffer out(m * n, 0.0f);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const float av = a[i * k + p];
            const float* brow = b.data() + p * n;
            float* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    Tensor sa = a.detach(), sb = b.detach();
    return emit({m, n}, std::move(out), {&a, &b}, [sa, sb, m, k, n](const Buffer& g, const std::vector<bool>& wanted) {
        Buffer ga, gb;
        if (wanted[0]) {
            ga.assign(m * k, 0.0f);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const float* brow = sb.data() + p * n;
                    const float* grow = g.data() + i * n;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(grow[j]) * brow[j];
                    ga[i * k + p] = static_cast<float>(acc);
                }
            }
        }
        if (wanted[1]) {
            gb.assign(k * n, 0.0f);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const float av = sa[i * k + p];
                    const float* grow = g.data() + i * n;
                    float* gbrow = gb.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
            }
        }
        return buffers(std::move(ga), std::move(gb));
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank("linear", x, 2, "input");
    require_rank("linear", weight, 2, "weight");
    const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    if (weight.dim(1) != in) {
        shape_fail("linear", "input features " + std::to_string(in) + " vs weight " + shape_string(weight.shape()));
    }
    if (bias.numel() != out_dim) {
        shape_fail("linear", "bias " + shape_string(bias.shape()) + " vs " + std::to_string(out_dim) + " outputs");
    }
    Buffer out(batch * out_dim);
    for (std::size_t b = 0; b < batch; ++b) {
        const float* xr = x.data() + b * in;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const float* wr = weight.data() + o * in;
            double acc = bias[o];
            for (std::size_t f = 0; f < in; ++f) acc += static_cast<double>(xr[f]) * wr[f];
            out[b * out_dim + o] = static_cast<float>(acc);
        }
    }
    Tensor sx = x.detach(), sw = weight.detach();
    return emit({batch, out_dim}, std::move(out), {&x, &weight, &bias},
                [sx, sw, batch, in, out_dim](const Buffer& g, const std::vector<bool>& wanted) {
                    Buffer gx, gw, gbias;
                    if (wanted[0]) {
                        gx.assign(batch * in, 0.0f);
                        for (std::size_t b = 0; b < batch; ++b) {
                            for (std::size_t o = 0; o < out_dim; ++o) {
                                const float gv = g[b * out_dim + o];
                                const float* wr = sw.data() + o * in;
                                float* gxr = gx.data() + b * in;
                                for (std::size_t f = 0; f < in; ++f) gxr[f] += gv * wr[f];
                            }
                        }
                    }
                    if (wanted[1]) {
                        gw.assign(out_dim * in, 0.0f);
                        for (std::size_t o = 0; o < out_dim; ++o) {
                            for (std::size_t f = 0; f < in; ++f) {
                                double acc = 0.0;
                                for (std::size_t b = 0; b < batch; ++b) {
                                    acc += static_cast<double>(g[b * out_dim + o]) * sx[b * in + f];
                                }
                                gw[o * in + f] = static_cast<float>(acc);
                            }
                        }
                    }
                    if (wanted[2]) {
                        gbias.assign(out_dim, 0.0f);
                        for (std::size_t o = 0; o < out_dim; ++o) {
                            double acc = 0.0;
                            for (std::size_t b = 0; b < batch; ++b) acc += g[b * out_dim + o];
                            gbias[o] = static_cast<float>(acc);
                        }
                    }
                    return buffers(std::move(gx), std::move(gw), std::move(gbias));
                });
}

Tensor mask_multiply(const Tensor& x, const Tensor& mask) {
    require_same_shape("mask_multiply", x, mask);
    Buffer out(x.numel());
    // Masked-out positions are exactly +0 in both directions.
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] == 0.0f ? 0.0f : x[i] * mask[i];
    Tensor m = mask.detach();
    return emit(x.shape(), std::move(out), {&x}, [m](const Buffer& g, const std::vector<bool>&) {
        Buffer gx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = m[i] == 0.0f ? 0.0f : g[i] * m[i];
        return buffers(std::move(gx));
    });
}

Tensor add_constant(const Tensor& x, const Tensor& offset) {
    require_same_shape("add_constant", x, offset);
    Buffer out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + offset[i];
    return emit(x.shape(), std::move(out), {&x},
                [](const Buffer& g, const std::vector<bool>&) { return buffers(g); });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, ConvAttrs attrs) {
    const auto g = conv_geometry("conv2d", x, weight, attrs);
    Buffer out(g.batch * g.out_channels * g.out_h * g.out_w);
    kernels::conv_forward(g, x.data(), weight.data(), out.data());
    Tensor sx = x.detach(), sw = weight.detach();
    return emit({g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out), {&x, &weight},
                [g, sx, sw](const Buffer& gout, const std::vector<bool>& wanted) {
                    Buffer gx, gw;
                    if (wanted[0]) {
                        gx.assign(sx.numel(), 0.0f);
                        kernels::conv_backward_data(g, gout.data(), sw.data(), gx.data());
                    }
                    if (wanted[1]) {
                        gw.assign(sw.numel(), 0.0f);
                        kernels::conv_backward_weight(g, sx.data(), gout.data(), gw.data());
                    }
                    return buffers(std::move(gx), std::move(gw));
                });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, ConvAttrs attrs) {
    const auto g = transpose_geometry("conv_transpose2d", x, weight, attrs);
    Buffer out(g.batch * g.in_channels * g.in_h * g.in_w, 0.0f);
    kernels::conv_backward_data(g, x.data(), weight.data(), out.data());
    Tensor sx = x.detach(), sw = weight.detach();
    return emit({g.batch, g.in_channels, g.in_h, g.in_w}, std::move(out), {&x, &weight},
                [g, sx, sw](const Buffer& gout, const std::vector<bool>& wanted) {
                    Buffer gx, gw;
                    if (wanted[0]) {
                        gx.assign(sx.numel(), 0.0f);
                        kernels::conv_forward(g, gout.data(), sw.data(), gx.data());
                    }
                    if (wanted[1]) {
                        gw.assign(sw.numel(), 0.0f);
                        kernels::conv_backward_weight(g, gout.data(), sx.data(), gw.data());
                    }
                    return buffers(std::move(gx), std::move(gw));
                });
}

namespace {

// Reductions over one contiguous plane with eight float lanes (so the loop
// vectorizes), folded into double at the end.
constexpr std::size_t kLanes = 8;

double lane_sum(const float* p, std::size_t n) {
    float acc[kLanes] = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        for (std::size_t l = 0; l < kLanes; ++l) acc[l] += p[i + l];
    double total = 0.0;
    for (float a : acc) total += a;
    for (; i < n; ++i) total += p[i];
    return total;
}

double lane_centered_squares(const float* p, std::size_t n, float mu) {
    float acc[kLanes] = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        for (std::size_t l = 0; l < kLanes; ++l) {
            const float d = p[i + l] - mu;
            acc[l] += d * d;
        }
    }
    double total = 0.0;
    for (float a : acc) total += a;
    for (; i < n; ++i) total += static_cast<double>(p[i] - mu) * (p[i] - mu);
    return total;
}

double lane_dot(const float* a, const float* b, std::size_t n) {
    float acc[kLanes] = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        for (std::size_t l = 0; l < kLanes; ++l) acc[l] += a[i + l] * b[i + l];
    double total = 0.0;
    for (float v : acc) total += v;
    for (; i < n; ++i) total += static_cast<double>(a[i]) * b[i];
    return total;
}

}  // namespace

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats* running,
                  BatchNormAttrs attrs) {
    require_rank("batch_norm", x, 4, "input");
    const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (gamma.numel() != channels || beta.numel() != channels) {
        shape_fail("batch_norm", "affine parameters " + shape_string(gamma.shape()) + "/" +
                                     shape_string(beta.shape()) + " vs " + std::to_string(channels) + " channels");
    }
    if (running && (running->mean.size() != channels || running->var.size() != channels)) {
        shape_fail("batch_norm", "running statistics sized for " + std::to_string(running->mean.size()) +
                                     " channels, input has " + std::to_string(channels));
    }
    const std::size_t count = batch * plane;
    Buffer out(x.numel());
    auto xhat = std::make_shared<Buffer>(x.numel());
    std::vector<float> inv_std(channels);

    for (std::size_t c = 0; c < channels; ++c) {
        double mu, var;
        if (attrs.training) {
            double s = 0.0;
            for (std::size_t n = 0; n < batch; ++n) s += lane_sum(x.data() + (n * channels + c) * plane, plane);
            mu = count ? s / static_cast<double>(count) : 0.0;
            double ss = 0.0;
            for (std::size_t n = 0; n < batch; ++n) {
                ss += lane_centered_squares(x.data() + (n * channels + c) * plane, plane, static_cast<float>(mu));
            }
            var = count ? ss / static_cast<double>(count) : 0.0;
            if (running) {
                const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
                running->mean[c] = static_cast<float>(attrs.momentum * running->mean[c] + (1.0 - attrs.momentum) * mu);
                running->var[c] =
                    static_cast<float>(attrs.momentum * running->var[c] + (1.0 - attrs.momentum) * unbiased);
            }
        } else {
            if (!running) shape_fail("batch_norm", "inference mode needs running statistics");
            mu = running->mean[c];
            var = running->var[c];
        }
        const float istd = static_cast<float>(1.0 / std::sqrt(var + attrs.eps));
        const float muf = static_cast<float>(mu);
        const float gc = gamma[c], bc = beta[c];
        inv_std[c] = istd;
        for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t base = (n * channels + c) * plane;
            const float* src = x.data() + base;
            float* h = xhat->data() + base;
            float* dst = out.data() + base;
            for (std::size_t i = 0; i < plane; ++i) {
                h[i] = (src[i] - muf) * istd;
                dst[i] = gc * h[i] + bc;
            }
        }
    }

    Tensor sg = gamma.detach();
    const bool training = attrs.training;
    return emit(x.shape(), std::move(out), {&x, &gamma, &beta},
                [xhat, inv_std, sg, batch, channels, plane, count, training](const Buffer& g,
                                                                              const std::vector<bool>& wanted) {
                    Buffer gx, ggamma(channels), gbeta(channels);
                    std::vector<double> dbeta(channels, 0.0), dgamma(channels, 0.0);
                    for (std::size_t c = 0; c < channels; ++c) {
                        for (std::size_t n = 0; n < batch; ++n) {
                            const std::size_t base = (n * channels + c) * plane;
                            dbeta[c] += lane_sum(g.data() + base, plane);
                            dgamma[c] += lane_dot(g.data() + base, xhat->data() + base, plane);
                        }
                        ggamma[c] = static_cast<float>(dgamma[c]);
                        gbeta[c] = static_cast<float>(dbeta[c]);
                    }
                    if (wanted[0]) {
                        gx.resize(g.size());
                        for (std::size_t c = 0; c < channels; ++c) {
                            const double k = static_cast<double>(sg[c]) * inv_std[c];
                            const double m = static_cast<double>(count);
                            // training: k/m·(m·g − Σg − x̂·Σg·x̂); inference: k·g
                            const float a = static_cast<float>(k);
                            const float b = training ? static_cast<float>(k * dbeta[c] / m) : 0.0f;
                            const float d = training ? static_cast<float>(k * dgamma[c] / m) : 0.0f;
                            for (std::size_t n = 0; n < batch; ++n) {
                                const std::size_t base = (n * channels + c) * plane;
                                const float* gr = g.data() + base;
                                const float* h = xhat->data() + base;
                                float* dst = gx.data() + base;
                                for (std::size_t i = 0; i < plane; ++i) dst[i] = a * gr[i] - b - d * h[i];
                            }
                        }
                    }
                    return buffers(std::move(gx), wanted[1] ? std::move(ggamma) : Buffer{},
                                               wanted[2] ? std::move(gbeta) : Buffer{});
                });
}

namespace {

// Sum over the clipped 3x3 neighbourhood of every cell of an h x w plane.
void box_sum3(const float* __restrict in, float* __restrict out, float* __restrict row, std::size_t h, std::size_t w) {
    for (std::size_t i = 0; i < h; ++i) {
        const float* src = in + i * w;
        float* dst = row + i * w;
        if (w == 1) {
            dst[0] = src[0];
            continue;
        }
        dst[0] = src[0] + src[1];
        for (std::size_t j = 1; j + 1 < w; ++j) dst[j] = src[j - 1] + src[j] + src[j + 1];
        dst[w - 1] = src[w - 2] + src[w - 1];
    }
    for (std::size_t i = 0; i < h; ++i) {
        const float* mid = row + i * w;
        const float* up = i ? mid - w : nullptr;
        const float* down = i + 1 < h ? mid + w : nullptr;
        float* dst = out + i * w;
        for (std::size_t j = 0; j < w; ++j) dst[j] = mid[j];
        if (up)
            for (std::size_t j = 0; j < w; ++j) dst[j] += up[j];
        if (down)
            for (std::size_t j = 0; j < w; ++j) dst[j] += down[j];
    }
}

std::vector<float> window_sizes(std::size_t h, std::size_t w) {
    std::vector<float> inv(h * w);
    for (std::size_t i = 0; i < h; ++i) {
        const std::size_t rows = std::min(i + 1, h - 1) - (i ? i - 1 : 0) + 1;
        for (std::size_t j = 0; j < w; ++j) {
            const std::size_t cols = std::min(j + 1, w - 1) - (j ? j - 1 : 0) + 1;
            inv[i * w + j] = 1.0f / static_cast<float>(rows * cols);
        }
    }
    return inv;
}

}  // namespace

Tensor max_pool3(const Tensor& x) {
    require_rank("max_pool3", x, 4, "input");
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), plane = h * w;
    // NaN never wins a comparison, matching the scan in the backward pass.
    auto pick = [](float best, float v) { return v > best ? v : best; };
    Buffer out(x.numel());
    std::vector<float> row(plane);
    for (std::size_t p = 0; p < planes; ++p) {
        const float* __restrict in = x.data() + p * plane;
        float* __restrict rb = row.data();
        for (std::size_t i = 0; i < h; ++i) {
            const float* src = in + i * w;
            float* dst = rb + i * w;
            dst[0] = pick(pick(-std::numeric_limits<float>::infinity(), src[0]), w > 1 ? src[1] : src[0]);
            for (std::size_t j = 1; j + 1 < w; ++j) {
                dst[j] = pick(pick(pick(-std::numeric_limits<float>::infinity(), src[j - 1]), src[j]), src[j + 1]);
            }
            if (w > 1) dst[w - 1] = pick(pick(-std::numeric_limits<float>::infinity(), src[w - 2]), src[w - 1]);
        }
        float* __restrict d = out.data() + p * plane;
        for (std::size_t i = 0; i < h; ++i) {
            const float* mid = rb + i * w;
            const float* up = i ? mid - w : mid;
            const float* down = i + 1 < h ? mid + w : mid;
            for (std::size_t j = 0; j < w; ++j) d[i * w + j] = pick(pick(up[j], mid[j]), down[j]);
        }
    }
    if (!common_tape({&x})) return Tensor(x.shape(), std::move(out));
    Tensor saved_in = x.detach();
    auto saved_out = std::make_shared<const Buffer>(out);
    // The gradient goes to the first window entry, in row-major order, that
    // equals the pooled value; a window with no match (all NaN) routes it to
    // its centre.
    return emit(x.shape(), std::move(out), {&x}, [saved_in, saved_out, planes, h, w](const Buffer& g, const std::vector<bool>&) {
        // Work on planes padded by one cell: NaN padding never equals the
        // pooled value, so border windows need no special casing.
        const std::size_t plane = h * w, wp = w + 2, padded = (h + 2) * wp;
        const float nan = std::numeric_limits<float>::quiet_NaN();
        std::vector<float> in_p(padded, nan), y_p(padded, nan), g_p(padded, 0.0f), still(padded), gx_p(padded);
        auto fill = [&](std::vector<float>& dst, const float* src) {
            for (std::size_t i = 0; i < h; ++i) std::copy_n(src + i * w, w, dst.data() + (i + 1) * wp + 1);
        };
        Buffer gx(g.size());
        for (std::size_t p = 0; p < planes; ++p) {
            fill(in_p, saved_in.data() + p * plane);
            fill(y_p, saved_out->data() + p * plane);
            fill(g_p, g.data() + p * plane);
            std::fill(still.begin(), still.end(), 1.0f);
            std::fill(gx_p.begin(), gx_p.end(), 0.0f);
            // Output cells span [wp + 1, wp + 1 + span); window offsets run
            // from -wp - 1 to +wp + 1 in row-major order.
            const std::size_t first = wp + 1, span = (h - 1) * wp + w;
            for (std::size_t da = 0; da < 3; ++da) {
                for (std::size_t db = 0; db < 3; ++db) {
                    const std::size_t shift = da * wp + db;  // relative to first - wp - 1
                    const float* __restrict src = in_p.data() + shift;
                    float* __restrict dst = gx_p.data() + shift;
                    const float* __restrict y = y_p.data() + first;
                    const float* __restrict gr = g_p.data() + first;
                    float* __restrict open = still.data() + first;
                    for (std::size_t k = 0; k < span; ++k) {
                        const float hit = src[k] == y[k] ? 1.0f : 0.0f;
                        const float take = hit * open[k];
                        dst[k] += gr[k] * take;
                        open[k] -= take;
                    }
                }
            }
            float* out = gx.data() + p * plane;
            for (std::size_t i = 0; i < h; ++i) {
                for (std::size_t j = 0; j < w; ++j) {
                    const std::size_t k = (i + 1) * wp + j + 1;
                    out[i * w + j] = gx_p[k] + g_p[k] * still[k];
                }
            }
        }
        return buffers(std::move(gx));
    });
}

Tensor avg_pool3(const Tensor& x) {
    require_rank("avg_pool3", x, 4, "input");
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), plane = h * w;
    auto inv = std::make_shared<const std::vector<float>>(window_sizes(h, w));
    Buffer out(x.numel());
    std::vector<float> scratch(plane);
    for (std::size_t p = 0; p < planes; ++p) {
        float* dst = out.data() + p * plane;
        box_sum3(x.data() + p * plane, dst, scratch.data(), h, w);
        for (std::size_t k = 0; k < plane; ++k) dst[k] *= (*inv)[k];
    }
    // The window relation is symmetric, so the adjoint is a box sum of g / size.
    return emit(x.shape(), std::move(out), {&x}, [inv, planes, plane, h, w](const Buffer& g, const std::vector<bool>&) {
        Buffer gx(g.size());
        std::vector<float> share(plane), scratch(plane);
        for (std::size_t p = 0; p < planes; ++p) {
            const float* src = g.data() + p * plane;
            for (std::size_t k = 0; k < plane; ++k) share[k] = src[k] * (*inv)[k];
            box_sum3(share.data(), gx.data() + p * plane, scratch.data(), h, w);
        }
        return buffers(std::move(gx));
    });
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank("global_avg_pool", x, 4, "input");
    const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
    Buffer out(batch * channels);
    for (std::size_t k = 0; k < batch * channels; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += x[k * plane + i];
        out[k] = static_cast<float>(s / static_cast<double>(plane));
    }
    const auto n = x.numel();
    return emit({batch, channels}, std::move(out), {&x}, [n, plane](const Buffer& g, const std::vector<bool>&) {
        Buffer gx(n);
        for (std::size_t i = 0; i < n; ++i) gx[i] = g[i / plane] / static_cast<float>(plane);
        return buffers(std::move(gx));
    });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_rank("softmax_cross_entropy", logits, 2, "logits");
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (labels.size() != batch) {
        shape_fail("softmax_cross_entropy",
                   std::to_string(labels.size()) + " labels for " + std::to_string(batch) + " rows");
    }
    if (batch == 0) shape_fail("softmax_cross_entropy", "empty batch");
    auto probs = std::make_shared<Buffer>(logits.numel());
    double loss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
            shape_fail("softmax_cross_entropy", "label " + std::to_string(labels[b]) + " outside [0," +
                                                    std::to_string(classes) + ")");
        }
        const float* z = logits.data() + b * classes;
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < classes; ++c) peak = std::max(peak, static_cast<double>(z[c]));
        double total = 0.0;
        for (std::size_t c = 0; c < classes; ++c) total += std::exp(z[c] - peak);
        const double lse = peak + std::log(total);
        for (std::size_t c = 0; c < classes; ++c) (*probs)[b * classes + c] = static_cast<float>(std::exp(z[c] - lse));
        loss += lse - z[labels[b]];
    }
    std::vector<int> saved_labels(labels.begin(), labels.end());
    return emit({1}, {static_cast<float>(loss / static_cast<double>(batch))}, {&logits},
                [probs, saved_labels, batch, classes](const Buffer& g, const std::vector<bool>&) {
                    Buffer gx(*probs);
                    const float s = g[0] / static_cast<float>(batch);
                    for (std::size_t b = 0; b < batch; ++b) {
                        gx[b * classes + static_cast<std::size_t>(saved_labels[b])] -= 1.0f;
                        for (std::size_t c = 0; c < classes; ++c) gx[b * classes + c] *= s;
                    }
                    return buffers(std::move(gx));
                });
}

std::string_view primitive_name(Primitive kind) {
    switch (kind) {
        case Primitive::Add: return "add";
        case Primitive::Sub: return "sub";
        case Primitive::Mul: return "mul";
        case Primitive::Scale: return "scale";
        case Primitive::Relu: return "relu";
        case Primitive::Tanh: return "tanh";
        case Primitive::Sigmoid: return "sigmoid";
        case Primitive::Exp: return "exp";
        case Primitive::Log: return "log";
        case Primitive::LogSigmoid: return "log_sigmoid";
        case Primitive::LogSoftmax: return "log_softmax";
        case Primitive::Sum: return "sum";
        case Primitive::Mean: return "mean";
        case Primitive::Pick: return "pick";
        case Primitive::Row: return "row";
        case Primitive::ConcatColumns: return "concat_columns";
        case Primitive::Matmul: return "matmul";
        case Primitive::Linear: return "linear";
        case Primitive::MaskMultiply: return "mask_multiply";
        case Primitive::AddConstant: return "add_constant";
        case Primitive::Conv2d: return "conv2d";
        case Primitive::ConvTranspose2d: return "conv_transpose2d";
        case Primitive::BatchNorm: return "batch_norm";
        case Primitive::MaxPool3: return "max_pool3";
        case Primitive::AvgPool3: return "avg_pool3";
        case Primitive::GlobalAvgPool: return "global_avg_pool";
        case Primitive::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    }
    return "unknown";
}

std::vector<Primitive> all_primitives() {
    std::vector<Primitive> kinds;
    for (int k = 0; k <= static_cast<int>(Primitive::SoftmaxCrossEntropy); ++k) kinds.push_back(static_cast<Primitive>(k));
    return kinds;
}

Tensor forward_primitive(Primitive kind, std::span<const Tensor> inputs, const PrimitiveAttrs& attrs) {
    auto need = [&](std::size_t n) {
        if (inputs.size() != n) {
            throw ShapeError(std::string(primitive_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                             std::to_string(inputs.size()));
        }
    };
    switch (kind) {
        case Primitive::Add: need(2); return add(inputs[0], inputs[1]);
        case Primitive::Sub: need(2); return sub(inputs[0], inputs[1]);
        case Primitive::Mul: need(2); return mul(inputs[0], inputs[1]);
        case Primitive::Scale: need(1); return scale(inputs[0], attrs.factor);
        case Primitive::Relu: need(1); return relu(inputs[0]);
        case Primitive::Tanh: need(1); return tanh(inputs[0]);
        case Primitive::Sigmoid: need(1); return sigmoid(inputs[0]);
        case Primitive::Exp: need(1); return exp(inputs[0]);
        case Primitive::Log: need(1); return log(inputs[0]);
        case Primitive::LogSigmoid: need(1); return log_sigmoid(inputs[0]);
        case Primitive::LogSoftmax: need(1); return log_softmax(inputs[0]);
        case Primitive::Sum: need(1); return sum(inputs[0]);
        case Primitive::Mean: need(1); return mean(inputs[0]);
        case Primitive::Pick: need(1); return pick(inputs[0], attrs.index);
        case Primitive::Row: need(1); return row(inputs[0], attrs.index);
        case Primitive::ConcatColumns: return concat_columns(inputs);
        case Primitive::Matmul: need(2); return matmul(inputs[0], inputs[1]);
        case Primitive::Linear: need(3); return linear(inputs[0], inputs[1], inputs[2]);
        case Primitive::MaskMultiply: need(1); return mask_multiply(inputs[0], attrs.constant);
        case Primitive::AddConstant: need(1); return add_constant(inputs[0], attrs.constant);
        case Primitive::Conv2d: need(2); return conv2d(inputs[0], inputs[1], attrs.conv);
        case Primitive::ConvTranspose2d: need(2); return conv_transpose2d(inputs[0], inputs[1], attrs.conv);
        case Primitive::BatchNorm: need(3); return batch_norm(inputs[0], inputs[1], inputs[2], nullptr, attrs.batch_norm);
        case Primitive::MaxPool3: need(1); return max_pool3(inputs[0]);
        case Primitive::AvgPool3: need(1); return avg_pool3(inputs[0]);
        case Primitive::GlobalAvgPool: need(1); return global_avg_pool(inputs[0]);
        case Primitive::SoftmaxCrossEntropy: need(1); return softmax_cross_entropy(inputs[0], attrs.labels);
    }
    throw ShapeError("forward_primitive: unknown kind");
}

}  // namespace ssp::autograd
