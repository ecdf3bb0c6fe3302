#include "ssp/layers/operations.hpp"

#include <cmath>
#include <stdexcept>

namespace ssp::layers {

using autograd::BatchNormAttrs;
using autograd::BatchNormStats;
using autograd::ConvAttrs;
using autograd::Shape;
using autograd::ShapeError;

namespace {

// Lifts (C,H,W) to (1,C,H,W); the caller restores the shape afterwards.
Tensor as_batch(const Tensor& x, const char* op) {
    if (x.rank() == 4) return x;
    if (x.rank() == 3) return x.reshape({1, x.dim(0), x.dim(1), x.dim(2)});
    throw ShapeError(std::string(op) + ": expected (C,H,W) or (N,C,H,W), got " + autograd::shape_string(x.shape()));
}

Tensor restore(const Tensor& out, const Tensor& in) { return in.rank() == 3 ? out.reshape(in.shape()) : out; }

Philox& require_rng(Philox* rng, const char* op) {
    if (!rng) throw std::invalid_argument(std::string(op) + ": training mode needs an rng");
    return *rng;
}

void fill_he_normal(Parameter& p, std::size_t fan_in, Philox& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : p.value) v = static_cast<float>(rng.normal() * std);
}

// Identity matrix on the center tap of a (C,C,k,k) kernel.
void set_center_identity(Parameter& p, bool depthwise) {
    std::fill(p.value.begin(), p.value.end(), 0.0f);
    const std::size_t out = p.shape[0];
    const std::size_t in = p.shape[1];
    const std::size_t k = p.shape[2];
    const std::size_t center = (k / 2) * k + k / 2;
    for (std::size_t o = 0; o < out; ++o) {
        const std::size_t i = depthwise ? 0 : o;
        if (i < in) p.value[(o * in + i) * k * k + center] = 1.0f;
    }
}

}  // namespace

Tensor ForwardContext::use(Parameter& param) const {
    return tape ? tape->watch(param) : Tensor(param.shape, param.value);
}

BatchNormAttrs ForwardContext::batch_norm_attrs() const {
    BatchNormAttrs attrs;
    attrs.training = training();
    return attrs;
}

Tensor identity_forward(const Tensor& x) { return x; }

Tensor sep_conv_forward(const Tensor& x, const Tensor& depthwise, const Tensor& pointwise, const Tensor& gamma,
                        const Tensor& beta, BatchNormStats* stats, BatchNormAttrs bn) {
    const Tensor in = as_batch(x, "sep_conv");
    const std::size_t c = in.dim(1);
    if (depthwise.rank() != 4 || depthwise.dim(0) != c || depthwise.dim(1) != 1 || depthwise.dim(2) % 2 == 0) {
        throw ShapeError("sep_conv: depthwise kernel " + autograd::shape_string(depthwise.shape()) +
                         " does not fit input " + autograd::shape_string(x.shape()));
    }
    const std::size_t k = depthwise.dim(2);
    Tensor h = autograd::relu(in);
    h = autograd::conv2d(h, depthwise, {(k - 1) / 2, 1, c});
    h = autograd::conv2d(h, pointwise, {0, 1, 1});
    h = autograd::batch_norm(h, gamma, beta, stats, bn);
    return x.rank() == 3 ? h.reshape({h.dim(1), h.dim(2), h.dim(3)}) : h;
}

Tensor pool_forward(const Tensor& x, PoolMode mode) {
    const Tensor in = as_batch(x, "pool");
    return restore(mode == PoolMode::Max ? autograd::max_pool3(in) : autograd::avg_pool3(in), x);
}

Tensor gaussian_noise_forward(const Tensor& x, double sigma, Philox* rng, Mode mode) {
    if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian noise: sigma must be >= 0");
    if (mode == Mode::Eval || sigma == 0.0) return x;
    Philox& g = require_rng(rng, "gaussian noise");
    std::vector<float> noise(x.numel());
    for (auto& v : noise) v = static_cast<float>(g.normal() * sigma);
    return autograd::add_constant(x, Tensor(x.shape(), std::move(noise)));
}

Tensor dropout_forward(const Tensor& x, double p, Philox* rng, Mode mode) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("dropout: p must lie in [0,1]");
    if (mode == Mode::Eval || p == 0.0) return x;
    if (p == 1.0) return autograd::mask_multiply(x, Tensor::zeros(x.shape()));
    Philox& g = require_rng(rng, "dropout");
    const float keep_scale = static_cast<float>(1.0 / (1.0 - p));
    std::vector<float> mask(x.numel());
    for (auto& v : mask) v = g.bernoulli(p) ? 0.0f : keep_scale;
    return autograd::mask_multiply(x, Tensor(x.shape(), std::move(mask)));
}

Tensor trans_conv_forward(const Tensor& x, const Tensor& weight) {
    const Tensor in = as_batch(x, "trans_conv");
    if (weight.rank() != 4 || weight.dim(2) % 2 == 0) {
        throw ShapeError("trans_conv: kernel " + autograd::shape_string(weight.shape()) + " must be (C,C_out,k,k), k odd");
    }
    const std::size_t k = weight.dim(2);
    return restore(autograd::conv_transpose2d(in, weight, {(k - 1) / 2, 1, 1}), x);
}

Tensor stretched_conv_forward(const Tensor& x, const Tensor& weight, std::size_t padding, std::size_t dilation) {
    const Tensor in = as_batch(x, "stretched_conv");
    return restore(autograd::conv2d(in, weight, {padding, dilation, 1}), x);
}

OperationModule::OperationModule(OperationSpec spec, std::size_t channels, Philox& init_rng, const std::string& name)
    : spec_(std::move(spec)), channels_(channels), stats_(0) {
    const auto shapes = spec_.param_shapes(channels);
    const std::string prefix = name.empty() ? spec_.canonical() : name;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        params_.emplace_back(prefix + "/" + std::to_string(i), shapes[i]);
    }
    switch (spec_.kind) {
        case OpKind::SepConv3:
        case OpKind::SepConv5:
            fill_he_normal(params_[0], spec_.kernel * spec_.kernel, init_rng);
            fill_he_normal(params_[1], channels, init_rng);
            std::fill(params_[2].value.begin(), params_[2].value.end(), 1.0f);
            std::fill(params_[3].value.begin(), params_[3].value.end(), 0.0f);
            stats_ = BatchNormStats(channels);
            break;
        case OpKind::TransConv3:
        case OpKind::TransConv5:
        case OpKind::StretchedConv:
            fill_he_normal(params_[0], channels * spec_.kernel * spec_.kernel, init_rng);
            break;
        default: break;
    }
}

Tensor OperationModule::forward(const Tensor& x, const ForwardContext& ctx) {
    const std::size_t channel_axis = x.rank() == 4 ? 1 : 0;
    if (x.rank() < 3 || x.dim(channel_axis) != channels_) {
        throw ShapeError(spec_.canonical() + ": input " + autograd::shape_string(x.shape()) + " does not have " +
                         std::to_string(channels_) + " channels");
    }
    switch (spec_.kind) {
        case OpKind::Identity: return identity_forward(x);
        case OpKind::SepConv3:
        case OpKind::SepConv5: {
            BatchNormAttrs bn = ctx.batch_norm_attrs();
            BatchNormStats* running = ctx.training() && !ctx.update_stats ? nullptr : &stats_;
            return sep_conv_forward(x, ctx.use(params_[0]), ctx.use(params_[1]), ctx.use(params_[2]),
                                    ctx.use(params_[3]), running, bn);
        }
        case OpKind::MaxPool3: return pool_forward(x, PoolMode::Max);
        case OpKind::AvgPool3: return pool_forward(x, PoolMode::Avg);
        case OpKind::GaussianNoise: return gaussian_noise_forward(x, spec_.sigma, ctx.rng, ctx.mode);
        case OpKind::Dropout: return dropout_forward(x, spec_.p, ctx.rng, ctx.mode);
        case OpKind::TransConv3:
        case OpKind::TransConv5: return trans_conv_forward(x, ctx.use(params_[0]));
        case OpKind::StretchedConv:
            return stretched_conv_forward(x, ctx.use(params_[0]), spec_.padding, spec_.dilation);
    }
    throw std::logic_error("unhandled operation kind");
}

std::vector<Parameter*> OperationModule::parameters() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
}

std::vector<const Parameter*> OperationModule::parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
}

void OperationModule::set_identity_weights() {
    switch (spec_.kind) {
        case OpKind::SepConv3:
        case OpKind::SepConv5:
            set_center_identity(params_[0], true);
            set_center_identity(params_[1], false);
            std::fill(params_[2].value.begin(), params_[2].value.end(), 1.0f);
            std::fill(params_[3].value.begin(), params_[3].value.end(), 0.0f);
            break;
        case OpKind::TransConv3:
        case OpKind::TransConv5:
        case OpKind::StretchedConv: set_center_identity(params_[0], false); break;
        default: break;
    }
}

ProbeStats output_variance_probe(const OperationSpec& spec, std::size_t trials, Philox& rng, ProbeOptions options) {
    if (trials == 0) throw std::invalid_argument("output_variance_probe: trials must be >= 1");
    Philox init = rng.split(0);
    OperationModule module(spec, options.channels, init);
    module.set_identity_weights();

    const Shape shape{options.batch, options.channels, options.size, options.size};
    const std::size_t n = autograd::element_count(shape);
    double out_sum = 0.0, out_sq = 0.0, in_sum = 0.0, in_sq = 0.0;
    std::size_t zeros = 0;
    ProbeStats stats;
    for (std::size_t t = 0; t < trials; ++t) {
        std::vector<float> input(n), upstream(n);
        for (auto& v : input) v = static_cast<float>(rng.normal());
        for (auto& v : upstream) v = static_cast<float>(rng.normal());

        autograd::Tape tape;
        const Tensor x = tape.variable(Tensor(shape, input));
        ForwardContext ctx{&tape, Mode::Train, &rng, false};
        const Tensor out = module.forward(x, ctx);
        const auto grads = tape.backward(autograd::sum(autograd::mask_multiply(out, Tensor(shape, upstream))));

        for (std::size_t i = 0; i < n; ++i) {
            const double o = out[i];
            out_sum += o;
            out_sq += o * o;
            zeros += o == 0.0 ? 1 : 0;
            in_sum += input[i];
            in_sq += static_cast<double>(input[i]) * input[i];
        }
        double g_sq = 0.0, u_sq = 0.0;
        const auto* gx = grads.find(x);
        for (std::size_t i = 0; i < n; ++i) {
            const double g = gx ? (*gx)[i] : 0.0;
            g_sq += g * g;
            u_sq += static_cast<double>(upstream[i]) * upstream[i];
        }
        stats.grad_norm += std::sqrt(g_sq);
        stats.upstream_norm += std::sqrt(u_sq);
    }
    const double total = static_cast<double>(n * trials);
    stats.mean = out_sum / total;
    stats.std = std::sqrt(std::max(0.0, out_sq / total - stats.mean * stats.mean));
    const double in_mean = in_sum / total;
    stats.input_std = std::sqrt(std::max(0.0, in_sq / total - in_mean * in_mean));
    stats.zero_fraction = static_cast<double>(zeros) / total;
    stats.grad_norm /= static_cast<double>(trials);
    stats.upstream_norm /= static_cast<double>(trials);
    return stats;
}

}  // namespace ssp::layers
