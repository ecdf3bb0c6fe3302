#include "ssp/autograd/optim.hpp"

#include <cmath>
#include <numbers>

namespace ssp::autograd {

double OptimizerState::learning_rate(double epoch) const {
    const double phase = period_epochs > 0 ? std::fmod(epoch, period_epochs) / period_epochs : 0.0;
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * phase));
}

double clip_global_norm(std::span<std::vector<float>> grads, double bound) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (float v : g) sq += static_cast<double>(v) * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > bound && norm > 0.0) {
        const double factor = bound / norm;
        for (auto& g : grads) {
            for (float& v : g) v = static_cast<float>(v * factor);
        }
    }
    return norm;
}

StepReport sgd_step(std::span<Parameter* const> params, const Gradients& grads, OptimizerState& opt,
                    double learning_rate) {
    std::vector<std::vector<float>> effective;
    effective.reserve(params.size());
    for (Parameter* p : params) {
        const Buffer* g = grads.find(*p);
        if (!g) throw MissingGradientError("no gradient for parameter '" + p->name + "'");
        if (g->size() != p->numel()) {
            throw ShapeError("gradient for '" + p->name + "' has " + std::to_string(g->size()) + " elements, expected " +
                             std::to_string(p->numel()));
        }
        std::vector<float> e(*g);
        if (opt.l2 != 0.0) {
            for (std::size_t i = 0; i < e.size(); ++i) e[i] += static_cast<float>(opt.l2 * p->value[i]);
        }
        effective.push_back(std::move(e));
    }

    StepReport report;
    report.learning_rate = learning_rate;
    report.grad_norm = clip_global_norm(effective, opt.grad_bound);
    report.clipped_norm = std::min(report.grad_norm, opt.grad_bound);

    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& w = params[k]->value;
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= static_cast<float>(learning_rate * effective[k][i]);
    }
    ++opt.steps;
    return report;
}

void Adam::step(std::span<Parameter* const> params, const Gradients& grads) {
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double bias1 = 1.0 - std::pow(options_.beta1, t);
    const double bias2 = 1.0 - std::pow(options_.beta2, t);
    for (Parameter* p : params) {
        const Buffer* g = grads.find(*p);
        if (!g) throw MissingGradientError("no gradient for parameter '" + p->name + "'");
        auto& mom = moments_[p];
        if (mom.m.empty()) {
            mom.m.assign(p->numel(), 0.0);
            mom.v.assign(p->numel(), 0.0);
        }
        for (std::size_t i = 0; i < p->numel(); ++i) {
            const double gi = (*g)[i];
            mom.m[i] = options_.beta1 * mom.m[i] + (1.0 - options_.beta1) * gi;
            mom.v[i] = options_.beta2 * mom.v[i] + (1.0 - options_.beta2) * gi * gi;
            const double mhat = mom.m[i] / (bias1 > 0 ? bias1 : 1.0);
            const double vhat = mom.v[i] / bias2;
            p->value[i] -= static_cast<float>(options_.lr * mhat / (std::sqrt(vhat) + options_.eps));
        }
    }
}

}  // namespace ssp::autograd
