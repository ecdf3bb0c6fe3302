#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "ssp/autograd/tape.hpp"
#include "ssp/autograd/tensor.hpp"

namespace ssp::autograd {

/// A parameter scheduled for an update had no gradient on the tape, which
/// means it was not wired into the forward pass that produced the loss.
class MissingGradientError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Child-network optimizer settings: cosine learning rate with period
/// `period_epochs`, L2 weight decay and global-norm gradient clipping.
struct OptimizerState {
    double lr_max = 0.05;
    double lr_min = 0.0005;
    double period_epochs = 10.0;
    double l2 = 0.00025;
    double grad_bound = 5.0;
    std::uint64_t steps = 0;

    /// lr_min + ½(lr_max − lr_min)(1 + cos(π·t/T)), restarting every T epochs.
    double learning_rate(double epoch) const;
};

struct StepReport {
    double learning_rate = 0.0;
    double grad_norm = 0.0;      // before clipping, L2 term included
    double clipped_norm = 0.0;   // after clipping
};

/// Rescale gradients in place so that their joint L2 norm is at most
/// `bound`. Returns the norm before scaling.
double clip_global_norm(std::span<std::vector<float>> grads, double bound);

/// g ← grad + l2·w, clip to the global norm bound, then w ← w − lr·g.
/// Every parameter must have a gradient in `grads`.
StepReport sgd_step(std::span<Parameter* const> params, const Gradients& grads, OptimizerState& opt,
                    double learning_rate);

/// Adam with the controller's conventions (beta1 = 0 by default).
class Adam {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.0;
        double beta2 = 0.999;
        double eps = 1e-3;
    };

    explicit Adam(Options options) : options_(options) {}

    void step(std::span<Parameter* const> params, const Gradients& grads);
    std::uint64_t steps() const { return steps_; }
    const Options& options() const { return options_; }

private:
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };

    Options options_;
    std::uint64_t steps_ = 0;
    std::unordered_map<const Parameter*, Moments> moments_;
};

}  // namespace ssp::autograd
