#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssp/autograd/optim.hpp"
#include "ssp/autograd/tape.hpp"
#include "ssp/rng.hpp"
#include "ssp/space/search_space.hpp"

namespace ssp::controller {

using autograd::Parameter;
using autograd::Tensor;

struct ControllerConfig {
    std::size_t lstm_size = 64;
    std::size_t num_layers = 12;  // decisions per architecture (child_num_layers)
    double entropy_weight = 1e-4;
    double lr = 1e-3;
    /// 0 disables the tanh squash on both heads.
    double tanh_constant = 1.5;
    double op_tanh_reduce = 2.5;
    double skip_target = 0.4;
    double skip_weight = 0.8;
    double bl_dec = 0.99;
    std::size_t num_aggregate = 20;
    std::size_t train_steps = 50;
    double adam_beta1 = 0.0;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-3;
    double init_range = 0.1;
};

/// One macro architecture: an action index per layer plus, for layer i, a
/// mask over layers 0..i-1 saying which earlier outputs feed into it.
struct ArchitectureSample {
    std::vector<std::size_t> ops;
    std::vector<std::vector<std::uint8_t>> skips;
    double log_prob = 0.0;
    double entropy = 0.0;
    std::size_t skip_count = 0;

    std::size_t num_layers() const { return ops.size(); }
    bool operator==(const ArchitectureSample& other) const { return ops == other.ops && skips == other.skips; }
};

/// Differentiable quantities of one architecture under the current policy.
struct PolicyScore {
    Tensor log_prob;       // scalar
    Tensor entropy;        // scalar, op and skip decisions
    Tensor skip_penalty;   // scalar BCE(mean skip probability, target); zero without skip decisions
    double mean_skip_prob = 0.0;
};

struct UpdateDiagnostics {
    double baseline = 0.0;       // after the update
    double mean_reward = 0.0;
    double loss = 0.0;
    double mean_skip_prob = 0.0;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// LSTM policy over macro architectures, trained with REINFORCE.
///
/// Per layer the LSTM first emits op logits over the action table, then is
/// fed the chosen op's embedding and emits one skip logit per earlier layer
/// through an attention head. Skip decisions are Bernoulli with
/// P = sigmoid(logit).
class Controller {
public:
    Controller(ControllerConfig config, std::size_t num_actions, Philox& init_rng);
    Controller(ControllerConfig config, const space::SearchSpace& space, Philox& init_rng)
        : Controller(std::move(config), space.size(), init_rng) {}
    // Optimizer state is keyed by parameter address, so the object stays put.
    Controller(const Controller&) = delete;
    Controller& operator=(const Controller&) = delete;

    const ControllerConfig& config() const { return config_; }
    std::size_t num_actions() const { return num_actions_; }

    ArchitectureSample sample(Philox& rng) const;
    /// Greedy decode: argmax op and skip iff P(skip) > 0.5 at every decision.
    ArchitectureSample most_likely() const;

    /// Recomputes log-probability, entropy and skip penalty of `arch` on `tape`.
    PolicyScore score(autograd::Tape& tape, const ArchitectureSample& arch);

    /// mean_b[-(r_b - baseline)·logp_b - entropy_weight·H_b + skip_weight·BCE_b],
    /// one Adam step, then baseline ← bl_dec·baseline + (1 - bl_dec)·mean reward.
    /// The baseline starts at the first batch's mean reward. Rewards must lie
    /// in [0,1]; NaN rewards count as 0.
    UpdateDiagnostics reinforce_update(std::span<const ArchitectureSample> batch, std::span<const double> rewards);

    /// Gradient of the surrogate loss above for a fixed baseline, without
    /// updating anything.
    autograd::Gradients surrogate_gradients(std::span<const ArchitectureSample> batch, std::span<const double> rewards,
                                            double baseline, autograd::Tape& tape);

    double baseline() const { return baseline_; }
    bool baseline_initialized() const { return baseline_set_; }
    void set_baseline(double value) {
        baseline_ = value;
        baseline_set_ = true;
    }

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;

    /// Zero the op head so every action slot is equally likely.
    void zero_op_head();
    /// Zero the attention output so every skip is Bernoulli(0.5).
    void zero_skip_head();

    nlohmann::json checkpoint() const;
    void restore(const nlohmann::json& checkpoint);

private:
    struct Lstm {
        Parameter w[4];  // input, forget, output, cell; each (H, 2H)
        Parameter b[4];
    };

    Tensor surrogate_loss(std::span<const ArchitectureSample> batch, std::span<const double> rewards,
                          double baseline, autograd::Tape& tape, double* mean_skip_prob);

    ControllerConfig config_;
    std::size_t num_actions_;
    Lstm lstm_;
    Parameter g_emb_;     // (1, H)
    Parameter w_emb_;     // (A, H)
    Parameter w_soft_;    // (H, A)
    Parameter w_attn_1_;  // (H, H)
    Parameter w_attn_2_;  // (H, H)
    Parameter v_attn_;    // (H, 1)
    autograd::Adam adam_;
    double baseline_ = 0.0;
    bool baseline_set_ = false;
};

struct OpFrequency {
    std::string op;
    space::SlotKind kind = space::SlotKind::Base;
    double fraction = 0.0;
};

/// Fraction of all layer decisions that picked each distinct operation,
/// ordered by first appearance in the action table. Ops never chosen are
/// listed with fraction 0.
std::vector<OpFrequency> sampled_op_histogram(std::span<const ArchitectureSample> samples,
                                              const space::SearchSpace& space);

}  // namespace ssp::controller
