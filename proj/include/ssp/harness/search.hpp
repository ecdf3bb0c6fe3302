#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssp/controller/controller.hpp"
#include "ssp/data/dataset.hpp"
#include "ssp/harness/config.hpp"
#include "ssp/supernet/supernet.hpp"

namespace ssp::harness {

using controller::ArchitectureSample;
using controller::OpFrequency;

/// More than half of an epoch's child steps produced a non-finite loss.
class RunAborted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EpochMetrics {
    std::size_t epoch = 0;  // 1-based
    double learning_rate = 0.0;
    double child_loss = 0.0;  // mean over finite steps; NaN if none
    std::size_t child_steps = 0;
    std::size_t nan_steps = 0;
    double val_error_pct = 0.0;  // most-likely architecture on the validation split
    double baseline = 0.0;
    double mean_reward = 0.0;
    std::vector<OpFrequency> op_histogram;  // over every architecture sampled this epoch
};

struct RunRecord {
    std::uint64_t seed = 0;
    std::vector<EpochMetrics> epochs;
    double val_error_pct = 0.0;
    double test_error_pct = 0.0;
    ArchitectureSample arch;
    std::string arch_text;
    /// Decisions of the final controller over `kHistogramSamples` draws.
    std::vector<OpFrequency> histogram;
    double wall_time_s = 0.0;
};

inline constexpr std::size_t kHistogramSamples = 1000;

struct SearchHooks {
    std::function<void(const EpochMetrics&)> on_epoch;
};

/// Synthetic or CIFAR-10 splits per the config, normalized with training
/// statistics. Data depends on `cfg.seed` only, so every run of an
/// experiment sees the same records.
data::SplitData load_data(const ExperimentConfig& cfg);

/// Error percentage of `arch` over `dataset` using the shared weights in
/// training mode (batch statistics, stochastic ops active). A batch whose
/// loss is not finite counts as entirely wrong.
double evaluate_error_pct(supernet::SharedBank& bank, const ArchitectureSample& arch, const data::Dataset& dataset,
                          std::size_t batch_size, Philox& rng);

/// Alternating search: each epoch trains the shared weights on one pass over
/// the training split with a freshly sampled architecture per batch, then
/// runs the controller phase. Returns the most-likely architecture's errors.
RunRecord run_search(const ExperimentConfig& cfg, const data::SplitData& data, const SearchHooks& hooks = {});

/// Trains one fixed architecture for cfg.num_epochs (no controller).
RunRecord run_fixed_arc(const ExperimentConfig& cfg, const data::SplitData& data, const ArchitectureSample& arch,
                        const SearchHooks& hooks = {});

struct ExperimentResult {
    std::vector<RunRecord> runs;
    double mean_val_error_pct = 0.0;
    double mean_test_error_pct = 0.0;
};

/// cfg.runs searches with seeds seed, seed + 1, ...
ExperimentResult run_experiment(const ExperimentConfig& cfg, const data::SplitData& data,
                                const SearchHooks& hooks = {});

ExperimentResult aggregate(std::vector<RunRecord> runs);

/// Two decimals, as in the published tables.
double round_pct(double pct);

}  // namespace ssp::harness
