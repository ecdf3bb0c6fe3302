#include "ssp/harness/search.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace ssp::harness {
namespace {

// Sub-stream ids of a run's root generator.
enum Stream : std::uint64_t {
    kBankInit = 1,
    kControllerInit = 2,
    kTrainOrder = 3,
    kAugment = 4,
    kChildStep = 5,
    kArchSampling = 6,
    kRewardBatches = 7,
    kRewardForward = 8,
    kEvaluation = 9,
    kHistogram = 10,
};

supernet::ForwardOptions eval_options(Philox& rng) {
    supernet::ForwardOptions opt;
    opt.mode = supernet::Mode::Train;
    opt.rng = &rng;
    opt.update_stats = false;
    opt.skip_keep_prob = 1.0;
    return opt;
}

autograd::OptimizerState child_optimizer(const ExperimentConfig& cfg) {
    autograd::OptimizerState opt;
    opt.lr_max = cfg.child_lr_max;
    opt.lr_min = cfg.child_lr_min;
    opt.period_epochs = cfg.child_lr_T;
    opt.l2 = cfg.child_l2_reg;
    opt.grad_bound = cfg.child_grad_bound;
    return opt;
}

struct ChildPhase {
    double mean_loss = 0.0;
    std::size_t steps = 0;
    std::size_t nan_steps = 0;
};

// One pass over the training split. `next_arch` supplies the architecture
// for each batch.
template <typename NextArch>
ChildPhase train_child_epoch(supernet::SharedBank& bank, data::BatchStream& batches, autograd::OptimizerState& opt,
                             double lr, bool augment, Philox& aug_rng, Philox& step_rng, NextArch&& next_arch,
                             std::size_t epoch) {
    ChildPhase phase;
    double loss_sum = 0.0;
    const std::size_t n = batches.batches_per_pass();
    for (std::size_t b = 0; b < n; ++b) {
        data::Batch batch = batches.next();
        const autograd::Tensor images = augment ? data::augment(batch.images, data::Split::Train, aug_rng) : batch.images;
        const ArchitectureSample arch = next_arch();
        ++phase.steps;
        try {
            loss_sum += supernet::child_train_step(bank, arch, images, batch.labels, opt, lr, step_rng).loss;
        } catch (const supernet::ChildNanError&) {
            ++phase.nan_steps;
        }
    }
    if (2 * phase.nan_steps > phase.steps) {
        throw RunAborted("epoch " + std::to_string(epoch) + ": " + std::to_string(phase.nan_steps) + " of " +
                         std::to_string(phase.steps) + " child steps produced a non-finite loss");
    }
    const std::size_t finite = phase.steps - phase.nan_steps;
    phase.mean_loss = finite ? loss_sum / static_cast<double>(finite) : std::nan("");
    return phase;
}

}  // namespace

double round_pct(double pct) { return std::round(pct * 100.0) / 100.0; }

data::SplitData load_data(const ExperimentConfig& cfg) {
    validate(cfg);
    if (cfg.dataset == "synthetic") {
        data::SyntheticSpec spec;
        spec.n_classes = cfg.n_classes;
        spec.per_class = (cfg.n_train + cfg.n_val) / cfg.n_classes;
        spec.seed = cfg.seed;
        spec.test_per_class = cfg.synthetic_test_per_class;
        spec.n_val = cfg.n_val;
        return data::make_synthetic_splits(spec);
    }
    data::SplitData splits = data::load_cifar10_dir(cfg.data_dir, cfg.n_val);
    splits.train = splits.train.slice(0, cfg.n_train);
    data::normalize_splits(splits);
    return splits;
}

double evaluate_error_pct(supernet::SharedBank& bank, const ArchitectureSample& arch, const data::Dataset& dataset,
                          std::size_t batch_size, Philox& rng) {
    if (dataset.size() == 0) return 0.0;
    std::size_t wrong = 0;
    for (const auto& batch : data::sequential_batches(dataset, batch_size)) {
        const std::size_t n = batch.labels.size();
        try {
            const auto out = supernet::child_forward(bank, arch, batch.images, batch.labels, eval_options(rng));
            wrong += n - static_cast<std::size_t>(std::llround(out.accuracy * static_cast<double>(n)));
        } catch (const supernet::ChildNanError&) {
            wrong += n;
        }
    }
    return 100.0 * static_cast<double>(wrong) / static_cast<double>(dataset.size());
}

RunRecord run_search(const ExperimentConfig& cfg, const data::SplitData& data, const SearchHooks& hooks) {
    validate(cfg);
    const auto started = std::chrono::steady_clock::now();
    const space::SearchSpace space = build_space(cfg);
    const Philox root(cfg.seed);
    Philox bank_init = root.split(kBankInit), ctrl_init = root.split(kControllerInit);
    Philox aug_rng = root.split(kAugment), step_rng = root.split(kChildStep), arch_rng = root.split(kArchSampling);
    Philox reward_rng = root.split(kRewardForward), eval_rng = root.split(kEvaluation);

    supernet::SharedBank bank(space, supernet_config(cfg), bank_init);
    controller::Controller ctrl(controller_config(cfg), space, ctrl_init);
    autograd::OptimizerState opt = child_optimizer(cfg);
    data::BatchStream train_batches(data.train, cfg.batch_size, root.split(kTrainOrder));
    data::BatchStream reward_batches(data.val, cfg.batch_size, root.split(kRewardBatches));

    RunRecord record;
    record.seed = cfg.seed;
    for (std::size_t e = 0; e < cfg.num_epochs; ++e) {
        EpochMetrics m;
        m.epoch = e + 1;
        m.learning_rate = opt.learning_rate(static_cast<double>(e));
        std::vector<ArchitectureSample> sampled;

        const ChildPhase child = train_child_epoch(
            bank, train_batches, opt, m.learning_rate, cfg.augment, aug_rng, step_rng,
            [&] {
                sampled.push_back(ctrl.sample(arch_rng));
                return sampled.back();
            },
            m.epoch);
        m.child_loss = child.mean_loss;
        m.child_steps = child.steps;
        m.nan_steps = child.nan_steps;

        if ((e + 1) % cfg.controller_train_every == 0) {
            double reward_sum = 0.0;
            std::size_t reward_count = 0;
            for (std::size_t s = 0; s < cfg.controller_train_steps; ++s) {
                std::vector<ArchitectureSample> archs;
                std::vector<double> rewards;
                for (std::size_t k = 0; k < cfg.controller_num_aggregate; ++k) {
                    archs.push_back(ctrl.sample(arch_rng));
                    const data::Batch vb = reward_batches.next();
                    double reward = 0.0;
                    try {
                        reward = supernet::child_forward(bank, archs.back(), vb.images, vb.labels,
                                                         eval_options(reward_rng))
                                     .accuracy;
                    } catch (const supernet::ChildNanError&) {
                        reward = 0.0;
                    }
                    rewards.push_back(reward);
                    reward_sum += reward;
                    ++reward_count;
                }
                ctrl.reinforce_update(archs, rewards);
                sampled.insert(sampled.end(), archs.begin(), archs.end());
            }
            m.mean_reward = reward_count ? reward_sum / static_cast<double>(reward_count) : 0.0;
        }
        m.baseline = ctrl.baseline();
        m.op_histogram = controller::sampled_op_histogram(sampled, space);
        m.val_error_pct = evaluate_error_pct(bank, ctrl.most_likely(), data.val, cfg.batch_size, eval_rng);
        if (hooks.on_epoch) hooks.on_epoch(m);
        record.epochs.push_back(std::move(m));
    }

    record.arch = ctrl.most_likely();
    record.arch_text = supernet::format_architecture(record.arch, space);
    record.val_error_pct = round_pct(evaluate_error_pct(bank, record.arch, data.val, cfg.batch_size, eval_rng));
    record.test_error_pct = round_pct(evaluate_error_pct(bank, record.arch, data.test, cfg.batch_size, eval_rng));
    Philox hist_rng = root.split(kHistogram);
    std::vector<ArchitectureSample> draws;
    draws.reserve(kHistogramSamples);
    for (std::size_t i = 0; i < kHistogramSamples; ++i) draws.push_back(ctrl.sample(hist_rng));
    record.histogram = controller::sampled_op_histogram(draws, space);
    record.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return record;
}

RunRecord run_fixed_arc(const ExperimentConfig& cfg, const data::SplitData& data, const ArchitectureSample& arch,
                        const SearchHooks& hooks) {
    validate(cfg);
    const auto started = std::chrono::steady_clock::now();
    const space::SearchSpace space = build_space(cfg);
    const Philox root(cfg.seed);
    Philox bank_init = root.split(kBankInit);
    Philox aug_rng = root.split(kAugment), step_rng = root.split(kChildStep), eval_rng = root.split(kEvaluation);

    supernet::SharedBank bank(space, supernet_config(cfg), bank_init);
    bank.validate(arch);
    autograd::OptimizerState opt = child_optimizer(cfg);
    data::BatchStream train_batches(data.train, cfg.batch_size, root.split(kTrainOrder));
    const std::vector<ArchitectureSample> only{arch};

    RunRecord record;
    record.seed = cfg.seed;
    for (std::size_t e = 0; e < cfg.num_epochs; ++e) {
        EpochMetrics m;
        m.epoch = e + 1;
        m.learning_rate = opt.learning_rate(static_cast<double>(e));
        const ChildPhase child = train_child_epoch(bank, train_batches, opt, m.learning_rate, cfg.augment, aug_rng,
                                                   step_rng, [&] { return arch; }, m.epoch);
        m.child_loss = child.mean_loss;
        m.child_steps = child.steps;
        m.nan_steps = child.nan_steps;
        m.op_histogram = controller::sampled_op_histogram(only, space);
        m.val_error_pct = evaluate_error_pct(bank, arch, data.val, cfg.batch_size, eval_rng);
        if (hooks.on_epoch) hooks.on_epoch(m);
        record.epochs.push_back(std::move(m));
    }
    record.arch = arch;
    record.arch_text = supernet::format_architecture(arch, space);
    record.val_error_pct = round_pct(evaluate_error_pct(bank, arch, data.val, cfg.batch_size, eval_rng));
    record.test_error_pct = round_pct(evaluate_error_pct(bank, arch, data.test, cfg.batch_size, eval_rng));
    record.histogram = controller::sampled_op_histogram(only, space);
    record.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return record;
}

ExperimentResult aggregate(std::vector<RunRecord> runs) {
    ExperimentResult out;
    out.runs = std::move(runs);
    if (out.runs.empty()) return out;
    double val = 0.0, test = 0.0;
    for (const auto& r : out.runs) {
        val += r.val_error_pct;
        test += r.test_error_pct;
    }
    out.mean_val_error_pct = round_pct(val / static_cast<double>(out.runs.size()));
    out.mean_test_error_pct = round_pct(test / static_cast<double>(out.runs.size()));
    return out;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const data::SplitData& data, const SearchHooks& hooks) {
    std::vector<RunRecord> runs;
    for (std::size_t r = 0; r < cfg.runs; ++r) {
        ExperimentConfig run_cfg = cfg;
        run_cfg.seed = cfg.seed + r;
        runs.push_back(run_search(run_cfg, data, hooks));
    }
    return aggregate(std::move(runs));
}

}  // namespace ssp::harness
