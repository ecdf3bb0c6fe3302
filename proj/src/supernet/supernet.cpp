#include "ssp/supernet/supernet.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

namespace ssp::supernet {

namespace ag = ssp::autograd;

namespace {

void fill_normal(Parameter& p, double std, Philox& rng) {
    for (auto& v : p.value) v = static_cast<float>(rng.normal() * std);
}

bool all_finite(const Tensor& t) {
    return std::all_of(t.values().begin(), t.values().end(), [](float v) { return std::isfinite(v); });
}

// Per-example drop-path: each sample's branch is zeroed with probability
// 1 - keep and otherwise scaled by 1/keep.
Tensor drop_path(const Tensor& x, double keep, Philox& rng) {
    const std::size_t batch = x.dim(0);
    const std::size_t per_sample = x.numel() / batch;
    std::vector<float> mask(x.numel());
    const float kept = static_cast<float>(1.0 / keep);
    for (std::size_t n = 0; n < batch; ++n) {
        const float m = rng.bernoulli(keep) ? kept : 0.0f;
        std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(n * per_sample), per_sample, m);
    }
    return ag::mask_multiply(x, Tensor(x.shape(), std::move(mask)));
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

}  // namespace

SharedBank::SharedBank(const space::SearchSpace& space, SupernetConfig config, Philox& init_rng)
    : space_(space), config_(config) {
    if (config_.num_layers == 0 || config_.out_filters == 0 || config_.n_classes == 0) {
        throw std::invalid_argument("supernet needs at least one layer, filter and class");
    }
    if (!(config_.keep_prob > 0.0 && config_.keep_prob <= 1.0)) {
        throw std::invalid_argument("keep_prob must lie in (0, 1]");
    }
    const std::size_t f = config_.out_filters;
    const std::size_t c = config_.in_channels;

    stem_weight_ = Parameter("stem/w", {f, c, 3, 3});
    fill_normal(stem_weight_, std::sqrt(2.0 / static_cast<double>(c * 9)), init_rng);
    stem_gamma_ = Parameter("stem/gamma", {f}, std::vector<float>(f, 1.0f));
    stem_beta_ = Parameter("stem/beta", {f});
    stem_stats_ = ag::BatchNormStats(f);

    slots_.resize(config_.num_layers);
    norms_.reserve(config_.num_layers);
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
        auto& row = slots_[l];
        row.reserve(space_.size());
        for (std::size_t a = 0; a < space_.size(); ++a) {
            const auto& spec = space_.action_table()[a].spec;
            row.emplace_back(spec, f, init_rng, "layer" + std::to_string(l) + "/slot" + std::to_string(a));
        }
        const std::string prefix = "layer" + std::to_string(l) + "/bn/";
        norms_.push_back({Parameter(prefix + "gamma", {f}, std::vector<float>(f, 1.0f)), Parameter(prefix + "beta", {f}),
                          ag::BatchNormStats(f)});
    }

    head_weight_ = Parameter("head/w", {config_.n_classes, f});
    fill_normal(head_weight_, std::sqrt(1.0 / static_cast<double>(f)), init_rng);
    head_bias_ = Parameter("head/b", {config_.n_classes});
}

layers::OperationModule& SharedBank::slot(std::size_t layer, std::size_t action) {
    return slots_.at(layer).at(action);
}

const layers::OperationModule& SharedBank::slot(std::size_t layer, std::size_t action) const {
    return slots_.at(layer).at(action);
}

std::vector<Parameter*> SharedBank::parameters() {
    std::vector<Parameter*> out{&stem_weight_, &stem_gamma_, &stem_beta_};
    for (std::size_t l = 0; l < slots_.size(); ++l) {
        for (auto& m : slots_[l])
            for (Parameter* p : m.parameters()) out.push_back(p);
        out.push_back(&norms_[l].gamma);
        out.push_back(&norms_[l].beta);
    }
    out.push_back(&head_weight_);
    out.push_back(&head_bias_);
    return out;
}

std::vector<Parameter*> SharedBank::parameters_for(const ArchitectureSample& arch) {
    validate(arch);
    std::vector<Parameter*> out{&stem_weight_, &stem_gamma_, &stem_beta_};
    for (std::size_t l = 0; l < slots_.size(); ++l) {
        for (Parameter* p : slots_[l][arch.ops[l]].parameters()) out.push_back(p);
        out.push_back(&norms_[l].gamma);
        out.push_back(&norms_[l].beta);
    }
    out.push_back(&head_weight_);
    out.push_back(&head_bias_);
    return out;
}

std::size_t SharedBank::parameter_count() const {
    std::size_t n = stem_weight_.numel() + stem_gamma_.numel() + stem_beta_.numel() + head_weight_.numel() +
                    head_bias_.numel();
    for (std::size_t l = 0; l < slots_.size(); ++l) {
        for (const auto& m : slots_[l])
            for (const Parameter* p : m.parameters()) n += p->numel();
        n += norms_[l].gamma.numel() + norms_[l].beta.numel();
    }
    return n;
}

void SharedBank::validate(const ArchitectureSample& arch) const {
    if (arch.ops.size() != config_.num_layers || arch.skips.size() != config_.num_layers) {
        throw ArchError("architecture has " + std::to_string(arch.ops.size()) + " layers, supernet has " +
                        std::to_string(config_.num_layers));
    }
    for (std::size_t l = 0; l < arch.ops.size(); ++l) {
        if (arch.ops[l] >= space_.size()) {
            throw ArchError("layer " + std::to_string(l) + ": action " + std::to_string(arch.ops[l]) +
                            " outside table of size " + std::to_string(space_.size()));
        }
        if (arch.skips[l].size() != l) {
            throw ArchError("layer " + std::to_string(l) + ": skip mask has " + std::to_string(arch.skips[l].size()) +
                            " entries, expected " + std::to_string(l));
        }
    }
}

struct ForwardPass {
    static ChildOutput run(SharedBank& bank, const ArchitectureSample& arch, const Tensor& images,
                           std::span<const int> labels, const ForwardOptions& opt) {
        bank.validate(arch);
        if (images.rank() != 4 || images.dim(1) != bank.config_.in_channels) {
            throw ag::ShapeError("child_forward: images must be (B," + std::to_string(bank.config_.in_channels) +
                                 ",H,W), got " + ag::shape_string(images.shape()));
        }
        if (labels.size() != images.dim(0)) {
            throw ag::ShapeError("child_forward: " + std::to_string(labels.size()) + " labels for batch of " +
                                 std::to_string(images.dim(0)));
        }
        const layers::ForwardContext ctx{opt.tape, opt.mode, opt.rng, opt.update_stats};
        const auto bn = ctx.batch_norm_attrs();
        // Eval mode reads running statistics; training folds into them only on request.
        auto stats = [&](ag::BatchNormStats& s) -> ag::BatchNormStats* {
            return ctx.training() && !opt.update_stats ? nullptr : &s;
        };
        const bool drop = ctx.training() && opt.skip_keep_prob < 1.0;
        if (drop && !opt.rng) throw std::invalid_argument("child_forward: drop-path needs an rng");

        Tensor x = ag::conv2d(images, ctx.use(bank.stem_weight_), {1, 1, 1});
        x = ag::batch_norm(x, ctx.use(bank.stem_gamma_), ctx.use(bank.stem_beta_), stats(bank.stem_stats_), bn);
        const Tensor stem = x;

        std::vector<Tensor> outs;
        outs.reserve(arch.ops.size());
        for (std::size_t l = 0; l < arch.ops.size(); ++l) {
            std::vector<Tensor> terms{bank.slots_[l][arch.ops[l]].forward(x, ctx)};
            for (std::size_t j = 0; j < l; ++j) {
                if (!arch.skips[l][j]) continue;
                terms.push_back(drop ? drop_path(outs[j], opt.skip_keep_prob, *opt.rng) : outs[j]);
            }
            const Tensor agg = terms.size() == 1 ? terms[0] : ag::add_n(terms);
            auto& norm = bank.norms_[l];
            x = ag::batch_norm(agg, ctx.use(norm.gamma), ctx.use(norm.beta), stats(norm.stats), bn);
            outs.push_back(x);
        }

        ChildOutput out;
        out.logits = ag::linear(ag::global_avg_pool(x), ctx.use(bank.head_weight_), ctx.use(bank.head_bias_));
        out.loss = ag::softmax_cross_entropy(out.logits, labels);
        if (!std::isfinite(out.loss.item())) {
            int layer = static_cast<int>(outs.size());
            if (!all_finite(stem)) {
                layer = -1;
            } else {
                for (std::size_t l = 0; l < outs.size(); ++l) {
                    if (!all_finite(outs[l])) {
                        layer = static_cast<int>(l);
                        break;
                    }
                }
            }
            const std::string where = layer < 0 ? "stem"
                                      : layer == static_cast<int>(outs.size())
                                          ? "classifier head"
                                          : "layer " + std::to_string(layer) + " (" +
                                                bank.space_.action_table()[arch.ops[layer]].spec.canonical() + ")";
            throw ChildNanError("non-finite child loss; first non-finite output at " + where, layer);
        }
        out.accuracy = accuracy(out.logits, labels);
        return out;
    }
};

ChildOutput child_forward(SharedBank& bank, const ArchitectureSample& arch, const Tensor& images,
                          std::span<const int> labels, const ForwardOptions& options) {
    return ForwardPass::run(bank, arch, images, labels, options);
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    if (rows == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const float* row = logits.data() + r * cols;
        std::size_t best = 0;
        for (std::size_t c = 1; c < cols; ++c)
            if (row[c] > row[best]) best = c;
        correct += static_cast<int>(best) == labels[r];
    }
    return static_cast<double>(correct) / static_cast<double>(rows);
}

TrainStepResult child_train_step(SharedBank& bank, const ArchitectureSample& arch, const Tensor& images,
                                 std::span<const int> labels, ag::OptimizerState& opt, double learning_rate,
                                 Philox& rng) {
    ag::Tape tape;
    ForwardOptions fwd;
    fwd.tape = &tape;
    fwd.mode = Mode::Train;
    fwd.rng = &rng;
    fwd.update_stats = true;
    fwd.skip_keep_prob = bank.config().keep_prob;
    const ChildOutput out = child_forward(bank, arch, images, labels, fwd);
    const auto grads = tape.backward(out.loss);
    const auto params = bank.parameters_for(arch);

    TrainStepResult result;
    result.loss = out.loss.item();
    result.accuracy = out.accuracy;
    result.step = ag::sgd_step(params, grads, opt, learning_rate);
    return result;
}

std::string format_architecture(const ArchitectureSample& arch, const space::SearchSpace& space) {
    std::string text;
    for (std::size_t l = 0; l < arch.ops.size(); ++l) {
        text += "layer " + std::to_string(l) + ": op=" + space.classify_action(arch.ops[l]).spec.canonical() +
                " skips=[";
        for (std::size_t j = 0; j < l; ++j) {
            if (j) text += ",";
            text += arch.skips.at(l).at(j) ? "1" : "0";
        }
        text += "]\n";
    }
    return text;
}

ArchitectureSample parse_architecture(std::string_view text, const space::SearchSpace& space) {
    ArchitectureSample arch;
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        auto fail = [&](const std::string& why) {
            throw ArchError("architecture line " + std::to_string(line_no) + ": " + why + ": '" + line + "'");
        };
        if (line.rfind("layer ", 0) != 0) fail("expected 'layer <i>:'");
        const auto colon = line.find(':');
        if (colon == std::string::npos) fail("missing ':'");
        std::size_t index = 0;
        const std::string num = trim(std::string_view(line).substr(6, colon - 6));
        const auto [end, ec] = std::from_chars(num.data(), num.data() + num.size(), index);
        if (ec != std::errc() || end != num.data() + num.size()) fail("bad layer index");
        if (index != arch.ops.size()) fail("layers must be listed in order from 0");

        const auto op_at = line.find("op=", colon);
        const auto skips_at = line.find("skips=[", colon);
        if (op_at == std::string::npos || skips_at == std::string::npos || skips_at < op_at) {
            fail("expected 'op=<spec> skips=[...]'");
        }
        const std::string op_text = trim(std::string_view(line).substr(op_at + 3, skips_at - op_at - 3));
        layers::OperationSpec spec;
        try {
            spec = layers::OperationSpec::parse(op_text);
        } catch (const layers::SpecError& e) {
            fail(e.what());
        }
        const auto& table = space.action_table();
        const auto it = std::find_if(table.begin(), table.end(), [&](const space::ActionSlot& s) { return s.spec == spec; });
        if (it == table.end()) fail("operation '" + op_text + "' is not in the search space");

        const auto close = line.find(']', skips_at);
        if (close == std::string::npos) fail("unterminated skip list");
        std::vector<std::uint8_t> mask;
        std::string body = line.substr(skips_at + 7, close - skips_at - 7);
        std::stringstream items(body);
        std::string item;
        while (std::getline(items, item, ',')) {
            const std::string bit = trim(item);
            if (bit == "0") {
                mask.push_back(0);
            } else if (bit == "1") {
                mask.push_back(1);
            } else if (!(bit.empty() && body.find_first_not_of(" ") == std::string::npos)) {
                fail("skip entries must be 0 or 1");
            }
        }
        if (mask.size() != index) fail("layer " + std::to_string(index) + " needs " + std::to_string(index) + " skip bits");

        arch.ops.push_back(static_cast<std::size_t>(it - table.begin()));
        arch.skip_count += static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
        arch.skips.push_back(std::move(mask));
    }
    if (arch.ops.empty()) throw ArchError("architecture text has no layers");
    return arch;
}

}  // namespace ssp::supernet
