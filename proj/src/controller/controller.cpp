#include "ssp/controller/controller.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <map>

#include "ssp/autograd/ops.hpp"

namespace ssp::controller {

namespace ag = ssp::autograd;

namespace {

void fill_uniform(Parameter& p, double range, Philox& rng) {
    for (auto& v : p.value) v = static_cast<float>((rng.uniform() * 2.0 - 1.0) * range);
}

std::string to_hex(std::uint64_t bits, int width) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%0*llx", width, static_cast<unsigned long long>(bits));
    return buf;
}

std::uint64_t from_hex(const std::string& text) {
    std::size_t used = 0;
    const auto v = std::stoull(text, &used, 16);
    if (used != text.size()) throw CheckpointError("bad hex value '" + text + "'");
    return v;
}

enum class Choose { Sample, Greedy, Fixed };

struct Weights {
    Tensor w[4], b[4];
    Tensor g_emb, w_emb, w_soft, w_attn_1, w_attn_2, v_attn;
};

struct Decoded {
    ArchitectureSample arch;
    std::vector<Tensor> log_probs;  // scalars
    std::vector<Tensor> entropies;  // scalars
    std::vector<Tensor> skip_probs;  // (1,1)
};

std::size_t choose_category(const Tensor& log_softmax_row, Choose how, Philox* rng, std::size_t fixed) {
    const auto lp = log_softmax_row.values();
    if (how == Choose::Fixed) {
        if (fixed >= lp.size()) throw std::out_of_range("op index outside action table");
        return fixed;
    }
    if (how == Choose::Greedy) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < lp.size(); ++i)
            if (lp[i] > lp[best]) best = i;
        return best;
    }
    const double u = rng->uniform();
    double cumulative = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) {
        cumulative += std::exp(static_cast<double>(lp[i]));
        if (u < cumulative) return i;
    }
    // Rounding left a sliver above the last cumulative sum.
    std::size_t last = lp.size() - 1;
    while (last > 0 && std::exp(static_cast<double>(lp[last])) == 0.0) --last;
    return last;
}

}  // namespace

Controller::Controller(ControllerConfig config, std::size_t num_actions, Philox& init_rng)
    : config_(config), num_actions_(num_actions), adam_({config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps}) {
    if (num_actions_ == 0) throw std::invalid_argument("controller needs at least one action");
    if (config_.num_layers == 0) throw std::invalid_argument("controller needs at least one layer");
    const std::size_t h = config_.lstm_size;
    const char* gate_names[4] = {"input", "forget", "output", "cell"};
    for (int g = 0; g < 4; ++g) {
        lstm_.w[g] = Parameter(std::string("lstm/w_") + gate_names[g], {h, 2 * h});
        lstm_.b[g] = Parameter(std::string("lstm/b_") + gate_names[g], {h});
    }
    g_emb_ = Parameter("g_emb", {1, h});
    w_emb_ = Parameter("w_emb", {num_actions_, h});
    w_soft_ = Parameter("w_soft", {h, num_actions_});
    w_attn_1_ = Parameter("w_attn_1", {h, h});
    w_attn_2_ = Parameter("w_attn_2", {h, h});
    v_attn_ = Parameter("v_attn", {h, 1});
    for (Parameter* p : parameters()) fill_uniform(*p, config_.init_range, init_rng);
}

std::vector<Parameter*> Controller::parameters() {
    std::vector<Parameter*> out;
    for (int g = 0; g < 4; ++g) out.push_back(&lstm_.w[g]);
    for (int g = 0; g < 4; ++g) out.push_back(&lstm_.b[g]);
    for (Parameter* p : {&g_emb_, &w_emb_, &w_soft_, &w_attn_1_, &w_attn_2_, &v_attn_}) out.push_back(p);
    return out;
}

std::vector<const Parameter*> Controller::parameters() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<Controller*>(this)->parameters()) out.push_back(p);
    return out;
}

void Controller::zero_op_head() { std::fill(w_soft_.value.begin(), w_soft_.value.end(), 0.0f); }
void Controller::zero_skip_head() { std::fill(v_attn_.value.begin(), v_attn_.value.end(), 0.0f); }

namespace {

Weights constant_weights(const std::vector<const Parameter*>& params) {
    auto t = [](const Parameter* p) { return Tensor(p->shape, p->value); };
    Weights w;
    for (int g = 0; g < 4; ++g) {
        w.w[g] = t(params[g]);
        w.b[g] = t(params[4 + g]);
    }
    w.g_emb = t(params[8]);
    w.w_emb = t(params[9]);
    w.w_soft = t(params[10]);
    w.w_attn_1 = t(params[11]);
    w.w_attn_2 = t(params[12]);
    w.v_attn = t(params[13]);
    return w;
}

Weights watched_weights(const std::vector<Parameter*>& params, ag::Tape& tape) {
    Weights w;
    for (int g = 0; g < 4; ++g) {
        w.w[g] = tape.watch(*params[g]);
        w.b[g] = tape.watch(*params[4 + g]);
    }
    w.g_emb = tape.watch(*params[8]);
    w.w_emb = tape.watch(*params[9]);
    w.w_soft = tape.watch(*params[10]);
    w.w_attn_1 = tape.watch(*params[11]);
    w.w_attn_2 = tape.watch(*params[12]);
    w.v_attn = tape.watch(*params[13]);
    return w;
}

Decoded run_policy(const Weights& w, const ControllerConfig& cfg, Choose how, Philox* rng,
                   const ArchitectureSample* fixed) {
    const std::size_t hsize = cfg.lstm_size;
    const std::size_t layers = fixed ? fixed->ops.size() : cfg.num_layers;
    const bool squash = cfg.tanh_constant > 0.0;
    const float op_scale = squash ? static_cast<float>(cfg.tanh_constant / cfg.op_tanh_reduce) : 1.0f;
    const float skip_scale = static_cast<float>(cfg.tanh_constant);

    auto lstm = [&](const Tensor& x, Tensor& h, Tensor& c) {
        const Tensor xh[] = {x, h};
        const Tensor joined = ag::concat_columns(xh);
        const Tensor i = ag::sigmoid(ag::linear(joined, w.w[0], w.b[0]));
        const Tensor f = ag::sigmoid(ag::linear(joined, w.w[1], w.b[1]));
        const Tensor o = ag::sigmoid(ag::linear(joined, w.w[2], w.b[2]));
        const Tensor g = ag::tanh(ag::linear(joined, w.w[3], w.b[3]));
        c = ag::add(ag::mul(i, g), ag::mul(f, c));
        h = ag::mul(o, ag::tanh(c));
    };

    Decoded out;
    out.arch.ops.reserve(layers);
    Tensor h = Tensor::zeros({1, hsize});
    Tensor c = Tensor::zeros({1, hsize});
    Tensor inputs = w.g_emb;
    std::vector<Tensor> anchors, anchors_w1;

    for (std::size_t layer = 0; layer < layers; ++layer) {
        lstm(inputs, h, c);
        Tensor logits = ag::matmul(h, w.w_soft);
        if (squash) logits = ag::scale(ag::tanh(logits), op_scale);
        const Tensor lsm = ag::log_softmax(logits);
        const std::size_t op = choose_category(lsm, how, rng, fixed ? fixed->ops[layer] : 0);
        out.arch.ops.push_back(op);
        out.log_probs.push_back(ag::pick(lsm, op));
        out.entropies.push_back(ag::scale(ag::sum(ag::mul(ag::exp(lsm), lsm)), -1.0f));

        lstm(ag::row(w.w_emb, op), h, c);
        std::vector<std::uint8_t> mask(layer, 0);
        if (layer > 0) {
            if (fixed && fixed->skips.at(layer).size() != layer) {
                throw std::invalid_argument("skip mask of layer " + std::to_string(layer) + " must have " +
                                            std::to_string(layer) + " entries");
            }
            const Tensor query = ag::matmul(h, w.w_attn_2);
            std::vector<Tensor> chosen;
            for (std::size_t j = 0; j < layer; ++j) {
                Tensor logit = ag::matmul(ag::tanh(ag::add(anchors_w1[j], query)), w.v_attn);
                if (squash) logit = ag::scale(ag::tanh(logit), skip_scale);
                const Tensor p = ag::sigmoid(logit);
                bool skip = false;
                switch (how) {
                    case Choose::Fixed: skip = fixed->skips[layer][j] != 0; break;
                    case Choose::Greedy: skip = p[0] > 0.5f; break;
                    case Choose::Sample: skip = rng->uniform() < static_cast<double>(p[0]); break;
                }
                mask[j] = skip ? 1 : 0;
                const Tensor log_p = ag::log_sigmoid(logit);
                const Tensor log_not_p = ag::log_sigmoid(ag::scale(logit, -1.0f));
                out.log_probs.push_back(ag::sum(skip ? log_p : log_not_p));
                const Tensor one_minus_p = ag::add_constant(ag::scale(p, -1.0f), Tensor::full({1, 1}, 1.0f));
                out.entropies.push_back(
                    ag::scale(ag::sum(ag::add(ag::mul(p, log_p), ag::mul(one_minus_p, log_not_p))), -1.0f));
                out.skip_probs.push_back(p);
                if (skip) chosen.push_back(anchors[j]);
            }
            out.arch.skip_count += chosen.size();
            inputs = chosen.empty() ? Tensor::zeros({1, hsize})
                                    : ag::scale(ag::add_n(chosen), 1.0f / static_cast<float>(1 + chosen.size()));
        } else {
            inputs = w.g_emb;
        }
        out.arch.skips.push_back(std::move(mask));
        anchors.push_back(h);
        anchors_w1.push_back(ag::matmul(h, w.w_attn_1));
    }

    for (const auto& t : out.log_probs) out.arch.log_prob += t.item();
    for (const auto& t : out.entropies) out.arch.entropy += t.item();
    return out;
}

}  // namespace

ArchitectureSample Controller::sample(Philox& rng) const {
    return run_policy(constant_weights(parameters()), config_, Choose::Sample, &rng, nullptr).arch;
}

ArchitectureSample Controller::most_likely() const {
    return run_policy(constant_weights(parameters()), config_, Choose::Greedy, nullptr, nullptr).arch;
}

PolicyScore Controller::score(ag::Tape& tape, const ArchitectureSample& arch) {
    if (arch.skips.size() != arch.ops.size()) throw std::invalid_argument("architecture needs one skip mask per layer");
    Decoded d = run_policy(watched_weights(parameters(), tape), config_, Choose::Fixed, nullptr, &arch);
    PolicyScore s;
    s.log_prob = ag::add_n(d.log_probs);
    s.entropy = ag::add_n(d.entropies);
    if (d.skip_probs.empty()) {
        s.skip_penalty = Tensor::scalar(0.0f);
        return s;
    }
    const Tensor mean_p = ag::scale(ag::add_n(d.skip_probs), 1.0f / static_cast<float>(d.skip_probs.size()));
    s.mean_skip_prob = mean_p[0];
    const float t = static_cast<float>(config_.skip_target);
    const Tensor one = Tensor::full({1, 1}, 1.0f);
    const Tensor log_p = ag::log(mean_p);
    const Tensor log_not_p = ag::log(ag::add_constant(ag::scale(mean_p, -1.0f), one));
    s.skip_penalty = ag::scale(ag::sum(ag::add(ag::scale(log_p, t), ag::scale(log_not_p, 1.0f - t))), -1.0f);
    return s;
}

namespace {

std::vector<double> clean_rewards(std::span<const double> rewards) {
    std::vector<double> out;
    for (double r : rewards) {
        if (std::isnan(r)) r = 0.0;
        if (r < 0.0 || r > 1.0) throw std::invalid_argument("reward " + std::to_string(r) + " outside [0,1]");
        out.push_back(r);
    }
    return out;
}

}  // namespace

Tensor Controller::surrogate_loss(std::span<const ArchitectureSample> batch, std::span<const double> rewards,
                                  double baseline, ag::Tape& tape, double* mean_skip_prob) {
    if (batch.empty() || batch.size() != rewards.size()) {
        throw std::invalid_argument("reinforce: need one reward per sampled architecture");
    }
    const auto r = clean_rewards(rewards);
    std::vector<Tensor> terms;
    double skip_sum = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const PolicyScore s = score(tape, batch[b]);
        skip_sum += s.mean_skip_prob;
        terms.push_back(ag::scale(s.log_prob, static_cast<float>(-(r[b] - baseline))));
        if (config_.entropy_weight != 0.0) {
            terms.push_back(ag::scale(s.entropy, static_cast<float>(-config_.entropy_weight)));
        }
        if (config_.skip_weight != 0.0 && s.skip_penalty.requires_grad()) {
            terms.push_back(ag::scale(s.skip_penalty, static_cast<float>(config_.skip_weight)));
        }
    }
    if (mean_skip_prob) *mean_skip_prob = skip_sum / static_cast<double>(batch.size());
    return ag::scale(ag::add_n(terms), 1.0f / static_cast<float>(batch.size()));
}

ag::Gradients Controller::surrogate_gradients(std::span<const ArchitectureSample> batch,
                                              std::span<const double> rewards, double baseline, ag::Tape& tape) {
    return tape.backward(surrogate_loss(batch, rewards, baseline, tape, nullptr));
}

UpdateDiagnostics Controller::reinforce_update(std::span<const ArchitectureSample> batch,
                                               std::span<const double> rewards) {
    const auto r = clean_rewards(rewards);
    double mean_reward = 0.0;
    for (double v : r) mean_reward += v;
    mean_reward /= static_cast<double>(r.empty() ? 1 : r.size());
    if (!baseline_set_) set_baseline(mean_reward);

    UpdateDiagnostics diag;
    ag::Tape tape;
    const Tensor loss = surrogate_loss(batch, r, baseline_, tape, &diag.mean_skip_prob);
    diag.loss = loss.item();
    const auto grads = tape.backward(loss);
    std::vector<Parameter*> with_grad;
    for (Parameter* p : parameters())
        if (grads.find(*p)) with_grad.push_back(p);
    adam_.step(with_grad, grads);

    baseline_ = config_.bl_dec * baseline_ + (1.0 - config_.bl_dec) * mean_reward;
    diag.baseline = baseline_;
    diag.mean_reward = mean_reward;
    return diag;
}

nlohmann::json Controller::checkpoint() const {
    nlohmann::json j;
    j["format"] = "ssp-controller";
    j["version"] = 1;
    j["lstm_size"] = config_.lstm_size;
    j["num_layers"] = config_.num_layers;
    j["num_actions"] = num_actions_;
    j["baseline"] = to_hex(std::bit_cast<std::uint64_t>(baseline_), 16);
    j["baseline_initialized"] = baseline_set_;
    j["adam_steps"] = adam_.steps();
    auto& params = j["parameters"] = nlohmann::json::object();
    for (const Parameter* p : parameters()) {
        auto& entry = params[p->name];
        entry["shape"] = p->shape;
        auto& values = entry["values"] = nlohmann::json::array();
        for (float v : p->value) values.push_back(to_hex(std::bit_cast<std::uint32_t>(v), 8));
    }
    return j;
}

void Controller::restore(const nlohmann::json& j) {
    try {
        if (j.at("format") != "ssp-controller" || j.at("version") != 1) throw CheckpointError("unsupported checkpoint");
        if (j.at("lstm_size").get<std::size_t>() != config_.lstm_size ||
            j.at("num_actions").get<std::size_t>() != num_actions_) {
            throw CheckpointError("checkpoint does not match controller dimensions");
        }
        for (Parameter* p : parameters()) {
            const auto& entry = j.at("parameters").at(p->name);
            if (entry.at("shape").get<autograd::Shape>() != p->shape) {
                throw CheckpointError("shape mismatch for '" + p->name + "'");
            }
            const auto& values = entry.at("values");
            if (values.size() != p->numel()) throw CheckpointError("length mismatch for '" + p->name + "'");
            for (std::size_t i = 0; i < p->numel(); ++i) {
                p->value[i] = std::bit_cast<float>(static_cast<std::uint32_t>(from_hex(values[i].get<std::string>())));
            }
        }
        baseline_ = std::bit_cast<double>(from_hex(j.at("baseline").get<std::string>()));
        baseline_set_ = j.at("baseline_initialized").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
    }
}

std::vector<OpFrequency> sampled_op_histogram(std::span<const ArchitectureSample> samples,
                                              const space::SearchSpace& space) {
    std::vector<OpFrequency> out;
    std::map<std::pair<int, std::string>, std::size_t> index;
    for (const auto& slot : space.action_table()) {
        const auto key = std::make_pair(static_cast<int>(slot.kind), slot.spec.canonical());
        if (index.emplace(key, out.size()).second) out.push_back({key.second, slot.kind, 0.0});
    }
    std::vector<std::size_t> counts(out.size(), 0);
    std::size_t total = 0;
    for (const auto& arch : samples) {
        for (std::size_t op : arch.ops) {
            const auto& slot = space.classify_action(op);
            ++counts[index.at({static_cast<int>(slot.kind), slot.spec.canonical()})];
            ++total;
        }
    }
    if (total == 0) throw std::invalid_argument("histogram needs at least one decision");
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].fraction = static_cast<double>(counts[i]) / static_cast<double>(total);
    }
    return out;
}

}  // namespace ssp::controller
