#include "ssp/harness/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>
#include <variant>

namespace ssp::harness {
namespace {

using Cfg = ExperimentConfig;
static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seed is stored through a std::size_t member pointer");
using Member = std::variant<std::string Cfg::*, std::size_t Cfg::*, double Cfg::*, bool Cfg::*>;

struct Field {
    const char* name;
    Member member;
    const char* help;
};

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"search_for", &Cfg::search_for, "search mode (macro only)"},
        {"dataset", &Cfg::dataset, "cifar10 or synthetic"},
        {"n_classes", &Cfg::n_classes, "number of classes"},
        {"n_train", &Cfg::n_train, "training records"},
        {"n_val", &Cfg::n_val, "validation records, taken from the end of the training files"},
        {"batch_size", &Cfg::batch_size, "minibatch size for child training and rewards"},
        {"num_epochs", &Cfg::num_epochs, "search epochs"},
        {"seed", &Cfg::seed, "root random seed"},
        {"cutout", &Cfg::cutout, "cutout size (only 0 is supported)"},
        {"fixed_arc", &Cfg::fixed_arc, "architecture file to train instead of searching (empty: search)"},
        {"child_num_layers", &Cfg::child_num_layers, "supernet layers"},
        {"child_out_filters", &Cfg::child_out_filters, "channels per layer"},
        {"child_grad_bound", &Cfg::child_grad_bound, "global gradient-norm clip"},
        {"child_l2_reg", &Cfg::child_l2_reg, "L2 weight decay"},
        {"child_keep_prob", &Cfg::child_keep_prob, "keep probability of skip branches while training"},
        {"child_lr_max", &Cfg::child_lr_max, "cosine schedule maximum"},
        {"child_lr_min", &Cfg::child_lr_min, "cosine schedule minimum"},
        {"child_lr_T", &Cfg::child_lr_T, "cosine restart period in epochs"},
        {"controller_lstm_size", &Cfg::controller_lstm_size, "controller hidden size"},
        {"controller_lstm_num_layers", &Cfg::controller_lstm_num_layers, "controller LSTM depth (only 1)"},
        {"controller_entropy_weight", &Cfg::controller_entropy_weight, "entropy bonus weight"},
        {"controller_train_every", &Cfg::controller_train_every, "epochs between controller phases"},
        {"controller_num_aggregate", &Cfg::controller_num_aggregate, "architectures per controller update"},
        {"controller_train_steps", &Cfg::controller_train_steps, "controller updates per phase"},
        {"controller_lr", &Cfg::controller_lr, "controller Adam learning rate"},
        {"controller_tanh_constant", &Cfg::controller_tanh_constant, "logit squash constant (0 disables)"},
        {"controller_op_tanh_reduce", &Cfg::controller_op_tanh_reduce, "divisor of the op-logit squash"},
        {"controller_skip_target", &Cfg::controller_skip_target, "target skip probability"},
        {"controller_skip_weight", &Cfg::controller_skip_weight, "skip penalty weight"},
        {"controller_bl_dec", &Cfg::controller_bl_dec, "reward baseline decay"},
        {"p", &Cfg::p, "dropout rate of Dropout members in presets"},
        {"space", &Cfg::space, "search space text: base [+ N*preset | + N*op(args)]*"},
        {"runs", &Cfg::runs, "runs per experiment (seeds seed, seed+1, ...)"},
        {"profile", &Cfg::profile, "paper or desk"},
        {"data_dir", &Cfg::data_dir, "directory with the CIFAR-10 binary batches"},
        {"synthetic_test_per_class", &Cfg::synthetic_test_per_class, "synthetic test samples per class"},
        {"augment", &Cfg::augment, "pad-crop-flip augmentation of training batches"},
        {"output_dir", &Cfg::output_dir, "directory for reports"},
    };
    return table;
}

const Field* find_field(std::string_view key) {
    const std::string name = canonical_key(key);
    for (const auto& f : fields())
        if (name == f.name) return &f;
    return nullptr;
}

const Field& require_field(std::string_view key) {
    const Field* f = find_field(key);
    if (!f) throw ConfigError(std::string(key), "unknown configuration key");
    return *f;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
    char buf[64];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

template <typename T>
T parse_number(const Field& f, std::string_view text) {
    T value{};
    const char* first = text.data();
    const char* last = text.data() + text.size();
    const auto [end, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || end != last || text.empty()) {
        throw ConfigError(f.name, "cannot parse '" + std::string(text) + "'");
    }
    return value;
}

bool parse_bool(const Field& f, std::string_view text) {
    std::string s(text);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(f.name, "expected true or false, got '" + std::string(text) + "'");
}

std::string read(const Cfg& cfg, const Field& f) {
    return std::visit(
        [&](auto member) -> std::string {
            using T = std::decay_t<decltype(cfg.*member)>;
            if constexpr (std::is_same_v<T, std::string>) return cfg.*member;
            else if constexpr (std::is_same_v<T, bool>) return cfg.*member ? "true" : "false";
            else if constexpr (std::is_same_v<T, double>) return format_double(cfg.*member);
            else return std::to_string(cfg.*member);
        },
        f.member);
}

void write(Cfg& cfg, const Field& f, std::string_view text) {
    std::visit(
        [&](auto member) {
            using T = std::decay_t<decltype(cfg.*member)>;
            if constexpr (std::is_same_v<T, std::string>) cfg.*member = std::string(text);
            else if constexpr (std::is_same_v<T, bool>) cfg.*member = parse_bool(f, text);
            else cfg.*member = parse_number<T>(f, text);
        },
        f.member);
}

}  // namespace

ExperimentConfig desk_profile() {
    ExperimentConfig cfg;
    cfg.profile = "desk";
    cfg.dataset = "synthetic";
    cfg.n_classes = 8;
    cfg.n_train = 3686;
    cfg.n_val = 410;
    cfg.num_epochs = 30;
    cfg.child_num_layers = 6;
    cfg.child_out_filters = 16;
    cfg.controller_train_steps = 10;
    cfg.controller_num_aggregate = 10;
    return cfg;
}

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> out;
        const Cfg defaults;
        for (const auto& f : fields()) out.push_back({f.name, f.help, read(defaults, f)});
        return out;
    }();
    return keys;
}

bool is_config_key(std::string_view key) { return find_field(key) != nullptr; }

std::string canonical_key(std::string_view key) {
    std::string out = trim(key);
    while (out.rfind("--", 0) == 0) out.erase(0, 2);
    for (auto& c : out)
        if (c == '.' || c == '-') c = '_';
    return out;
}

std::string get_value(const ExperimentConfig& cfg, std::string_view key) { return read(cfg, require_field(key)); }

void set_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
    write(cfg, require_field(key), trim(value));
}

void apply_config_text(ExperimentConfig& cfg, std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(body, "line " + std::to_string(line_no) + " is not key=value");
        }
        set_value(cfg, trim(std::string_view(body).substr(0, eq)), std::string_view(body).substr(eq + 1));
    }
}

std::string to_config_text(const ExperimentConfig& cfg) {
    std::string out;
    for (const auto& f : fields()) out += std::string(f.name) + "=" + read(cfg, f) + "\n";
    return out;
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& f : fields()) {
        std::visit([&](auto member) { j[f.name] = cfg.*member; }, f.member);
    }
    return j;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config", "expected a JSON object");
    ExperimentConfig cfg;
    for (const auto& [key, value] : j.items()) {
        const Field& f = require_field(key);
        try {
            std::visit(
                [&](auto member) {
                    using T = std::decay_t<decltype(cfg.*member)>;
                    cfg.*member = value.get<T>();
                },
                f.member);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(key, std::string("bad JSON value: ") + e.what());
        }
    }
    return cfg;
}

nlohmann::json overrides(const ExperimentConfig& cfg) {
    const ExperimentConfig defaults;
    nlohmann::json out = nlohmann::json::object();
    for (const auto& f : fields()) {
        const std::string now = read(cfg, f), before = read(defaults, f);
        if (now != before) out[f.name] = {{"default", before}, {"value", now}};
    }
    return out;
}

void validate(const ExperimentConfig& cfg) {
    auto positive = [](const char* key, double v) {
        if (!(v > 0)) throw ConfigError(key, "must be positive");
    };
    if (cfg.search_for != "macro") throw ConfigError("search_for", "only macro search is implemented");
    if (cfg.dataset != "cifar10" && cfg.dataset != "synthetic") {
        throw ConfigError("dataset", "expected cifar10 or synthetic, got '" + cfg.dataset + "'");
    }
    if (cfg.profile != "paper" && cfg.profile != "desk") throw ConfigError("profile", "expected paper or desk");
    positive("n_classes", static_cast<double>(cfg.n_classes));
    positive("n_train", static_cast<double>(cfg.n_train));
    positive("n_val", static_cast<double>(cfg.n_val));
    positive("batch_size", static_cast<double>(cfg.batch_size));
    positive("child_num_layers", static_cast<double>(cfg.child_num_layers));
    positive("child_out_filters", static_cast<double>(cfg.child_out_filters));
    positive("child_grad_bound", cfg.child_grad_bound);
    positive("child_lr_T", cfg.child_lr_T);
    positive("controller_lstm_size", static_cast<double>(cfg.controller_lstm_size));
    positive("controller_train_every", static_cast<double>(cfg.controller_train_every));
    positive("controller_num_aggregate", static_cast<double>(cfg.controller_num_aggregate));
    positive("controller_lr", cfg.controller_lr);
    positive("runs", static_cast<double>(cfg.runs));
    if (cfg.dataset == "cifar10" && cfg.n_classes != 10) throw ConfigError("n_classes", "CIFAR-10 has 10 classes");
    if (cfg.dataset == "cifar10" && cfg.n_train + cfg.n_val > 50000) {
        throw ConfigError("n_train", "n_train + n_val exceeds the 50000 CIFAR-10 training records");
    }
    if (cfg.dataset == "synthetic" && (cfg.n_train + cfg.n_val) % cfg.n_classes != 0) {
        throw ConfigError("n_train", "n_train + n_val must be a multiple of n_classes for balanced synthetic data");
    }
    if (cfg.cutout != 0) throw ConfigError("cutout", "cutout is not supported; use 0");
    if (cfg.child_l2_reg < 0) throw ConfigError("child_l2_reg", "must be non-negative");
    if (!(cfg.child_keep_prob > 0 && cfg.child_keep_prob <= 1)) throw ConfigError("child_keep_prob", "must lie in (0, 1]");
    if (!(cfg.child_lr_min >= 0 && cfg.child_lr_min <= cfg.child_lr_max)) {
        throw ConfigError("child_lr_min", "must lie in [0, child_lr_max]");
    }
    if (cfg.controller_lstm_num_layers != 1) throw ConfigError("controller_lstm_num_layers", "only 1 is supported");
    if (cfg.controller_tanh_constant < 0) throw ConfigError("controller_tanh_constant", "must be non-negative");
    if (!(cfg.controller_op_tanh_reduce > 0)) throw ConfigError("controller_op_tanh_reduce", "must be positive");
    if (!(cfg.controller_skip_target > 0 && cfg.controller_skip_target < 1)) {
        throw ConfigError("controller_skip_target", "must lie in (0, 1)");
    }
    if (!(cfg.controller_bl_dec >= 0 && cfg.controller_bl_dec <= 1)) {
        throw ConfigError("controller_bl_dec", "must lie in [0, 1]");
    }
    if (!(cfg.p >= 0 && cfg.p <= 1)) throw ConfigError("p", "must lie in [0, 1]");
    (void)build_space(cfg);
}

space::SearchSpace build_space(const ExperimentConfig& cfg) {
    try {
        return space::parse_space(cfg.space, cfg.p);
    } catch (const space::SpaceError& e) {
        throw ConfigError("space", std::string(e.what()) + (e.token().empty() ? "" : " [token: " + e.token() + "]"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError("space", e.what());
    }
}

supernet::SupernetConfig supernet_config(const ExperimentConfig& cfg) {
    supernet::SupernetConfig s;
    s.num_layers = cfg.child_num_layers;
    s.out_filters = cfg.child_out_filters;
    s.n_classes = cfg.n_classes;
    s.in_channels = 3;
    s.keep_prob = cfg.child_keep_prob;
    return s;
}

controller::ControllerConfig controller_config(const ExperimentConfig& cfg) {
    controller::ControllerConfig c;
    c.lstm_size = cfg.controller_lstm_size;
    c.num_layers = cfg.child_num_layers;
    c.entropy_weight = cfg.controller_entropy_weight;
    c.lr = cfg.controller_lr;
    c.tanh_constant = cfg.controller_tanh_constant;
    c.op_tanh_reduce = cfg.controller_op_tanh_reduce;
    c.skip_target = cfg.controller_skip_target;
    c.skip_weight = cfg.controller_skip_weight;
    c.bl_dec = cfg.controller_bl_dec;
    c.num_aggregate = cfg.controller_num_aggregate;
    c.train_steps = cfg.controller_train_steps;
    return c;
}

}  // namespace ssp::harness
