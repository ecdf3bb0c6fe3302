#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ssp/controller/controller.hpp"
#include "ssp/space/search_space.hpp"
#include "ssp/supernet/supernet.hpp"

namespace ssp::harness {

/// A configuration key is unknown, malformed or out of range. `key()` names it.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string key, const std::string& message)
        : std::invalid_argument(key + ": " + message), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

/// Every experiment setting. Default construction gives the published ENAS
/// hyperparameters; `desk_profile()` scales them down for one CPU core.
struct ExperimentConfig {
    std::string search_for = "macro";
    std::string dataset = "cifar10";  // cifar10 | synthetic
    std::size_t n_classes = 10;
    std::size_t n_train = 45000;
    std::size_t n_val = 5000;
    std::size_t batch_size = 128;
    std::size_t num_epochs = 300;
    std::uint64_t seed = 69;
    std::size_t cutout = 0;
    std::string fixed_arc;  // path to an architecture file; empty means search

    std::size_t child_num_layers = 12;
    std::size_t child_out_filters = 36;
    double child_grad_bound = 5.0;
    double child_l2_reg = 0.00025;
    double child_keep_prob = 0.9;
    double child_lr_max = 0.05;
    double child_lr_min = 0.0005;
    double child_lr_T = 10.0;

    std::size_t controller_lstm_size = 64;
    std::size_t controller_lstm_num_layers = 1;
    double controller_entropy_weight = 0.0001;
    std::size_t controller_train_every = 1;
    std::size_t controller_num_aggregate = 20;
    std::size_t controller_train_steps = 50;
    double controller_lr = 0.001;
    double controller_tanh_constant = 1.5;
    double controller_op_tanh_reduce = 2.5;
    double controller_skip_target = 0.4;
    double controller_skip_weight = 0.8;
    double controller_bl_dec = 0.99;

    double p = 1.0;  // dropout rate of preset Dropout members

    std::string space = "base";
    std::size_t runs = 3;
    std::string profile = "paper";
    std::string data_dir = "data/cifar-10-batches-bin";
    std::size_t synthetic_test_per_class = 128;
    bool augment = true;
    std::string output_dir = "out";

    bool operator==(const ExperimentConfig&) const = default;
};

/// Defaults with the single-core overrides: 6 layers, 16 filters, 30 epochs,
/// 4096 synthetic samples in 8 classes, and a shorter controller phase.
ExperimentConfig desk_profile();

struct ConfigKey {
    std::string name;
    std::string help;
    std::string default_value;  // as text, from ExperimentConfig{}
};

/// All keys in file order.
const std::vector<ConfigKey>& config_keys();
bool is_config_key(std::string_view key);

/// Accepts `child_num_layers`, `child.num-layers` and `child-num-layers`.
std::string canonical_key(std::string_view key);

std::string get_value(const ExperimentConfig& cfg, std::string_view key);
/// Throws ConfigError naming the key for unknown keys and unparseable values.
void set_value(ExperimentConfig& cfg, std::string_view key, std::string_view value);

/// `key=value` lines; `#` starts a comment. Later lines win.
void apply_config_text(ExperimentConfig& cfg, std::string_view text);
std::string to_config_text(const ExperimentConfig& cfg);

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);

/// Keys whose value differs from the published defaults, with both values.
nlohmann::json overrides(const ExperimentConfig& cfg);

/// Range checks plus a parse of the space text. Throws ConfigError.
void validate(const ExperimentConfig& cfg);

space::SearchSpace build_space(const ExperimentConfig& cfg);
supernet::SupernetConfig supernet_config(const ExperimentConfig& cfg);
controller::ControllerConfig controller_config(const ExperimentConfig& cfg);

}  // namespace ssp::harness
