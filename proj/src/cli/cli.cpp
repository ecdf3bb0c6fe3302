#include "ssp/cli/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ssp/harness/experiments.hpp"
#include "ssp/harness/report.hpp"
#include "ssp/harness/search.hpp"
#include "ssp/layers/operations.hpp"
#include "ssp/supernet/supernet.hpp"

namespace ssp::cli {

using harness::ConfigError;
using harness::ExperimentConfig;

namespace {

std::string format(const char* fmt, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

std::string read_text_file(const std::string& path, const std::string& key) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(key, "cannot read '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

// Rewrites every spelling of a config key to `--<canonical>` so one option
// per key covers dotted, dashed and underscored forms.
std::vector<std::string> normalize_args(const std::vector<std::string>& args) {
    static const std::map<std::string, std::string> aliases = {{"out", "output_dir"}, {"arc", "fixed_arc"}};
    std::vector<std::string> out;
    for (const auto& a : args) {
        if (a.rfind("--", 0) != 0 || a.size() == 2) {
            out.push_back(a);
            continue;
        }
        const auto eq = a.find('=');
        const std::string name = a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
        std::string key = harness::canonical_key(name);
        if (const auto it = aliases.find(key); it != aliases.end()) key = it->second;
        if (!harness::is_config_key(key)) {
            out.push_back(a);
            continue;
        }
        out.push_back("--" + key + (eq == std::string::npos ? "" : a.substr(eq)));
    }
    return out;
}

struct CommonOptions {
    std::string config_path;
    bool paper_scale = false;
    std::map<std::string, std::string> values;
    std::map<std::string, std::vector<CLI::Option*>> options;

    void attach(CLI::App* sub) {
        sub->add_option("--config", config_path, "key=value config file applied over the profile defaults");
        sub->add_flag("--paper-scale", paper_scale, "start from the published settings instead of the desk profile");
        const ExperimentConfig desk = harness::desk_profile();
        for (const auto& k : harness::config_keys()) {
            std::string names = "--" + k.name;
            const std::string dotted = dotted_key(k.name);
            if (dotted != k.name) names += ",--" + dotted;
            std::string help = k.help + " (default: " + (k.default_value.empty() ? "\"\"" : k.default_value);
            const std::string desk_value = harness::get_value(desk, k.name);
            if (desk_value != k.default_value) help += "; desk profile: " + desk_value;
            help += ")";
            auto* opt = sub->add_option(names, values[k.name], help)->group("Configuration keys");
            options[k.name].push_back(opt);
        }
    }

    ExperimentConfig resolve() const {
        FlagList flags;
        for (const auto& [key, opts] : options) {
            for (const auto* opt : opts) {
                if (opt->count() > 0) flags.emplace_back(key, values.at(key));
            }
        }
        const std::string text = config_path.empty() ? std::string() : read_text_file(config_path, "config");
        return resolve_config(paper_scale, text, flags);
    }
};

harness::SearchHooks progress_hooks(std::ostream& out, const ExperimentConfig& cfg) {
    harness::SearchHooks hooks;
    hooks.on_epoch = [&out, total = cfg.num_epochs](const harness::EpochMetrics& m) {
        out << "epoch " << m.epoch << "/" << total << " lr " << format("%.5f", m.learning_rate) << " loss "
            << format("%.4f", m.child_loss) << " val_error " << format("%.2f", m.val_error_pct) << "% baseline "
            << format("%.4f", m.baseline) << " reward " << format("%.4f", m.mean_reward);
        if (m.nan_steps) out << " nan_steps " << m.nan_steps;
        out << "\n" << std::flush;
    };
    return hooks;
}

void print_final(std::ostream& out, const harness::ExperimentResult& r) {
    out << "final val_error_pct " << format("%.2f", r.mean_val_error_pct) << " test_error_pct "
        << format("%.2f", r.mean_test_error_pct) << " runs " << r.runs.size() << "\n";
}

int cmd_run(const ExperimentConfig& cfg, std::ostream& out) {
    const auto data = harness::load_data(cfg);
    const auto space = harness::build_space(cfg);
    out << "space " << space.describe() << " (" << space.size() << " actions)\n";
    std::vector<harness::RunRecord> records;
    for (std::size_t r = 0; r < cfg.runs; ++r) {
        ExperimentConfig run_cfg = cfg;
        run_cfg.seed = cfg.seed + r;
        out << "run " << r + 1 << "/" << cfg.runs << " seed " << run_cfg.seed << "\n";
        records.push_back(harness::run_search(run_cfg, data, progress_hooks(out, cfg)));
        out << records.back().arch_text;
    }
    harness::emit_report(cfg, records, cfg.output_dir);
    print_final(out, harness::aggregate(records));
    return kOk;
}

int cmd_fixed_arc(const ExperimentConfig& cfg, std::ostream& out) {
    if (cfg.fixed_arc.empty()) throw ConfigError("fixed_arc", "fixed-arc needs an architecture file");
    const auto space = harness::build_space(cfg);
    harness::ArchitectureSample arch;
    try {
        arch = supernet::parse_architecture(read_text_file(cfg.fixed_arc, "fixed_arc"), space);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("fixed_arc", e.what());
    }
    const auto data = harness::load_data(cfg);
    const auto record = harness::run_fixed_arc(cfg, data, arch, progress_hooks(out, cfg));
    harness::emit_report(cfg, {record}, cfg.output_dir);
    print_final(out, harness::aggregate({record}));
    return kOk;
}

std::vector<space::Preset> parse_presets(const std::string& text) {
    std::vector<space::Preset> out;
    for (const auto& name : split_list(text)) {
        const auto p = space::parse_preset(name);
        if (!p) throw ConfigError("presets", "unknown preset '" + name + "'");
        out.push_back(*p);
    }
    return out;
}

std::vector<std::size_t> parse_ladder(const std::string& text) {
    std::vector<std::size_t> out;
    for (const auto& item : split_list(text)) {
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size() || v == 0) throw ConfigError("ladder", "'" + item + "' is not a positive slot count");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

int cmd_grid(const ExperimentConfig& cfg, const std::string& presets, const std::string& ladder, std::size_t jobs,
             std::ostream& out) {
    const auto preset_list = parse_presets(presets);
    const auto slots = parse_ladder(ladder);
    for (const auto p : preset_list) {
        for (const auto s : slots) {
            try {
                harness::instance_factor(p, s);
            } catch (const ConfigError& e) {
                throw ConfigError("ladder", e.what());
            }
        }
    }
    const auto data = harness::load_data(cfg);
    const auto report = harness::run_grid(cfg, preset_list, slots, data, jobs);
    harness::emit_grid_report(cfg, report, cfg.output_dir);
    out << harness::grid_csv(report);
    const bool all_ok = std::all_of(report.cells.begin(), report.cells.end(), [](const auto& c) { return c.ok; });
    return all_ok ? kOk : kRuntimeError;
}

int cmd_oneshot(const ExperimentConfig& cfg, std::size_t jobs, std::ostream& out) {
    const auto data = harness::load_data(cfg);
    const auto report = harness::oneshot_suite(cfg, data, jobs);
    harness::emit_oneshot_report(cfg, report, cfg.output_dir);
    out << harness::oneshot_csv(report);
    const bool all_ok = std::all_of(report.rows.begin(), report.rows.end(), [](const auto& r) { return r.ok; });
    return all_ok ? kOk : kRuntimeError;
}

int cmd_probe(const ExperimentConfig& cfg, const std::vector<std::string>& ops, std::size_t trials, std::size_t size,
              std::ostream& out) {
    std::vector<layers::OperationSpec> specs;
    if (ops.empty()) {
        for (const auto& p : space::uniform_sampling_distribution(harness::build_space(cfg))) specs.push_back(p.spec);
    } else {
        for (const auto& text : ops) {
            try {
                specs.push_back(layers::OperationSpec::parse(text));
            } catch (const std::exception& e) {
                throw ConfigError("op", "'" + text + "': " + e.what());
            }
        }
    }
    if (trials == 0) throw ConfigError("trials", "must be at least 1");
    if (size == 0) throw ConfigError("size", "must be at least 1");
    layers::ProbeOptions opt;
    opt.size = size;
    Philox rng(cfg.seed);
    out << "op,mean,std,zero_fraction,grad_norm,upstream_norm,input_std\n";
    for (const auto& spec : specs) {
        Philox op_rng = rng.split(std::hash<std::string>{}(spec.canonical()));
        const auto s = layers::output_variance_probe(spec, trials, op_rng, opt);
        out << "\"" << spec.canonical() << "\"," << format("%.6g", s.mean) << "," << format("%.6g", s.std) << ","
            << format("%.6g", s.zero_fraction) << "," << format("%.6g", s.grad_norm) << ","
            << format("%.6g", s.upstream_norm) << "," << format("%.6g", s.input_std) << "\n";
    }
    return kOk;
}

int cmd_dump_space(const ExperimentConfig& cfg, std::ostream& out) {
    const auto space = harness::build_space(cfg);
    const auto n = static_cast<std::int64_t>(space.size());
    out << "# " << space.describe() << "\n";
    out << "# actions " << n << ", poison slots " << space.poison_slots() << "\n";
    out << "index,kind,op,probability\n";
    const auto& table = space.action_table();
    for (std::size_t i = 0; i < table.size(); ++i) {
        out << i << "," << (table[i].kind == space::SlotKind::Poison ? "poison" : "base") << ",\""
            << table[i].spec.canonical() << "\"," << format("%.9g", 1.0 / static_cast<double>(n)) << "\n";
    }
    out << "\n# uniform-policy mass per operation\n";
    out << "op,kind,slots,mass,mass_fraction\n";
    for (const auto& p : space::uniform_sampling_distribution(space)) {
        out << "\"" << p.spec.canonical() << "\"," << (p.kind == space::SlotKind::Poison ? "poison" : "base") << ","
            << p.slots << "," << format("%.9g", boost::rational_cast<double>(p.probability)) << "," << p.slots << "/"
            << n << "\n";
    }
    return kOk;
}

int cmd_fetch(const ExperimentConfig& cfg, const std::string& url, std::ostream& out) {
    const auto result = fetch_data(url, cfg.data_dir);
    for (const auto& f : result.files) out << "wrote " << f.string() << "\n";
    if (result.files.empty()) out << "no .bin members found\n";
    return kOk;
}

// The first `--name` the chosen subcommand does not define, without dashes.
std::string first_unknown_flag(const CLI::App& app, const std::vector<std::string>& args) {
    const CLI::App* sub = nullptr;
    for (const auto& a : args) {
        if (!sub) {
            sub = app.get_subcommand_no_throw(a);
            continue;
        }
        if (a.rfind("--", 0) != 0 || a.size() == 2) continue;
        const std::string name = a.substr(0, a.find('='));
        if (!sub->get_option_no_throw(name)) return name.substr(2);
    }
    return {};
}

}  // namespace

std::string dotted_key(std::string_view key) {
    std::string out(key);
    std::size_t start = 0;
    for (const std::string_view group : {"child_", "controller_"}) {
        if (out.rfind(group, 0) == 0) {
            out[group.size() - 1] = '.';
            start = group.size();
        }
    }
    for (std::size_t i = start; i < out.size(); ++i) {
        if (out[i] == '_') out[i] = '-';
    }
    return out;
}

ExperimentConfig resolve_config(bool paper_scale, std::string_view file_text, const FlagList& flags) {
    ExperimentConfig cfg = paper_scale ? ExperimentConfig{} : harness::desk_profile();
    harness::apply_config_text(cfg, file_text);
    for (const auto& [key, value] : flags) harness::set_value(cfg, key, value);
    return cfg;
}

void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Search-space poisoning experiments on a weight-sharing architecture search", "ssp"};
    app.require_subcommand(1);
    app.footer(
        "Config keys accept --key, --group.key-name and --key-name spellings. Precedence: flag > --config file > "
        "profile defaults.");

    CommonOptions common;
    auto* run = app.add_subcommand("run", "search once per seed and write metrics, histogram, summary and arch");
    auto* grid = app.add_subcommand("grid", "run the multiple-instance grid over presets and slot counts");
    auto* oneshot = app.add_subcommand("oneshot", "run the one-shot poisoning suite");
    auto* probe = app.add_subcommand("probe", "output and gradient statistics of single operations");
    auto* fixed = app.add_subcommand("fixed-arc", "train the architecture in --fixed_arc without a controller");
    auto* dump = app.add_subcommand("dump-space", "print the action table with uniform-policy probabilities");
    auto* fetch = app.add_subcommand("fetch-data", "download CIFAR-10 binary batches from an explicit URL");
    for (auto* sub : {run, grid, oneshot, probe, fixed, dump, fetch}) common.attach(sub);

    std::string presets = "p1,p2,p3,p4,p5", ladder = "6,36,120,300", url;
    std::size_t jobs = 1, trials = 20, size = 16;
    std::vector<std::string> ops;
    grid->add_option("--presets", presets, "comma-separated presets")->capture_default_str();
    grid->add_option("--ladder", ladder, "comma-separated poison slot counts")->capture_default_str();
    for (auto* sub : {grid, oneshot}) sub->add_option("--jobs", jobs, "cells run in parallel")->capture_default_str();
    probe->add_option("ops", ops, "operations to probe; default every operation of --space");
    probe->add_option("--trials", trials, "random input batches per operation")->capture_default_str();
    probe->add_option("--size", size, "spatial size of the probe input")->capture_default_str();
    fetch->add_option("--url", url, "archive or .bin URL")->required();

    const std::vector<std::string> normalized = normalize_args(args);
    try {
        std::vector<std::string> reversed = normalized;
        std::reverse(reversed.begin(), reversed.end());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        const std::string unknown = first_unknown_flag(app, normalized);
        if (!unknown.empty()) {
            err << "config error: key '" << unknown << "': unknown option\n";
        } else {
            err << "config error: " << e.what() << "\n";
        }
        return kConfigError;
    }

    try {
        ExperimentConfig cfg = common.resolve();
        harness::validate(cfg);
        if (run->parsed()) return cmd_run(cfg, out);
        if (grid->parsed()) return cmd_grid(cfg, presets, ladder, jobs, out);
        if (oneshot->parsed()) return cmd_oneshot(cfg, jobs, out);
        if (probe->parsed()) return cmd_probe(cfg, ops, trials, size, out);
        if (fixed->parsed()) return cmd_fixed_arc(cfg, out);
        if (dump->parsed()) return cmd_dump_space(cfg, out);
        if (fetch->parsed()) return cmd_fetch(cfg, url, out);
    } catch (const ConfigError& e) {
        err << "config error: key '" << e.key() << "': " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
    return kRuntimeError;
}

}  // namespace ssp::cli
