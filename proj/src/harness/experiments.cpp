#include "ssp/harness/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <thread>

#include "ssp/harness/report.hpp"

namespace ssp::harness {
namespace {

// Runs fn(0..n-1) on up to `jobs` threads. fn must not throw.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
        workers.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    }
    for (auto& t : workers) t.join();
}

CellRunner default_runner(const CellRunner& runner) {
    if (runner) return runner;
    return [](const ExperimentConfig& cfg, const data::SplitData& data) { return run_experiment(cfg, data); };
}

std::string preset_digit(space::Preset preset) {
    const std::string name(space::preset_name(preset));
    return name.size() == 2 && name[0] == 'p' ? name.substr(1) : name;
}

std::string pct(double v, bool ok) {
    if (!ok || !std::isfinite(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string csv_quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

nlohmann::json result_json(const ExperimentResult& r) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& run : r.runs) {
        runs.push_back({{"seed", run.seed}, {"val_error_pct", run.val_error_pct}, {"test_error_pct", run.test_error_pct}});
    }
    return {{"mean_val_error_pct", r.mean_val_error_pct}, {"mean_test_error_pct", r.mean_test_error_pct}, {"runs", runs}};
}

std::string join_members(const std::vector<layers::OperationSpec>& members) {
    std::string out;
    for (const auto& m : members) out += (out.empty() ? "" : " + ") + m.canonical();
    return out;
}

}  // namespace

std::size_t instance_factor(space::Preset preset, std::size_t slots) {
    const std::size_t size = space::preset_members(preset).size();
    if (slots == 0 || slots % size != 0) {
        throw ConfigError("space", "preset " + std::string(space::preset_name(preset)) + " has " +
                                       std::to_string(size) + " members; " + std::to_string(slots) +
                                       " slots is not a positive multiple");
    }
    return slots / size;
}

GridReport run_grid(const ExperimentConfig& base, const std::vector<space::Preset>& presets,
                    const std::vector<std::size_t>& ladder, const data::SplitData& data, std::size_t jobs,
                    const CellRunner& runner) {
    const CellRunner run = default_runner(runner);
    GridReport report;
    for (const auto preset : presets) {
        for (std::size_t i = 0; i < ladder.size(); ++i) {
            GridCell cell;
            cell.preset = preset;
            cell.slots = ladder[i];
            cell.label = preset_digit(preset) + static_cast<char>('a' + static_cast<char>(i % 26));
            cell.space_text = base.space + " + " + std::to_string(ladder[i]) + "*" + std::string(space::preset_name(preset));
            report.cells.push_back(std::move(cell));
        }
    }
    parallel_for(report.cells.size(), jobs, [&](std::size_t i) {
        GridCell& cell = report.cells[i];
        try {
            cell.q = instance_factor(cell.preset, cell.slots);
            ExperimentConfig cfg = base;
            cfg.space = cell.space_text;
            cell.actions = build_space(cfg).size();
            cell.result = run(cfg, data);
            cell.ok = true;
        } catch (const std::exception& e) {
            cell.error = e.what();
        }
    });
    return report;
}

std::string grid_csv(const GridReport& report) {
    std::string out = "space,poisoning_set,slots,q,actions,val_error_pct,test_error_pct,status\n";
    for (const auto& c : report.cells) {
        out += c.label + "," + std::string(space::preset_name(c.preset)) + "," + std::to_string(c.slots) + "," +
               (c.q ? std::to_string(c.q) : "") + "," + (c.actions ? std::to_string(c.actions) : "") + "," +
               pct(c.result.mean_val_error_pct, c.ok) + "," + pct(c.result.mean_test_error_pct, c.ok) + "," +
               (c.ok ? "ok" : csv_quote("failed: " + c.error)) + "\n";
    }
    return out;
}

nlohmann::json grid_json(const ExperimentConfig& base, const GridReport& report) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : report.cells) {
        nlohmann::json cell = {{"space", c.label},
                               {"preset", space::preset_name(c.preset)},
                               {"slots", c.slots},
                               {"q", c.q},
                               {"actions", c.actions},
                               {"space_text", c.space_text},
                               {"status", c.ok ? "ok" : "failed"}};
        if (c.ok) cell["result"] = result_json(c.result);
        else cell["error"] = c.error;
        cells.push_back(std::move(cell));
    }
    return {{"config", to_json(base)}, {"overrides", overrides(base)}, {"seed", base.seed}, {"cells", cells}};
}

void emit_grid_report(const ExperimentConfig& base, const GridReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_text(dir / "grid.csv", grid_csv(report));
    write_text(dir / "grid.json", grid_json(base, report).dump(2) + "\n");
    for (const auto& c : report.cells) {
        if (!c.ok || c.result.runs.empty()) continue;
        ExperimentConfig cfg = base;
        cfg.space = c.space_text;
        emit_report(cfg, c.result.runs, dir / ("cell_" + c.label));
    }
}

std::vector<OneShotRow> oneshot_rows(double p) {
    using layers::OperationSpec;
    const OperationSpec stretched = OperationSpec::stretched_conv(3, 50, 50);
    auto with_stretched = [&](space::Preset preset) {
        auto members = space::preset_members(preset, p);
        members.push_back(stretched);
        return members;
    };
    // P5 lists its Gaussian member twice only to pad its own cardinality;
    // the distinct members plus the stretched conv give the six-slot row.
    std::vector<OperationSpec> p5;
    for (const auto& m : space::preset_members(space::Preset::P5Union, p))
        if (std::find(p5.begin(), p5.end(), m) == p5.end()) p5.push_back(m);
    p5.push_back(stretched);

    std::vector<OneShotRow> rows(6);
    rows[0].label = "P0+";
    rows[0].members = {stretched};
    rows[0].slots = 6;
    rows[1].label = "P2+";
    rows[1].members = with_stretched(space::Preset::P2Gaussian);
    rows[1].slots = 6;
    rows[2].label = "P3+";
    rows[2].members = with_stretched(space::Preset::P3Dropout);
    rows[2].slots = 2;
    rows[3].label = "P4+";
    rows[3].members = with_stretched(space::Preset::P4TransConv);
    rows[3].slots = 6;
    rows[4].label = "P5+";
    rows[4].members = p5;
    rows[4].slots = 6;
    rows[5].label = "P3+,2";
    rows[5].members = with_stretched(space::Preset::P3Dropout);
    rows[5].slots = 2;
    for (auto& r : rows) {
        r.q = r.slots / r.members.size();
        r.poisoning_set = join_members(r.members);
        r.two_point = r.members.size() == 2 && r.slots == 2;
        r.space_text = "base";
        for (const auto& m : r.members) r.space_text += " + " + std::to_string(r.q) + "*" + m.canonical();
        r.actions = space::parse_space(r.space_text).size();
    }
    return rows;
}

OneShotReport oneshot_suite(const ExperimentConfig& base, const data::SplitData& data, std::size_t jobs,
                            const CellRunner& runner) {
    const CellRunner run = default_runner(runner);
    OneShotReport report;
    report.rows = oneshot_rows(base.p);
    std::vector<std::size_t> unique;
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        auto& row = report.rows[i];
        row.space_text = base.space + row.space_text.substr(std::string("base").size());
        for (std::size_t j : unique) {
            if (report.rows[j].space_text == row.space_text) row.repeat_of = j;
        }
        if (!row.repeat_of) unique.push_back(i);
    }
    parallel_for(unique.size(), jobs, [&](std::size_t k) {
        OneShotRow& row = report.rows[unique[k]];
        try {
            ExperimentConfig cfg = base;
            cfg.space = row.space_text;
            row.actions = build_space(cfg).size();
            row.result = run(cfg, data);
            row.ok = true;
        } catch (const std::exception& e) {
            row.error = e.what();
        }
    });
    for (auto& row : report.rows) {
        if (!row.repeat_of) continue;
        const auto& src = report.rows[*row.repeat_of];
        row.ok = src.ok;
        row.error = src.error;
        row.result = src.result;
        row.actions = src.actions;
    }
    std::optional<std::size_t> worst;
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& r = report.rows[i];
        if (r.ok && (!worst || r.result.mean_val_error_pct > report.rows[*worst].result.mean_val_error_pct)) worst = i;
    }
    if (worst) {
        for (auto& r : report.rows)
            r.max_error = r.ok && r.result.mean_val_error_pct == report.rows[*worst].result.mean_val_error_pct;
    }
    return report;
}

std::string oneshot_csv(const OneShotReport& report) {
    std::string out = "row,poisoning_set,slots,q,actions,two_point,val_error_pct,test_error_pct,max_error,status\n";
    for (const auto& r : report.rows) {
        out += csv_quote(r.label) + "," + csv_quote(r.poisoning_set) + "," + std::to_string(r.slots) + "," +
               std::to_string(r.q) + "," + std::to_string(r.actions) + "," + (r.two_point ? "yes" : "no") + "," +
               pct(r.result.mean_val_error_pct, r.ok) + "," + pct(r.result.mean_test_error_pct, r.ok) + "," +
               (r.max_error ? "yes" : "no") + "," + (r.ok ? "ok" : csv_quote("failed: " + r.error)) + "\n";
    }
    return out;
}

nlohmann::json oneshot_json(const ExperimentConfig& base, const OneShotReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows) {
        nlohmann::json row = {{"row", r.label},
                              {"poisoning_set", r.poisoning_set},
                              {"slots", r.slots},
                              {"q", r.q},
                              {"actions", r.actions},
                              {"space_text", r.space_text},
                              {"two_point", r.two_point},
                              {"max_error", r.max_error},
                              {"status", r.ok ? "ok" : "failed"}};
        if (r.repeat_of) row["repeat_of"] = report.rows[*r.repeat_of].label;
        if (r.ok) row["result"] = result_json(r.result);
        else row["error"] = r.error;
        rows.push_back(std::move(row));
    }
    return {{"config", to_json(base)}, {"overrides", overrides(base)}, {"seed", base.seed}, {"rows", rows}};
}

void emit_oneshot_report(const ExperimentConfig& base, const OneShotReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_text(dir / "oneshot.csv", oneshot_csv(report));
    write_text(dir / "oneshot.json", oneshot_json(base, report).dump(2) + "\n");
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& r = report.rows[i];
        if (!r.ok || r.repeat_of || r.result.runs.empty()) continue;
        ExperimentConfig cfg = base;
        cfg.space = r.space_text;
        emit_report(cfg, r.result.runs, dir / ("row_" + std::to_string(i)));
    }
}

}  // namespace ssp::harness
