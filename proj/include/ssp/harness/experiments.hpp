#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssp/harness/search.hpp"
#include "ssp/space/search_space.hpp"

namespace ssp::harness {

/// Runs one configured experiment; run_experiment unless a test swaps it.
using CellRunner = std::function<ExperimentResult(const ExperimentConfig&, const data::SplitData&)>;

/// Instance factor for a preset filling `slots` poison slots. Throws
/// ConfigError("space") when the preset size does not divide `slots`.
std::size_t instance_factor(space::Preset preset, std::size_t slots);

struct GridCell {
    std::string label;  // preset digit plus ladder letter, e.g. "4c"
    space::Preset preset{};
    std::size_t slots = 0;
    std::size_t q = 0;
    std::size_t actions = 0;
    std::string space_text;
    bool ok = false;
    std::string error;
    ExperimentResult result;
};

struct GridReport {
    std::vector<GridCell> cells;
};

/// One cell per (preset, slot count), presets outermost. Each cell composes
/// `base.space` with the preset at that slot count and runs the experiment;
/// a failing cell is marked and the grid carries on. `jobs` cells run at
/// once, each with its own bank, controller and generators.
GridReport run_grid(const ExperimentConfig& base, const std::vector<space::Preset>& presets,
                    const std::vector<std::size_t>& ladder, const data::SplitData& data, std::size_t jobs = 1,
                    const CellRunner& runner = {});

/// `space,poisoning_set,slots,q,actions,val_error_pct,test_error_pct,status`.
std::string grid_csv(const GridReport& report);
nlohmann::json grid_json(const ExperimentConfig& base, const GridReport& report);
/// grid.csv, grid.json and one emit_report directory per successful cell.
void emit_grid_report(const ExperimentConfig& base, const GridReport& report, const std::filesystem::path& dir);

struct OneShotRow {
    std::string label;
    std::string poisoning_set;  // human-readable member list
    std::vector<layers::OperationSpec> members;
    std::size_t slots = 0;
    std::size_t q = 0;
    std::size_t actions = 0;
    std::string space_text;
    bool two_point = false;  // |P| = 2
    std::optional<std::size_t> repeat_of;  // identical configuration as an earlier row
    bool ok = false;
    std::string error;
    bool max_error = false;
    ExperimentResult result;
};

struct OneShotReport {
    std::vector<OneShotRow> rows;
};

/// The six one-shot rows: stretched conv alone, then P2, P3, P4 and P5 each
/// joined with it, and the two-point P3 set again. Dropout members use p.
std::vector<OneShotRow> oneshot_rows(double p = 1.0);

/// Runs every row (a repeated configuration reuses the earlier result) and
/// marks the row with the highest mean validation error.
OneShotReport oneshot_suite(const ExperimentConfig& base, const data::SplitData& data, std::size_t jobs = 1,
                            const CellRunner& runner = {});

/// `row,poisoning_set,slots,q,actions,two_point,val_error_pct,test_error_pct,max_error,status`.
std::string oneshot_csv(const OneShotReport& report);
nlohmann::json oneshot_json(const ExperimentConfig& base, const OneShotReport& report);
void emit_oneshot_report(const ExperimentConfig& base, const OneShotReport& report, const std::filesystem::path& dir);

}  // namespace ssp::harness
