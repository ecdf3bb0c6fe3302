#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssp/harness/config.hpp"
#include "ssp/harness/search.hpp"

namespace ssp::harness {

/// `epoch,child_loss,val_error_pct,baseline,mean_reward`, one row per epoch.
std::string metrics_csv(const RunRecord& record);
/// `op_name,fraction` from the record's final histogram.
std::string histogram_csv(const RunRecord& record);

nlohmann::json run_json(const RunRecord& record);
/// Config, overrides against the published defaults, the space, every run
/// and the mean errors.
nlohmann::json summary_json(const ExperimentConfig& cfg, const std::vector<RunRecord>& records);

/// Index of the run with the lowest validation error (first on ties).
std::size_t best_run(const std::vector<RunRecord>& records);
/// Per-epoch metrics and final histogram averaged over runs; architecture
/// and errors of the best run.
RunRecord mean_record(const std::vector<RunRecord>& records);

/// Writes metrics.csv, histogram.csv, summary.json and arch.txt into `dir`.
/// With several records each run gets `run_<i>/` holding its own four files;
/// the top-level files then hold run means, the best run's architecture and
/// a summary covering every run. Throws std::filesystem errors as
/// they occur; std::invalid_argument for an empty record list.
void emit_report(const ExperimentConfig& cfg, const std::vector<RunRecord>& records,
                 const std::filesystem::path& dir);

/// Writes `text` to `path`, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace ssp::harness
