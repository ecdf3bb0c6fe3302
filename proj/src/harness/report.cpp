#include "ssp/harness/report.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <system_error>

namespace ssp::harness {
namespace {

std::string fixed(double v, int digits) {
    if (!std::isfinite(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

nlohmann::json histogram_json(const std::vector<OpFrequency>& hist) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& h : hist) {
        out.push_back({{"op", h.op}, {"kind", h.kind == space::SlotKind::Poison ? "poison" : "base"},
                       {"fraction", h.fraction}});
    }
    return out;
}

}  // namespace

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::filesystem::filesystem_error("cannot open for writing", path,
                                                std::error_code(errno, std::generic_category()));
    }
    out << text;
    out.close();
    if (!out) {
        throw std::filesystem::filesystem_error("write failed", path, std::error_code(errno, std::generic_category()));
    }
}

std::string metrics_csv(const RunRecord& record) {
    std::string out = "epoch,child_loss,val_error_pct,baseline,mean_reward\n";
    for (const auto& m : record.epochs) {
        out += std::to_string(m.epoch) + "," + fixed(m.child_loss, 6) + "," + fixed(m.val_error_pct, 2) + "," +
               fixed(m.baseline, 6) + "," + fixed(m.mean_reward, 6) + "\n";
    }
    return out;
}

std::string histogram_csv(const RunRecord& record) {
    std::string out = "op_name,fraction\n";
    for (const auto& h : record.histogram) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", h.fraction);
        // Op names contain commas inside parentheses; quote them.
        out += "\"" + h.op + "\"," + buf + "\n";
    }
    return out;
}

nlohmann::json run_json(const RunRecord& record) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& m : record.epochs) {
        epochs.push_back({{"epoch", m.epoch},
                          {"learning_rate", m.learning_rate},
                          {"child_loss", std::isfinite(m.child_loss) ? nlohmann::json(m.child_loss) : nlohmann::json()},
                          {"child_steps", m.child_steps},
                          {"nan_steps", m.nan_steps},
                          {"val_error_pct", m.val_error_pct},
                          {"baseline", m.baseline},
                          {"mean_reward", m.mean_reward},
                          {"op_histogram", histogram_json(m.op_histogram)}});
    }
    return {{"seed", record.seed},
            {"val_error_pct", record.val_error_pct},
            {"test_error_pct", record.test_error_pct},
            {"best_arch", record.arch_text},
            {"arch_ops", record.arch.ops},
            {"histogram", histogram_json(record.histogram)},
            {"wall_time_s", record.wall_time_s},
            {"epochs", epochs}};
}

nlohmann::json summary_json(const ExperimentConfig& cfg, const std::vector<RunRecord>& records) {
    const space::SearchSpace space = build_space(cfg);
    std::vector<RunRecord> copy = records;
    const ExperimentResult agg = aggregate(std::move(copy));
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : records) runs.push_back(run_json(r));
    nlohmann::json j = {{"config", to_json(cfg)},
                        {"profile", cfg.profile},
                        {"seed", cfg.seed},
                        {"overrides", overrides(cfg)},
                        {"space",
                         {{"text", space.describe()},
                          {"action_table_size", space.size()},
                          {"poison_slots", space.poison_slots()},
                          {"table", space.to_json()}}},
                        {"final",
                         {{"val_error_pct", agg.mean_val_error_pct},
                          {"test_error_pct", agg.mean_test_error_pct},
                          {"runs", records.size()}}},
                        {"runs", runs}};
    if (!records.empty()) j["best_arch"] = records[best_run(records)].arch_text;
    return j;
}

std::size_t best_run(const std::vector<RunRecord>& records) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < records.size(); ++i)
        if (records[i].val_error_pct < records[best].val_error_pct) best = i;
    return best;
}

RunRecord mean_record(const std::vector<RunRecord>& records) {
    if (records.empty()) throw std::invalid_argument("mean_record: no records");
    RunRecord out = records[best_run(records)];
    const double n = static_cast<double>(records.size());
    for (std::size_t e = 0; e < out.epochs.size(); ++e) {
        auto& m = out.epochs[e];
        m.child_loss = m.val_error_pct = m.baseline = m.mean_reward = 0.0;
        for (const auto& r : records) {
            if (r.epochs.size() != out.epochs.size()) throw std::invalid_argument("mean_record: epoch counts differ");
            m.child_loss += r.epochs[e].child_loss / n;
            m.val_error_pct += r.epochs[e].val_error_pct / n;
            m.baseline += r.epochs[e].baseline / n;
            m.mean_reward += r.epochs[e].mean_reward / n;
        }
    }
    for (std::size_t k = 0; k < out.histogram.size(); ++k) {
        out.histogram[k].fraction = 0.0;
        for (const auto& r : records) out.histogram[k].fraction += r.histogram.at(k).fraction / n;
    }
    return out;
}

void emit_report(const ExperimentConfig& cfg, const std::vector<RunRecord>& records,
                 const std::filesystem::path& dir) {
    if (records.empty()) throw std::invalid_argument("emit_report: no records");
    std::filesystem::create_directories(dir);
    auto write_run = [&](const RunRecord& r, const std::filesystem::path& where) {
        ExperimentConfig run_cfg = cfg;
        run_cfg.seed = r.seed;
        write_text(where / "metrics.csv", metrics_csv(r));
        write_text(where / "histogram.csv", histogram_csv(r));
        write_text(where / "arch.txt", r.arch_text);
        write_text(where / "summary.json", summary_json(run_cfg, {r}).dump(2) + "\n");
    };
    if (records.size() == 1) {
        write_run(records.front(), dir);
        return;
    }
    for (std::size_t i = 0; i < records.size(); ++i) write_run(records[i], dir / ("run_" + std::to_string(i)));
    const RunRecord mean = mean_record(records);
    write_text(dir / "metrics.csv", metrics_csv(mean));
    write_text(dir / "histogram.csv", histogram_csv(mean));
    write_text(dir / "arch.txt", mean.arch_text);
    write_text(dir / "summary.json", summary_json(cfg, records).dump(2) + "\n");
}

}  // namespace ssp::harness
