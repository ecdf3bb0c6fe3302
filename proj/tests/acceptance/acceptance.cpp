// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "../support/conv_oracle.hpp"
#include "../support/gradcheck.hpp"
#include "ssp/cli/cli.hpp"
#include "ssp/controller/controller.hpp"
#include "ssp/data/dataset.hpp"
#include "ssp/harness/experiments.hpp"
#include "ssp/harness/report.hpp"
#include "ssp/harness/search.hpp"
#include "ssp/layers/operations.hpp"

using namespace ssp;
using autograd::Tensor;
using harness::ExperimentConfig;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Tensor random_normal(autograd::Shape shape, Philox& rng) {
    std::vector<float> v(autograd::element_count(shape));
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return Tensor(std::move(shape), std::move(v));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------- 1
Verdict gradient_suite() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::string worst_what;
    std::size_t cases = 0;
    bool every_primitive_checked = true;
    for (const auto kind : autograd::all_primitives()) {
        Philox rng(4242, static_cast<std::uint64_t>(kind));
        std::set<std::string> shapes;
        // Draw cases until 20 distinct input shapes have been checked.
        for (int trial = 0; trial < 400 && shapes.size() < 20; ++trial) {
            const auto c = test_support::random_case(kind, rng);
            std::string key;
            for (const auto& in : c.inputs) key += autograd::shape_string(in.shape());
            if (!shapes.insert(key).second) continue;
            const auto r = test_support::check_gradients(c, rng);
            every_primitive_checked &= r.checked > 0;
            ++cases;
            if (r.max_error > worst) {
                worst = r.max_error;
                worst_what = std::string(autograd::primitive_name(kind)) + ": " + r.worst;
            }
        }
        if (shapes.size() < 20) {
            return {false, std::string(autograd::primitive_name(kind)) + " saw only " + std::to_string(shapes.size()) +
                               " distinct shapes"};
        }
    }
    const double elapsed = seconds_since(t0);
    const bool pass = every_primitive_checked && worst <= 1e-3 && elapsed < 60.0;
    return {pass, std::to_string(autograd::all_primitives().size()) + " primitives, " + std::to_string(cases) +
                      " cases, max rel err " + fmt("%.2e", worst) + (worst_what.empty() ? "" : " (" + worst_what + ")") +
                      ", " + fmt("%.1f", elapsed) + " s"};
}

// ---------------------------------------------------------------- 2
Verdict poison_semantics() {
    std::vector<std::string> failures;
    Philox rng(77);

    {  // Dropout(p=1): exact zeros forward and backward.
        autograd::Tape tape;
        const Tensor x = tape.variable(random_normal({4, 3, 8, 8}, rng));
        const Tensor y = layers::dropout_forward(x, 1.0, &rng, layers::Mode::Train);
        bool zero = true;
        for (float v : y.values()) zero &= v == 0.0f;
        const auto grads = tape.backward(autograd::sum(autograd::mask_multiply(y, random_normal(y.shape(), rng))));
        const Tensor gx = grads.of(x);
        for (float g : gx.values()) zero &= g == 0.0f;
        if (!zero) failures.push_back("dropout(p=1) not exactly zero");
    }
    {  // Identity: bitwise passthrough.
        const Tensor x = random_normal({2, 5, 7, 7}, rng);
        if (!bitwise_equal(layers::identity_forward(x), x)) failures.push_back("identity changed its input");
    }
    double noise_std = 0.0;
    {  // Gaussian(sigma=10): added-noise std over 1e6 elements.
        const Tensor x = random_normal({1000, 1000}, rng);
        const Tensor y = layers::gaussian_noise_forward(x, 10.0, &rng, layers::Mode::Train);
        double s = 0.0, sq = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double d = static_cast<double>(y[i]) - x[i];
            s += d;
            sq += d * d;
        }
        const double n = static_cast<double>(x.numel());
        noise_std = std::sqrt(sq / n - (s / n) * (s / n));
        if (noise_std < 9.8 || noise_std > 10.2) failures.push_back("gaussian noise std " + fmt("%.4f", noise_std));
    }
    {  // StretchedConv(3,50,50) equals the centre-tap 1x1 convolution.
        for (std::size_t h : {8, 32}) {
            const std::size_t c = 4;
            const Tensor x = random_normal({2, c, h, h}, rng);
            const Tensor k = random_normal({c, c, 3, 3}, rng);
            std::vector<float> centre(c * c);
            for (std::size_t o = 0; o < c; ++o)
                for (std::size_t i = 0; i < c; ++i) centre[o * c + i] = k[(o * c + i) * 9 + 4];
            const Tensor stretched = layers::stretched_conv_forward(x, k, 50, 50);
            const Tensor pointwise = autograd::conv2d(x, Tensor({c, c, 1, 1}, centre), {0, 1, 1});
            if (!bitwise_equal(stretched, pointwise)) failures.push_back("stretched conv differs at H=" + std::to_string(h));
        }
    }
    double worst_adjoint = 0.0;
    {  // <conv(x), y> = <x, transconv(y)>, conv evaluated by the direct oracle.
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t c = 1 + rng.below(4), co = 1 + rng.below(4), h = 4 + rng.below(8), w = 4 + rng.below(8);
            const std::size_t k = rng.below(2) ? 3 : 5;
            const Tensor x = random_normal({1, c, h, w}, rng), y = random_normal({1, co, h, w}, rng);
            const Tensor kernel = random_normal({co, c, k, k}, rng);
            const auto cx = test_support::brute_conv({x.values().begin(), x.values().end()}, c, h, w,
                                                     {kernel.values().begin(), kernel.values().end()}, co, k,
                                                     static_cast<long>((k - 1) / 2), 1);
            double lhs = 0.0, rhs = 0.0;
            for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
            const Tensor ty = layers::trans_conv_forward(y, kernel);
            for (std::size_t i = 0; i < x.numel(); ++i) rhs += static_cast<double>(x[i]) * ty[i];
            worst_adjoint = std::max(worst_adjoint, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
        }
        if (worst_adjoint > 1e-4) failures.push_back("adjoint rel err " + fmt("%.2e", worst_adjoint));
    }
    std::string detail = "noise std " + fmt("%.4f", noise_std) + ", adjoint rel err " + fmt("%.1e", worst_adjoint);
    for (const auto& f : failures) detail += "; " + f;
    return {failures.empty(), detail};
}

// ---------------------------------------------------------------- 3
Verdict sampling_contract() {
    const auto space = space::compose(space::SearchSpace(), space::Preset::P3Dropout, 300);
    controller::ControllerConfig cfg;
    cfg.num_layers = 1;
    Philox init(31), rng(32);
    controller::Controller c(cfg, space, init);
    c.zero_op_head();
    std::size_t poison = 0;
    const std::size_t draws = 100000;
    for (std::size_t i = 0; i < draws; ++i)
        poison += space.classify_action(c.sample(rng).ops[0]).kind == space::SlotKind::Poison;
    const double freq = static_cast<double>(poison) / static_cast<double>(draws);
    const double target = 300.0 / 305.0;
    return {std::abs(freq - target) <= 0.01,
            "poison frequency " + fmt("%.5f", freq) + " vs " + fmt("%.5f", target) + " over 1e5 draws"};
}

// ---------------------------------------------------------------- 4
Verdict controller_learning() {
    const auto t0 = Clock::now();
    int successes = 0;
    std::string probs;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Philox init(500 + seed), rng(600 + seed);
        controller::ControllerConfig cfg;
        cfg.num_layers = 1;
        cfg.tanh_constant = 0.0;
        controller::Controller c(cfg, 2, init);
        for (int step = 0; step < 200; ++step) {
            std::vector<controller::ArchitectureSample> batch;
            std::vector<double> rewards;
            for (std::size_t i = 0; i < cfg.num_aggregate; ++i) {
                batch.push_back(c.sample(rng));
                rewards.push_back(batch.back().ops[0] == 0 ? 1.0 : 0.0);
            }
            c.reinforce_update(batch, rewards);
        }
        autograd::Tape tape;
        controller::ArchitectureSample good;
        good.ops = {0};
        good.skips = {{}};
        const double p = std::exp(c.score(tape, good).log_prob.item());
        successes += p > 0.95;
        probs += (probs.empty() ? "" : " ") + fmt("%.3f", p);
    }
    const double elapsed = seconds_since(t0);
    return {successes >= 9 && elapsed < 120.0, std::to_string(successes) + "/10 seeds above 0.95 [" + probs + "], " +
                                                    fmt("%.1f", elapsed) + " s"};
}

// ---------------------------------------------------------------- 7
Verdict cifar_parser(const std::filesystem::path& work) {
    std::vector<std::string> failures;
    Philox rng(70);
    std::vector<std::uint8_t> fixture;
    for (int r = 0; r < 7; ++r) {
        fixture.push_back(static_cast<std::uint8_t>(r % 10));
        for (int k = 0; k < 3072; ++k) fixture.push_back(static_cast<std::uint8_t>(rng.below(256)));
    }
    fixture[1] = 0;
    fixture[2] = 255;
    const auto file = work / "fixture_batch.bin";
    data::write_file(file, fixture);
    const auto parsed = data::parse_cifar10_binary(data::read_file(file));
    if (parsed.size() != 7) failures.push_back("record count " + std::to_string(parsed.size()));
    if (data::serialize_cifar10_binary(parsed) != fixture) failures.push_back("round trip not bit-exact");

    auto rejected = [](const std::vector<std::uint8_t>& bytes) {
        try {
            data::parse_cifar10_binary(bytes);
        } catch (const data::DataError&) {
            return true;
        }
        return false;
    };
    for (std::size_t len : {std::size_t{1}, std::size_t{3072}, std::size_t{3074}, fixture.size() - 1})
        if (!rejected(std::vector<std::uint8_t>(fixture.begin(), fixture.begin() + static_cast<std::ptrdiff_t>(len))))
            failures.push_back("length " + std::to_string(len) + " accepted");
    for (std::uint8_t bad : {std::uint8_t{10}, std::uint8_t{255}}) {
        auto copy = fixture;
        copy[3073 * 4] = bad;
        if (!rejected(copy)) failures.push_back("label " + std::to_string(bad) + " accepted");
    }
    std::string detail = "7-record fixture round-trips; 4 bad lengths and 2 bad labels checked";
    for (const auto& f : failures) detail += "; " + f;
    return {failures.empty(), detail};
}

// ---------------------------------------------------------------- 9
Verdict grid_bookkeeping(const std::filesystem::path& work) {
    ExperimentConfig cfg = harness::desk_profile();
    cfg.n_train = 224;
    cfg.n_val = 32;
    cfg.synthetic_test_per_class = 4;
    cfg.batch_size = 64;
    cfg.num_epochs = 1;
    cfg.child_num_layers = 2;
    cfg.child_out_filters = 4;
    cfg.controller_train_steps = 1;
    cfg.controller_num_aggregate = 2;
    cfg.runs = 1;
    const auto data = harness::load_data(cfg);
    struct Case {
        space::Preset preset;
        std::size_t slots, q;
    };
    std::string detail;
    bool pass = true;
    for (const Case c : {Case{space::Preset::P4TransConv, 120, 60}, Case{space::Preset::P5Union, 120, 20},
                         Case{space::Preset::P3Dropout, 300, 300}}) {
        const auto dir = work / ("grid_" + std::string(space::preset_name(c.preset)) + "_" + std::to_string(c.slots));
        const auto report = harness::run_grid(cfg, {c.preset}, {c.slots}, data);
        harness::emit_grid_report(cfg, report, dir);
        const auto j = nlohmann::json::parse(slurp(dir / "grid.json"));
        const auto& cell = j.at("cells").at(0);
        const std::size_t q = cell.at("q").get<std::size_t>();
        const std::size_t actions = cell.at("actions").get<std::size_t>();
        const bool ok = cell.at("status") == "ok" && q == c.q && actions == 5 + c.slots;
        pass &= ok;
        detail += (detail.empty() ? "" : ", ") + std::string(space::preset_name(c.preset)) + "@" +
                  std::to_string(c.slots) + " -> q=" + std::to_string(q) + (ok ? "" : " (expected " +
                  std::to_string(c.q) + ", status " + cell.at("status").get<std::string>() + ")");
    }
    return {pass, detail};
}

// ------------------------------------------------------- 5, 6 and 8
struct SearchBundle {
    harness::ExperimentResult baseline, oneshot;
    double baseline_oneshot_seconds = 0.0;
    harness::GridReport p3;
    harness::RunRecord baseline_repeat;
};

harness::SearchHooks progress(const std::string& label) {
    harness::SearchHooks h;
    h.on_epoch = [label](const harness::EpochMetrics& m) {
        if (m.epoch % 10 == 0)
            std::cerr << "  [" << label << "] epoch " << m.epoch << " val_error " << fmt("%.2f", m.val_error_pct)
                      << "%\n";
    };
    return h;
}

harness::ExperimentResult run_space(const ExperimentConfig& base, const std::string& space,
                                    const data::SplitData& data) {
    ExperimentConfig cfg = base;
    cfg.space = space;
    std::vector<harness::RunRecord> runs;
    for (std::size_t r = 0; r < cfg.runs; ++r) {
        ExperimentConfig run_cfg = cfg;
        run_cfg.seed = cfg.seed + r;
        const std::string label = space + " seed " + std::to_string(run_cfg.seed);
        std::cerr << "  running " << label << "\n";
        runs.push_back(harness::run_search(run_cfg, data, progress(label)));
        std::cerr << "  " << label << ": val " << fmt("%.2f", runs.back().val_error_pct) << "% test "
                  << fmt("%.2f", runs.back().test_error_pct) << "% in " << fmt("%.0f", runs.back().wall_time_s)
                  << " s\n";
    }
    return harness::aggregate(std::move(runs));
}

std::string run_list(const harness::ExperimentResult& r) {
    std::string out;
    for (const auto& run : r.runs) out += (out.empty() ? "" : "/") + fmt("%.2f", run.val_error_pct);
    return out;
}

Verdict directional(const SearchBundle& b) {
    const double base = b.baseline.mean_val_error_pct, poisoned = b.oneshot.mean_val_error_pct;
    const bool pass = poisoned >= 2.0 * base && base <= 15.0 && b.baseline_oneshot_seconds < 1800.0;
    std::string detail = "baseline " + fmt("%.2f", base) + "% [" + run_list(b.baseline) + "], one-shot " +
                         fmt("%.2f", poisoned) + "% [" + run_list(b.oneshot) + "], " +
                         fmt("%.0f", b.baseline_oneshot_seconds) + " s";
    if (base == 0.0 && poisoned == 0.0) detail += "; both zero, so the 2x ratio holds only trivially";
    return {pass, detail};
}

Verdict monotone(const SearchBundle& b) {
    if (b.p3.cells.size() != 2 || !b.p3.cells[0].ok || !b.p3.cells[1].ok) {
        std::string why;
        for (const auto& c : b.p3.cells) why += c.error;
        return {false, "P3 grid cell failed: " + why};
    }
    const double e6 = b.p3.cells[0].result.mean_val_error_pct, e36 = b.p3.cells[1].result.mean_val_error_pct;
    return {e36 >= e6, "P3 mean val error " + fmt("%.2f", e6) + "% [" + run_list(b.p3.cells[0].result) +
                           "] at 6 slots, " + fmt("%.2f", e36) + "% [" + run_list(b.p3.cells[1].result) +
                           "] at 36 slots"};
}

Verdict determinism(const SearchBundle& b, const std::filesystem::path& work) {
    ExperimentConfig cfg = harness::desk_profile();
    const auto& first = b.baseline.runs.at(0);
    harness::emit_report(cfg, {first}, work / "determinism_a");
    harness::emit_report(cfg, {b.baseline_repeat}, work / "determinism_b");
    const std::string a = slurp(work / "determinism_a" / "metrics.csv");
    const std::string c = slurp(work / "determinism_b" / "metrics.csv");
    return {!a.empty() && a == c, "seed " + std::to_string(first.seed) + " metrics.csv " + std::to_string(a.size()) +
                                      " bytes, " + (a == c ? "identical" : "different")};
}

}  // namespace

int main(int argc, char** argv) {
    cli::tune_allocator();
    CLI::App app{"acceptance checks"};
    std::string only;
    std::string work_dir = (std::filesystem::temp_directory_path() / "ssp_acceptance").string();
    app.add_option("--only", only, "comma-separated criterion numbers, e.g. 1,2,9");
    app.add_option("--work-dir", work_dir, "scratch directory for emitted files")->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    std::set<int> selected;
    {
        std::istringstream in(only);
        for (std::string item; std::getline(in, item, ',');)
            if (!item.empty()) selected.insert(std::stoi(item));
    }
    auto wanted = [&](int n) { return selected.empty() || selected.count(n) > 0; };
    const std::filesystem::path work(work_dir);
    std::filesystem::remove_all(work);
    std::filesystem::create_directories(work);

    int failures = 0;
    auto report = [&](int n, const std::string& name, const std::function<Verdict()>& check) {
        if (!wanted(n)) return;
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        failures += !v.pass;
        std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << name << "): " << v.detail << std::endl;
    };

    report(1, "gradient suite", gradient_suite);
    report(2, "poison semantics", poison_semantics);
    report(3, "sampling contract", sampling_contract);
    report(4, "controller learning", controller_learning);
    report(7, "CIFAR-10 parser", [&] { return cifar_parser(work); });
    report(9, "grid bookkeeping", [&] { return grid_bookkeeping(work); });

    if (wanted(5) || wanted(6) || wanted(8)) {
        const ExperimentConfig desk = harness::desk_profile();
        const auto data = harness::load_data(desk);
        SearchBundle b;
        std::string setup_error;
        try {
            if (wanted(5) || wanted(8)) {
                const auto t0 = Clock::now();
                b.baseline = run_space(desk, "base", data);
                if (wanted(5)) b.oneshot = run_space(desk, "base + oneshot", data);
                b.baseline_oneshot_seconds = seconds_since(t0);
            }
            if (wanted(8)) {
                std::cerr << "  repeating base seed " << desk.seed << "\n";
                b.baseline_repeat = harness::run_search(desk, data);
            }
            if (wanted(6)) {
                std::cerr << "  running P3 grid at 6 and 36 slots\n";
                b.p3 = harness::run_grid(desk, {space::Preset::P3Dropout}, {6, 36}, data);
                harness::emit_grid_report(desk, b.p3, work / "p3_grid");
            }
        } catch (const std::exception& e) {
            setup_error = e.what();
        }
        auto guarded = [&](auto fn) {
            return [&, fn]() -> Verdict {
                if (!setup_error.empty()) return {false, "search failed: " + setup_error};
                return fn();
            };
        };
        report(5, "directional reproduction", guarded([&] { return directional(b); }));
        report(6, "monotone instance trend", guarded([&] { return monotone(b); }));
        report(8, "determinism", guarded([&] { return determinism(b, work); }));
    }

    std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
    return failures == 0 ? 0 : 1;
}
