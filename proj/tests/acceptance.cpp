// Acceptance runner: one PASS / FAIL / NOT RUN line per headline criterion,
// followed by indented detail. Exit status is nonzero iff something FAILed.
//
// usage: xxnet_acceptance [cifar-dir]   (default: $XXNET_DATA_DIR)

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "fixtures.hpp"
#include "gradient_cases.hpp"
#include "influence_oracle.hpp"
#include "xxnet/xxnet.hpp"

using namespace xxnet;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

void report(const char* status, const std::string& name, const std::string& detail) {
    std::cout << std::left << std::setw(8) << status << name << '\n';
    std::istringstream in(detail);
    for (std::string line; std::getline(in, line);) std::cout << "        " << line << '\n';
    std::cout.flush();
}

void verdict(bool ok, const std::string& name, const std::string& detail) {
    if (!ok) ++failures;
    report(ok ? "PASS" : "FAIL", name, detail);
}

NetworkSpec reference_network(Family f, double width = 1.0) {
    switch (f) {
        case Family::MobilenetV1: return build_mobilenet_v1(ReluMode::All, InputMode::Cifar32, width);
        case Family::V1x1O3: return build_v1x1(ShuffleCode::parse("00x"), ReluMode::EndOnly, InputMode::Cifar32, width);
        case Family::V1x2O2: return build_v1x2(ShuffleCode::parse("0xx"), ReluMode::EndOnly, InputMode::Cifar32, width);
        default: return build_v1x3(ShuffleCode::parse("xxx"), ReluMode::EndOnly, InputMode::Cifar32, width);
    }
}

void reference_table() {
    const auto start = Clock::now();
    std::ostringstream detail;
    bool ok = true;
    for (Family f : kAllFamilies) {
        const auto check = check_table2(network_params(reference_network(f)));
        ok = ok && check.ok();
        detail << to_string(f) << ": " << check.matching_layers << "/13 layers, total "
               << (check.total_matches ? "matches " : "differs ") << table2_column(f).total << '\n'
               << check.detail;
    }
    const double t = seconds_since(start);
    detail << "elapsed " << std::fixed << std::setprecision(4) << t << " s (limit 1 s)";
    verdict(ok && t < 1.0, "parameter table: 4 networks x 13 layers + totals, exact", detail.str());
}

void reduction() {
    const double r = reduction_factor(network_params(reference_network(Family::MobilenetV1)),
                                      network_params(reference_network(Family::V1x3O1)));
    std::ostringstream d;
    d << "3184224 / 481376 = " << std::setprecision(10) << r;
    verdict(r > 6.6, "reduction factor mobilenet_v1 / v1x_3_o1 > 6.6", d.str());
}

void equations() {
    const auto a = layer_params_grouped(32, 64, 3, {8, 8, 8});
    const auto b = layer_params_grouped(512, 1024, 3, {32, 32, 32});
    std::ostringstream d;
    d << "(32,64,3,[8,8,8]) = " << a << ", 32*9 + 24*64 = " << 32 * 9 + 24 * 64 << '\n'
      << "(512,1024,3,[32,32,32]) = " << b << ", 512*9 + 96*1024 = " << 512 * 9 + 96 * 1024;
    verdict(a == 32 * 9 + 24 * 64 && b == 512 * 9 + 96 * 1024, "grouped layer parameter formula", d.str());
}

void gradients() {
    const auto start = Clock::now();
    const auto cases = gradcases::all_cases();
    std::ostringstream d;
    bool ok = true;
    double worst = 0;
    std::string worst_name;
    for (const auto& c : cases) {
        const auto r = gradcases::run(c);
        if (!r.passed) {
            ok = false;
            d << "failed: " << c.name << " max rel err " << r.max_rel_error << '\n';
        }
        if (r.max_rel_error > worst) {
            worst = r.max_rel_error;
            worst_name = c.name;
        }
    }
    const double t = seconds_since(start);
    d << cases.size() << " cases, worst " << std::scientific << std::setprecision(2) << worst << " (" << worst_name
      << ")\n"
      << "elapsed " << std::fixed << std::setprecision(2) << t << " s (limit 60 s)";
    verdict(ok && t < 60.0, "finite-difference gradient suite, 64-bit, step 1e-5, rel err < 1e-4", d.str());
}

void connectivity_oracle() {
    std::ostringstream d;
    bool ok = true;
    std::size_t compared = 0;
    for (const char* code : {"000", "00x", "0x0", "0xx", "x00", "x0x", "xx0", "xxx"}) {
        const auto s = build_v1x3(ShuffleCode::parse(code), ReluMode::All);
        for (const auto& layer : s.layers) {
            if (layer.shape.out_channels > 512) continue;
            ++compared;
            if (!oracle::same_matrix(influence_matrix(layer), oracle::perturbation_reach(layer, 17))) {
                ok = false;
                d << "mismatch: code " << code << " L" << layer.shape.index << '\n';
            }
        }
    }
    d << compared << " layer/mask pairs match the perturbation oracle\n";

    std::size_t full = 0;
    for (const auto& c : connectivity_report(build_v1x3(ShuffleCode::parse("xxx"), ReluMode::All)))
        full += c.fully_connected ? 1 : 0;
    ok = ok && full == kLayerCount;
    d << "\"xxx\": " << full << "/13 layers fully connected\n";

    bool block_ok = true;
    for (const auto& layer : build_v1x3(ShuffleCode::parse("000"), ReluMode::All).layers) {
        const auto sizes = layer.plan.group_sizes();
        const std::size_t largest = *std::max_element(sizes.begin(), sizes.end());
        const auto m = influence_matrix(layer);
        for (std::size_t o = 0; o < m.rows(); ++o) block_ok = block_ok && m.row_count(o) == largest;
    }
    ok = ok && block_ok;
    d << "\"000\": every output reaches exactly max(G_i) inputs (block diagonal): " << (block_ok ? "yes" : "no") << '\n'
      << "note: without shuffles the stages share one partition, so reach is the largest group,\n"
      << "not the product of group sizes";
    verdict(ok, "connectivity analysis equals perturbation oracle (v1x_3_o1, N <= 512, all 8 masks)", d.str());
}

void overfit() {
    const auto ds = fixture::synthetic(32, 2024);
    BatchIterator it(ds, 32, 1, false, false, InputMode::Cifar32);
    const auto batch = it.epoch(0)[0];
    std::ostringstream d;
    bool ok = true;
    std::size_t strictly_monotone = 0;
    for (Family f : kAllFamilies) {
        const auto start = Clock::now();
        Model<float> model(reference_network(f, 0.25), 1);
        std::vector<double> losses;
        for (int step = 0; step < 50; ++step)
            losses.push_back(train_step(model, batch.images, batch.labels, 0.05, 0.9).loss);
        std::size_t rises = 0;
        for (std::size_t i = 1; i < losses.size(); ++i) rises += losses[i] >= losses[i - 1] ? 1 : 0;
        const bool fell = losses.back() < losses.front();
        ok = ok && fell;
        strictly_monotone += rises == 0 ? 1 : 0;
        d << std::left << std::setw(14) << to_string(f) << std::right << std::fixed << std::setprecision(4)
          << " loss step1 " << losses.front() << " -> step50 " << losses.back() << ", non-decreasing steps " << rises
          << "/49, " << std::setprecision(1) << seconds_since(start) << " s\n";
    }
    d << "strict step-by-step monotone decrease: " << strictly_monotone << "/4 families\n"
      << "(momentum SGD at lr 0.05 on batch-norm nets is not monotone per step; the check is step 50 < step 1)";
    verdict(ok, "32-image overfit fixture, 50 steps, width 0.25, all four families: loss decreases", d.str());
}

void cifar_smoke(const std::string& dir) {
    const std::string name = "CIFAR-10 smoke: v1x_3_o1 w0.25 xxx end_only, 5000 images, 5 epochs, test acc > 30%";
    if (dir.empty() || !std::filesystem::exists(std::filesystem::path(dir) / kTestFile)) {
        report("NOT RUN", name,
               "no CIFAR-10 binary directory (pass it as argv[1] or set " + std::string("XXNET_DATA_DIR") + ")");
        return;
    }
    const auto start = Clock::now();
    const auto data = load_cifar10(dir);
    const auto train_set = subset(data.train, 5000, 42);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.eval_every = 5;
    const auto r = train(build_v1x3(ShuffleCode::parse("xxx"), ReluMode::EndOnly, InputMode::Cifar32, 0.25),
                         train_set, data.test, cfg);
    std::ostringstream d;
    d << "test acc " << std::fixed << std::setprecision(4) << r.metrics.epochs.back().test_acc << " on "
      << data.test.size() << " images, " << std::setprecision(0) << seconds_since(start) << " s";
    verdict(r.metrics.epochs.back().test_acc > 0.30, name, d.str());
}

void synthetic_proxy() {
    const auto start = Clock::now();
    const auto train_set = fixture::synthetic(640, 5);
    const auto test_set = fixture::synthetic(200, 6, Split::Test);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.eval_every = 2;
    const auto r = train(build_v1x3(ShuffleCode::parse("xxx"), ReluMode::EndOnly, InputMode::Cifar32, 0.25),
                         train_set, test_set, cfg);
    std::ostringstream d;
    d << "synthetic 10-class set, 640 train / 200 test, 2 epochs: test acc " << std::fixed << std::setprecision(4)
      << r.metrics.epochs.back().test_acc << ", " << std::setprecision(0) << seconds_since(start) << " s\n"
      << "stands in for the CIFAR-10 run when no data is present; not the criterion itself";
    report("INFO", "training pipeline proxy (synthetic data)", d.str());
}

void determinism() {
    fixture::TempDir dir("accept-det");
    const auto train_set = fixture::synthetic(64, 7);
    const auto test_set = fixture::synthetic(20, 8, Split::Test);
    std::string csv[2];
    for (int run = 0; run < 2; ++run) {
        TrainConfig cfg;
        cfg.epochs = 2;
        cfg.strict = true;
        cfg.run_dir = dir.path() / std::to_string(run);
        train(build_v1x3(ShuffleCode::parse("xxx"), ReluMode::EndOnly, InputMode::Cifar32, 0.125), train_set, test_set,
              cfg);
        csv[run] = fixture::read_text(cfg.run_dir / "metrics.csv");
    }
    std::ostringstream d;
    d << "two strict runs, same seed and config: metrics.csv " << csv[0].size() << " bytes, "
      << (csv[0] == csv[1] ? "identical" : "different");
    verdict(!csv[0].empty() && csv[0] == csv[1], "strict mode: identical config gives byte-identical metrics CSV",
            d.str());
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    std::string data_dir = argc > 1 ? argv[1] : "";
    if (data_dir.empty())
        if (const char* env = std::getenv("XXNET_DATA_DIR")) data_dir = env;

    try {
        reference_table();
        reduction();
        equations();
        gradients();
        connectivity_oracle();
        cifar_smoke(data_dir);
        overfit();
        synthetic_proxy();
        determinism();
    } catch (const std::exception& e) {
        std::cout << "FAIL    unexpected error: " << e.what() << '\n';
        return 1;
    }
    std::cout << (failures == 0 ? "all checked criteria passed" : std::to_string(failures) + " criteria failed") << '\n';
    return failures == 0 ? 0 : 1;
}
