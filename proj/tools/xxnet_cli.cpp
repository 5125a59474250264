// xxnet command-line entry point: analyze, connectivity, train, eval, describe.
//
// Exit codes: 0 ok, 2 configuration or user error, 3 numeric failure
// (reference table mismatch, training divergence).

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "xxnet/xxnet.hpp"

namespace fs = std::filesystem;
using namespace xxnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr const char* kDataDirEnv = "XXNET_DATA_DIR";

struct NumericFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NetOptions {
    std::string family;
    std::string shuffle;
    std::string relu = "all";
    std::string input_mode = "cifar_32";
    double width = 1.0;
    std::string network;
};

void add_net_options(CLI::App* cmd, NetOptions& o) {
    cmd->add_option("--family", o.family, "mobilenet_v1 | v1x_3_o1 | v1x_2_o2 | v1x_1_o3");
    cmd->add_option("--shuffle", o.shuffle, "shuffle code, e.g. xxx, 0x0, 00x (default all zeros)");
    cmd->add_option("--relu", o.relu, "all | pointwise_only | end_only")->capture_default_str();
    cmd->add_option("--input-mode", o.input_mode, "cifar_32 | faithful_224")->capture_default_str();
    cmd->add_option("--width", o.width, "width multiplier")->capture_default_str();
    cmd->add_option("--network", o.network, "JSON network description file (replaces the flags above)");
}

bool net_flags_given(const CLI::App* cmd) {
    for (const char* flag : {"--family", "--shuffle", "--relu", "--input-mode", "--width"})
        if (cmd->count(flag) > 0) return true;
    return false;
}

NetworkDescription resolve_description(const CLI::App* cmd, const NetOptions& o) {
    if (!o.network.empty()) {
        if (net_flags_given(cmd)) throw ConfigError("--network cannot be combined with --family/--shuffle/--relu/--input-mode/--width");
        return load_description(o.network);
    }
    if (o.family.empty()) throw ConfigError("either --family or --network is required");
    NetworkDescription d;
    d.family = parse_family(o.family);
    d.shuffle = ShuffleCode::parse(o.shuffle.empty() ? "000" : o.shuffle);
    d.relu = parse_relu_mode(o.relu);
    d.input_mode = parse_input_mode(o.input_mode);
    d.width = o.width;
    return d;
}

void echo_config(const std::string& command, const nlohmann::ordered_json& cfg) {
    std::cerr << "# " << command << ' ' << cfg.dump() << '\n';
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hex16(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

std::string default_data_dir() {
    const char* env = std::getenv(kDataDirEnv);
    return env ? env : "";
}

// ---------------------------------------------------------------------------

struct AnalyzeOptions {
    NetOptions net;
    bool check_table2 = false;
    bool summary = false;
    std::string out;
};

int cmd_analyze(const CLI::App* cmd, const AnalyzeOptions& o) {
    const auto desc = resolve_description(cmd, o.net);
    echo_config("analyze", to_json(desc));
    const auto spec = build(desc);
    const auto baseline_spec = build_mobilenet_v1(spec.relu, spec.input_mode, spec.width);
    const auto report = network_params(spec);
    const auto baseline = network_params(baseline_spec);
    const auto reach = connectivity_report(spec);

    std::ofstream file;
    if (!o.out.empty()) {
        file.open(o.out);
        if (!file) throw ConfigError("cannot write " + o.out);
    }
    std::ostream& os = o.out.empty() ? std::cout : file;
    if (o.summary)
        write_summary(os, spec, baseline, report, reach);
    else if (!o.check_table2 || !o.out.empty())
        write_report_csv(os, baseline, report, reach);

    if (o.check_table2) {
        if (spec.width != 1.0 || !spec.overrides.empty())
            throw ConfigError("--check-table2 needs width 1 and no group overrides");
        const auto check = check_table2(report);
        std::cout << check.matching_layers << '/' << kLayerCount << " layers match, total " << report.total_params
                  << '\n';
        if (!check.ok()) {
            std::cerr << check.detail;
            throw NumericFailure("parameter counts differ from the reference table");
        }
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_connectivity(const CLI::App* cmd, const NetOptions& o) {
    const auto desc = resolve_description(cmd, o);
    echo_config("connectivity", to_json(desc));
    const auto spec = build(desc);
    std::cout << "layer  outputs  inputs  min_reach  fraction  status\n";
    for (const auto& c : connectivity_report(spec)) {
        std::cout << 'L' << std::left << std::setw(5) << c.layer << std::right << std::setw(8) << c.outputs
                  << std::setw(8) << c.inputs << std::setw(11) << c.min_reach << "  " << std::fixed
                  << std::setprecision(6) << c.fraction << "  " << (c.fully_connected ? "FULL" : "PARTIAL") << '\n';
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

std::string plan_text(const SeparableLayer& layer, Family family) {
    if (family == Family::MobilenetV1) return "pw dense";
    std::ostringstream os;
    if (layer.plan.growth_tile_factor > 1) os << "tile×" << layer.plan.growth_tile_factor << ", ";
    os << "pw ";
    for (std::size_t s = 0; s < layer.plan.stages.size(); ++s)
        os << (s ? "/" : "") << layer.plan.stages[s].group_size();
    return os.str();
}

std::string relu_text(const SeparableLayer& layer) {
    std::string out = layer.depthwise_relu ? "dw" : "";
    for (std::size_t s = 0; s < layer.plan.stages.size(); ++s)
        if (layer.plan.stages[s].relu_after) out += (out.empty() ? "pw" : "+pw") + std::to_string(s + 1);
    return out.empty() ? "-" : out;
}

std::string shuffle_text(const SeparableLayer& layer) {
    std::string out;
    for (std::size_t s = 0; s < layer.plan.stages.size(); ++s)
        if (layer.plan.stages[s].shuffle_after) out += (out.empty() ? "pw" : ",pw") + std::to_string(s + 1);
    return out.empty() ? "-" : out;
}

int cmd_describe(const CLI::App* cmd, const NetOptions& o) {
    const auto desc = resolve_description(cmd, o);
    echo_config("describe", to_json(desc));
    const auto spec = build(desc);
    const auto report = network_params(spec);
    std::cout << "family " << to_string(spec.family) << "  shuffle " << spec.shuffle.str() << "  relu "
              << to_string(spec.relu) << "  input " << to_string(spec.input_mode) << "  width " << spec.width << '\n';
    std::cout << "stem   conv3x3 " << spec.stem.in_channels << "->" << spec.stem.out_channels << " stride "
              << spec.stem.stride << '\n';
    std::cout << std::left << std::setw(6) << "layer" << std::setw(12) << "channels" << std::setw(8) << "stride"
              << std::setw(22) << "plan" << std::setw(18) << "relu" << std::setw(14) << "shuffle" << std::right
              << std::setw(10) << "params" << std::setw(14) << "macs" << '\n';
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const std::string plan = plan_text(l, spec.family);
        // "×" is two bytes; pad by display width.
        const std::size_t display = plan.size() - (plan.find("×") == std::string::npos ? 0 : 1);
        std::cout << std::left << std::setw(6) << ("L" + std::to_string(l.shape.index)) << std::setw(12)
                  << (std::to_string(l.shape.in_channels) + "->" + std::to_string(l.shape.out_channels))
                  << std::setw(8) << l.shape.stride << plan << std::string(display < 22 ? 22 - display : 1, ' ')
                  << std::setw(18) << relu_text(l) << std::setw(14) << shuffle_text(l) << std::right << std::setw(10)
                  << report.layers[i].params << std::setw(14) << report.layers[i].macs << '\n';
    }
    std::cout << "head   avgpool, fc " << spec.head.features << "->" << spec.head.classes << '\n';
    std::cout << "total  params " << report.total_params << "  macs " << report.total_macs << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainOptions {
    NetOptions net;
    std::string data_dir = default_data_dir();
    std::size_t epochs = 120;
    std::size_t subset = 0;
    std::size_t test_subset = 0;
    std::uint64_t seed = 1;
    std::size_t batch_size = 32;
    double lr0 = 0.05;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::size_t eval_every = 1;
    bool strict = false;
    bool no_augment = false;
    std::string runs_dir = "runs";
    bool overwrite = false;
};

CifarSplits load_data(const std::string& dir, std::size_t train_subset, std::size_t test_subset, std::uint64_t seed) {
    if (dir.empty()) throw ConfigError(std::string("no data directory: pass --data-dir or set ") + kDataDirEnv);
    if (!fs::is_directory(dir)) throw ConfigError("data directory " + dir + " does not exist");
    auto splits = load_cifar10(dir);
    if (train_subset > 0) splits.train = subset(splits.train, train_subset, seed);
    if (test_subset > 0) splits.test = subset(splits.test, test_subset, seed);
    return splits;
}

int cmd_train(const CLI::App* cmd, const TrainOptions& o) {
    const auto desc = resolve_description(cmd, o.net);
    TrainConfig cfg;
    cfg.batch_size = o.batch_size;
    cfg.epochs = o.epochs;
    cfg.lr0 = o.lr0;
    cfg.momentum = o.momentum;
    cfg.weight_decay = o.weight_decay;
    cfg.seed = o.seed;
    cfg.eval_every = o.eval_every;
    cfg.strict = o.strict;
    cfg.augment = !o.no_augment;
    cfg.validate();

    nlohmann::ordered_json canonical;
    canonical["network"] = to_json(desc);
    canonical["epochs"] = cfg.epochs;
    canonical["batch_size"] = cfg.batch_size;
    canonical["lr0"] = cfg.lr0;
    canonical["decay_factor"] = cfg.decay_factor;
    canonical["epochs_per_decay"] = cfg.epochs_per_decay;
    canonical["optimizer"] = "sgd_momentum";
    canonical["momentum"] = cfg.momentum;
    canonical["weight_decay"] = cfg.weight_decay;
    canonical["seed"] = cfg.seed;
    canonical["eval_every"] = cfg.eval_every;
    canonical["augment"] = cfg.augment;
    canonical["train_subset"] = o.subset;
    canonical["test_subset"] = o.test_subset;
    canonical["strict"] = cfg.strict;
    const std::string text = canonical.dump();
    cfg.run_dir = fs::path(o.runs_dir) / (to_string(desc.family) + "-" + hex16(fnv1a(text)));
    auto echoed = canonical;
    echoed["data_dir"] = o.data_dir;
    echoed["run_dir"] = cfg.run_dir.string();
    echo_config("train", echoed);

    const auto spec = build(desc);
    const auto data = load_data(o.data_dir, o.subset, o.test_subset, o.seed);
    if (fs::exists(cfg.run_dir / "metrics.csv") && !o.overwrite)
        throw ConfigError("run directory " + cfg.run_dir.string() + " already holds results (use --overwrite)");
    fs::create_directories(cfg.run_dir);
    {
        std::ofstream out(cfg.run_dir / "config.json");
        out << canonical.dump(2) << '\n';
    }

    Model<float> model(spec, cfg.seed);
    std::cerr << "# params " << model.parameter_count() << ", train " << data.train.size() << ", test "
              << data.test.size() << '\n';
    const auto metrics = train(model, data.train, data.test, cfg, [](const EpochMetrics& m) {
        std::cerr << "epoch " << m.epoch << " lr " << m.lr << " loss " << m.train_loss << " train_acc " << m.train_acc
                  << " test_acc " << m.test_acc << '\n';
    });
    std::cout << "run_dir: " << cfg.run_dir.string() << '\n';
    if (metrics.best_epoch > 0)
        std::cout << "best_test_acc: " << metrics.best_test_acc << " (epoch " << metrics.best_epoch << ")\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalOptions {
    NetOptions net;
    std::string checkpoint;
    std::string data_dir = default_data_dir();
    std::size_t test_subset = 0;
    std::uint64_t seed = 1;
};

int cmd_eval(const CLI::App* cmd, const EvalOptions& o) {
    const bool explicit_net = !o.net.network.empty() || net_flags_given(cmd);
    const auto desc = explicit_net ? resolve_description(cmd, o.net) : checkpoint_description(o.checkpoint);
    auto echoed = nlohmann::ordered_json::object();
    echoed["network"] = to_json(desc);
    echoed["checkpoint"] = o.checkpoint;
    echoed["data_dir"] = o.data_dir;
    echoed["test_subset"] = o.test_subset;
    echo_config("eval", echoed);

    Model<float> model(build(desc), 0);
    const auto epoch = load_checkpoint(o.checkpoint, model);
    const auto data = load_data(o.data_dir, 0, o.test_subset, o.seed);
    const double acc = evaluate(model, data.test);
    std::cout << "checkpoint_epoch: " << epoch << '\n'
              << "test_images: " << data.test.size() << '\n'
              << "test_acc: " << std::fixed << std::setprecision(4) << acc << '\n';
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
    // Graph tensors are freed and reallocated every step; keep them on the heap.
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    CLI::App app{"xxnet: grouped-pointwise separable networks"};
    app.require_subcommand(1);

    AnalyzeOptions analyze;
    auto* analyze_cmd = app.add_subcommand("analyze", "per-layer parameter, MAC and reach CSV");
    add_net_options(analyze_cmd, analyze.net);
    analyze_cmd->add_flag("--check-table2", analyze.check_table2, "compare against the embedded reference counts (prints only the verdict unless --out or --summary)");
    analyze_cmd->add_flag("--summary", analyze.summary, "print key: value summary instead of CSV");
    analyze_cmd->add_option("--out", analyze.out, "write the report to a file");

    NetOptions conn;
    auto* conn_cmd = app.add_subcommand("connectivity", "per-layer input reachability");
    add_net_options(conn_cmd, conn);

    NetOptions describe_net;
    auto* describe_cmd = app.add_subcommand("describe", "layer table");
    add_net_options(describe_cmd, describe_net);

    TrainOptions tr;
    auto* train_cmd = app.add_subcommand("train", "train on CIFAR-10");
    add_net_options(train_cmd, tr.net);
    train_cmd->add_option("--data-dir", tr.data_dir, std::string("CIFAR-10 binary directory (default $") + kDataDirEnv + ")");
    train_cmd->add_option("--epochs", tr.epochs)->capture_default_str();
    train_cmd->add_option("--subset", tr.subset, "train on a seeded subset of this size (0 = all)");
    train_cmd->add_option("--test-subset", tr.test_subset, "evaluate on a seeded subset (0 = all)");
    train_cmd->add_option("--seed", tr.seed)->capture_default_str();
    train_cmd->add_option("--batch-size", tr.batch_size)->capture_default_str();
    train_cmd->add_option("--lr0", tr.lr0)->capture_default_str();
    train_cmd->add_option("--momentum", tr.momentum)->capture_default_str();
    train_cmd->add_option("--weight-decay", tr.weight_decay)->capture_default_str();
    train_cmd->add_option("--eval-every", tr.eval_every)->capture_default_str();
    train_cmd->add_flag("--strict", tr.strict, "single-threaded, byte-reproducible metrics");
    train_cmd->add_flag("--no-augment", tr.no_augment, "disable crop/flip augmentation");
    train_cmd->add_option("--runs-dir", tr.runs_dir, "parent of content-addressed run directories")
        ->capture_default_str();
    train_cmd->add_flag("--overwrite", tr.overwrite, "replace an existing run with the same config");

    EvalOptions ev;
    auto* eval_cmd = app.add_subcommand("eval", "test accuracy of a checkpoint");
    add_net_options(eval_cmd, ev.net);
    eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
    eval_cmd->add_option("--data-dir", ev.data_dir, std::string("CIFAR-10 binary directory (default $") + kDataDirEnv + ")");
    eval_cmd->add_option("--test-subset", ev.test_subset, "evaluate on a seeded subset (0 = all)");
    eval_cmd->add_option("--seed", ev.seed)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*analyze_cmd) return cmd_analyze(analyze_cmd, analyze);
        if (*conn_cmd) return cmd_connectivity(conn_cmd, conn);
        if (*describe_cmd) return cmd_describe(describe_cmd, describe_net);
        if (*train_cmd) return cmd_train(train_cmd, tr);
        if (*eval_cmd) return cmd_eval(eval_cmd, ev);
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const NumericFailure& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    }
    return kExitConfig;
}
