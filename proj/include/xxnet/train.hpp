#pragma once

// Training loop: SGD with momentum, staircase exponential learning-rate
// decay, per-epoch metrics CSV and best-test-accuracy checkpointing.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "xxnet/autograd.hpp"
#include "xxnet/checkpoint.hpp"
#include "xxnet/data.hpp"
#include "xxnet/error.hpp"
#include "xxnet/model.hpp"

namespace xxnet {

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t epochs = 120;
    double lr0 = 0.05;
    double decay_factor = 0.94;
    std::size_t epochs_per_decay = 2;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::uint64_t seed = 1;
    std::size_t eval_every = 1;
    bool augment = true;
    // Strict mode: no prefetch thread and the seconds column is written as 0
    // so that identical configs give byte-identical metrics files.
    bool strict = false;
    std::size_t prefetch_depth = 4;
    std::filesystem::path run_dir;  // empty: write nothing

    void validate() const {
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (!(lr0 > 0)) throw ConfigError("lr0 must be positive");
        if (!(decay_factor > 0 && decay_factor <= 1)) throw ConfigError("decay_factor must be in (0, 1]");
        if (epochs_per_decay == 0) throw ConfigError("epochs_per_decay must be positive");
        if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
        if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
        if (eval_every == 0) throw ConfigError("eval_every must be positive");
    }
};

/// lr0 * decay^floor(epoch / epochs_per_decay)
inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
    return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.epochs_per_decay));
}

/// v <- momentum*v - lr*(g + weight_decay*p);  p <- p + v
template <class T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, double lr, double momentum,
              double weight_decay = 0.0) {
    if (grads.size() != params.size() || velocity.size() != params.size())
        throw ShapeError("sgd_step: parameter, gradient and velocity sizes differ");
    const T mu = static_cast<T>(momentum);
    const T rate = static_cast<T>(lr);
    const T wd = static_cast<T>(weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = wd == T(0) ? grads[i] : grads[i] + wd * params[i];
        velocity[i] = mu * velocity[i] - rate * g;
        params[i] += velocity[i];
    }
}

template <class T>
void sgd_step(Model<T>& model, double lr, double momentum, double weight_decay = 0.0) {
    for (auto& p : model.parameters())
        sgd_step<T>(p.value.data(), p.grad.data(), p.velocity.data(), lr, momentum, weight_decay);
}

struct EpochMetrics {
    std::size_t epoch = 0;  // 1-based
    double lr = 0;
    double train_loss = 0;
    double train_acc = 0;
    double test_acc = 0;  // NaN when not evaluated this epoch
    double seconds = 0;
};

struct RunMetrics {
    std::vector<EpochMetrics> epochs;
    double best_test_acc = -1;
    std::size_t best_epoch = 0;
};

inline constexpr const char* kMetricsCsvHeader = "epoch,lr,train_loss,train_acc,test_acc,seconds";

inline std::string metrics_csv_row(const EpochMetrics& m) {
    std::ostringstream os;
    os << m.epoch << ',' << std::setprecision(9) << m.lr << ',' << std::fixed << std::setprecision(6) << m.train_loss
       << ',' << m.train_acc << ',';
    if (std::isnan(m.test_acc))
        os << "nan";
    else
        os << m.test_acc;
    os << ',' << std::setprecision(3) << m.seconds;
    return os.str();
}

/// Result of one optimizer step on a batch.
struct StepResult {
    double loss = 0;
    std::size_t correct = 0;
};

/// Forward, backward and one SGD update on a single batch.
template <class T>
StepResult train_step(Model<T>& model, const Tensor<T>& images, const std::vector<int>& labels, double lr,
                      double momentum, double weight_decay = 0.0) {
    Graph<T> g;
    auto in = g.input(images);
    auto logits = model.build(g, in, Mode::Train);
    auto loss = g.softmax_cross_entropy(logits, labels, "loss");
    g.forward();
    StepResult r;
    r.loss = static_cast<double>(g.value(loss)[0]);
    const auto pred = predictions(g.value(logits));
    for (std::size_t i = 0; i < labels.size(); ++i) r.correct += pred[i] == labels[i] ? 1 : 0;
    if (!std::isfinite(r.loss)) return r;
    model.zero_grad();
    g.backward(loss);
    sgd_step(model, lr, momentum, weight_decay);
    return r;
}

/// Top-1 accuracy with batch-norm in eval mode and no augmentation.
template <class T>
double evaluate(Model<T>& model, const Dataset& ds, std::size_t batch_size = 100) {
    if (ds.size() == 0) throw ConfigError("cannot evaluate on an empty dataset");
    BatchIterator it(ds, batch_size, 0, false, false, model.spec().input_mode);
    const auto order = it.epoch_order(0);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < it.batches_per_epoch(); ++b) {
        const Batch batch = it.make_batch(order, 0, b);
        const auto pred = predictions(model.logits(batch.images.template cast<T>(), Mode::Eval));
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

using ProgressFn = std::function<void(const EpochMetrics&)>;

/// Runs the protocol on an existing model. When cfg.run_dir is set, writes
/// metrics.csv (flushed per epoch), best.ckpt (initial weights until the
/// first evaluation beats them) and last.ckpt.
template <class T>
RunMetrics train(Model<T>& model, const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg,
                 const ProgressFn& progress = {}) {
    cfg.validate();
    if (train_set.size() == 0) throw ConfigError("training set is empty");
    std::ofstream csv;
    if (!cfg.run_dir.empty()) {
        std::filesystem::create_directories(cfg.run_dir);
        csv.open(cfg.run_dir / "metrics.csv", std::ios::trunc);
        if (!csv) throw ConfigError("cannot write " + (cfg.run_dir / "metrics.csv").string());
        csv << kMetricsCsvHeader << '\n' << std::flush;
        save_checkpoint(cfg.run_dir / "best.ckpt", model, 0);
    }

    RunMetrics metrics;
    BatchIterator it(train_set, cfg.batch_size, cfg.seed, true, cfg.augment, model.spec().input_mode);
    long step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        const double lr = lr_schedule(epoch, cfg);
        double loss_sum = 0;
        std::size_t correct = 0, seen = 0;

        const auto run_batch = [&](const Batch& batch) {
            const auto r = train_step(model, batch.images.template cast<T>(), batch.labels, lr, cfg.momentum,
                                      cfg.weight_decay);
            if (!std::isfinite(r.loss))
                throw DivergenceError("training loss became non-finite at step " + std::to_string(step) + " (epoch " +
                                          std::to_string(epoch + 1) + ", batch " + std::to_string(batch.index) + ")",
                                      step);
            loss_sum += r.loss * static_cast<double>(batch.labels.size());
            correct += r.correct;
            seen += batch.labels.size();
            ++step;
        };
        if (cfg.strict) {
            const auto order = it.epoch_order(epoch);
            for (std::size_t b = 0; b < it.batches_per_epoch(); ++b) run_batch(it.make_batch(order, epoch, b));
        } else {
            Prefetcher pf(it, epoch, cfg.prefetch_depth);
            while (auto batch = pf.next()) run_batch(*batch);
        }

        EpochMetrics m;
        m.epoch = epoch + 1;
        m.lr = lr;
        m.train_loss = loss_sum / static_cast<double>(seen);
        m.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
        m.test_acc = std::nan("");
        const bool eval_now = test_set.size() > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        if (eval_now) m.test_acc = evaluate(model, test_set);
        m.seconds = cfg.strict ? 0.0
                               : std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        metrics.epochs.push_back(m);

        if (eval_now && m.test_acc > metrics.best_test_acc) {
            metrics.best_test_acc = m.test_acc;
            metrics.best_epoch = m.epoch;
            if (!cfg.run_dir.empty()) save_checkpoint(cfg.run_dir / "best.ckpt", model, m.epoch);
        }
        if (csv.is_open()) csv << metrics_csv_row(m) << '\n' << std::flush;
        if (!cfg.run_dir.empty()) save_checkpoint(cfg.run_dir / "last.ckpt", model, m.epoch);
        if (progress) progress(m);
    }
    return metrics;
}

struct TrainResult {
    Model<float> model;
    RunMetrics metrics;
};

/// Builds a float model for `spec` seeded from cfg.seed and trains it.
inline TrainResult train(const NetworkSpec& spec, const Dataset& train_set, const Dataset& test_set,
                         const TrainConfig& cfg, const ProgressFn& progress = {}) {
    TrainResult r{Model<float>(spec, cfg.seed), {}};
    r.metrics = train(r.model, train_set, test_set, cfg, progress);
    return r;
}

}  // namespace xxnet
