#pragma once

// CIFAR-10 binary ingestion, preprocessing and batch iteration.
//
// Expected directory layout (the standard binary distribution):
//   data_batch_1.bin ... data_batch_5.bin   training records
//   test_batch.bin                          test records
// Each record is 3073 bytes: one label byte followed by 3072 pixel bytes
// holding the R, G and B planes (1024 bytes each, row-major 32x32).

#include <algorithm>
#include <array>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "xxnet/arch.hpp"
#include "xxnet/error.hpp"
#include "xxnet/tensor.hpp"

namespace xxnet {

inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageBytes = kImageChannels * kImageSide * kImageSide;
inline constexpr std::size_t kRecordBytes = 1 + kImageBytes;
inline constexpr std::array<const char*, 5> kTrainFiles = {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                                                           "data_batch_4.bin", "data_batch_5.bin"};
inline constexpr const char* kTestFile = "test_batch.bin";

enum class Split { Train, Test };

struct Dataset {
    Split split = Split::Train;
    std::vector<std::uint8_t> pixels;  // count * 3072, channel-major per image
    std::vector<std::uint8_t> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::span<const std::uint8_t> image(std::size_t i) const {
        return std::span<const std::uint8_t>(pixels).subspan(i * kImageBytes, kImageBytes);
    }
    void push_back(std::span<const std::uint8_t> image, std::uint8_t label) {
        pixels.insert(pixels.end(), image.begin(), image.end());
        labels.push_back(label);
    }
};

namespace detail {

inline void read_records(const std::filesystem::path& path, Dataset& out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFileError("missing CIFAR-10 file " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t whole = bytes.size() / kRecordBytes;
    for (std::size_t r = 0; r < whole; ++r) {
        const std::size_t offset = r * kRecordBytes;
        const auto label = static_cast<std::uint8_t>(bytes[offset]);
        if (label > 9)
            throw BadLabelError(path.string() + ": label byte " + std::to_string(label) + " at offset " +
                                std::to_string(offset));
        const auto* px = reinterpret_cast<const std::uint8_t*>(bytes.data() + offset + 1);
        out.push_back({px, kImageBytes}, label);
    }
    if (bytes.size() % kRecordBytes != 0)
        throw TruncatedRecordError(path.string() + ": truncated record at offset " +
                                   std::to_string(whole * kRecordBytes) + " (" +
                                   std::to_string(bytes.size() - whole * kRecordBytes) + " of " +
                                   std::to_string(kRecordBytes) + " bytes)");
}

}  // namespace detail

inline Dataset load_cifar_file(const std::filesystem::path& path, Split split) {
    Dataset ds;
    ds.split = split;
    detail::read_records(path, ds);
    return ds;
}

struct CifarSplits {
    Dataset train;
    Dataset test;
};

inline CifarSplits load_cifar10(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw MissingFileError("CIFAR-10 directory not found: " + dir.string());
    CifarSplits out;
    out.train.split = Split::Train;
    out.test.split = Split::Test;
    for (const char* name : kTrainFiles) detail::read_records(dir / name, out.train);
    detail::read_records(dir / kTestFile, out.test);
    return out;
}

inline void write_cifar_file(const std::filesystem::path& path, const Dataset& ds, std::size_t begin,
                             std::size_t end) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + path.string());
    for (std::size_t i = begin; i < end; ++i) {
        out.put(static_cast<char>(ds.labels[i]));
        const auto img = ds.image(i);
        out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
    }
}

/// Writes the standard six-file layout; training records are split evenly
/// (remainder in the last file).
inline void write_cifar10(const std::filesystem::path& dir, const Dataset& train, const Dataset& test) {
    std::filesystem::create_directories(dir);
    const std::size_t per = train.size() / kTrainFiles.size();
    for (std::size_t f = 0; f < kTrainFiles.size(); ++f) {
        const std::size_t begin = f * per;
        const std::size_t end = f + 1 == kTrainFiles.size() ? train.size() : begin + per;
        write_cifar_file(dir / kTrainFiles[f], train, begin, end);
    }
    write_cifar_file(dir / kTestFile, test, 0, test.size());
}

inline std::array<std::size_t, kClasses> label_histogram(const Dataset& ds) {
    std::array<std::size_t, kClasses> hist{};
    for (auto l : ds.labels) ++hist[l];
    return hist;
}

/// Seeded uniform sample of n records without replacement.
inline Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw ConfigError("subset size must be positive");
    if (n > ds.size())
        throw ConfigError("subset of " + std::to_string(n) + " exceeds dataset size " + std::to_string(ds.size()));
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    Dataset out;
    out.split = ds.split;
    out.pixels.reserve(n * kImageBytes);
    for (std::size_t i = 0; i < n; ++i) out.push_back(ds.image(idx[i]), ds.labels[idx[i]]);
    return out;
}

// ---------------------------------------------------------------------------
// Preprocessing.

enum class Phase { Train, Eval };

inline float scale_pixel(std::uint8_t v) { return static_cast<float>(v) / 127.5f - 1.0f; }

namespace detail {

// Bilinear resize of one channel plane, half-pixel centers, edge clamped.
inline void resize_bilinear(const float* src, std::size_t sh, std::size_t sw, float* dst, std::size_t dh,
                            std::size_t dw) {
    const float ry = static_cast<float>(sh) / static_cast<float>(dh);
    const float rx = static_cast<float>(sw) / static_cast<float>(dw);
    for (std::size_t y = 0; y < dh; ++y) {
        const float fy = std::clamp((static_cast<float>(y) + 0.5f) * ry - 0.5f, 0.0f, static_cast<float>(sh - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, sh - 1);
        const float wy = fy - static_cast<float>(y0);
        for (std::size_t x = 0; x < dw; ++x) {
            const float fx =
                std::clamp((static_cast<float>(x) + 0.5f) * rx - 0.5f, 0.0f, static_cast<float>(sw - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, sw - 1);
            const float wx = fx - static_cast<float>(x0);
            const float top = src[y0 * sw + x0] * (1 - wx) + src[y0 * sw + x1] * wx;
            const float bot = src[y1 * sw + x0] * (1 - wx) + src[y1 * sw + x1] * wx;
            dst[y * dw + x] = top * (1 - wy) + bot * wy;
        }
    }
}

}  // namespace detail

inline constexpr std::size_t kFaithfulResize = 256;
inline constexpr std::size_t kCifarPad = 4;

/// Converts records to a float batch in [-1, 1] (x / 127.5 - 1).
///
/// cifar_32:     train = zero-pad 4, random 32x32 crop, random flip; eval = identity.
/// faithful_224: bilinear resize to 256, then train = random 224 crop + random
///               flip, eval = center 224 crop.
/// Padding value is 0 in the scaled range.
inline Tensor<float> preprocess(const Dataset& ds, std::span<const std::size_t> indices, Phase phase,
                                InputMode mode, std::mt19937_64& rng) {
    const std::size_t out_side = input_resolution(mode);
    Tensor<float> batch(indices.size(), kImageChannels, out_side, out_side);
    std::vector<float> plane(kImageSide * kImageSide);
    std::vector<float> big(kFaithfulResize * kFaithfulResize);
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const auto img = ds.image(indices[b]);
        std::size_t src_side = kImageSide, off_y = 0, off_x = 0;
        bool flip = false;
        std::ptrdiff_t shift_y = 0, shift_x = 0;
        if (mode == InputMode::Cifar32) {
            if (phase == Phase::Train) {
                std::uniform_int_distribution<int> shift(-static_cast<int>(kCifarPad), static_cast<int>(kCifarPad));
                shift_y = shift(rng);
                shift_x = shift(rng);
                flip = std::bernoulli_distribution(0.5)(rng);
            }
        } else {
            src_side = kFaithfulResize;
            const std::size_t slack = kFaithfulResize - out_side;
            if (phase == Phase::Train) {
                std::uniform_int_distribution<std::size_t> pos(0, slack);
                off_y = pos(rng);
                off_x = pos(rng);
                flip = std::bernoulli_distribution(0.5)(rng);
            } else {
                off_y = off_x = slack / 2;
            }
        }
        for (std::size_t c = 0; c < kImageChannels; ++c) {
            for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = scale_pixel(img[c * plane.size() + i]);
            const float* src = plane.data();
            if (mode == InputMode::Faithful224) {
                detail::resize_bilinear(plane.data(), kImageSide, kImageSide, big.data(), kFaithfulResize,
                                        kFaithfulResize);
                src = big.data();
            }
            auto dst = batch.plane(b, c);
            for (std::size_t y = 0; y < out_side; ++y)
                for (std::size_t x = 0; x < out_side; ++x) {
                    const std::size_t xx = flip ? out_side - 1 - x : x;
                    const auto sy = static_cast<std::ptrdiff_t>(y + off_y) + shift_y;
                    const auto sx = static_cast<std::ptrdiff_t>(xx + off_x) + shift_x;
                    const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(src_side) &&
                                        sx < static_cast<std::ptrdiff_t>(src_side);
                    dst[y * out_side + x] =
                        inside ? src[static_cast<std::size_t>(sy) * src_side + static_cast<std::size_t>(sx)] : 0.0f;
                }
        }
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Batching.

struct Batch {
    std::size_t index = 0;  // position within the epoch
    std::vector<std::size_t> records;
    Tensor<float> images;
    std::vector<int> labels;
};

/// Seeded per-epoch permutation cut into ceil(count / batch_size) batches.
/// Augmentation randomness is derived from (seed, epoch, batch index) so a
/// batch is identical whichever thread prepares it.
class BatchIterator {
public:
    BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, bool shuffle, bool augment,
                  InputMode mode)
        : ds_(&ds), batch_size_(batch_size), seed_(seed), shuffle_(shuffle), augment_(augment), mode_(mode) {
        if (batch_size == 0) throw ConfigError("batch size must be positive");
    }

    std::size_t batches_per_epoch() const noexcept { return (ds_->size() + batch_size_ - 1) / batch_size_; }

    std::vector<std::size_t> epoch_order(std::size_t epoch) const {
        std::vector<std::size_t> idx(ds_->size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        if (shuffle_) {
            std::mt19937_64 rng(seed_ ^ (0x9E3779B97F4A7C15ull * (epoch + 1)));
            std::shuffle(idx.begin(), idx.end(), rng);
        }
        return idx;
    }

    Batch make_batch(const std::vector<std::size_t>& order, std::size_t epoch, std::size_t b) const {
        Batch batch;
        batch.index = b;
        const std::size_t begin = b * batch_size_;
        const std::size_t end = std::min(order.size(), begin + batch_size_);
        batch.records.assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
        std::mt19937_64 rng(seed_ + 1000003ull * (epoch + 1) + 7919ull * (b + 1));
        batch.images = preprocess(*ds_, batch.records, augment_ ? Phase::Train : Phase::Eval, mode_, rng);
        for (std::size_t r : batch.records) batch.labels.push_back(ds_->labels[r]);
        return batch;
    }

    std::vector<Batch> epoch(std::size_t epoch) const {
        const auto order = epoch_order(epoch);
        std::vector<Batch> out;
        for (std::size_t b = 0; b < batches_per_epoch(); ++b) out.push_back(make_batch(order, epoch, b));
        return out;
    }

    const Dataset& dataset() const noexcept { return *ds_; }

private:
    const Dataset* ds_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    bool shuffle_;
    bool augment_;
    InputMode mode_;
};

/// Prepares one epoch's batches on a worker thread, at most `depth` ahead of
/// the consumer, delivered in order.
class Prefetcher {
public:
    Prefetcher(const BatchIterator& it, std::size_t epoch, std::size_t depth = 4)
        : depth_(std::max<std::size_t>(1, depth)), total_(it.batches_per_epoch()) {
        worker_ = std::jthread([this, &it, epoch](std::stop_token stop) {
            const auto order = it.epoch_order(epoch);
            for (std::size_t b = 0; b < total_; ++b) {
                Batch batch = it.make_batch(order, epoch, b);
                std::unique_lock lock(mu_);
                space_.wait(lock, [&] { return queue_.size() < depth_ || stop.stop_requested(); });
                if (stop.stop_requested()) return;
                queue_.push_back(std::move(batch));
                ready_.notify_one();
            }
        });
    }

    ~Prefetcher() {
        worker_.request_stop();
        { std::lock_guard lock(mu_); }
        space_.notify_all();
    }

    Prefetcher(const Prefetcher&) = delete;
    Prefetcher& operator=(const Prefetcher&) = delete;

    /// Next batch in order, or nullopt after the last one.
    std::optional<Batch> next() {
        if (delivered_ == total_) return std::nullopt;
        std::unique_lock lock(mu_);
        ready_.wait(lock, [&] { return !queue_.empty(); });
        Batch b = std::move(queue_.front());
        queue_.pop_front();
        ++delivered_;
        space_.notify_one();
        return b;
    }

    std::size_t max_in_flight() const noexcept { return depth_; }

private:
    std::size_t depth_;
    std::size_t total_;
    std::size_t delivered_ = 0;
    std::mutex mu_;
    std::condition_variable space_;
    std::condition_variable ready_;
    std::deque<Batch> queue_;
    std::jthread worker_;  // last member: joins before the queue is destroyed
};

}  // namespace xxnet
