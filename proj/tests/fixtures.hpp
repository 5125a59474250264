#pragma once

// Synthetic CIFAR-format records and scratch directories for tests.

#include <filesystem>
#include <random>
#include <string>

#include "xxnet/data.hpp"

namespace fixture {

/// Image whose channel planes carry a class-dependent brightness pattern plus
/// noise, so a small network can learn the labels.
inline std::vector<std::uint8_t> class_image(int label, std::mt19937_64& rng, int noise = 56) {
    std::vector<std::uint8_t> img(xxnet::kImageBytes);
    std::uniform_int_distribution<int> jitter(0, noise - 1);
    for (std::size_t c = 0; c < xxnet::kImageChannels; ++c)
        for (std::size_t y = 0; y < xxnet::kImageSide; ++y)
            for (std::size_t x = 0; x < xxnet::kImageSide; ++x) {
                const int band = ((static_cast<int>(y) / 8 + label) % 4) * 30;
                const int base = (label * 37 + static_cast<int>(c) * label * 23) % 200;
                img[(c * xxnet::kImageSide + y) * xxnet::kImageSide + x] =
                    static_cast<std::uint8_t>(std::min(255, base / 2 + band + jitter(rng)));
            }
    return img;
}

inline xxnet::Dataset synthetic(std::size_t count, std::uint64_t seed, xxnet::Split split = xxnet::Split::Train) {
    std::mt19937_64 rng(seed);
    xxnet::Dataset ds;
    ds.split = split;
    for (std::size_t i = 0; i < count; ++i) {
        const int label = static_cast<int>(i % xxnet::kClasses);
        ds.push_back(class_image(label, rng), static_cast<std::uint8_t>(label));
    }
    return ds;
}

/// Unique directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("xxnet-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
};

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace fixture
