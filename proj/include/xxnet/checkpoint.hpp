#pragma once

// Versioned binary checkpoints.
//
// Layout (all integers little-endian, as written by the host):
//   char[8]  magic "XXNETCKP"
//   u32      format version (1)
//   u32      element size in bytes (4 = float, 8 = double)
//   u32      family (0 mobilenet_v1, 1 v1x_3_o1, 2 v1x_2_o2, 3 v1x_1_o3)
//   u32      description length, then the network description JSON text
//   u64      epoch counter
//   u32      tensor count, then per tensor:
//              u32 name length, name bytes
//              u64 n, c, h, w
//              n*c*h*w elements
// Tensors appear in model order: for every parameter "<name>" and
// "<name>#velocity", then for every batch-norm "<name>#mean" and "<name>#var".

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "xxnet/description.hpp"
#include "xxnet/error.hpp"
#include "xxnet/model.hpp"

namespace xxnet {

inline constexpr std::array<char, 8> kCheckpointMagic = {'X', 'X', 'N', 'E', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class Writer {
public:
    template <class U>
        requires std::is_arithmetic_v<U>
    void put(U v) {
        char buf[sizeof(U)];
        std::memcpy(buf, &v, sizeof(U));
        out_.append(buf, sizeof(U));
    }
    void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    void str(const std::string& s) {
        put(static_cast<std::uint32_t>(s.size()));
        out_ += s;
    }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(const std::string& in) : in_(in) {}

    template <class U>
        requires std::is_arithmetic_v<U>
    U get() {
        U v;
        std::memcpy(&v, need(sizeof(U)), sizeof(U));
        return v;
    }
    void bytes(void* p, std::size_t n) { std::memcpy(p, need(n), n); }
    std::string str() {
        const auto n = get<std::uint32_t>();
        return std::string(need(n), n);
    }
    bool done() const noexcept { return pos_ == in_.size(); }

private:
    const char* need(std::size_t n) {
        if (in_.size() - pos_ < n)
            throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_) + " (needed " +
                                  std::to_string(n) + " more)");
        const char* p = in_.data() + pos_;
        pos_ += n;
        return p;
    }

    const std::string& in_;
    std::size_t pos_ = 0;
};

template <class T>
void put_tensor(Writer& w, const std::string& name, const Shape& s, const T* data) {
    w.str(name);
    w.put<std::uint64_t>(s.n);
    w.put<std::uint64_t>(s.c);
    w.put<std::uint64_t>(s.h);
    w.put<std::uint64_t>(s.w);
    w.bytes(data, s.size() * sizeof(T));
}

template <class T>
void get_tensor(Reader& r, const std::string& name, const Shape& expect, T* data) {
    const std::string got = r.str();
    if (got != name) throw CheckpointError("checkpoint tensor '" + got + "' where '" + name + "' was expected");
    Shape s;
    s.n = r.get<std::uint64_t>();
    s.c = r.get<std::uint64_t>();
    s.h = r.get<std::uint64_t>();
    s.w = r.get<std::uint64_t>();
    if (s != expect)
        throw CheckpointError("checkpoint tensor '" + name + "' has shape " + s.str() + ", model expects " +
                              expect.str());
    r.bytes(data, s.size() * sizeof(T));
}

}  // namespace detail

template <class T>
std::string serialize_checkpoint(const Model<T>& model, std::uint64_t epoch) {
    detail::Writer w;
    w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
    w.put(kCheckpointVersion);
    w.put(static_cast<std::uint32_t>(sizeof(T)));
    w.put(static_cast<std::uint32_t>(model.spec().family));
    w.str(to_text(describe(model.spec())));
    w.put(epoch);
    const auto& params = model.parameters();
    const auto& stats = model.batch_norm_stats();
    w.put(static_cast<std::uint32_t>(2 * params.size() + 2 * stats.size()));
    for (const auto& p : params) {
        detail::put_tensor(w, p.name, p.value.shape(), p.value.data().data());
        detail::put_tensor(w, p.name + "#velocity", p.velocity.shape(), p.velocity.data().data());
    }
    for (const auto& s : stats) {
        const Shape shape{1, s.stats.running_mean.size(), 1, 1};
        detail::put_tensor(w, s.name + "#mean", shape, s.stats.running_mean.data());
        detail::put_tensor(w, s.name + "#var", shape, s.stats.running_var.data());
    }
    return w.take();
}

/// Restores parameters, optimizer state and batch-norm statistics into a
/// model built from the same description. Returns the stored epoch. The
/// model is untouched if the checkpoint is rejected.
template <class T>
std::uint64_t deserialize_checkpoint(const std::string& bytes, Model<T>& model) {
    detail::Reader r(bytes);
    std::array<char, 8> magic{};
    r.bytes(magic.data(), magic.size());
    if (magic != kCheckpointMagic) throw CheckpointError("not a checkpoint file (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const auto elem = r.get<std::uint32_t>();
    if (elem != sizeof(T))
        throw CheckpointError("checkpoint stores " + std::to_string(elem) + "-byte elements, model uses " +
                              std::to_string(sizeof(T)));
    const auto family = r.get<std::uint32_t>();
    if (family != static_cast<std::uint32_t>(model.spec().family))
        throw CheckpointError("checkpoint family differs from model family " + to_string(model.spec().family));
    const std::string desc = r.str();
    NetworkDescription stored;
    try {
        stored = parse_description(desc, "checkpoint");
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("corrupt network description: ") + e.what());
    }
    if (stored != describe(model.spec()))
        throw CheckpointError("checkpoint network description differs from the model:\n" + desc);
    const auto epoch = r.get<std::uint64_t>();
    Model<T> staged = model;
    auto& params = staged.parameters();
    auto& stats = staged.batch_norm_stats();
    const auto count = r.get<std::uint32_t>();
    if (count != 2 * params.size() + 2 * stats.size())
        throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                              std::to_string(2 * params.size() + 2 * stats.size()));
    for (auto& p : params) {
        detail::get_tensor(r, p.name, p.value.shape(), p.value.data().data());
        detail::get_tensor(r, p.name + "#velocity", p.velocity.shape(), p.velocity.data().data());
    }
    for (auto& s : stats) {
        const Shape shape{1, s.stats.running_mean.size(), 1, 1};
        detail::get_tensor(r, s.name + "#mean", shape, s.stats.running_mean.data());
        detail::get_tensor(r, s.name + "#var", shape, s.stats.running_var.data());
    }
    if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
    model = std::move(staged);
    return epoch;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, std::uint64_t epoch) {
    const std::string bytes = serialize_checkpoint(model, epoch);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

template <class T>
std::uint64_t load_checkpoint(const std::filesystem::path& path, Model<T>& model) {
    return deserialize_checkpoint(read_file_bytes(path), model);
}

/// Network description stored in a checkpoint, so callers can build the
/// matching model before loading.
inline NetworkDescription checkpoint_description(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    detail::Reader r(bytes);
    std::array<char, 8> magic{};
    r.bytes(magic.data(), magic.size());
    if (magic != kCheckpointMagic) throw CheckpointError("not a checkpoint file (bad magic)");
    if (r.get<std::uint32_t>() != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version");
    r.get<std::uint32_t>();
    r.get<std::uint32_t>();
    return parse_description(r.str(), path.string());
}

}  // namespace xxnet
