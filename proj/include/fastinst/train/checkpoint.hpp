#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fastinst/core/nn.hpp"
#include "fastinst/train/optim.hpp"

namespace fastinst {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[] = "FINST1";
inline constexpr const char* kConfigEntry = "__config__";

enum class DType : std::uint8_t { F32 = 0, F64 = 1, Bytes = 2 };

struct CheckpointEntry {
    DType dtype = DType::F32;
    Shape shape;
    std::vector<std::uint8_t> bytes;

    template <typename T>
    std::vector<T> values() const {
        if (dtype == DType::F32) return convert<float, T>();
        if (dtype == DType::F64) return convert<double, T>();
        throw std::runtime_error("checkpoint entry is a byte blob, not a tensor");
    }

   private:
    template <typename S, typename T>
    std::vector<T> convert() const {
        std::vector<S> raw(bytes.size() / sizeof(S));
        std::memcpy(raw.data(), bytes.data(), raw.size() * sizeof(S));
        return {raw.begin(), raw.end()};
    }
};

/// Name-ordered collection of tensors and blobs.
struct Checkpoint {
    std::map<std::string, CheckpointEntry> entries;

    template <typename T>
    void put(const std::string& name, const Shape& shape, const std::vector<T>& values) {
        static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
        CheckpointEntry e;
        e.dtype = std::is_same_v<T, float> ? DType::F32 : DType::F64;
        e.shape = shape;
        e.bytes.resize(values.size() * sizeof(T));
        std::memcpy(e.bytes.data(), values.data(), e.bytes.size());
        entries[name] = std::move(e);
    }

    void put_blob(const std::string& name, const std::string& text) {
        CheckpointEntry e;
        e.dtype = DType::Bytes;
        e.shape = {text.size()};
        e.bytes.assign(text.begin(), text.end());
        entries[name] = std::move(e);
    }

    const CheckpointEntry& at(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::runtime_error("checkpoint has no entry " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return entries.count(name) != 0; }

    nlohmann::json config() const {
        if (!contains(kConfigEntry)) return nlohmann::json::object();
        const auto& b = at(kConfigEntry).bytes;
        return nlohmann::json::parse(std::string(b.begin(), b.end()));
    }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
    os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint truncated");
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 | static_cast<std::uint32_t>(b[2]) << 16 |
           static_cast<std::uint32_t>(b[3]) << 24;
}

inline std::uint8_t get_u8(std::istream& is) {
    char c;
    if (!is.get(c)) throw std::runtime_error("checkpoint truncated");
    return static_cast<std::uint8_t>(c);
}

inline std::size_t element_size(DType t) { return t == DType::F32 ? 4 : t == DType::F64 ? 8 : 1; }

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
    os.write(kCheckpointMagic, 6);
    detail::put_u32(os, static_cast<std::uint32_t>(ckpt.entries.size()));
    for (const auto& [name, e] : ckpt.entries) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        os.put(static_cast<char>(e.dtype));
        os.put(static_cast<char>(e.shape.size()));
        for (auto d : e.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
        os.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    }
}

inline Checkpoint read_checkpoint(std::istream& is) {
    char magic[6];
    if (!is.read(magic, 6) || std::memcmp(magic, kCheckpointMagic, 6) != 0) throw std::runtime_error("not a FINST1 checkpoint");
    Checkpoint ckpt;
    const std::uint32_t count = detail::get_u32(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name(detail::get_u32(is), '\0');
        if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw std::runtime_error("checkpoint truncated");
        CheckpointEntry e;
        const auto tag = detail::get_u8(is);
        if (tag > 2) throw std::runtime_error("checkpoint entry " + name + " has unknown dtype tag " + std::to_string(tag));
        e.dtype = static_cast<DType>(tag);
        const auto rank = detail::get_u8(is);
        for (std::uint8_t r = 0; r < rank; ++r) e.shape.push_back(detail::get_u32(is));
        e.bytes.resize(shape_numel(e.shape) * detail::element_size(e.dtype));
        if (!is.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size())))
            throw std::runtime_error("checkpoint truncated in " + name);
        ckpt.entries.emplace(std::move(name), std::move(e));
    }
    return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
    write_checkpoint(os, ckpt);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    return read_checkpoint(is);
}

template <typename T>
Checkpoint make_checkpoint(const ParamStore<T>& params, const AdamWState<T>* opt, const nlohmann::json& config) {
    Checkpoint ckpt;
    for (const auto& [name, p] : params.all()) ckpt.put<T>(name, p.shape(), p.to_vector());
    if (opt) {
        for (const auto& [name, m] : opt->m) ckpt.put<T>("opt/m/" + name, params.at(name).shape(), m);
        for (const auto& [name, v] : opt->v) ckpt.put<T>("opt/v/" + name, params.at(name).shape(), v);
        ckpt.put<double>("opt/step", {1}, {static_cast<double>(opt->step)});
    }
    ckpt.put_blob(kConfigEntry, config.dump());
    return ckpt;
}

/// Copies parameter values (and optimizer state when requested) out of a checkpoint.
template <typename T>
void restore_checkpoint(const Checkpoint& ckpt, ParamStore<T>& params, AdamWState<T>* opt = nullptr) {
    for (const auto& [name, p] : params.all()) {
        const auto& e = ckpt.at(name);
        if (e.shape != p.shape())
            throw std::runtime_error("checkpoint shape mismatch for " + name + ": " + shape_str(e.shape) + " vs " + shape_str(p.shape()));
        auto values = e.template values<T>();
        Tensor<T> handle = p;
        std::copy(values.begin(), values.end(), handle.mutable_data().begin());
    }
    if (!opt) return;
    *opt = AdamWState<T>{};
    for (const auto& [name, e] : ckpt.entries) {
        if (name.rfind("opt/m/", 0) == 0) opt->m[name.substr(6)] = e.template values<T>();
        if (name.rfind("opt/v/", 0) == 0) opt->v[name.substr(6)] = e.template values<T>();
    }
    if (ckpt.contains("opt/step")) opt->step = static_cast<std::size_t>(ckpt.at("opt/step").template values<double>().at(0));
}

}  // namespace fastinst
