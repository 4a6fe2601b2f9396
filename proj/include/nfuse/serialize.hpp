#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "nfuse/tensor.hpp"

namespace nfuse {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Single-tensor dump: magic "TFTN", version u8=1, rank u8, extents as u64
// little-endian, then data as little-endian 32-bit floats.
namespace tftn {

inline constexpr char kMagic[4] = {'T', 'F', 'T', 'N'};

inline std::size_t blob_size(const Shape& shape) {
    return 4 + 1 + 1 + 8 * shape.size() + 4 * shape_numel(shape);
}

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void put_f32(std::ostream& os, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline float get_f32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t u = 0;
    for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

}  // namespace detail

template <typename T>
void write(std::ostream& os, const Tensor<T>& t) {
    os.write(kMagic, 4);
    os.put(static_cast<char>(1));  // version
    os.put(static_cast<char>(t.rank()));
    for (std::size_t e : t.shape) detail::put_u64(os, e);
    for (T x : *t.data) detail::put_f32(os, static_cast<float>(x));
    if (!os) throw IoError("tftn: write failed");
}

template <typename T>
Tensor<T> read(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("tftn: bad magic");
    int version = is.get();
    if (version != 1) throw IoError("tftn: unsupported version " + std::to_string(version));
    int rank = is.get();
    if (rank < 0) throw IoError("tftn: truncated header");
    Shape shape(static_cast<std::size_t>(rank));
    for (auto& e : shape) e = static_cast<std::size_t>(detail::get_u64(is));
    std::size_t n = shape_numel(shape);
    std::vector<T> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = static_cast<T>(detail::get_f32(is));
    if (!is) throw IoError("tftn: truncated data");
    return Tensor<T>(std::move(shape), std::move(vals));
}

}  // namespace tftn

// Container of named tensors: magic "TFMN", version u8=1, u32 entry count,
// then per entry u16 name length + name bytes + u64 absolute offset of a
// TFTN blob, followed by the blobs in order.
struct NamedTensors {
    std::vector<std::pair<std::string, Tensor<float>>> items;

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace manifest {

inline constexpr char kMagic[4] = {'T', 'F', 'M', 'N'};

inline void write(std::ostream& os, const NamedTensors& nt) {
    os.write(kMagic, 4);
    os.put(static_cast<char>(1));
    std::uint32_t count = static_cast<std::uint32_t>(nt.items.size());
    unsigned char cb[4];
    for (int i = 0; i < 4; ++i) cb[i] = static_cast<unsigned char>((count >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(cb), 4);
    std::size_t header = 4 + 1 + 4;
    for (const auto& [name, t] : nt.items) header += 2 + name.size() + 8;
    std::size_t off = header;
    for (const auto& [name, t] : nt.items) {
        std::uint16_t len = static_cast<std::uint16_t>(name.size());
        unsigned char lb[2] = {static_cast<unsigned char>(len & 0xff),
                               static_cast<unsigned char>(len >> 8)};
        os.write(reinterpret_cast<const char*>(lb), 2);
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        tftn::detail::put_u64(os, off);
        off += tftn::blob_size(t.shape);
    }
    for (const auto& [name, t] : nt.items) tftn::write(os, t);
    if (!os) throw IoError("manifest: write failed");
}

inline NamedTensors read(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("manifest: bad magic");
    int version = is.get();
    if (version != 1) throw IoError("manifest: unsupported version");
    unsigned char cb[4];
    is.read(reinterpret_cast<char*>(cb), 4);
    std::uint32_t count = 0;
    for (int i = 0; i < 4; ++i) count |= static_cast<std::uint32_t>(cb[i]) << (8 * i);
    std::vector<std::pair<std::string, std::uint64_t>> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        unsigned char lb[2];
        is.read(reinterpret_cast<char*>(lb), 2);
        std::size_t len = static_cast<std::size_t>(lb[0]) | (static_cast<std::size_t>(lb[1]) << 8);
        std::string name(len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(len));
        entries.emplace_back(std::move(name), tftn::detail::get_u64(is));
    }
    NamedTensors nt;
    for (auto& [name, off] : entries) {
        is.seekg(static_cast<std::streamoff>(off));
        nt.items.emplace_back(std::move(name), tftn::read<float>(is));
    }
    if (!is) throw IoError("manifest: truncated file");
    return nt;
}

inline void save_file(const std::string& path, const NamedTensors& nt) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    write(f, nt);
}

inline NamedTensors load_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    return read(f);
}

}  // namespace manifest

}  // namespace nfuse
