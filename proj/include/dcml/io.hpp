#pragma once

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "dcml/tensor.hpp"

namespace dcml {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(reinterpret_cast<const char*>(p), std::streamsize(n));
}

inline void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
    is.read(reinterpret_cast<char*>(p), std::streamsize(n));
    if (!is) throw IoError(std::string("truncated read of ") + what);
}

template <typename F>
void atomic_write(const std::filesystem::path& path, F&& fill) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
        fill(os);
        if (!os) throw IoError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace detail

// "TNS1" tensor file: magic, u8 rank, rank x u32 dims, f32 payload.
template <typename T>
void write_tns1(const std::filesystem::path& path, const Tensor<T>& t) {
    detail::atomic_write(path, [&](std::ostream& os) {
        os.write("TNS1", 4);
        uint8_t rank = uint8_t(t.rank());
        detail::write_bytes(os, &rank, 1);
        for (int d : t.shape()) {
            uint32_t u = uint32_t(d);
            detail::write_bytes(os, &u, 4);
        }
        for (T v : t.values()) {
            float f = float(v);
            detail::write_bytes(os, &f, 4);
        }
    });
}

template <typename T = float>
Tensor<T> read_tns1(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    char magic[4];
    detail::read_bytes(is, magic, 4, "TNS1 magic");
    if (std::string(magic, 4) != "TNS1") throw IoError(path.string() + ": bad TNS1 magic");
    uint8_t rank = 0;
    detail::read_bytes(is, &rank, 1, "TNS1 rank");
    Shape shape(rank);
    for (auto& d : shape) {
        uint32_t u = 0;
        detail::read_bytes(is, &u, 4, "TNS1 dims");
        d = int(u);
    }
    std::vector<T> values(size_t(shape_numel(shape)));
    for (auto& v : values) {
        float f = 0;
        detail::read_bytes(is, &f, 4, "TNS1 payload");
        v = T(f);
    }
    return Tensor<T>::from_data(std::move(shape), std::move(values));
}

// "DCK1" checkpoint: magic, u32 entry count, then per parameter
// u16 name length, name bytes, u8 rank, u32 dims, f32 payload.
template <typename T>
void write_dck1(const std::filesystem::path& path,
                const std::vector<std::pair<std::string, Tensor<T>>>& entries) {
    detail::atomic_write(path, [&](std::ostream& os) {
        os.write("DCK1", 4);
        uint32_t count = uint32_t(entries.size());
        detail::write_bytes(os, &count, 4);
        for (const auto& [name, t] : entries) {
            uint16_t len = uint16_t(name.size());
            detail::write_bytes(os, &len, 2);
            os.write(name.data(), std::streamsize(name.size()));
            uint8_t rank = uint8_t(t.rank());
            detail::write_bytes(os, &rank, 1);
            for (int d : t.shape()) {
                uint32_t u = uint32_t(d);
                detail::write_bytes(os, &u, 4);
            }
            for (T v : t.values()) {
                float f = float(v);
                detail::write_bytes(os, &f, 4);
            }
        }
    });
}

template <typename T = float>
std::vector<std::pair<std::string, Tensor<T>>> read_dck1(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    char magic[4];
    detail::read_bytes(is, magic, 4, "DCK1 magic");
    if (std::string(magic, 4) != "DCK1") throw IoError(path.string() + ": bad DCK1 magic");
    uint32_t count = 0;
    detail::read_bytes(is, &count, 4, "DCK1 count");
    std::vector<std::pair<std::string, Tensor<T>>> entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t len = 0;
        detail::read_bytes(is, &len, 2, "DCK1 name length");
        std::string name(len, '\0');
        detail::read_bytes(is, name.data(), len, "DCK1 name");
        uint8_t rank = 0;
        detail::read_bytes(is, &rank, 1, "DCK1 rank");
        Shape shape(rank);
        for (auto& d : shape) {
            uint32_t u = 0;
            detail::read_bytes(is, &u, 4, "DCK1 dims");
            d = int(u);
        }
        std::vector<T> values(size_t(shape_numel(shape)));
        for (auto& v : values) {
            float f = 0;
            detail::read_bytes(is, &f, 4, "DCK1 payload");
            v = T(f);
        }
        entries.emplace_back(std::move(name), Tensor<T>::from_data(std::move(shape), std::move(values)));
    }
    return entries;
}

}  // namespace dcml
