#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "csifb/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are not supported");

namespace csifb::io {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ComputeError("unexpected end of file");
    return v;
}

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw ComputeError("unexpected end of file");
}

inline void write_magic(std::ostream& os, const char* magic) {
    os.write(magic, static_cast<std::streamsize>(std::strlen(magic)));
}

inline void expect_magic(std::istream& is, const char* magic) {
    const std::size_t n = std::strlen(magic);
    std::string buf(n, '\0');
    is.read(buf.data(), static_cast<std::streamsize>(n));
    if (!is || buf != magic) throw ComputeError(std::string("bad file magic, expected ") + magic);
}

// FNV-1a over a byte range; used to fingerprint checkpoints and datasets.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::uint64_t file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ComputeError("cannot open file for hashing: " + path);
    std::uint64_t h = 0xCBF29CE484222325ULL;
    char buf[65536];
    while (f) {
        f.read(buf, sizeof(buf));
        h = fnv1a(buf, static_cast<std::size_t>(f.gcount()), h);
    }
    return h;
}

// Writes through a temp file and renames, so readers never observe a
// partially written file.
inline void atomic_write(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw ComputeError("cannot open for writing: " + tmp);
        f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!f) throw ComputeError("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw ComputeError("rename failed: " + tmp + " -> " + path);
}

}  // namespace csifb::io
