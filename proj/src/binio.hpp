#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "condhar/errors.hpp"

namespace condhar::binio {

// Little-endian fixed-width fields, independent of host byte order.

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError("truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void write_f64(std::ostream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    write_u64(os, v);
}

inline double read_f64(std::istream& is) {
    const std::uint64_t v = read_u64(is);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

// Bytes left between the read position and the end of the stream.
inline std::uint64_t remaining(std::istream& is) {
    const auto here = is.tellg();
    is.seekg(0, std::ios::end);
    const auto end = is.tellg();
    is.seekg(here);
    if (here < 0 || end < here) return 0;
    return static_cast<std::uint64_t>(end - here);
}

// Throws before allocating when the stream cannot hold `bytes` more bytes.
inline void require(std::istream& is, std::uint64_t bytes) {
    if (bytes > remaining(is)) throw DataError("truncated file");
}

inline std::string read_string(std::istream& is, std::uint64_t len) {
    require(is, len);
    std::string s(len, '\0');
    if (!is.read(s.data(), static_cast<std::streamsize>(len))) throw DataError("truncated file");
    return s;
}

}  // namespace condhar::binio
