#ifndef GEOWALK_NUM_IO_HPP
#define GEOWALK_NUM_IO_HPP

#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>
#include <system_error>

#include "geowalk/error.hpp"

// Text formatting helpers for the on-disk formats.  Numbers are printed as
// shortest round-trip decimals and parsed with from_chars, so a write/read
// cycle reproduces the exact bit pattern and repeated runs produce identical
// bytes on any platform with IEEE doubles.

namespace geowalk {

inline std::string format_double(double v) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string format_int(long long v) {
    char buf[24];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw ParseError(where + ": cannot parse '" + std::string(s) + "' as a real number");
    return v;
}

inline long long parse_int(std::string_view s, const std::string& where) {
    long long v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw ParseError(where + ": cannot parse '" + std::string(s) + "' as an integer");
    return v;
}

// FNV-1a, used to fingerprint configurations and parameter blobs.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace geowalk

#endif
