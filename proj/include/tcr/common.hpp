#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tcr {

// Thrown on malformed files, bad manifests, invalid ids and similar.
// Maps to CLI exit code 2.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown on non-finite activations/losses. Maps to CLI exit code 3.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// splitmix64, used to derive independent sub-seeds from (seed, tag...) tuples.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed) { return splitmix64(seed); }

template <class... Rest>
uint64_t mix_seed(uint64_t seed, uint64_t first, Rest... rest) {
    return mix_seed(splitmix64(seed ^ (first + 0x9e3779b97f4a7c15ULL)), rest...);
}

// ---------------------------------------------------------------------------
// UTF-8 helpers. Inputs are expected to be valid UTF-8; invalid bytes are
// treated as single-byte codepoints so every function stays total.
// ---------------------------------------------------------------------------

struct Codepoint {
    uint32_t value = 0;
    size_t bytes = 1;
};

inline Codepoint utf8_next(std::string_view s, size_t pos) {
    const auto b0 = static_cast<unsigned char>(s[pos]);
    if (b0 < 0x80) return {b0, 1};
    auto cont = [&](size_t k) -> bool {
        return pos + k < s.size() &&
               (static_cast<unsigned char>(s[pos + k]) & 0xC0) == 0x80;
    };
    if ((b0 & 0xE0) == 0xC0 && cont(1)) {
        uint32_t cp = (b0 & 0x1Fu) << 6 |
                      (static_cast<unsigned char>(s[pos + 1]) & 0x3Fu);
        return {cp, 2};
    }
    if ((b0 & 0xF0) == 0xE0 && cont(1) && cont(2)) {
        uint32_t cp = (b0 & 0x0Fu) << 12 |
                      (static_cast<unsigned char>(s[pos + 1]) & 0x3Fu) << 6 |
                      (static_cast<unsigned char>(s[pos + 2]) & 0x3Fu);
        return {cp, 3};
    }
    if ((b0 & 0xF8) == 0xF0 && cont(1) && cont(2) && cont(3)) {
        uint32_t cp = (b0 & 0x07u) << 18 |
                      (static_cast<unsigned char>(s[pos + 1]) & 0x3Fu) << 12 |
                      (static_cast<unsigned char>(s[pos + 2]) & 0x3Fu) << 6 |
                      (static_cast<unsigned char>(s[pos + 3]) & 0x3Fu);
        return {cp, 4};
    }
    return {b0, 1};
}

// Byte offsets of each codepoint start, plus the terminating size().
inline std::vector<size_t> utf8_offsets(std::string_view s) {
    std::vector<size_t> off;
    size_t pos = 0;
    while (pos < s.size()) {
        off.push_back(pos);
        pos += utf8_next(s, pos).bytes;
    }
    off.push_back(s.size());
    return off;
}

inline bool is_space_cp(uint32_t cp) {
    return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' ||
           cp == 0x3000;  // ideographic space
}

inline bool is_cjk_cp(uint32_t cp) {
    return (cp >= 0x3400 && cp <= 0x4DBF) || (cp >= 0x4E00 && cp <= 0x9FFF) ||
           (cp >= 0xF900 && cp <= 0xFAFF);
}

inline bool is_ascii_punct_cp(uint32_t cp) {
    return (cp >= 0x21 && cp <= 0x2F) || (cp >= 0x3A && cp <= 0x40) ||
           (cp >= 0x5B && cp <= 0x60) || (cp >= 0x7B && cp <= 0x7E);
}

inline bool is_wide_punct_cp(uint32_t cp) {
    switch (cp) {
        case 0x3001:  // 、
        case 0x3002:  // 。
        case 0xFF01:  // ！
        case 0xFF0C:  // ，
        case 0xFF1A:  // ：
        case 0xFF1B:  // ；
        case 0xFF1F:  // ？
            return true;
        default:
            return false;
    }
}

inline bool is_punct_cp(uint32_t cp) {
    return is_ascii_punct_cp(cp) || is_wide_punct_cp(cp);
}

// Sentence-terminal characters: {。！？!?.;\n}
inline bool is_sentence_terminal_cp(uint32_t cp) {
    return cp == '.' || cp == ';' || cp == '!' || cp == '?' || cp == '\n' ||
           cp == 0x3002 || cp == 0xFF01 || cp == 0xFF1F;
}

template <class T>
bool all_finite(const std::vector<T>& v) {
    for (const T& x : v)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

}  // namespace tcr
