#ifndef FLIPSHIELD_HASH_HPP
#define FLIPSHIELD_HASH_HPP

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

namespace flipshield {

/// FNV-1a 64-bit over a byte span. Used for content-addressing caches and
/// the determinism checks on persisted outputs.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                             std::uint64_t h = 0xCBF29CE484222325ULL) {
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = 0xCBF29CE484222325ULL) {
    return fnv1a64(
        std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()),
        h);
}

/// Fixed-width lowercase hex, "0x" prefixed. Used wherever a float or hash
/// must round-trip exactly through text.
inline std::string hex_u64(std::uint64_t v) {
    static const char digits[] = "0123456789abcdef";
    std::string s = "0x0000000000000000";
    for (int i = 0; i < 16; ++i) s[17 - i] = digits[(v >> (4 * i)) & 0xF];
    return s;
}

inline std::string hex_u32(std::uint32_t v) {
    static const char digits[] = "0123456789abcdef";
    std::string s = "0x00000000";
    for (int i = 0; i < 8; ++i) s[9 - i] = digits[(v >> (4 * i)) & 0xF];
    return s;
}

/// Parses the output of hex_u64/hex_u32 (also accepts un-prefixed hex).
std::uint64_t parse_hex_u64(const std::string& s);
std::uint32_t parse_hex_u32(const std::string& s);

} // namespace flipshield

#endif // FLIPSHIELD_HASH_HPP
