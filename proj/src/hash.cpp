#include "flipshield/hash.hpp"

#include <charconv>

#include "flipshield/errors.hpp"

namespace flipshield {

namespace {

std::uint64_t parse_hex(const std::string& s, std::uint64_t max, const char* what) {
    std::size_t start = 0;
    if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) start = 2;
    if (start == s.size()) throw ParseError(std::string("empty ") + what + ": '" + s + "'");
    std::uint64_t v = 0;
    const char* first = s.data() + start;
    const char* last = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(first, last, v, 16);
    if (ec != std::errc{} || ptr != last || v > max) {
        throw ParseError(std::string("invalid ") + what + ": '" + s + "'");
    }
    return v;
}

} // namespace

std::uint64_t parse_hex_u64(const std::string& s) {
    return parse_hex(s, ~0ULL, "hex u64");
}

std::uint32_t parse_hex_u32(const std::string& s) {
    return static_cast<std::uint32_t>(parse_hex(s, 0xFFFFFFFFULL, "hex u32"));
}

} // namespace flipshield
