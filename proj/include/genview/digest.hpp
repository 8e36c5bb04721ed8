#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace genview::digest {

// Lower-case hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

std::string base64_encode(std::span<const std::uint8_t> bytes);
// Throws ParseError on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

// 64-bit seed derived from a string key and a base seed (first 8 bytes of
// SHA-256 over both).
std::uint64_t derive_seed(std::uint64_t base, std::string_view key);

}  // namespace genview::digest
