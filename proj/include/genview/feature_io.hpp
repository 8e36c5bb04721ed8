#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "genview/math.hpp"

namespace genview::io {

// Binary container, little-endian:
//   "GVFM" | version u16 | h u32 | w u32 | k u32 | f32[h*w*k] row-major
// Values are narrowed to 32-bit floats on write; reading widens them back,
// so a round trip is exact only for values representable in f32.
inline constexpr char kFeatureMagic[4] = {'G', 'V', 'F', 'M'};
inline constexpr std::uint16_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 4 + 2 + 4 + 4 + 4;

std::vector<std::uint8_t> encode_feature_map(const math::DenseFeatureMap& map);
math::DenseFeatureMap decode_feature_map(const std::vector<std::uint8_t>& bytes);

// Vectors travel as 1 x 1 x dim maps.
std::vector<std::uint8_t> encode_vector(const math::Vector& v);
math::Vector decode_vector(const std::vector<std::uint8_t>& bytes);

void write_feature_map(const std::filesystem::path& path,
                       const math::DenseFeatureMap& map);
math::DenseFeatureMap read_feature_map(const std::filesystem::path& path);

// Debug form: {"h":..,"w":..,"k":..,"data":[...]}
nlohmann::json feature_map_to_json(const math::DenseFeatureMap& map);
math::DenseFeatureMap feature_map_from_json(const nlohmann::json& j);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path,
                const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// f32 little-endian packing used by the generator wire format.
std::vector<std::uint8_t> pack_f32(const math::Vector& v);
math::Vector unpack_f32(const std::vector<std::uint8_t>& bytes);

}  // namespace genview::io
