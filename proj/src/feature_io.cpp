#include "genview/feature_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "genview/error.hpp"

namespace genview::io {

namespace {

static_assert(std::endian::native == std::endian::little,
              "feature container assumes a little-endian host");

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(const std::vector<std::uint8_t>& in, std::size_t& offset) {
  if (offset + sizeof(T) > in.size()) {
    throw ParseError("feature container: truncated", {});
  }
  T value;
  std::memcpy(&value, in.data() + offset, sizeof(T));
  offset += sizeof(T);
  return value;
}

}  // namespace

std::vector<std::uint8_t> encode_feature_map(const math::DenseFeatureMap& map) {
  std::vector<std::uint8_t> out;
  out.reserve(kFeatureHeaderBytes + map.data().size() * 4);
  out.insert(out.end(), std::begin(kFeatureMagic), std::end(kFeatureMagic));
  put<std::uint16_t>(out, kFeatureVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(map.h()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(map.w()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(map.k()));
  for (double v : map.data()) put<float>(out, static_cast<float>(v));
  return out;
}

math::DenseFeatureMap decode_feature_map(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kFeatureHeaderBytes ||
      std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) {
    throw ParseError("feature container: bad magic", {});
  }
  std::size_t offset = 4;
  const auto version = get<std::uint16_t>(bytes, offset);
  if (version != kFeatureVersion) {
    throw ParseError("feature container: unsupported version " +
                         std::to_string(version),
                     {});
  }
  const std::size_t h = get<std::uint32_t>(bytes, offset);
  const std::size_t w = get<std::uint32_t>(bytes, offset);
  const std::size_t k = get<std::uint32_t>(bytes, offset);
  const std::size_t count = h * w * k;
  if (bytes.size() != kFeatureHeaderBytes + count * 4) {
    throw ParseError("feature container: payload size mismatch", {});
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) data[i] = get<float>(bytes, offset);
  return math::DenseFeatureMap(h, w, k, std::move(data));
}

std::vector<std::uint8_t> encode_vector(const math::Vector& v) {
  return encode_feature_map(math::DenseFeatureMap(1, 1, v.dim(), v.values()));
}

math::Vector decode_vector(const std::vector<std::uint8_t>& bytes) {
  auto map = decode_feature_map(bytes);
  return math::Vector(std::move(map.data()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path,
                const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_feature_map(const std::filesystem::path& path,
                       const math::DenseFeatureMap& map) {
  write_file(path, encode_feature_map(map));
}

math::DenseFeatureMap read_feature_map(const std::filesystem::path& path) {
  return decode_feature_map(read_file(path));
}

nlohmann::json feature_map_to_json(const math::DenseFeatureMap& map) {
  return {{"h", map.h()}, {"w", map.w()}, {"k", map.k()}, {"data", map.data()}};
}

math::DenseFeatureMap feature_map_from_json(const nlohmann::json& j) {
  try {
    return math::DenseFeatureMap(j.at("h").get<std::size_t>(),
                                 j.at("w").get<std::size_t>(),
                                 j.at("k").get<std::size_t>(),
                                 j.at("data").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("feature map json: ") + e.what(), j.dump());
  }
}

std::vector<std::uint8_t> pack_f32(const math::Vector& v) {
  std::vector<std::uint8_t> out;
  out.reserve(v.dim() * 4);
  for (double x : v) put<float>(out, static_cast<float>(x));
  return out;
}

math::Vector unpack_f32(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() % 4 != 0) {
    throw ParseError("f32 array: byte count not a multiple of 4", {});
  }
  std::vector<double> out(bytes.size() / 4);
  std::size_t offset = 0;
  for (double& x : out) x = get<float>(bytes, offset);
  return math::Vector(std::move(out));
}

}  // namespace genview::io
