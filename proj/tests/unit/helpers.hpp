#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "genview/math.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("genview-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline genview::math::Vector random_vector(std::size_t dim, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  genview::math::Vector v(dim);
  for (auto& x : v) x = n(rng);
  return v;
}

inline genview::math::DenseFeatureMap random_map(std::size_t h, std::size_t w, std::size_t k,
                                                 std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  genview::math::DenseFeatureMap m(h, w, k);
  for (auto& x : m.data()) x = n(rng);
  return m;
}

// Tokens inside a centred square get `fg` added; the rest get `bg`.
inline genview::math::DenseFeatureMap two_region_map(std::size_t grid, const genview::math::Vector& fg,
                                                     const genview::math::Vector& bg, double noise,
                                                     std::mt19937_64& rng) {
  const std::size_t k = fg.dim();
  std::normal_distribution<double> n(0.0, noise);
  genview::math::DenseFeatureMap m(grid, grid, k);
  const std::size_t lo = grid / 4;
  const std::size_t hi = grid - grid / 4;
  for (std::size_t r = 0; r < grid; ++r) {
    for (std::size_t c = 0; c < grid; ++c) {
      const bool inside = r >= lo && r < hi && c >= lo && c < hi;
      auto t = m.token(r * grid + c);
      for (std::size_t i = 0; i < k; ++i) t[i] = (inside ? fg[i] : bg[i]) + n(rng);
    }
  }
  return m;
}

}  // namespace testing
