#include <random>

#include "doctest.h"
#include "genview/error.hpp"
#include "genview/saliency.hpp"
#include "helpers.hpp"

using namespace genview;
using namespace genview::saliency;

namespace {

// Foreground tokens share a strong offset along e0; background is noise.
std::vector<math::DenseFeatureMap> corpus(std::mt19937_64& rng, std::size_t n = 12) {
  std::vector<math::DenseFeatureMap> maps;
  for (std::size_t i = 0; i < n; ++i) {
    math::Vector fg(8, 0.0), bg(8, 0.0);
    fg[0] = 4.0;
    bg[1] = testing::random_vector(1, rng)[0];
    maps.push_back(testing::two_region_map(8, fg, bg, 0.3, rng));
  }
  return maps;
}

}  // namespace

TEST_SUITE("saliency") {
  TEST_CASE("fitted direction finds the foreground axis") {
    std::mt19937_64 rng(1);
    const auto maps = corpus(rng);
    const auto dir = fit_foreground_direction(maps);
    CHECK(dir.k() == 8);
    CHECK(std::abs(dir.direction[0]) > 0.98);
    CHECK(dir.source_sample_count == 12 * 64);
  }

  TEST_CASE("subsampling is seeded and bounded") {
    std::mt19937_64 rng(2);
    const auto maps = corpus(rng);
    FitOptions opts;
    opts.max_tokens = 100;
    opts.seed = 5;
    const auto a = fit_foreground_direction(maps, opts);
    const auto b = fit_foreground_direction(maps, opts);
    CHECK(a.source_sample_count == 100);
    CHECK(a.direction == b.direction);
    opts.max_tokens = 1;
    CHECK_THROWS_AS(fit_foreground_direction(maps, opts), InvalidArgument);
  }

  TEST_CASE("fit rejects bad corpora") {
    CHECK_THROWS_AS(fit_foreground_direction(std::vector<math::DenseFeatureMap>{}), InvalidArgument);
    std::vector<math::DenseFeatureMap> mixed{math::DenseFeatureMap(2, 2, 3), math::DenseFeatureMap(2, 2, 4)};
    CHECK_THROWS_AS(fit_foreground_direction(mixed), ShapeMismatch);
  }

  TEST_CASE("foreground proportion uses a strict threshold") {
    const math::ScalarMap m(1, 4, {0.0, 0.5, 0.5000001, 1.0});
    CHECK(foreground_proportion(m, 0.5) == doctest::Approx(0.5));
    CHECK_THROWS_AS(foreground_proportion(m, 0.0), InvalidArgument);
    CHECK_THROWS_AS(foreground_proportion(m, 1.0), InvalidArgument);
  }

  TEST_CASE("calibrated threshold hits the target fraction") {
    std::mt19937_64 rng(3);
    std::vector<math::ScalarMap> maps;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 20; ++i) {
      std::vector<double> v(100);
      for (auto& x : v) x = u(rng);
      maps.push_back(math::min_max_normalize(math::ScalarMap(10, 10, v)));
    }
    const double alpha = calibrate_threshold(maps, 0.4);
    double above = 0;
    for (const auto& m : maps) above += foreground_proportion(m, alpha);
    CHECK(above / 20 == doctest::Approx(0.4).epsilon(0.01));
    // Linear-interpolated quantile on a tiny pool: (1-0.4)*(5-1) = 2.4.
    const std::vector<math::ScalarMap> tiny{math::ScalarMap(1, 5, {0.0, 0.1, 0.2, 0.6, 1.0})};
    CHECK(calibrate_threshold(tiny, 0.4) == doctest::Approx(0.2 + 0.4 * 0.4));
    CHECK_THROWS_AS(calibrate_threshold(std::vector<math::ScalarMap>{math::ScalarMap(2, 2, 0.5)}, 0.4),
                    DegenerateInput);
  }

  TEST_CASE("attention maps are complementary and decoupling pools with them") {
    std::mt19937_64 rng(4);
    const auto maps = corpus(rng);
    const auto dir = fit_foreground_direction(maps);
    const auto att = attention_maps(maps[0], dir);
    for (std::size_t i = 0; i < att.foreground.size(); ++i) {
      CHECK(att.foreground[i] + att.background[i] == doctest::Approx(1.0));
      CHECK(att.foreground[i] >= 0.0);
      CHECK(att.foreground[i] <= 1.0);
    }
    const auto d = decouple_features(maps[0], dir);
    const auto total = math::add(d.foreground, d.background);
    const auto sum = math::weighted_pool(math::ScalarMap(8, 8, 1.0), maps[0]);
    for (std::size_t i = 0; i < 8; ++i) CHECK(total[i] == doctest::Approx(sum[i]));
    // The centre square carries the offset, so the foreground pool leans on e0.
    CHECK(d.foreground[0] > d.background[0]);
  }

  TEST_CASE("analyze needs alpha and reports the centre square") {
    std::mt19937_64 rng(5);
    const auto maps = corpus(rng);
    auto dir = fit_foreground_direction(maps);
    CHECK_THROWS_AS(analyze(maps[0], dir), InvalidArgument);
    dir.alpha = 0.5;
    const auto r = analyze(maps[0], dir);
    CHECK(r.foreground_proportion == doctest::Approx(16.0 / 64.0));
  }

  TEST_CASE("dimension mismatch") {
    std::mt19937_64 rng(6);
    const auto maps = corpus(rng);
    const auto dir = fit_foreground_direction(maps);
    CHECK_THROWS_AS(activation_map(math::DenseFeatureMap(2, 2, 3), dir), ShapeMismatch);
  }

  TEST_CASE("direction json round trip") {
    std::mt19937_64 rng(7);
    auto dir = fit_foreground_direction(corpus(rng));
    dir.alpha = 0.42;
    testing::TempDir tmp("sal");
    save_direction(tmp / "d.json", dir);
    const auto back = load_direction(tmp / "d.json");
    CHECK(back.direction == dir.direction);
    CHECK(back.center == dir.center);
    CHECK(back.alpha == dir.alpha);
    auto j = to_json(dir);
    j["direction"][0] = 5.0;
    CHECK_THROWS_AS(direction_from_json(j), ParseError);
    j = to_json(dir);
    j["version"] = 99;
    CHECK_THROWS_AS(direction_from_json(j), ParseError);
  }

  TEST_CASE("per-map direction") {
    std::mt19937_64 rng(8);
    const auto maps = corpus(rng);
    const auto d = fit_map_direction(maps[0]);
    CHECK(std::abs(d.direction[0]) > 0.95);
  }
}
