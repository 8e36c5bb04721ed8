#include <cmath>
#include <random>

#include "doctest.h"
#include "genview/error.hpp"
#include "genview/generation.hpp"
#include "genview/saliency.hpp"
#include "helpers.hpp"

using namespace genview;
using namespace genview::gen;

namespace {

struct FixedScorer final : policy::ComplexityScorer {
  int value = 3;
  policy::ComplexityScore score(std::string_view) override {
    return policy::ComplexityScore(value, policy::ScoreSource::kManual);
  }
};

struct Fixture {
  std::mt19937_64 rng{21};
  saliency::ForegroundDirection dir;
  policy::NoiseSchedule schedule;
  FixedScorer scorer;
  SampleInput sample;

  Fixture() {
    math::Vector fg(6, 0.0), bg(6, 0.0);
    fg[0] = 3.0;
    std::vector<math::DenseFeatureMap> maps;
    for (int i = 0; i < 4; ++i) maps.push_back(testing::two_region_map(8, fg, bg, 0.2, rng));
    dir = saliency::fit_foreground_direction(maps);
    dir.alpha = 0.5;
    sample.sample_id = "s1";
    sample.features = maps[0];
    sample.caption = "a red ball";
  }
  PolicyContext ctx(std::uint64_t seed = 0) { return {&dir, &schedule, &scorer, seed}; }
};

}  // namespace

TEST_SUITE("generation") {
  TEST_CASE("plans carry the mode's parameters") {
    Fixture f;
    const auto ic = plan_generation(f.sample, Mode::kIC, f.ctx());
    CHECK(ic.params.noise_level == policy::noise_level(*ic.foreground_proportion));
    CHECK_FALSE(ic.params.guidance_scale.has_value());
    CHECK(ic.conditioning.perturbed_embedding.has_value());
    CHECK_FALSE(ic.conditioning.caption.has_value());
    validate(ic);

    const auto tc = plan_generation(f.sample, Mode::kTC, f.ctx());
    CHECK(tc.params.guidance_scale == 4);
    CHECK_FALSE(tc.params.noise_level.has_value());
    CHECK_FALSE(tc.conditioning.image_embedding.has_value());
    validate(tc);

    const auto itc = plan_generation(f.sample, Mode::kITC, f.ctx());
    CHECK(itc.params.noise_level.has_value());
    CHECK(itc.params.guidance_scale == 4);
    validate(itc);
  }

  TEST_CASE("cache keys are deterministic and sensitive") {
    Fixture f;
    const auto a = plan_generation(f.sample, Mode::kITC, f.ctx(1));
    const auto b = plan_generation(f.sample, Mode::kITC, f.ctx(1));
    CHECK(a.cache_key == b.cache_key);
    CHECK(a.cache_key.size() == 64);
    CHECK(plan_generation(f.sample, Mode::kITC, f.ctx(2)).cache_key != a.cache_key);
    f.scorer.value = 1;
    CHECK(plan_generation(f.sample, Mode::kITC, f.ctx(1)).cache_key != a.cache_key);
    CHECK(compute_cache_key(a.params, a.conditioning) == a.cache_key);
  }

  TEST_CASE("missing inputs") {
    Fixture f;
    SampleInput text_only{"t", std::nullopt, std::string("a cat"), std::nullopt};
    CHECK(has_inputs_for(text_only, Mode::kTC));
    CHECK_FALSE(has_inputs_for(text_only, Mode::kIC));
    CHECK_FALSE(has_inputs_for(text_only, Mode::kITC));
    CHECK_THROWS_AS(plan_generation(text_only, Mode::kIC, f.ctx()), InvalidArgument);
    PolicyContext no_scorer{&f.dir, &f.schedule, nullptr, 0};
    CHECK_THROWS_AS(plan_generation(f.sample, Mode::kTC, no_scorer), InvalidArgument);
  }

  TEST_CASE("request validation rejects mismatched conditioning") {
    Fixture f;
    auto ic = plan_generation(f.sample, Mode::kIC, f.ctx());
    ic.conditioning.caption = "extra";
    CHECK_THROWS_AS(validate(ic), InvalidArgument);
  }

  TEST_CASE("cfg algebra") {
    std::mt19937_64 rng(4);
    const auto u = testing::random_vector(10, rng);
    const auto c = testing::random_vector(10, rng);
    CHECK(cfg_noise_estimate(u, c, 0.0) == u);
    const auto one = cfg_noise_estimate(u, c, 1.0);
    for (std::size_t i = 0; i < 10; ++i) CHECK(one[i] == doctest::Approx(c[i]).epsilon(1e-15));
    // Affine in g: f(g) = f(0) + g (f(1) - f(0)).
    for (double g : {0.5, 2.0, 7.5, -1.0}) {
      const auto v = cfg_noise_estimate(u, c, g);
      for (std::size_t i = 0; i < 10; ++i) CHECK(std::abs(v[i] - (u[i] + g * (one[i] - u[i]))) < 1e-12);
    }
    CHECK_THROWS_AS(cfg_noise_estimate(u, math::Vector(3), 1.0), ShapeMismatch);
  }

  TEST_CASE("toy diffusion with one step matches a manual update") {
    std::mt19937_64 rng(5);
    const auto z0 = testing::random_vector(8, rng);
    ToyConditioning cond{testing::random_vector(4, rng), testing::random_vector(3, rng)};
    GenerationParams p{Mode::kITC, 100, 6, 77};
    const auto out = toy_reverse_diffusion(z0, cond, p, 1, 8);
    const ToyDenoiser d(8, 4, 3, 77);
    const auto eps = cfg_noise_estimate(d.predict_uncond(z0, 1, 1, cond.image),
                                        d.predict_cond(z0, 1, 1, cond.image, *cond.text), 6.0);
    for (std::size_t i = 0; i < 8; ++i) CHECK(out[i] == doctest::Approx(z0[i] - eps[i]).epsilon(1e-14));
  }

  TEST_CASE("toy diffusion at g = 0 ignores the text") {
    std::mt19937_64 rng(6);
    const auto z0 = testing::random_vector(8, rng);
    const auto img = testing::random_vector(4, rng);
    GenerationParams p{Mode::kITC, 100, std::nullopt, 3};
    p.guidance_scale = 0;  // direct call, outside the validated range on purpose
    const auto with_text = toy_reverse_diffusion(z0, {img, testing::random_vector(5, rng)}, p, 10, 8);
    const auto without = toy_reverse_diffusion(z0, {img, std::nullopt}, p, 10, 8);
    CHECK(with_text == without);
  }

  TEST_CASE("toy diffusion is a pure function") {
    std::mt19937_64 rng(7);
    const auto z0 = testing::random_vector(8, rng);
    ToyConditioning cond{std::nullopt, testing::random_vector(5, rng)};
    GenerationParams p{Mode::kTC, std::nullopt, 4, 9};
    CHECK(toy_reverse_diffusion(z0, cond, p, 20, 8) == toy_reverse_diffusion(z0, cond, p, 20, 8));
    CHECK_THROWS_AS(toy_reverse_diffusion(z0, cond, p, 0, 8), InvalidArgument);
  }

  TEST_CASE("toy text embedding") {
    const auto a = toy_text_embedding("a red ball", 16);
    CHECK(math::norm(a.span()) == doctest::Approx(1.0));
    CHECK(a == toy_text_embedding("A red, ball", 16));
    CHECK(a != toy_text_embedding("a blue ball", 16));
  }
}
