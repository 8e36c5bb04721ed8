#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "genview/error.hpp"
#include "genview/feature_io.hpp"
#include "genview/policy.hpp"
#include "helpers.hpp"

using namespace genview;
using namespace genview::policy;

namespace {

class CannedTransport final : public ScorerTransport {
 public:
  explicit CannedTransport(std::string reply) : reply_(std::move(reply)) {}
  std::string send(const ScorerRequest& request) override {
    last = request;
    return reply_;
  }
  ScorerRequest last;

 private:
  std::string reply_;
};

}  // namespace

TEST_SUITE("policy") {
  TEST_CASE("noise level bins and boundaries") {
    const std::vector<std::pair<double, int>> table{
        {0.0, 0}, {0.19, 0}, {0.2, 100}, {0.39, 100}, {0.4, 200}, {0.5, 200},
        {0.6, 300}, {0.79, 300}, {0.8, 400}, {0.99, 400}, {1.0, 400}};
    for (const auto& [p, l] : table) {
      CAPTURE(p);
      CHECK(noise_level(p) == l);
    }
    CHECK_THROWS_AS(noise_level(-0.01), InvalidArgument);
    CHECK_THROWS_AS(noise_level(1.01), InvalidArgument);
  }

  TEST_CASE("noise level is monotone") {
    int prev = 0;
    for (int i = 0; i <= 1000; ++i) {
      const int l = noise_level(i / 1000.0);
      CHECK(l >= prev);
      prev = l;
    }
  }

  TEST_CASE("guidance scale table") {
    for (int s = 1; s <= 4; ++s) CHECK(guidance_scale(ComplexityScore(s, ScoreSource::kManual)) == 10 - 2 * s);
    CHECK_THROWS_AS(ComplexityScore(0, ScoreSource::kManual), InvalidArgument);
    CHECK_THROWS_AS(ComplexityScore(5, ScoreSource::kManual), InvalidArgument);
  }

  TEST_CASE("schedule") {
    const NoiseSchedule s;
    CHECK(s.t_max() == 1000);
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(s.alpha_bar(1) == doctest::Approx(1.0 - 1e-4));
    // Oracle: direct product of (1 - beta_t) with linear betas.
    double prod = 1.0;
    for (int t = 1; t <= 400; ++t) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0);
    CHECK(s.alpha_bar(400) == doctest::Approx(prod).epsilon(1e-12));
    for (int t = 1; t <= 1000; ++t) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    CHECK_THROWS_AS(s.alpha_bar(1001), InvalidArgument);
    CHECK_THROWS_AS(NoiseSchedule(10, 0.5, 0.1), InvalidArgument);
  }

  TEST_CASE("perturbation at level 0 is the identity") {
    const NoiseSchedule s;
    std::mt19937_64 rng(0);
    const math::Vector c{0.1, -2.0, 3.5};
    CHECK(perturb_embedding(c, 0, s, rng) == c);
  }

  TEST_CASE("perturbation is seeded") {
    const NoiseSchedule s;
    std::mt19937_64 a(9), b(9);
    const math::Vector c(16, 1.0);
    CHECK(perturb_embedding(c, 200, s, a) == perturb_embedding(c, 200, s, b));
  }

  TEST_CASE("params validation and json") {
    GenerationParams p{Mode::kITC, 200, 4, 7};
    validate(p);
    CHECK(params_from_json(to_json(p)) == p);
    GenerationParams ic{Mode::kIC, 100, std::nullopt, 0};
    validate(ic);
    GenerationParams bad{Mode::kIC, 100, 4, 0};
    CHECK_THROWS_AS(validate(bad), InvalidArgument);
    GenerationParams bad_level{Mode::kIC, 150, std::nullopt, 0};
    CHECK_THROWS_AS(validate(bad_level), InvalidArgument);
    GenerationParams bad_g{Mode::kTC, std::nullopt, 5, 0};
    CHECK_THROWS_AS(validate(bad_g), InvalidArgument);
    CHECK(mode_from_string("ITC") == Mode::kITC);
    CHECK_THROWS_AS(mode_from_string("xyz"), InvalidArgument);
  }

  TEST_CASE("score reply parsing") {
    CHECK(parse_score_reply("[score: 3]") == 3);
    CHECK(parse_score_reply("The prompt is rich. [SCORE:4]") == 4);
    CHECK(parse_score_reply("  [ Score :  1 ]  ") == 1);
    CHECK(parse_score_reply("[score:\t2]\n") == 2);
    CHECK_THROWS_AS(parse_score_reply("score 3"), ParseError);
    CHECK_THROWS_AS(parse_score_reply("[score: 5]"), ParseError);
    CHECK_THROWS_AS(parse_score_reply("[score: 0]"), ParseError);
    try {
      parse_score_reply("nothing here");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.raw() == "nothing here");
    }
  }

  TEST_CASE("llm scorer builds the prompt and parses the reply") {
    CannedTransport t("Analysis... [score: 2]");
    LlmComplexityScorer scorer(t);
    const auto s = score_caption_complexity("a red apple", scorer);
    CHECK(s.value() == 2);
    CHECK(s.source() == ScoreSource::kLlm);
    REQUIRE(t.last.messages.size() == 2);
    CHECK(t.last.messages[0].role == "system");
    CHECK(t.last.messages[1].content.find("a red apple") != std::string::npos);
    CHECK(t.last.caption == "a red apple");
    CannedTransport junk("I think it's fairly complex");
    LlmComplexityScorer bad(junk);
    CHECK_THROWS_AS(bad.score("x"), ParseError);
  }

  TEST_CASE("tokenizer and bins") {
    CHECK(tokenize("Bird's-eye VIEW, 3d!") == std::vector<std::string>{"bird's", "eye", "view", "3d"});
    CHECK(bin_constraint_count(0) == 1);
    CHECK(bin_constraint_count(1) == 2);
    CHECK(bin_constraint_count(3) == 2);
    CHECK(bin_constraint_count(4) == 3);
    CHECK(bin_constraint_count(6) == 3);
    CHECK(bin_constraint_count(7) == 4);
  }

  TEST_CASE("heuristic scorer matches the golden fixtures") {
    HeuristicComplexityScorer scorer(load_lexicon(default_lexicon_path()));
    std::ifstream in(std::string(GENVIEW_FIXTURE_DIR) + "/lexicon_golden.json");
    const auto golden = nlohmann::json::parse(in);
    CHECK(scorer.lexicon().version == golden.at("lexicon_version").get<std::string>());
    for (const auto& c : golden.at("cases")) {
      const auto caption = c.at("caption").get<std::string>();
      CAPTURE(caption);
      CHECK(scorer.match(caption).terms == c.at("terms").get<std::vector<std::string>>());
      const auto s = scorer.score(caption);
      CHECK(s.value() == c.at("score").get<int>());
      CHECK(s.source() == ScoreSource::kHeuristic);
    }
    CHECK_THROWS_AS(scorer.score(""), InvalidArgument);
  }

  TEST_CASE("lexicon json errors") {
    CHECK_THROWS_AS(lexicon_from_json(nlohmann::json{{"version", 1}}), ParseError);
    CHECK_THROWS_AS(load_lexicon("/nonexistent/lexicon.json"), IoError);
  }
}
