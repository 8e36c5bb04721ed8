#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "genview/math.hpp"

namespace genview::policy {

// Linear-beta DDPM schedule with cached cumulative products.
class NoiseSchedule {
 public:
  NoiseSchedule();  // 1000 steps, beta 1e-4 .. 0.02
  NoiseSchedule(int t_max, double beta_start, double beta_end);

  int t_max() const noexcept { return t_max_; }
  double beta_start() const noexcept { return beta_start_; }
  double beta_end() const noexcept { return beta_end_; }

  // alpha_bar(0) == 1; strictly decreasing afterwards.
  double alpha_bar(int step) const;
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

 private:
  int t_max_;
  double beta_start_;
  double beta_end_;
  std::vector<double> alpha_bar_;
};

double alpha_bar(const NoiseSchedule& schedule, int step);

// Five bins over p in [0, 1]: 100 * floor(p / 0.2), capped at 400.
int noise_level(double foreground_proportion);

enum class ScoreSource { kLlm, kHeuristic, kManual };

class ComplexityScore {
 public:
  ComplexityScore(int value, ScoreSource source);

  int value() const noexcept { return value_; }
  ScoreSource source() const noexcept { return source_; }

  bool operator==(const ComplexityScore&) const = default;

 private:
  int value_;
  ScoreSource source_;
};

// g = 10 - 2 s, in {2, 4, 6, 8}.
int guidance_scale(const ComplexityScore& score);

// sqrt(abar) c + sqrt(1 - abar) eps, eps ~ N(0, I) drawn from rng.
math::Vector perturb_embedding(const math::Vector& embedding, int step,
                               const NoiseSchedule& schedule,
                               std::mt19937_64& rng);

enum class Mode { kIC, kTC, kITC };

const char* to_string(Mode mode);
Mode mode_from_string(std::string_view text);

struct GenerationParams {
  Mode mode = Mode::kIC;
  std::optional<int> noise_level;
  std::optional<int> guidance_scale;
  std::uint64_t seed = 0;

  bool operator==(const GenerationParams&) const = default;
};

// Throws InvalidArgument when the optional fields do not match the mode.
void validate(const GenerationParams& params);
nlohmann::json to_json(const GenerationParams& params);
GenerationParams params_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Caption complexity scoring

class ComplexityScorer {
 public:
  virtual ~ComplexityScorer() = default;
  // Must be safe to call concurrently.
  virtual ComplexityScore score(std::string_view caption) = 0;
};

struct ChatMessage {
  std::string role;
  std::string content;
};

// Wire request: the caption plus the prompt the engine built around it.
struct ScorerRequest {
  std::string caption;
  std::vector<ChatMessage> messages;
};

nlohmann::json to_json(const ScorerRequest& request);

// Wire reply body is {"raw": "..."}; the transport hands back `raw`.
class ScorerTransport {
 public:
  virtual ~ScorerTransport() = default;
  // Throws TransportError on failure to reach the model.
  virtual std::string send(const ScorerRequest& request) = 0;
};

const std::string& scoring_instruction();
std::vector<ChatMessage> build_scoring_prompt(std::string_view caption);

// Extracts k from "[score: k]" (case and whitespace tolerant). Throws
// ParseError carrying the raw reply when absent or out of range.
int parse_score_reply(std::string_view raw);

class LlmComplexityScorer final : public ComplexityScorer {
 public:
  explicit LlmComplexityScorer(ScorerTransport& transport)
      : transport_(transport) {}

  ComplexityScore score(std::string_view caption) override;

 private:
  ScorerTransport& transport_;
};

struct Lexicon {
  std::string version;
  // category -> terms; terms may be multi-word phrases.
  std::vector<std::pair<std::string, std::vector<std::string>>> categories;
};

Lexicon lexicon_from_json(const nlohmann::json& j);
Lexicon load_lexicon(const std::string& path);
// Path of the lexicon bundled with the build.
std::string default_lexicon_path();

struct LexiconMatch {
  std::vector<std::string> terms;  // distinct matched terms, in caption order
};

// Lower-cased word tokens of letters, digits and apostrophes.
std::vector<std::string> tokenize(std::string_view text);

// 0 hits -> 1, 1-3 -> 2, 4-6 -> 3, > 6 -> 4.
int bin_constraint_count(std::size_t hits);

class HeuristicComplexityScorer final : public ComplexityScorer {
 public:
  explicit HeuristicComplexityScorer(Lexicon lexicon);

  ComplexityScore score(std::string_view caption) override;
  LexiconMatch match(std::string_view caption) const;
  const Lexicon& lexicon() const noexcept { return lexicon_; }

 private:
  Lexicon lexicon_;
  std::vector<std::vector<std::string>> phrases_;  // tokenized, longest first
};

ComplexityScore score_caption_complexity(std::string_view caption,
                                         ComplexityScorer& scorer);

}  // namespace genview::policy
