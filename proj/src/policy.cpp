#include "genview/policy.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <regex>

#include "genview/error.hpp"
#include "genview/feature_io.hpp"

#ifndef GENVIEW_DATA_DIR
#define GENVIEW_DATA_DIR "data"
#endif

namespace genview::policy {

NoiseSchedule::NoiseSchedule() : NoiseSchedule(1000, 1e-4, 0.02) {}

NoiseSchedule::NoiseSchedule(int t_max, double beta_start, double beta_end)
    : t_max_(t_max), beta_start_(beta_start), beta_end_(beta_end) {
  if (t_max < 1) throw InvalidArgument("NoiseSchedule: t_max must be >= 1");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
    throw InvalidArgument("NoiseSchedule: need 0 < beta_start <= beta_end < 1");
  }
  alpha_bar_.resize(static_cast<std::size_t>(t_max) + 1);
  alpha_bar_[0] = 1.0;
  for (int j = 1; j <= t_max; ++j) {
    const double frac = t_max == 1 ? 0.0 : static_cast<double>(j - 1) / (t_max - 1);
    const double beta = beta_start + (beta_end - beta_start) * frac;
    alpha_bar_[static_cast<std::size_t>(j)] =
        alpha_bar_[static_cast<std::size_t>(j - 1)] * (1.0 - beta);
  }
}

double NoiseSchedule::alpha_bar(int step) const {
  if (step < 0 || step > t_max_) {
    throw InvalidArgument("alpha_bar: step " + std::to_string(step) +
                          " outside [0, " + std::to_string(t_max_) + "]");
  }
  return alpha_bar_[static_cast<std::size_t>(step)];
}

double alpha_bar(const NoiseSchedule& schedule, int step) {
  return schedule.alpha_bar(step);
}

int noise_level(double p) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw InvalidArgument("noise_level: proportion must lie in [0, 1]");
  }
  // p / 0.2 in floating point puts 0.6 at 2.9999999999999996; bin edges
  // are compared on p directly instead.
  static constexpr double kEdges[] = {0.2, 0.4, 0.6, 0.8};
  int bin = 0;
  for (double edge : kEdges) {
    if (p >= edge) ++bin;
  }
  return std::min(100 * bin, 400);
}

ComplexityScore::ComplexityScore(int value, ScoreSource source)
    : value_(value), source_(source) {
  if (value < 1 || value > 4) {
    throw InvalidArgument("ComplexityScore: value must be in {1,2,3,4}");
  }
}

int guidance_scale(const ComplexityScore& score) { return 10 - 2 * score.value(); }

math::Vector perturb_embedding(const math::Vector& embedding, int step,
                               const NoiseSchedule& schedule,
                               std::mt19937_64& rng) {
  const double abar = schedule.alpha_bar(step);
  if (step == 0) return embedding;
  const double keep = std::sqrt(abar);
  const double noise = std::sqrt(1.0 - abar);
  std::normal_distribution<double> gauss(0.0, 1.0);
  math::Vector out(embedding.dim());
  for (std::size_t i = 0; i < embedding.dim(); ++i) {
    out[i] = keep * embedding[i] + noise * gauss(rng);
  }
  return out;
}

const char* to_string(Mode mode) {
  switch (mode) {
    case Mode::kIC: return "ic";
    case Mode::kTC: return "tc";
    case Mode::kITC: return "itc";
  }
  return "?";
}

Mode mode_from_string(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (lower == "ic") return Mode::kIC;
  if (lower == "tc") return Mode::kTC;
  if (lower == "itc") return Mode::kITC;
  throw InvalidArgument("unknown generation mode '" + std::string(text) + "'");
}

void validate(const GenerationParams& params) {
  const bool wants_noise = params.mode != Mode::kTC;
  const bool wants_guidance = params.mode != Mode::kIC;
  if (params.noise_level.has_value() != wants_noise ||
      params.guidance_scale.has_value() != wants_guidance) {
    throw InvalidArgument(std::string("GenerationParams: fields do not match mode ") +
                          to_string(params.mode));
  }
  if (params.noise_level) {
    const int l = *params.noise_level;
    if (l < 0 || l > 400 || l % 100 != 0) {
      throw InvalidArgument("GenerationParams: noise_level outside {0,...,400}");
    }
  }
  if (params.guidance_scale) {
    const int g = *params.guidance_scale;
    if (g < 2 || g > 8 || g % 2 != 0) {
      throw InvalidArgument("GenerationParams: guidance_scale outside {2,4,6,8}");
    }
  }
}

nlohmann::json to_json(const GenerationParams& params) {
  nlohmann::json j = {{"mode", to_string(params.mode)}};
  if (params.noise_level) j["noise_level"] = *params.noise_level;
  if (params.guidance_scale) j["guidance_scale"] = *params.guidance_scale;
  j["seed"] = params.seed;
  return j;
}

GenerationParams params_from_json(const nlohmann::json& j) {
  try {
    GenerationParams p;
    p.mode = mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("noise_level")) p.noise_level = j.at("noise_level").get<int>();
    if (j.contains("guidance_scale")) p.guidance_scale = j.at("guidance_scale").get<int>();
    p.seed = j.at("seed").get<std::uint64_t>();
    validate(p);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("generation params: ") + e.what(), j.dump());
  }
}

// ---------------------------------------------------------------------------

const std::string& scoring_instruction() {
  static const std::string kInstruction =
      "You are tasked with evaluating the visual complexity of a text prompt "
      "intended for image generation. Your goal is to assign a score from 1 "
      "to 4 that reflects how richly the prompt describes concrete visual "
      "elements. The more detailed and diverse the visual information, the "
      "higher the score should be.\n"
      "Visual complexity is determined by identifying constraints that "
      "directly affect how an image would be generated. These include the "
      "specificity of objects mentioned (such as type, quantity, or "
      "material), descriptive visual features (such as color, texture, or "
      "lighting), spatial relationships (such as layout or perspective), "
      "dynamic elements (such as actions or interactions), and stylistic "
      "cues (such as artistic genres or cultural elements). A prompt that "
      "contains a wide range of such features is considered more complex "
      "than one that simply names general categories.\n"
      "A prompt that only refers to broad object types without any "
      "additional visual information should be scored as 1. If it includes "
      "a small number of visual constraints—typically one to three—it "
      "should be scored as 2. A score of 3 is appropriate when the prompt "
      "contains a moderate level of detail, roughly four to six constraints. "
      "A prompt that includes more than six distinct and specific visual "
      "elements—such as combinations of materials, textures, color, "
      "spatial arrangement, and style—should be scored as 4. \n"
      "When evaluating, do not include abstract or emotional language that "
      "does not translate directly into visual features. Focus only on "
      "concrete and visualizable information. \n"
      "After analyzing the prompt, return a score from 1 to 4. Return the "
      "result in the following format: [score: ?].";
  return kInstruction;
}

std::vector<ChatMessage> build_scoring_prompt(std::string_view caption) {
  std::string user =
      "Now output the score of visual constraints for the following text prompt:";
  user.append(caption);
  user.push_back('.');
  return {{"system", scoring_instruction()}, {"user", std::move(user)}};
}

nlohmann::json to_json(const ScorerRequest& request) {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& m : request.messages) {
    messages.push_back({{"role", m.role}, {"content", m.content}});
  }
  return {{"caption", request.caption}, {"messages", messages}};
}

int parse_score_reply(std::string_view raw) {
  static const std::regex kPattern(R"(\[\s*score\s*:\s*([0-9]+)\s*\])",
                                   std::regex::icase);
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(raw.begin(), raw.end(), m, kPattern)) {
    throw ParseError("complexity reply: no [score: k] tag", std::string(raw));
  }
  const std::string digits = m[1].str();
  if (digits.size() != 1 || digits[0] < '1' || digits[0] > '4') {
    throw ParseError("complexity reply: score outside 1..4", std::string(raw));
  }
  return digits[0] - '0';
}

ComplexityScore LlmComplexityScorer::score(std::string_view caption) {
  ScorerRequest request{std::string(caption), build_scoring_prompt(caption)};
  const std::string raw = transport_.send(request);
  return ComplexityScore(parse_score_reply(raw), ScoreSource::kLlm);
}

// ---------------------------------------------------------------------------

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c == '\'') {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

int bin_constraint_count(std::size_t hits) {
  if (hits == 0) return 1;
  if (hits <= 3) return 2;
  if (hits <= 6) return 3;
  return 4;
}

Lexicon lexicon_from_json(const nlohmann::json& j) {
  try {
    Lexicon lex;
    lex.version = j.at("version").get<std::string>();
    for (const auto& [name, terms] : j.at("categories").items()) {
      lex.categories.emplace_back(name, terms.get<std::vector<std::string>>());
    }
    return lex;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("lexicon json: ") + e.what(), j.dump());
  }
}

Lexicon load_lexicon(const std::string& path) {
  const auto text = io::read_text(path);
  try {
    return lexicon_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("lexicon json: ") + e.what(), text);
  }
}

std::string default_lexicon_path() {
  return std::string(GENVIEW_DATA_DIR) + "/lexicon_v1.json";
}

HeuristicComplexityScorer::HeuristicComplexityScorer(Lexicon lexicon)
    : lexicon_(std::move(lexicon)) {
  for (const auto& [name, terms] : lexicon_.categories) {
    for (const auto& term : terms) {
      auto words = tokenize(term);
      if (!words.empty()) phrases_.push_back(std::move(words));
    }
  }
  std::stable_sort(phrases_.begin(), phrases_.end(),
                   [](const auto& a, const auto& b) { return a.size() > b.size(); });
  phrases_.erase(std::unique(phrases_.begin(), phrases_.end()), phrases_.end());
}

LexiconMatch HeuristicComplexityScorer::match(std::string_view caption) const {
  const auto words = tokenize(caption);
  LexiconMatch out;
  std::size_t i = 0;
  while (i < words.size()) {
    std::size_t advance = 1;
    for (const auto& phrase : phrases_) {
      if (i + phrase.size() > words.size()) continue;
      if (!std::equal(phrase.begin(), phrase.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
        continue;
      }
      std::string joined = phrase.front();
      for (std::size_t p = 1; p < phrase.size(); ++p) joined += " " + phrase[p];
      if (std::find(out.terms.begin(), out.terms.end(), joined) == out.terms.end()) {
        out.terms.push_back(std::move(joined));
      }
      advance = phrase.size();
      break;
    }
    i += advance;
  }
  return out;
}

ComplexityScore HeuristicComplexityScorer::score(std::string_view caption) {
  if (caption.empty()) throw InvalidArgument("complexity: empty caption");
  return ComplexityScore(bin_constraint_count(match(caption).terms.size()),
                         ScoreSource::kHeuristic);
}

ComplexityScore score_caption_complexity(std::string_view caption,
                                         ComplexityScorer& scorer) {
  if (caption.empty()) throw InvalidArgument("complexity: empty caption");
  return scorer.score(caption);
}

}  // namespace genview::policy
