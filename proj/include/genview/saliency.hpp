#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "genview/math.hpp"

namespace genview::saliency {

// Global foreground direction: leading principal component of token
// features pooled over a corpus, plus the token mean used for centring.
struct ForegroundDirection {
  math::Vector direction;  // unit norm, dim k
  math::Vector center;     // dim k
  std::size_t source_sample_count = 0;
  // Frozen activation threshold, when calibrated.
  std::optional<double> alpha;

  std::size_t k() const noexcept { return direction.dim(); }
};

struct FitOptions {
  std::size_t max_tokens = 100000;
  std::uint64_t seed = 0;
  math::PowerIterationOptions power;
};

// Flattens tokens across maps (uniformly subsampled without replacement to
// max_tokens using a seeded generator) and fits the leading component.
ForegroundDirection fit_foreground_direction(
    std::span<const math::DenseFeatureMap> maps, const FitOptions& opts = {});

// Per-token (F[t] - center) . direction.
math::ScalarMap activation_map(const math::DenseFeatureMap& features,
                               const ForegroundDirection& dir);

// Fraction of entries strictly above alpha; alpha must lie in (0, 1).
double foreground_proportion(const math::ScalarMap& normalized, double alpha);

// Linear-interpolated (1 - target) quantile of all pooled values.
double calibrate_threshold(std::span<const math::ScalarMap> normalized_maps,
                           double target_fg_fraction = 0.4);

struct AttentionMaps {
  math::ScalarMap foreground;  // M^f
  math::ScalarMap background;  // M^b = 1 - M^f
};

AttentionMaps attention_maps(const math::DenseFeatureMap& features,
                             const ForegroundDirection& dir);

struct DecoupledFeatures {
  math::Vector foreground;  // z^f
  math::Vector background;  // z^b
};

DecoupledFeatures decouple_features(const math::DenseFeatureMap& features,
                                    const ForegroundDirection& dir);

struct SaliencyResult {
  math::ScalarMap activation;  // min-max normalised
  double foreground_proportion = 0.0;
  math::ScalarMap fg_mask;
  math::ScalarMap bg_mask;
};

// Full per-image analysis; requires dir.alpha.
SaliencyResult analyze(const math::DenseFeatureMap& features,
                       const ForegroundDirection& dir);

// Direction fitted on the tokens of a single map (centred on its own mean).
ForegroundDirection fit_map_direction(const math::DenseFeatureMap& features,
                                      const math::PowerIterationOptions& opts = {});

nlohmann::json to_json(const ForegroundDirection& dir);
ForegroundDirection direction_from_json(const nlohmann::json& j);
void save_direction(const std::filesystem::path& path,
                    const ForegroundDirection& dir);
ForegroundDirection load_direction(const std::filesystem::path& path);

}  // namespace genview::saliency
