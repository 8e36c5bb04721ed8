#pragma once

#include <span>
#include <string>
#include <vector>

#include "genview/math.hpp"
#include "genview/saliency.hpp"

namespace genview::quality {

enum class PairKind { kImageImage, kImageText };

// q = s_primary - s_background, where s_primary is the foreground
// similarity (image-image) or the caption alignment (image-text).
struct PairQuality {
  PairKind kind = PairKind::kImageImage;
  double s_primary = 0.0;
  double s_background = 0.0;
  double q = 0.0;
};

PairQuality make_quality(PairKind kind, double s_primary, double s_background);

// Chooses where the saliency direction comes from for each map.
enum class DirectionMode {
  kShared,  // one corpus-level direction for every map
  kPerMap,  // leading component of each map's own tokens
};

struct AssessorOptions {
  DirectionMode direction_mode = DirectionMode::kShared;
  // Expected spatial grid of assessor feature maps; 0 disables the check.
  std::size_t grid = 7;
};

// s^f = cos(z^f_1, z^f_2), s^b = cos(z^b_1, z^b_2). Throws DegenerateInput
// when a pooled feature has zero norm.
PairQuality image_pair_quality(const math::DenseFeatureMap& first,
                               const math::DenseFeatureMap& second,
                               const saliency::ForegroundDirection& dir,
                               DirectionMode mode = DirectionMode::kShared);

// s^vl = cos(e_text, avg_pool(F_view)), s^b = cos(z^b_raw, z^b_view).
PairQuality image_text_quality(const math::DenseFeatureMap& raw,
                               const math::DenseFeatureMap& view,
                               const math::Vector& text_embedding,
                               const saliency::ForegroundDirection& dir,
                               DirectionMode mode = DirectionMode::kShared);

// Softmax over the flat score list (batch, or batch x view source).
std::vector<double> normalize_weights(std::span<const double> scores);

struct WeightedEntry {
  std::string pair_id;
  PairQuality quality;
  bool degenerate = false;  // q was downgraded to the batch minimum
  double weight = 0.0;
};

struct WeightedBatch {
  std::vector<WeightedEntry> entries;

  std::vector<double> weights() const;
};

struct ImagePair {
  std::string pair_id;
  const math::DenseFeatureMap* first = nullptr;
  const math::DenseFeatureMap* second = nullptr;
};

struct ImageTextPair {
  std::string pair_id;
  const math::DenseFeatureMap* raw = nullptr;
  const math::DenseFeatureMap* view = nullptr;
  const math::Vector* text = nullptr;
};

// Scores every pair (optionally on several threads), then normalises. A pair
// whose pooled features are degenerate gets the minimum q of the batch
// (0 when every pair is degenerate).
WeightedBatch score_image_pairs(std::span<const ImagePair> pairs,
                                const saliency::ForegroundDirection& dir,
                                const AssessorOptions& opts = {},
                                std::size_t threads = 1);
WeightedBatch score_image_text_pairs(std::span<const ImageTextPair> pairs,
                                     const saliency::ForegroundDirection& dir,
                                     const AssessorOptions& opts = {},
                                     std::size_t threads = 1);

}  // namespace genview::quality
