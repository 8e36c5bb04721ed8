#include "genview/quality.hpp"

#include <algorithm>
#include <atomic>
#include <limits>
#include <optional>
#include <thread>

#include "genview/error.hpp"

namespace genview::quality {

namespace {

saliency::ForegroundDirection direction_for(const math::DenseFeatureMap& map,
                                            const saliency::ForegroundDirection& shared,
                                            DirectionMode mode) {
  if (mode == DirectionMode::kShared) return shared;
  return saliency::fit_map_direction(map);
}

void check_grid(const math::DenseFeatureMap& map, const AssessorOptions& opts) {
  if (opts.grid != 0 && (map.h() != opts.grid || map.w() != opts.grid)) {
    throw ShapeMismatch("quality: expected a " + std::to_string(opts.grid) + "x" +
                        std::to_string(opts.grid) + " feature grid, got " +
                        std::to_string(map.h()) + "x" + std::to_string(map.w()));
  }
}

template <typename Score>
WeightedBatch score_batch(std::size_t count, std::size_t threads, Score&& score,
                          const std::vector<std::string>& ids) {
  std::vector<std::optional<PairQuality>> scored(count);
  std::vector<std::exception_ptr> errors(count);
  const auto work = [&](std::size_t i) {
    try {
      scored[i] = score(i);
    } catch (const DegenerateInput&) {
      // downgraded below
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) work(i);
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  double floor_q = std::numeric_limits<double>::infinity();
  for (const auto& s : scored) {
    if (s) floor_q = std::min(floor_q, s->q);
  }
  if (!std::isfinite(floor_q)) floor_q = 0.0;

  WeightedBatch batch;
  std::vector<double> qs;
  for (std::size_t i = 0; i < count; ++i) {
    WeightedEntry entry;
    entry.pair_id = ids[i];
    if (scored[i]) {
      entry.quality = *scored[i];
    } else {
      entry.degenerate = true;
      entry.quality.q = floor_q;
    }
    qs.push_back(entry.quality.q);
    batch.entries.push_back(std::move(entry));
  }
  const auto w = normalize_weights(qs);
  for (std::size_t i = 0; i < count; ++i) batch.entries[i].weight = w[i];
  return batch;
}

}  // namespace

PairQuality make_quality(PairKind kind, double s_primary, double s_background) {
  return {kind, s_primary, s_background, s_primary - s_background};
}

PairQuality image_pair_quality(const math::DenseFeatureMap& first,
                               const math::DenseFeatureMap& second,
                               const saliency::ForegroundDirection& dir, DirectionMode mode) {
  if (first.k() != second.k()) throw ShapeMismatch("image_pair_quality: k differs");
  const auto a = saliency::decouple_features(first, direction_for(first, dir, mode));
  const auto b = saliency::decouple_features(second, direction_for(second, dir, mode));
  return make_quality(PairKind::kImageImage,
                      math::cosine_similarity(a.foreground, b.foreground),
                      math::cosine_similarity(a.background, b.background));
}

PairQuality image_text_quality(const math::DenseFeatureMap& raw,
                               const math::DenseFeatureMap& view,
                               const math::Vector& text_embedding,
                               const saliency::ForegroundDirection& dir, DirectionMode mode) {
  if (raw.k() != view.k() || view.k() != text_embedding.dim()) {
    throw ShapeMismatch("image_text_quality: feature and text dimensions differ");
  }
  const double s_vl = math::cosine_similarity(text_embedding, math::avg_pool(view));
  const auto raw_maps = saliency::attention_maps(raw, direction_for(raw, dir, mode));
  const auto view_maps = saliency::attention_maps(view, direction_for(view, dir, mode));
  const double s_b = math::cosine_similarity(math::weighted_pool(raw_maps.background, raw),
                                             math::weighted_pool(view_maps.background, view));
  return make_quality(PairKind::kImageText, s_vl, s_b);
}

std::vector<double> normalize_weights(std::span<const double> scores) {
  if (scores.empty()) throw InvalidArgument("normalize_weights: empty batch");
  return math::softmax(scores);
}

std::vector<double> WeightedBatch::weights() const {
  std::vector<double> w;
  w.reserve(entries.size());
  for (const auto& e : entries) w.push_back(e.weight);
  return w;
}

WeightedBatch score_image_pairs(std::span<const ImagePair> pairs,
                                const saliency::ForegroundDirection& dir,
                                const AssessorOptions& opts, std::size_t threads) {
  std::vector<std::string> ids;
  for (const auto& p : pairs) {
    check_grid(*p.first, opts);
    check_grid(*p.second, opts);
    ids.push_back(p.pair_id);
  }
  return score_batch(
      pairs.size(), threads,
      [&](std::size_t i) {
        return image_pair_quality(*pairs[i].first, *pairs[i].second, dir, opts.direction_mode);
      },
      ids);
}

WeightedBatch score_image_text_pairs(std::span<const ImageTextPair> pairs,
                                     const saliency::ForegroundDirection& dir,
                                     const AssessorOptions& opts, std::size_t threads) {
  std::vector<std::string> ids;
  for (const auto& p : pairs) {
    check_grid(*p.raw, opts);
    check_grid(*p.view, opts);
    ids.push_back(p.pair_id);
  }
  return score_batch(
      pairs.size(), threads,
      [&](std::size_t i) {
        return image_text_quality(*pairs[i].raw, *pairs[i].view, *pairs[i].text, dir,
                                  opts.direction_mode);
      },
      ids);
}

}  // namespace genview::quality
