#include "genview/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "genview/error.hpp"
#include "genview/feature_io.hpp"

namespace genview::saliency {

namespace {

constexpr int kDirectionFormatVersion = 1;

void require_k(const math::DenseFeatureMap& features,
               const ForegroundDirection& dir, const char* op) {
  if (features.k() != dir.k() || dir.center.dim() != dir.k()) {
    throw ShapeMismatch(std::string(op) + ": feature dimension " +
                        std::to_string(features.k()) +
                        " does not match direction dimension " +
                        std::to_string(dir.k()));
  }
}

}  // namespace

ForegroundDirection fit_foreground_direction(
    std::span<const math::DenseFeatureMap> maps, const FitOptions& opts) {
  if (maps.empty()) {
    throw InvalidArgument("fit_foreground_direction: no feature maps");
  }
  const std::size_t k = maps.front().k();
  std::size_t total = 0;
  for (const auto& m : maps) {
    if (m.k() != k) {
      throw ShapeMismatch("fit_foreground_direction: maps differ in k");
    }
    total += m.tokens();
  }
  if (total < 2) {
    throw InvalidArgument("fit_foreground_direction: need >= 2 tokens");
  }
  if (opts.max_tokens < 2) {
    throw InvalidArgument("fit_foreground_direction: max_tokens must be >= 2");
  }

  // Global token index order; a seeded partial shuffle picks the subset,
  // which is then sorted so the packing order stays corpus order.
  std::vector<std::size_t> picks(total);
  std::iota(picks.begin(), picks.end(), std::size_t{0});
  if (total > opts.max_tokens) {
    std::mt19937_64 rng(opts.seed);
    for (std::size_t i = 0; i < opts.max_tokens; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, total - 1);
      std::swap(picks[i], picks[pick(rng)]);
    }
    picks.resize(opts.max_tokens);
    std::sort(picks.begin(), picks.end());
  }

  math::Matrix packed(picks.size(), k);
  std::size_t map_index = 0;
  std::size_t map_base = 0;
  for (std::size_t r = 0; r < picks.size(); ++r) {
    while (picks[r] >= map_base + maps[map_index].tokens()) {
      map_base += maps[map_index].tokens();
      ++map_index;
    }
    const auto tok = maps[map_index].token(picks[r] - map_base);
    std::copy(tok.begin(), tok.end(), packed.row(r).begin());
  }

  auto pc = math::principal_component(packed, opts.power);
  ForegroundDirection dir;
  dir.direction = std::move(pc.direction);
  dir.center = std::move(pc.mean);
  dir.source_sample_count = picks.size();
  return dir;
}

ForegroundDirection fit_map_direction(const math::DenseFeatureMap& features,
                                      const math::PowerIterationOptions& opts) {
  math::Matrix packed(features.tokens(), features.k(), features.data());
  auto pc = math::principal_component(packed, opts);
  ForegroundDirection dir;
  dir.direction = std::move(pc.direction);
  dir.center = std::move(pc.mean);
  dir.source_sample_count = features.tokens();
  return dir;
}

math::ScalarMap activation_map(const math::DenseFeatureMap& features,
                               const ForegroundDirection& dir) {
  require_k(features, dir, "activation_map");
  std::vector<double> act(features.tokens());
  const auto w = dir.direction.span();
  const auto c = dir.center.span();
  for (std::size_t t = 0; t < features.tokens(); ++t) {
    const auto tok = features.token(t);
    double acc = 0.0;
    for (std::size_t i = 0; i < tok.size(); ++i) acc += (tok[i] - c[i]) * w[i];
    act[t] = acc;
  }
  return math::ScalarMap(features.h(), features.w(), std::move(act));
}

double foreground_proportion(const math::ScalarMap& normalized, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw InvalidArgument("foreground_proportion: alpha must lie in (0, 1)");
  }
  const auto& v = normalized.values();
  const auto above = std::count_if(v.begin(), v.end(),
                                   [alpha](double x) { return x > alpha; });
  return static_cast<double>(above) / static_cast<double>(v.size());
}

double calibrate_threshold(std::span<const math::ScalarMap> normalized_maps,
                           double target_fg_fraction) {
  if (!(target_fg_fraction > 0.0 && target_fg_fraction < 1.0)) {
    throw InvalidArgument("calibrate_threshold: target must lie in (0, 1)");
  }
  std::vector<double> pool;
  for (const auto& m : normalized_maps) {
    pool.insert(pool.end(), m.values().begin(), m.values().end());
  }
  if (pool.empty()) throw InvalidArgument("calibrate_threshold: empty pool");
  std::sort(pool.begin(), pool.end());
  if (pool.back() - pool.front() <= 0.0) {
    throw DegenerateInput("calibrate_threshold: pooled values are all equal");
  }
  const double pos = (1.0 - target_fg_fraction) * static_cast<double>(pool.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, pool.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return pool[lo] + frac * (pool[hi] - pool[lo]);
}

AttentionMaps attention_maps(const math::DenseFeatureMap& features,
                             const ForegroundDirection& dir) {
  auto fg = math::min_max_normalize(activation_map(features, dir));
  std::vector<double> bg(fg.size());
  for (std::size_t i = 0; i < fg.size(); ++i) bg[i] = 1.0 - fg[i];
  return {std::move(fg), math::ScalarMap(features.h(), features.w(), std::move(bg))};
}

DecoupledFeatures decouple_features(const math::DenseFeatureMap& features,
                                    const ForegroundDirection& dir) {
  const auto maps = attention_maps(features, dir);
  return {math::weighted_pool(maps.foreground, features),
          math::weighted_pool(maps.background, features)};
}

SaliencyResult analyze(const math::DenseFeatureMap& features,
                       const ForegroundDirection& dir) {
  if (!dir.alpha) {
    throw InvalidArgument("analyze: direction carries no calibrated alpha");
  }
  auto maps = attention_maps(features, dir);
  SaliencyResult out;
  out.activation = maps.foreground;
  out.foreground_proportion = foreground_proportion(out.activation, *dir.alpha);
  out.fg_mask = std::move(maps.foreground);
  out.bg_mask = std::move(maps.background);
  return out;
}

nlohmann::json to_json(const ForegroundDirection& dir) {
  nlohmann::json j = {{"version", kDirectionFormatVersion},
                      {"k", dir.k()},
                      {"center", dir.center.values()},
                      {"direction", dir.direction.values()},
                      {"sample_count", dir.source_sample_count}};
  if (dir.alpha) j["alpha"] = *dir.alpha;
  return j;
}

ForegroundDirection direction_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kDirectionFormatVersion) {
      throw ParseError("direction json: unsupported version", j.dump());
    }
    ForegroundDirection dir;
    dir.direction = math::Vector(j.at("direction").get<std::vector<double>>());
    dir.center = math::Vector(j.at("center").get<std::vector<double>>());
    dir.source_sample_count = j.at("sample_count").get<std::size_t>();
    if (j.contains("alpha")) dir.alpha = j.at("alpha").get<double>();
    const auto k = j.at("k").get<std::size_t>();
    if (dir.direction.dim() != k || dir.center.dim() != k) {
      throw ParseError("direction json: vector lengths disagree with k", j.dump());
    }
    if (std::abs(math::norm(dir.direction.span()) - 1.0) > 1e-6) {
      throw ParseError("direction json: direction is not unit norm", j.dump());
    }
    return dir;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("direction json: ") + e.what(), j.dump());
  }
}

void save_direction(const std::filesystem::path& path,
                    const ForegroundDirection& dir) {
  io::write_text(path, to_json(dir).dump(2) + "\n");
}

ForegroundDirection load_direction(const std::filesystem::path& path) {
  const auto text = io::read_text(path);
  try {
    return direction_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("direction json: ") + e.what(), text);
  }
}

}  // namespace genview::saliency
