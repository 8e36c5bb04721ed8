#include "genview/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "genview/feature_io.hpp"
#include "genview/quality.hpp"

namespace genview::trainer {

namespace {

using math::DenseFeatureMap;
using math::Matrix;
using math::Vector;

Vector unit_random(std::mt19937_64& rng, std::size_t dim, std::size_t offset, std::size_t len,
                   double length) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(len);
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (auto& x : v) {
      x = normal(rng);
      n2 += x * x;
    }
  } while (n2 == 0.0);
  Vector out(dim);
  for (std::size_t i = 0; i < len; ++i) out[offset + i] = v[i] * length / std::sqrt(n2);
  return out;
}

void fill_token(DenseFeatureMap& map, std::size_t t, const Vector& mean, double noise,
                std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, noise);
  auto tok = map.token(t);
  for (std::size_t d = 0; d < tok.size(); ++d) tok[d] = mean[d] + normal(rng);
}

std::string sample_id(std::size_t i) {
  std::string s = std::to_string(i);
  return "s" + std::string(s.size() < 5 ? 5 - s.size() : 0, '0') + s;
}

struct AugmentedView {
  DenseFeatureMap map;
  Vector pooled;
};

AugmentedView augment(const DenseFeatureMap& src, double jitter, double dropout,
                      std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution drop(dropout);
  DenseFeatureMap out = src;
  for (std::size_t t = 0; t < out.tokens(); ++t) {
    auto tok = out.token(t);
    const bool dropped = drop(rng);
    for (double& x : tok) {
      const double n = normal(rng);
      x = dropped ? 0.0 : x + jitter * n;
    }
  }
  auto pooled = math::avg_pool(out);
  return {std::move(out), std::move(pooled)};
}

void check_finite(std::span<const double> values, const char* what,
                  const std::vector<EpochMetrics>& trace) {
  if (!math::all_finite(values)) {
    throw TrainingDiverged(std::string("train: non-finite ") + what, trace);
  }
}

Vector matvec(const Matrix& m, std::span<const double> x) {
  Vector out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = math::dot(m.row(r), x);
  return out;
}

Vector matvec_t(const Matrix& m, std::span<const double> y) {
  Vector out(m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) out[c] += row[c] * y[r];
  }
  return out;
}

void add_outer(Matrix& m, std::span<const double> left, std::span<const double> right, double s) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double a = s * left[r];
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] += a * right[c];
  }
}

void axpy(Vector& y, const Vector& x, double a) {
  for (std::size_t i = 0; i < y.dim(); ++i) y[i] += a * x[i];
}

// Backpropagates dL/dz through z = h / |h| into dL/dh.
Vector through_normalize(const Vector& h, const Vector& z, const Vector& dz) {
  const double nh = math::norm(h.span());
  const double proj = math::dot(dz.span(), z.span());
  Vector dh(h.dim());
  for (std::size_t i = 0; i < h.dim(); ++i) dh[i] = (dz[i] - proj * z[i]) / nh;
  return dh;
}

// Per-view forward state for one source within a batch.
struct Side {
  std::vector<Vector> x, h, z;
  std::vector<Vector> dz;  // accumulated gradient w.r.t. z (or h when unnormalised)
};

Side encode(const ToyEncoder& enc, std::vector<Vector> xs, const std::vector<EpochMetrics>& trace) {
  Side s;
  s.x = std::move(xs);
  for (const auto& x : s.x) {
    auto h = matvec(enc.weight, x.span());
    check_finite(h.span(), "embedding", trace);
    const double n = math::norm(h.span());
    if (n == 0.0) throw TrainingDiverged("train: embedding collapsed to zero", trace);
    if (!std::isfinite(n)) throw TrainingDiverged("train: embedding norm overflowed", trace);
    s.z.push_back(math::scale(h, 1.0 / n));
    s.h.push_back(std::move(h));
    s.dz.emplace_back(enc.dim_out());
  }
  return s;
}

void backprop(const Side& s, Matrix& grad_w, bool normalized) {
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    const Vector dh = normalized ? through_normalize(s.h[i], s.z[i], s.dz[i]) : s.dz[i];
    add_outer(grad_w, dh.span(), s.x[i].span(), 1.0);
  }
}

Matrix rows_matrix(const std::vector<Vector>& rows, const Matrix& proto) {
  Matrix out(rows.size(), proto.rows());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto s = matvec(proto, rows[i].span());
    std::copy(s.begin(), s.end(), out.row(i).begin());
  }
  return out;
}

Vector row_vector(const Matrix& m, std::size_t r) {
  const auto row = m.row(r);
  return Vector(std::vector<double>(row.begin(), row.end()));
}

void normalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double n = math::norm(row);
    if (n > 0.0) {
      for (double& x : row) x /= n;
    }
  }
}

}  // namespace

void DatasetConfig::validate() const {
  if (n_classes < 2) throw InvalidArgument("dataset: n_classes must be >= 2");
  if (n_per_class < 1) throw InvalidArgument("dataset: n_per_class must be >= 1");
  if (grid < 1) throw InvalidArgument("dataset: grid must be >= 1");
  if (fg_dims < 1 || fg_dims + 2 > dim) {
    throw InvalidArgument("dataset: need 1 <= fg_dims <= dim - 2");
  }
  if (n_scenes < 2) throw InvalidArgument("dataset: n_scenes must be >= 2");
  if (!(corruption_rate >= 0.0 && corruption_rate <= 1.0)) {
    throw InvalidArgument("dataset: corruption_rate must lie in [0, 1]");
  }
  if (!(fg_fraction > 0.0 && fg_fraction < 1.0)) {
    throw InvalidArgument("dataset: fg_fraction must lie in (0, 1)");
  }
  for (double v : {fg_offset, class_scale, instance_noise, token_noise, scene_scale}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("dataset: scales must be >= 0");
  }
}

std::size_t SyntheticDataset::corrupted_count() const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [](const Sample& s) { return s.corrupted; }));
}

SyntheticDataset make_synthetic_dataset(const DatasetConfig& config, std::mt19937_64& rng) {
  config.validate();
  const std::size_t k = config.dim;
  const std::size_t bg_offset = config.fg_dims + 1;
  const std::size_t bg_len = k - bg_offset;
  const std::size_t tokens = config.grid * config.grid;
  const std::size_t n_fg = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(config.fg_fraction * static_cast<double>(tokens))), 1,
      tokens - (tokens > 1 ? 1 : 0));
  const std::size_t n = config.n_classes * config.n_per_class;

  SyntheticDataset ds;
  ds.config = config;
  for (std::size_t c = 0; c < config.n_classes; ++c) {
    ds.cluster_centers.push_back(unit_random(rng, k, 0, config.fg_dims, config.class_scale));
  }
  for (std::size_t s = 0; s < config.n_scenes; ++s) {
    ds.scenes.push_back(unit_random(rng, k, bg_offset, bg_len, config.scene_scale));
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> scene_dist(0, config.n_scenes - 1);
  std::vector<std::vector<std::size_t>> fg_positions(n);
  std::vector<std::size_t> scene_of(n);

  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = sample_id(i);
    s.label = static_cast<int>(i / config.n_per_class);
    s.base_vector = ds.cluster_centers[static_cast<std::size_t>(s.label)];
    for (std::size_t d = 0; d < config.fg_dims; ++d) {
      s.base_vector[d] += config.instance_noise * normal(rng);
    }
    s.caption_embedding = ds.cluster_centers[static_cast<std::size_t>(s.label)];
    for (std::size_t d = 0; d < config.fg_dims; ++d) s.caption_embedding[d] += 0.1 * normal(rng);

    std::vector<std::size_t> order(tokens);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    fg_positions[i].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_fg));
    std::sort(fg_positions[i].begin(), fg_positions[i].end());
    scene_of[i] = scene_dist(rng);

    Vector fg_mean = s.base_vector;
    fg_mean[config.fg_dims] = config.fg_offset;
    s.dense_map = DenseFeatureMap(config.grid, config.grid, k);
    std::vector<bool> is_fg(tokens, false);
    for (auto t : fg_positions[i]) is_fg[t] = true;
    for (std::size_t t = 0; t < tokens; ++t) {
      fill_token(s.dense_map, t, is_fg[t] ? fg_mean : ds.scenes[scene_of[i]], config.token_noise, rng);
    }
    ds.samples.push_back(std::move(s));
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_corrupt = static_cast<std::size_t>(std::floor(config.corruption_rate * static_cast<double>(n)));
  for (std::size_t j = 0; j < n_corrupt; ++j) ds.samples[order[j]].corrupted = true;

  std::uniform_int_distribution<std::size_t> sample_dist(0, n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    Sample& s = ds.samples[i];
    std::vector<bool> is_fg(tokens, false);
    for (auto t : fg_positions[i]) is_fg[t] = true;
    s.partner_map = s.dense_map;
    if (s.corrupted) {
      std::size_t donor = sample_dist(rng);
      while (ds.samples[donor].label == s.label) donor = sample_dist(rng);
      const auto& donor_pos = fg_positions[donor];
      for (std::size_t j = 0; j < fg_positions[i].size(); ++j) {
        const auto src = ds.samples[donor].dense_map.token(donor_pos[j % donor_pos.size()]);
        auto dst = s.partner_map.token(fg_positions[i][j]);
        std::copy(src.begin(), src.end(), dst.begin());
      }
    } else {
      std::size_t scene = scene_dist(rng);
      while (scene == scene_of[i]) scene = scene_dist(rng);
      for (std::size_t t = 0; t < tokens; ++t) {
        if (!is_fg[t]) fill_token(s.partner_map, t, ds.scenes[scene], config.token_noise, rng);
      }
    }
  }
  return ds;
}

SyntheticDataset make_synthetic_dataset(const DatasetConfig& config) {
  std::mt19937_64 rng(config.seed);
  return make_synthetic_dataset(config, rng);
}

ToyEncoder ToyEncoder::identity(std::size_t dim) {
  ToyEncoder e;
  e.weight = Matrix(dim, dim);
  for (std::size_t i = 0; i < dim; ++i) e.weight(i, i) = 1.0;
  return e;
}

ToyEncoder ToyEncoder::random(std::size_t dim_in, std::size_t dim_out, std::mt19937_64& rng) {
  if (dim_in == 0 || dim_out == 0) throw InvalidArgument("ToyEncoder: dimensions must be positive");
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim_in)));
  ToyEncoder e;
  e.weight = Matrix(dim_out, dim_in);
  for (auto& w : e.weight.values()) w = normal(rng);
  return e;
}

Vector ToyEncoder::embed(const Vector& x) const {
  if (x.dim() != dim_in()) throw ShapeMismatch("ToyEncoder: input dimension mismatch");
  return matvec(weight, x.span());
}

const char* to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kNce: return "nce";
    case LossKind::kCosine: return "cosine";
    case LossKind::kSwav: return "swav";
    case LossKind::kI2tT2i: return "i2t_t2i";
  }
  return "?";
}

LossKind loss_from_string(const std::string& text) {
  if (text == "nce") return LossKind::kNce;
  if (text == "cosine") return LossKind::kCosine;
  if (text == "swav") return LossKind::kSwav;
  if (text == "i2t_t2i") return LossKind::kI2tT2i;
  throw InvalidArgument("unknown loss '" + text + "' (expected nce, cosine, swav or i2t_t2i)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw InvalidArgument("train: epochs must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("train: lr must be > 0");
  if (batch_size < 2) throw InvalidArgument("train: batch_size must be >= 2");
  if (embed_dim < 1) throw InvalidArgument("train: embed_dim must be >= 1");
  if (!(tau > 0.0)) throw InvalidArgument("train: tau must be > 0");
  if (jitter < 0.0) throw InvalidArgument("train: jitter must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("train: dropout must lie in [0, 1)");
  if (view_sources.empty()) throw InvalidArgument("train: view_sources is empty");
  for (const auto& s : view_sources) {
    if (s != "ori" && s != "ic" && s != "tc" && s != "itc") {
      throw InvalidArgument("train: unknown view source '" + s + "'");
    }
    if (std::count(view_sources.begin(), view_sources.end(), s) > 1) {
      throw InvalidArgument("train: duplicate view source '" + s + "'");
    }
  }
  if (loss == LossKind::kSwav && n_prototypes < 2) {
    throw InvalidArgument("train: swav needs at least 2 prototypes");
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"loss", to_string(c.loss)},
          {"use_quality_weights", c.use_quality_weights},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"view_sources", c.view_sources},
          {"embed_dim", c.embed_dim},
          {"tau", c.tau},
          {"jitter", c.jitter},
          {"dropout", c.dropout},
          {"rescale_by_batch", c.rescale_by_batch},
          {"swav", {{"temperature", c.swav.temperature}, {"epsilon", c.swav.epsilon}, {"iters", c.swav.iters}}},
          {"n_prototypes", c.n_prototypes},
          {"quality_threads", c.quality_threads}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  try {
    TrainConfig c;
    if (j.contains("loss")) c.loss = loss_from_string(j.at("loss").get<std::string>());
    c.use_quality_weights = j.value("use_quality_weights", c.use_quality_weights);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.view_sources = j.value("view_sources", c.view_sources);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.tau = j.value("tau", c.tau);
    c.jitter = j.value("jitter", c.jitter);
    c.dropout = j.value("dropout", c.dropout);
    c.rescale_by_batch = j.value("rescale_by_batch", c.rescale_by_batch);
    if (j.contains("swav")) {
      const auto& s = j.at("swav");
      c.swav.temperature = s.value("temperature", c.swav.temperature);
      c.swav.epsilon = s.value("epsilon", c.swav.epsilon);
      c.swav.iters = s.value("iters", c.swav.iters);
    }
    c.n_prototypes = j.value("n_prototypes", c.n_prototypes);
    c.quality_threads = j.value("quality_threads", c.quality_threads);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("train config: ") + e.what(), j.dump());
  }
}

nlohmann::json to_json(const DatasetConfig& c) {
  return {{"n_classes", c.n_classes},     {"n_per_class", c.n_per_class},
          {"dim", c.dim},                 {"grid", c.grid},
          {"fg_dims", c.fg_dims},         {"n_scenes", c.n_scenes},
          {"corruption_rate", c.corruption_rate}, {"fg_fraction", c.fg_fraction},
          {"fg_offset", c.fg_offset},     {"class_scale", c.class_scale},
          {"instance_noise", c.instance_noise}, {"token_noise", c.token_noise},
          {"scene_scale", c.scene_scale}, {"seed", c.seed}};
}

DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  try {
    DatasetConfig c;
    c.n_classes = j.value("n_classes", c.n_classes);
    c.n_per_class = j.value("n_per_class", c.n_per_class);
    c.dim = j.value("dim", c.dim);
    c.grid = j.value("grid", c.grid);
    c.fg_dims = j.value("fg_dims", c.fg_dims);
    c.n_scenes = j.value("n_scenes", c.n_scenes);
    c.corruption_rate = j.value("corruption_rate", c.corruption_rate);
    c.fg_fraction = j.value("fg_fraction", c.fg_fraction);
    c.fg_offset = j.value("fg_offset", c.fg_offset);
    c.class_scale = j.value("class_scale", c.class_scale);
    c.instance_noise = j.value("instance_noise", c.instance_noise);
    c.token_noise = j.value("token_noise", c.token_noise);
    c.scene_scale = j.value("scene_scale", c.scene_scale);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset config: ") + e.what(), j.dump());
  }
}

nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"loss", m.loss},
          {"mean_clean_weight", m.mean_clean_weight},
          {"mean_corrupted_weight", m.mean_corrupted_weight},
          {"corrupted_below_uniform", m.corrupted_below_uniform}};
}

TrainResult train(const SyntheticDataset& dataset, const TrainConfig& config) {
  config.validate();
  if (dataset.samples.size() < 2) throw InvalidArgument("train: dataset needs >= 2 samples");
  const std::size_t k = dataset.config.dim;
  const std::size_t n = dataset.samples.size();
  const std::size_t n_sources = config.view_sources.size();
  const bool image_text = config.loss == LossKind::kI2tT2i;

  std::mt19937_64 rng(config.seed);
  TrainResult result;
  result.image_encoder = ToyEncoder::random(k, config.embed_dim, rng);
  if (image_text) result.text_encoder = ToyEncoder::random(k, config.embed_dim, rng);
  if (config.loss == LossKind::kCosine) {
    Matrix p(config.embed_dim, config.embed_dim);
    for (std::size_t i = 0; i < config.embed_dim; ++i) p(i, i) = 1.0;
    result.image_encoder.predictor = std::move(p);
  }
  if (config.loss == LossKind::kSwav) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix c(config.n_prototypes, config.embed_dim);
    for (auto& x : c.values()) x = normal(rng);
    normalize_rows(c);
    result.image_encoder.prototypes = std::move(c);
  }

  std::vector<DenseFeatureMap> originals;
  originals.reserve(n);
  for (const auto& s : dataset.samples) originals.push_back(s.dense_map);
  saliency::FitOptions fit;
  fit.seed = config.seed;
  result.assessor = saliency::fit_foreground_direction(originals, fit);

  quality::AssessorOptions assessor_opts;
  assessor_opts.grid = dataset.config.grid;

  auto& enc = result.image_encoder;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    double clean_w = 0.0, corrupt_w = 0.0;
    std::size_t clean_n = 0, corrupt_n = 0;
    std::size_t batches_with_corruption = 0, batches_below_uniform = 0;

    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t b = std::min(config.batch_size, n - start);
      if (b < 2) break;
      const std::size_t pairs = b * n_sources;

      // Augment every anchor once and every partner once per source.
      std::vector<AugmentedView> anchors;
      std::vector<std::vector<AugmentedView>> partners(n_sources);
      for (std::size_t i = 0; i < b; ++i) {
        anchors.push_back(augment(dataset.samples[order[start + i]].dense_map, config.jitter,
                                  config.dropout, rng));
      }
      for (std::size_t s = 0; s < n_sources; ++s) {
        const bool ori = config.view_sources[s] == "ori";
        for (std::size_t i = 0; i < b; ++i) {
          const auto& sample = dataset.samples[order[start + i]];
          partners[s].push_back(augment(ori ? sample.dense_map : sample.partner_map, config.jitter,
                                        config.dropout, rng));
        }
      }
      auto pair_corrupted = [&](std::size_t s, std::size_t i) {
        return config.view_sources[s] != "ori" && dataset.samples[order[start + i]].corrupted;
      };

      std::vector<double> weights(pairs, 1.0 / static_cast<double>(pairs));
      if (config.use_quality_weights) {
        quality::WeightedBatch wb;
        if (image_text) {
          std::vector<quality::ImageTextPair> items;
          for (std::size_t s = 0; s < n_sources; ++s) {
            for (std::size_t i = 0; i < b; ++i) {
              items.push_back({"", &anchors[i].map, &partners[s][i].map,
                               &dataset.samples[order[start + i]].caption_embedding});
            }
          }
          wb = quality::score_image_text_pairs(items, result.assessor, assessor_opts,
                                               config.quality_threads);
        } else {
          std::vector<quality::ImagePair> items;
          for (std::size_t s = 0; s < n_sources; ++s) {
            for (std::size_t i = 0; i < b; ++i) {
              items.push_back({"", &anchors[i].map, &partners[s][i].map});
            }
          }
          wb = quality::score_image_pairs(items, result.assessor, assessor_opts,
                                          config.quality_threads);
        }
        weights = wb.weights();
      }
      check_finite(weights, "quality weights", result.trace);

      double batch_corrupt_w = 0.0;
      std::size_t batch_corrupt_n = 0;
      for (std::size_t s = 0; s < n_sources; ++s) {
        for (std::size_t i = 0; i < b; ++i) {
          const double w = weights[s * b + i];
          if (pair_corrupted(s, i)) {
            corrupt_w += w;
            ++corrupt_n;
            batch_corrupt_w += w;
            ++batch_corrupt_n;
          } else {
            clean_w += w;
            ++clean_n;
          }
        }
      }
      if (batch_corrupt_n > 0) {
        ++batches_with_corruption;
        if (batch_corrupt_w / static_cast<double>(batch_corrupt_n) < 1.0 / static_cast<double>(pairs)) {
          ++batches_below_uniform;
        }
      }
      if (config.rescale_by_batch) {
        for (double& w : weights) w *= static_cast<double>(pairs);
      }

      Matrix grad_w(enc.dim_out(), enc.dim_in());
      Matrix grad_text = image_text ? Matrix(config.embed_dim, k) : Matrix();
      Matrix grad_pred = enc.predictor ? Matrix(config.embed_dim, config.embed_dim) : Matrix();
      Matrix grad_proto = enc.prototypes ? Matrix(enc.prototypes->rows(), config.embed_dim) : Matrix();

      std::vector<Vector> anchor_x;
      for (const auto& a : anchors) anchor_x.push_back(a.pooled);
      Side anchor = encode(enc, anchor_x, result.trace);

      // Text side is shared across sources.
      Side text;
      if (image_text) {
        std::vector<Vector> caps;
        for (std::size_t i = 0; i < b; ++i) caps.push_back(dataset.samples[order[start + i]].caption_embedding);
        text = encode(*result.text_encoder, caps, result.trace);
      }

      for (std::size_t s = 0; s < n_sources; ++s) {
        std::vector<Vector> px;
        for (const auto& p : partners[s]) px.push_back(p.pooled);
        Side view = encode(enc, px, result.trace);
        const double* w = weights.data() + s * b;

        switch (config.loss) {
          case LossKind::kNce: {
            for (std::size_t i = 0; i < b; ++i) {
              std::vector<Vector> negatives;
              for (std::size_t j = 0; j < b; ++j) {
                if (j != i) negatives.push_back(view.z[j]);
              }
              const auto l = losses::nce_loss(anchor.z[i], view.z[i], negatives, config.tau);
              loss_sum += l.value;
              ++loss_count;
              axpy(anchor.dz[i], l.grads[0], w[i]);
              axpy(view.dz[i], l.grads[1], w[i]);
              for (std::size_t j = 0, g = 2; j < b; ++j) {
                if (j != i) axpy(view.dz[j], l.grads[g++], w[i]);
              }
            }
            break;
          }
          case LossKind::kCosine: {
            const Matrix& pred = *enc.predictor;
            for (std::size_t i = 0; i < b; ++i) {
              const Vector p = matvec(pred, anchor.z[i].span());
              const auto l = losses::cosine_loss(p, view.z[i]);
              loss_sum += l.value;
              ++loss_count;
              add_outer(grad_pred, l.grads[0].span(), anchor.z[i].span(), w[i]);
              axpy(anchor.dz[i], matvec_t(pred, l.grads[0].span()), w[i]);
            }
            break;
          }
          case LossKind::kSwav: {
            const Matrix& proto = *enc.prototypes;
            const Matrix s1 = rows_matrix(anchor.z, proto);
            const Matrix s2 = rows_matrix(view.z, proto);
            const Matrix q1 = losses::swav_targets(s1, config.swav.epsilon, config.swav.iters);
            const Matrix q2 = losses::swav_targets(s2, config.swav.epsilon, config.swav.iters);
            for (std::size_t i = 0; i < b; ++i) {
              const auto l1 = losses::swav_row_loss(row_vector(s1, i), row_vector(q2, i), config.swav.temperature);
              const auto l2 = losses::swav_row_loss(row_vector(s2, i), row_vector(q1, i), config.swav.temperature);
              loss_sum += 0.5 * (l1.value + l2.value);
              ++loss_count;
              const double wi = 0.5 * w[i];
              axpy(anchor.dz[i], matvec_t(proto, l1.grads[0].span()), wi);
              axpy(view.dz[i], matvec_t(proto, l2.grads[0].span()), wi);
              add_outer(grad_proto, l1.grads[0].span(), anchor.z[i].span(), wi);
              add_outer(grad_proto, l2.grads[0].span(), view.z[i].span(), wi);
            }
            break;
          }
          case LossKind::kI2tT2i: {
            // Cosine logits normalise internally, so gradients land on h directly.
            for (std::size_t i = 0; i < b; ++i) {
              const auto a = losses::i2t_loss(view.h[i], text.h, i, config.tau);
              const auto c = losses::t2i_loss(text.h[i], view.h, i, config.tau);
              loss_sum += 0.5 * (a.value + c.value);
              ++loss_count;
              const double wi = 0.5 * w[i];
              axpy(view.dz[i], a.grads[0], wi);
              for (std::size_t j = 0; j < b; ++j) axpy(text.dz[j], a.grads[1 + j], wi);
              axpy(text.dz[i], c.grads[0], wi);
              for (std::size_t j = 0; j < b; ++j) axpy(view.dz[j], c.grads[1 + j], wi);
            }
            break;
          }
        }
        backprop(view, grad_w, !image_text);
      }
      if (!image_text) backprop(anchor, grad_w, true);
      if (image_text) backprop(text, grad_text, false);

      check_finite(grad_w.values(), "gradient", result.trace);
      for (std::size_t i = 0; i < grad_w.values().size(); ++i) enc.weight.values()[i] -= config.lr * grad_w.values()[i];
      if (image_text) {
        auto& tw = result.text_encoder->weight.values();
        for (std::size_t i = 0; i < tw.size(); ++i) tw[i] -= config.lr * grad_text.values()[i];
        check_finite(tw, "text encoder weights", result.trace);
      }
      if (enc.predictor) {
        auto& pw = enc.predictor->values();
        for (std::size_t i = 0; i < pw.size(); ++i) pw[i] -= config.lr * grad_pred.values()[i];
        check_finite(pw, "predictor weights", result.trace);
      }
      if (enc.prototypes) {
        auto& cw = enc.prototypes->values();
        for (std::size_t i = 0; i < cw.size(); ++i) cw[i] -= config.lr * grad_proto.values()[i];
        check_finite(cw, "prototypes", result.trace);
        normalize_rows(*enc.prototypes);
      }
      check_finite(enc.weight.values(), "encoder weights", result.trace);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
    m.mean_clean_weight = clean_n > 0 ? clean_w / static_cast<double>(clean_n) : 0.0;
    m.mean_corrupted_weight = corrupt_n > 0 ? corrupt_w / static_cast<double>(corrupt_n) : 0.0;
    m.corrupted_below_uniform = batches_with_corruption > 0
                                    ? static_cast<double>(batches_below_uniform) /
                                          static_cast<double>(batches_with_corruption)
                                    : 0.0;
    if (!std::isfinite(m.loss)) {
      result.trace.push_back(m);
      throw TrainingDiverged("train: loss became non-finite at epoch " + std::to_string(epoch),
                             result.trace);
    }
    result.trace.push_back(m);
  }
  return result;
}

double probe_embeddings(const std::vector<Vector>& features, const std::vector<int>& labels,
                        const ProbeConfig& config) {
  if (features.size() != labels.size()) throw ShapeMismatch("linear_probe: features vs labels");
  if (features.size() < 2) throw InvalidArgument("linear_probe: need at least 2 samples");
  if (!(config.train_fraction > 0.0 && config.train_fraction < 1.0)) {
    throw InvalidArgument("linear_probe: train_fraction must lie in (0, 1)");
  }
  if (config.iterations < 1 || !(config.lr > 0.0)) {
    throw InvalidArgument("linear_probe: iterations and lr must be positive");
  }
  const std::size_t n = features.size();
  const std::size_t d = features.front().dim();
  for (const auto& f : features) {
    if (f.dim() != d) throw ShapeMismatch("linear_probe: features differ in dimension");
  }
  int max_label = 0;
  for (int l : labels) {
    if (l < 0) throw InvalidArgument("linear_probe: labels must be >= 0");
    max_label = std::max(max_label, l);
  }
  const auto n_classes = static_cast<std::size_t>(max_label) + 1;

  std::mt19937_64 rng(config.seed);
  std::vector<int> y = labels;
  if (config.shuffle_labels) std::shuffle(y.begin(), y.end(), rng);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(config.train_fraction * static_cast<double>(n))), 1, n - 1);
  const std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  const std::vector<std::size_t> test_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());

  std::vector<bool> seen(n_classes, false);
  for (auto i : train_idx) seen[static_cast<std::size_t>(y[i])] = true;
  for (int l : y) {
    if (!seen[static_cast<std::size_t>(l)]) {
      throw InvalidArgument("linear_probe: class " + std::to_string(l) + " absent from the train split");
    }
  }

  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (auto i : train_idx) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += features[i][c];
  }
  for (auto& m : mean) m /= static_cast<double>(n_train);
  for (auto i : train_idx) {
    for (std::size_t c = 0; c < d; ++c) sd[c] += (features[i][c] - mean[c]) * (features[i][c] - mean[c]);
  }
  for (auto& s : sd) {
    s = std::sqrt(s / static_cast<double>(n_train));
    if (s < 1e-12) s = 1.0;
  }
  auto standardized = [&](std::size_t i) {
    std::vector<double> x(d + 1, 1.0);  // trailing bias input
    for (std::size_t c = 0; c < d; ++c) x[c] = (features[i][c] - mean[c]) / sd[c];
    return x;
  };
  std::vector<std::vector<double>> xtrain, xtest;
  for (auto i : train_idx) xtrain.push_back(standardized(i));
  for (auto i : test_idx) xtest.push_back(standardized(i));

  Matrix w(n_classes, d + 1);
  std::vector<double> logits(n_classes);
  for (int it = 0; it < config.iterations; ++it) {
    Matrix grad(n_classes, d + 1);
    for (std::size_t r = 0; r < n_train; ++r) {
      for (std::size_t c = 0; c < n_classes; ++c) logits[c] = math::dot(w.row(c), xtrain[r]);
      const auto p = math::softmax(logits);
      const auto label = static_cast<std::size_t>(y[train_idx[r]]);
      for (std::size_t c = 0; c < n_classes; ++c) {
        const double g = (p[c] - (c == label ? 1.0 : 0.0)) / static_cast<double>(n_train);
        auto row = grad.row(c);
        for (std::size_t j = 0; j <= d; ++j) row[j] += g * xtrain[r][j];
      }
    }
    for (std::size_t i = 0; i < w.values().size(); ++i) w.values()[i] -= config.lr * grad.values()[i];
  }

  std::size_t correct = 0;
  for (std::size_t r = 0; r < xtest.size(); ++r) {
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n_classes; ++c) {
      const double v = math::dot(w.row(c), xtest[r]);
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    correct += static_cast<std::size_t>(y[test_idx[r]]) == best ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(xtest.size());
}

std::vector<Vector> embed_dataset(const ToyEncoder& encoder, const SyntheticDataset& dataset) {
  std::vector<Vector> out;
  out.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) out.push_back(encoder.embed(math::avg_pool(s.dense_map)));
  return out;
}

double linear_probe(const ToyEncoder& encoder, const SyntheticDataset& dataset,
                    const ProbeConfig& config) {
  std::vector<int> labels;
  for (const auto& s : dataset.samples) labels.push_back(s.label);
  return probe_embeddings(embed_dataset(encoder, dataset), labels, config);
}

RunSummary summarize(const TrainResult& result, double probe_accuracy) {
  RunSummary s;
  s.probe_accuracy = probe_accuracy;
  if (!result.trace.empty()) {
    for (const auto& m : result.trace) {
      s.mean_clean_weight += m.mean_clean_weight;
      s.mean_corrupted_weight += m.mean_corrupted_weight;
    }
    s.mean_clean_weight /= static_cast<double>(result.trace.size());
    s.mean_corrupted_weight /= static_cast<double>(result.trace.size());
  }
  return s;
}

nlohmann::json to_json(const RunSummary& s) {
  return {{"probe_accuracy", s.probe_accuracy},
          {"mean_clean_weight", s.mean_clean_weight},
          {"mean_corrupted_weight", s.mean_corrupted_weight}};
}

void write_run(const std::filesystem::path& dir, const TrainResult& result,
               const SyntheticDataset& dataset, const RunSummary& summary) {
  std::filesystem::create_directories(dir);
  std::string metrics;
  for (const auto& m : result.trace) metrics += to_json(m).dump() + "\n";
  io::write_text(dir / "metrics.jsonl", metrics);

  const auto emb = embed_dataset(result.image_encoder, dataset);
  const std::size_t d = result.image_encoder.dim_out();
  std::vector<double> flat;
  flat.reserve(emb.size() * d);
  for (const auto& e : emb) flat.insert(flat.end(), e.begin(), e.end());
  io::write_feature_map(dir / "embeddings.gvfm", DenseFeatureMap(emb.size(), 1, d, std::move(flat)));

  nlohmann::json labels = {{"ids", nlohmann::json::array()},
                           {"labels", nlohmann::json::array()},
                           {"corrupted", nlohmann::json::array()}};
  for (const auto& s : dataset.samples) {
    labels["ids"].push_back(s.id);
    labels["labels"].push_back(s.label);
    labels["corrupted"].push_back(s.corrupted);
  }
  io::write_text(dir / "labels.json", labels.dump(2) + "\n");
  io::write_text(dir / "summary.json", to_json(summary).dump(2) + "\n");
}

}  // namespace genview::trainer
