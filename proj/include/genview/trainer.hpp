#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "genview/error.hpp"
#include "genview/losses.hpp"
#include "genview/math.hpp"
#include "genview/saliency.hpp"

namespace genview::trainer {

// Token layout of the synthetic features (dim k):
//   [0, fg_dims)         class subspace
//   fg_dims              axis shared by every foreground token
//   (fg_dims, k)         background scene subspace
struct DatasetConfig {
  std::size_t n_classes = 8;
  std::size_t n_per_class = 40;
  std::size_t dim = 32;
  std::size_t grid = 7;
  std::size_t fg_dims = 8;
  std::size_t n_scenes = 32;
  double corruption_rate = 0.0;
  double fg_fraction = 0.4;
  double fg_offset = 3.0;      // length of the shared foreground axis
  double class_scale = 1.5;    // norm of each class center
  double instance_noise = 0.5;
  double token_noise = 0.2;
  double scene_scale = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Sample {
  std::string id;
  int label = 0;
  math::Vector base_vector;          // class center plus instance noise
  math::DenseFeatureMap dense_map;   // the original view
  math::DenseFeatureMap partner_map; // the generated positive
  math::Vector caption_embedding;    // class-subspace description, dim k
  bool corrupted = false;            // partner foreground is another class
};

struct SyntheticDataset {
  DatasetConfig config;
  std::vector<math::Vector> cluster_centers;
  std::vector<math::Vector> scenes;
  std::vector<Sample> samples;

  std::size_t corrupted_count() const;
};

// Exactly floor(rho * N) samples get a corrupted partner: foreground tokens
// from a sample of another class on top of the anchor's own background.
// Clean partners keep the foreground and resample the background scene.
SyntheticDataset make_synthetic_dataset(const DatasetConfig& config, std::mt19937_64& rng);
SyntheticDataset make_synthetic_dataset(const DatasetConfig& config);

// Linear map h = W x with W stored as dim_out x dim_in. The optional heads
// are used by the cosine (predictor) and swav (prototypes) objectives.
struct ToyEncoder {
  math::Matrix weight;
  std::optional<math::Matrix> predictor;   // dim_out x dim_out
  std::optional<math::Matrix> prototypes;  // n_prototypes x dim_out

  std::size_t dim_in() const noexcept { return weight.cols(); }
  std::size_t dim_out() const noexcept { return weight.rows(); }

  static ToyEncoder identity(std::size_t dim);
  static ToyEncoder random(std::size_t dim_in, std::size_t dim_out, std::mt19937_64& rng);

  math::Vector embed(const math::Vector& x) const;
};

enum class LossKind { kNce, kCosine, kSwav, kI2tT2i };

const char* to_string(LossKind kind);
LossKind loss_from_string(const std::string& text);

struct TrainConfig {
  LossKind loss = LossKind::kNce;
  bool use_quality_weights = false;
  int epochs = 30;
  double lr = 0.5;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  // Any of "ori", "ic", "tc", "itc". "ori" pairs the original with a second
  // augmentation of itself; a generated source pairs it with the partner.
  std::vector<std::string> view_sources = {"itc"};
  std::size_t embed_dim = 4;
  double tau = losses::kDefaultTemperature;
  double jitter = 0.1;   // per-element Gaussian noise on tokens
  double dropout = 0.1;  // probability of zeroing a token
  bool rescale_by_batch = false;
  losses::SwavOptions swav;
  std::size_t n_prototypes = 16;
  std::size_t quality_threads = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
// Missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DatasetConfig& config);
DatasetConfig dataset_config_from_json(const nlohmann::json& j);

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;  // mean unweighted per-pair loss
  double mean_clean_weight = 0.0;
  double mean_corrupted_weight = 0.0;  // NaN-free: 0 when no corrupted pair
  // Share of batches (with a corrupted pair) whose mean corrupted weight is
  // below the uniform weight.
  double corrupted_below_uniform = 0.0;
};

nlohmann::json to_json(const EpochMetrics& m);

struct TrainResult {
  ToyEncoder image_encoder;
  std::optional<ToyEncoder> text_encoder;
  std::vector<EpochMetrics> trace;
  saliency::ForegroundDirection assessor;
};

// Raised when the loss or the parameters become non-finite.
class TrainingDiverged : public Diverged {
 public:
  TrainingDiverged(const std::string& what, std::vector<EpochMetrics> trace)
      : Diverged(what), trace_(std::move(trace)) {}

  const std::vector<EpochMetrics>& trace() const noexcept { return trace_; }

 private:
  std::vector<EpochMetrics> trace_;
};

// Mini-batch gradient descent with in-batch negatives. The quality assessor
// direction is fitted once on the original views and then frozen.
TrainResult train(const SyntheticDataset& dataset, const TrainConfig& config);

struct ProbeConfig {
  double train_fraction = 0.6;
  int iterations = 200;
  double lr = 0.1;
  std::uint64_t seed = 0;
  bool shuffle_labels = false;
};

// Multinomial logistic regression on standardised features; returns
// held-out accuracy. Throws InvalidArgument if a class is missing from the
// training split.
double probe_embeddings(const std::vector<math::Vector>& features, const std::vector<int>& labels,
                        const ProbeConfig& config = {});

// Embeds the original view of every sample (no augmentation).
std::vector<math::Vector> embed_dataset(const ToyEncoder& encoder, const SyntheticDataset& dataset);

double linear_probe(const ToyEncoder& encoder, const SyntheticDataset& dataset,
                    const ProbeConfig& config = {});

struct RunSummary {
  double probe_accuracy = 0.0;
  double mean_clean_weight = 0.0;
  double mean_corrupted_weight = 0.0;
};

RunSummary summarize(const TrainResult& result, double probe_accuracy);
nlohmann::json to_json(const RunSummary& summary);

// Writes metrics.jsonl, embeddings.gvfm (N x 1 x d), labels.json and
// summary.json under `dir`.
void write_run(const std::filesystem::path& dir, const TrainResult& result,
               const SyntheticDataset& dataset, const RunSummary& summary);

}  // namespace genview::trainer
