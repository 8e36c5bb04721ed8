#include <cmath>
#include <random>

#include "doctest.h"
#include "genview/error.hpp"
#include "genview/feature_io.hpp"
#include "genview/trainer.hpp"
#include "helpers.hpp"

using namespace genview;
using namespace genview::trainer;

namespace {

DatasetConfig small_config(double rho = 0.0, std::uint64_t seed = 1) {
  DatasetConfig c;
  c.n_per_class = 16;
  c.corruption_rate = rho;
  c.seed = seed;
  return c;
}

TrainConfig short_train(LossKind loss, bool quality, int epochs = 6) {
  TrainConfig t;
  t.loss = loss;
  t.use_quality_weights = quality;
  t.epochs = epochs;
  t.seed = 3;
  return t;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("dataset layout") {
    const auto ds = make_synthetic_dataset(small_config(0.3));
    CHECK(ds.samples.size() == 128);
    CHECK(ds.corrupted_count() == 38);  // floor(0.3 * 128)
    for (const auto& s : ds.samples) {
      CHECK(s.dense_map.h() == 7);
      CHECK(s.dense_map.k() == 32);
      CHECK(s.caption_embedding.dim() == 32);
    }
    CHECK(ds.samples[0].id == "s00000");
    CHECK(ds.samples[16].label == 1);
  }

  TEST_CASE("dataset is seeded") {
    const auto a = make_synthetic_dataset(small_config(0.3, 5));
    const auto b = make_synthetic_dataset(small_config(0.3, 5));
    const auto c = make_synthetic_dataset(small_config(0.3, 6));
    CHECK(a.samples[7].partner_map == b.samples[7].partner_map);
    CHECK(a.samples[7].dense_map != c.samples[7].dense_map);
  }

  TEST_CASE("clean partners keep the foreground, corrupted ones keep the background") {
    const auto ds = make_synthetic_dataset(small_config(0.5));
    const std::size_t fg_axis = ds.config.fg_dims;
    for (const auto& s : ds.samples) {
      std::size_t same = 0, fg_same = 0, fg = 0;
      for (std::size_t t = 0; t < s.dense_map.tokens(); ++t) {
        const bool is_fg = s.dense_map.token(t)[fg_axis] > ds.config.fg_offset / 2;
        const bool equal = std::equal(s.dense_map.token(t).begin(), s.dense_map.token(t).end(),
                                      s.partner_map.token(t).begin());
        fg += is_fg;
        fg_same += is_fg && equal;
        same += !is_fg && equal;
      }
      if (s.corrupted) {
        CHECK(fg_same == 0);
        CHECK(same == s.dense_map.tokens() - fg);
      } else {
        CHECK(fg_same == fg);
        CHECK(same == 0);
      }
    }
  }

  TEST_CASE("config validation") {
    auto c = small_config();
    c.corruption_rate = 1.5;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    TrainConfig t;
    t.lr = -1;
    CHECK_THROWS_AS(t.validate(), InvalidArgument);
    t = TrainConfig{};
    t.view_sources = {"xyz"};
    CHECK_THROWS_AS(t.validate(), InvalidArgument);
  }

  TEST_CASE("config json round trip keeps defaults for missing keys") {
    TrainConfig t;
    t.loss = LossKind::kSwav;
    t.epochs = 7;
    t.view_sources = {"ori", "ic"};
    const auto back = train_config_from_json(to_json(t));
    CHECK(back.loss == LossKind::kSwav);
    CHECK(back.epochs == 7);
    CHECK(back.view_sources == t.view_sources);
    const auto partial = train_config_from_json(nlohmann::json{{"lr", 0.1}});
    CHECK(partial.lr == 0.1);
    CHECK(partial.epochs == TrainConfig{}.epochs);
    CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epochs", "many"}}), ParseError);
    CHECK(dataset_config_from_json(to_json(small_config(0.2))).corruption_rate == 0.2);
    CHECK(loss_from_string("i2t_t2i") == LossKind::kI2tT2i);
    CHECK_THROWS_AS(loss_from_string("triplet"), InvalidArgument);
  }

  TEST_CASE("probe separates well-separated clusters with the identity encoder") {
    DatasetConfig c = small_config();
    c.instance_noise = 0.1;
    const auto ds = make_synthetic_dataset(c);
    CHECK(linear_probe(ToyEncoder::identity(32), ds) > 0.9);
  }

  TEST_CASE("shuffled labels give roughly chance accuracy") {
    const auto ds = make_synthetic_dataset(small_config());
    ProbeConfig p;
    p.shuffle_labels = true;
    double acc = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      p.seed = seed;
      acc += linear_probe(ToyEncoder::identity(32), ds, p);
    }
    CHECK(acc / 5 < 0.3);  // chance is 1/8
  }

  TEST_CASE("probe rejects a class missing from the train split") {
    std::vector<math::Vector> f{{0.0}, {1.0}, {2.0}};
    ProbeConfig p;
    p.train_fraction = 0.34;
    CHECK_THROWS_AS(probe_embeddings(f, {0, 1, 2}, p), InvalidArgument);
  }

  TEST_CASE("every loss trains and decreases over the first epochs") {
    const auto ds = make_synthetic_dataset(small_config(0.3));
    for (auto kind : {LossKind::kNce, LossKind::kCosine, LossKind::kSwav, LossKind::kI2tT2i}) {
      CAPTURE(to_string(kind));
      const auto r = train(ds, short_train(kind, true, 5));
      REQUIRE(r.trace.size() == 5);
      CHECK(r.trace.back().loss < r.trace.front().loss);
      for (const auto& m : r.trace) CHECK(std::isfinite(m.loss));
      CHECK(r.image_encoder.dim_out() == 4);
      CHECK(r.text_encoder.has_value() == (kind == LossKind::kI2tT2i));
    }
  }

  TEST_CASE("corrupted pairs get less weight than clean ones at every epoch") {
    const auto ds = make_synthetic_dataset(small_config(0.3));
    const auto r = train(ds, short_train(LossKind::kNce, true));
    for (std::size_t e = 1; e < r.trace.size(); ++e) {
      CHECK(r.trace[e].mean_corrupted_weight < r.trace[e].mean_clean_weight);
      CHECK(r.trace[e].corrupted_below_uniform > 0.9);
    }
  }

  TEST_CASE("without corruption the weights stay close to uniform") {
    const auto ds = make_synthetic_dataset(small_config(0.0));
    const auto r = train(ds, short_train(LossKind::kNce, true, 2));
    for (const auto& m : r.trace) {
      CHECK(m.mean_corrupted_weight == 0.0);
      CHECK(m.mean_clean_weight > 0.0);
    }
  }

  TEST_CASE("training is deterministic") {
    const auto ds = make_synthetic_dataset(small_config(0.3));
    const auto a = train(ds, short_train(LossKind::kNce, true, 3));
    const auto b = train(ds, short_train(LossKind::kNce, true, 3));
    CHECK(a.image_encoder.weight == b.image_encoder.weight);
    CHECK(a.trace.back().loss == b.trace.back().loss);
  }

  TEST_CASE("several view sources") {
    const auto ds = make_synthetic_dataset(small_config(0.3));
    auto cfg = short_train(LossKind::kNce, true, 2);
    cfg.view_sources = {"ori", "ic", "itc"};
    const auto r = train(ds, cfg);
    CHECK(r.trace.size() == 2);
  }

  TEST_CASE("a huge learning rate is reported as divergence with the trace") {
    const auto ds = make_synthetic_dataset(small_config(0.3));
    auto cfg = short_train(LossKind::kCosine, false, 5);
    cfg.lr = 1e300;
    try {
      train(ds, cfg);
      FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
      CHECK(e.code() == ErrorCode::kDiverged);
    }
  }

  TEST_CASE("run directory contents") {
    testing::TempDir dir("run");
    const auto ds = make_synthetic_dataset(small_config(0.3));
    const auto r = train(ds, short_train(LossKind::kNce, true, 2));
    const auto summary = summarize(r, 0.5);
    write_run(dir.path(), r, ds, summary);
    const auto emb = io::read_feature_map(dir / "embeddings.gvfm");
    CHECK(emb.h() == 128);
    CHECK(emb.k() == 4);
    const auto labels = nlohmann::json::parse(io::read_text(dir / "labels.json"));
    CHECK(labels.at("labels").size() == 128);
    const auto s = nlohmann::json::parse(io::read_text(dir / "summary.json"));
    CHECK(s.at("probe_accuracy") == 0.5);
    CHECK(std::filesystem::exists(dir / "metrics.jsonl"));
  }
}
