#include <sstream>

#include "doctest.h"
#include "genview/cli.hpp"
#include "genview/feature_io.hpp"
#include "genview/trainer.hpp"
#include "helpers.hpp"

using namespace genview;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

// Writes the first `n` samples of a synthetic dataset as feature files plus
// sample and pair records.
void write_corpus(const testing::TempDir& dir, std::size_t per_class = 2) {
  trainer::DatasetConfig cfg;
  cfg.n_per_class = per_class;
  cfg.corruption_rate = 0.5;
  cfg.seed = 4;
  const auto ds = trainer::make_synthetic_dataset(cfg);
  std::filesystem::create_directories(dir / "features");
  std::string samples, pairs;
  for (const auto& s : ds.samples) {
    io::write_feature_map(dir / ("features/" + s.id + ".gvfm"), s.dense_map);
    io::write_feature_map(dir / ("features/" + s.id + "_view.gvfm"), s.partner_map);
    samples += nlohmann::json{{"sample_id", s.id},
                              {"features", "features/" + s.id + ".gvfm"},
                              {"caption", "a red glass bottle on a wooden shelf"}}
                   .dump() +
               "\n";
    pairs += nlohmann::json{{"pair_id", s.id},
                            {"first", "features/" + s.id + ".gvfm"},
                            {"second", "features/" + s.id + "_view.gvfm"}}
                 .dump() +
             "\n";
  }
  samples += R"({"sample_id":"caption_only","caption":"a dog"})" "\n";
  io::write_text(dir / "samples.jsonl", samples);
  io::write_text(dir / "pairs.jsonl", pairs);
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit 2, help exits 0") {
    CHECK(run({}).code == cli::kExitUsage);
    CHECK(run({"frobnicate"}).code == cli::kExitUsage);
    CHECK(run({"train", "--epochs", "many"}).code == cli::kExitUsage);
    CHECK(run({"train"}).code == cli::kExitUsage);  // --out missing
    const auto help = run({"--help"});
    CHECK(help.code == cli::kExitOk);
    CHECK(help.out.find("loss-check") != std::string::npos);
    CHECK(run({"--log-level", "loud", "loss-check"}).code == cli::kExitUsage);
  }

  TEST_CASE("domain errors exit 1") {
    CHECK(run({"probe", "--run", "/nonexistent"}).code == cli::kExitDomainError);
    testing::TempDir dir("clibad");
    io::write_text(dir / "bad.json", "{not json");
    const auto r = run({"--config", (dir / "bad.json").string(), "loss-check", "--instances", "1"});
    CHECK(r.code == cli::kExitDomainError);
    CHECK(r.err.find("parse_error") != std::string::npos);
  }

  TEST_CASE("caption scoring") {
    const auto r = run({"--json", "score", "--caption",
                        "three red glass bottles on a wooden shelf under warm light, watercolor style"});
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j.at("score") == 4);
    CHECK(j.at("guidance_scale") == 2);
    CHECK(j.at("terms").size() == 8);
  }

  TEST_CASE("loss-check") {
    const auto r = run({"--json", "loss-check", "--instances", "3"});
    CHECK(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j.at("passed") == true);
    CHECK(j.at("losses").size() == 5);
  }

  TEST_CASE("saliency, plan, generate and score end to end") {
    testing::TempDir dir("clie2e");
    write_corpus(dir);
    const auto d = dir.path().string();

    auto fit = run({"saliency", "fit", "--features", d + "/features", "--out", d + "/dir.json"});
    REQUIRE_MESSAGE(fit.code == 0, fit.err);
    CHECK(fit.out.find("alpha=") != std::string::npos);

    auto sc = run({"--json", "saliency", "score", "--features", d + "/features/s00000.gvfm", "--direction",
                   d + "/dir.json"});
    REQUIRE(sc.code == 0);
    const auto rows = nlohmann::json::parse(sc.out);
    CHECK(rows.at(0).at("noise_level").get<int>() % 100 == 0);

    auto plan = run({"plan", "--inputs", d + "/samples.jsonl", "--direction", d + "/dir.json", "--out",
                     d + "/plan.jsonl"});
    REQUIRE_MESSAGE(plan.code == 0, plan.err);
    CHECK(plan.out.find("skipped") != std::string::npos);  // caption-only sample in image modes

    const std::vector<std::string> gen{"--json", "generate", "--inputs", d + "/samples.jsonl", "--direction",
                                       d + "/dir.json", "--manifest", d + "/m.jsonl", "--backend", "mock"};
    auto g1 = run(gen);
    REQUIRE_MESSAGE(g1.code == 0, g1.err);
    const auto s1 = nlohmann::json::parse(g1.out);
    CHECK(s1.at("new") == 17 * 3);
    CHECK(s1.at("skipped") == 2);
    CHECK(std::filesystem::exists(dir / "blobs"));
    const auto bytes = io::read_text(dir / "m.jsonl");
    auto g2 = run(gen);
    const auto s2 = nlohmann::json::parse(g2.out);
    CHECK(s2.at("new") == 0);
    CHECK(s2.at("backend_calls") == 0);
    CHECK(io::read_text(dir / "m.jsonl") == bytes);

    auto score = run({"--json", "score", "--pairs", d + "/pairs.jsonl", "--direction", d + "/dir.json", "--out",
                      d + "/weights.jsonl"});
    REQUIRE_MESSAGE(score.code == 0, score.err);
    const auto w = nlohmann::json::parse(score.out);
    CHECK(w.size() == 16);
    double total = 0;
    for (const auto& e : w) total += e.at("weight").get<double>();
    CHECK(total == doctest::Approx(1.0));
    CHECK(std::filesystem::exists(dir / "weights.jsonl"));

    auto wrong_grid = run({"score", "--pairs", d + "/pairs.jsonl", "--direction", d + "/dir.json", "--grid", "5"});
    CHECK(wrong_grid.code == cli::kExitDomainError);
  }

  TEST_CASE("blob dir flag wins over the environment") {
    testing::TempDir dir("cliblob");
    write_corpus(dir, 1);
    const auto d = dir.path().string();
    REQUIRE(run({"saliency", "fit", "--features", d + "/features", "--out", d + "/dir.json"}).code == 0);
    ::setenv("GENVIEW_BLOB_DIR", (d + "/env_blobs").c_str(), 1);
    auto r = run({"generate", "--inputs", d + "/samples.jsonl", "--direction", d + "/dir.json", "--manifest",
                  d + "/m.jsonl", "--backend", "mock", "--modes", "tc"});
    CHECK(r.code == 0);
    CHECK(std::filesystem::exists(dir / "env_blobs"));
    r = run({"generate", "--inputs", d + "/samples.jsonl", "--direction", d + "/dir.json", "--manifest",
             d + "/m2.jsonl", "--backend", "mock", "--modes", "tc", "--blob-dir", d + "/flag_blobs"});
    CHECK(r.code == 0);
    CHECK(std::filesystem::exists(dir / "flag_blobs"));
    ::unsetenv("GENVIEW_BLOB_DIR");
  }

  TEST_CASE("train, report and probe with a config file") {
    testing::TempDir dir("clitrain");
    const auto d = dir.path().string();
    io::write_text(dir / "train.json", R"({"seed": 2,
      "dataset": {"n_per_class": 12, "corruption_rate": 0.3},
      "train": {"epochs": 3, "use_quality_weights": true}})");
    auto t = run({"--config", d + "/train.json", "--json", "train", "--out", d + "/run", "--epochs", "2"});
    REQUIRE_MESSAGE(t.code == 0, t.err);
    const auto cfg = nlohmann::json::parse(io::read_text(dir / "run/config.json"));
    CHECK(cfg.at("train").at("epochs") == 2);
    CHECK(cfg.at("train").at("seed") == 2);
    CHECK(cfg.at("dataset").at("seed") == 2);
    CHECK(cfg.at("dataset").at("corruption_rate") == 0.3);

    // --seed overrides every section.
    auto t2 = run({"--config", d + "/train.json", "--seed", "9", "train", "--out", d + "/run2"});
    REQUIRE(t2.code == 0);
    CHECK(nlohmann::json::parse(io::read_text(dir / "run2/config.json")).at("probe").at("seed") == 9);

    auto rep = run({"report", "--run", d + "/run", "--csv", d + "/m.csv"});
    CHECK(rep.code == 0);
    const auto csv = io::read_text(dir / "m.csv");
    CHECK(csv.rfind("epoch,loss,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

    auto pr = run({"--json", "probe", "--run", d + "/run"});
    REQUIRE(pr.code == 0);
    const double acc = nlohmann::json::parse(pr.out).at("probe_accuracy");
    CHECK(acc > 0.0);
    CHECK(acc <= 1.0);
    CHECK(run({"train", "--out", d + "/x", "--quality", "--uniform"}).code == cli::kExitUsage);
  }
}
