#include <fstream>

#include "doctest.h"
#include "genview/error.hpp"
#include "genview/manifest.hpp"
#include "helpers.hpp"

using namespace genview;
using namespace genview::gen;

namespace {

ManifestRecord done(const std::string& id, Mode mode, const std::string& payload) {
  ManifestRecord r;
  r.sample_id = id;
  r.mode = mode;
  r.params = GenerationParams{mode, mode == Mode::kTC ? std::nullopt : std::optional<int>(100),
                              mode == Mode::kIC ? std::nullopt : std::optional<int>(4), 1};
  r.cache_key = "key-" + id + "-" + policy::to_string(mode);
  r.status = RecordStatus::kDone;
  r.payload_ref = payload;
  r.generator_id = "mock-echo";
  r.attempts = 1;
  return r;
}

void append_raw(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::app | std::ios::binary);
  out << text;
}

}  // namespace

TEST_SUITE("manifest") {
  TEST_CASE("record json round trip") {
    const auto r = done("a", Mode::kITC, "abc");
    const auto back = record_from_json(to_json(r));
    CHECK(back.sample_id == "a");
    CHECK(back.params == r.params);
    CHECK(back.payload_ref == r.payload_ref);
    CHECK(back.attempts == 1);
    auto j = to_json(r);
    j.erase("payload_ref");
    CHECK_THROWS_AS(record_from_json(j), ParseError);
    j = to_json(r);
    j["status"] = "pending";
    CHECK_THROWS_AS(record_from_json(j), ParseError);
  }

  TEST_CASE("missing file is an empty manifest") {
    const auto m = ViewManifest::load("/nonexistent/manifest.jsonl");
    CHECK(m.history().empty());
    CHECK(m.valid_bytes() == 0);
  }

  TEST_CASE("writer and loader agree, latest record wins") {
    testing::TempDir dir("man");
    const auto path = dir / "m.jsonl";
    {
      ManifestWriter w(path, 0);
      auto failed = done("a", Mode::kIC, "x");
      failed.status = RecordStatus::kFailed;
      failed.payload_ref.reset();
      failed.error = "transport";
      w.append(failed);
      w.append(done("a", Mode::kIC, "p1"));
      w.append(done("b", Mode::kTC, "p2"));
    }
    const auto m = ViewManifest::load(path);
    CHECK(m.history().size() == 3);
    CHECK(m.latest().size() == 2);
    CHECK(m.find("a", Mode::kIC)->status == RecordStatus::kDone);
    CHECK(m.count(RecordStatus::kDone) == 2);
    CHECK(m.count(RecordStatus::kFailed) == 0);
    CHECK(m.payload_for_cache_key("key-b-tc") == "p2");
    CHECK_FALSE(m.payload_for_cache_key("nope").has_value());
    CHECK(m.valid_bytes() == std::filesystem::file_size(path));
  }

  TEST_CASE("torn tail is dropped and truncated on the next append") {
    testing::TempDir dir("torn");
    const auto path = dir / "m.jsonl";
    { ManifestWriter(path, 0).append(done("a", Mode::kIC, "p1")); }
    const auto good = std::filesystem::file_size(path);
    append_raw(path, R"({"sample_id":"b","mo)");
    const auto m = ViewManifest::load(path);
    CHECK(m.history().size() == 1);
    CHECK(m.valid_bytes() == good);
    { ManifestWriter(path, m.valid_bytes()).append(done("b", Mode::kIC, "p2")); }
    const auto again = ViewManifest::load(path);
    CHECK(again.history().size() == 2);
    CHECK(again.valid_bytes() == std::filesystem::file_size(path));
  }

  TEST_CASE("complete last record without a newline is kept") {
    testing::TempDir dir("nonl");
    const auto path = dir / "m.jsonl";
    append_raw(path, to_json(done("a", Mode::kIC, "p1")).dump());
    const auto m = ViewManifest::load(path);
    CHECK(m.history().size() == 1);
    { ManifestWriter(path, m.valid_bytes()).append(done("b", Mode::kIC, "p2")); }
    CHECK(ViewManifest::load(path).history().size() == 2);
  }

  TEST_CASE("corruption in the middle is fatal") {
    testing::TempDir dir("corrupt");
    const auto path = dir / "m.jsonl";
    append_raw(path, "not json\n" + to_json(done("a", Mode::kIC, "p1")).dump() + "\n");
    CHECK_THROWS_AS(ViewManifest::load(path), ManifestCorrupt);
    const auto blank = dir / "blank.jsonl";
    append_raw(blank, "\n" + to_json(done("a", Mode::kIC, "p1")).dump() + "\n");
    CHECK_THROWS_AS(ViewManifest::load(blank), ManifestCorrupt);
  }

  TEST_CASE("view set json") {
    PositiveViewSet s{"a", "o", std::string("i"), std::nullopt, std::string("x")};
    const auto j = to_json(s);
    CHECK(j.at("views").at("ori") == "o");
    CHECK(j.at("views").at("ic") == "i");
    CHECK_FALSE(j.at("views").contains("tc"));
  }
}
