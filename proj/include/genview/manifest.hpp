#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "genview/generation.hpp"

namespace genview::gen {

enum class RecordStatus { kDone, kFailed, kSkipped };

const char* to_string(RecordStatus status);
RecordStatus status_from_string(const std::string& text);

// One JSON line of the view manifest.
struct ManifestRecord {
  std::string sample_id;
  Mode mode = Mode::kIC;
  std::optional<GenerationParams> params;  // absent for skipped records
  std::string cache_key;
  RecordStatus status = RecordStatus::kDone;
  std::optional<std::string> payload_ref;
  std::optional<std::string> generator_id;
  std::optional<std::string> error;
  int attempts = 0;
};

nlohmann::json to_json(const ManifestRecord& record);
ManifestRecord record_from_json(const nlohmann::json& j);

using RecordKey = std::pair<std::string, Mode>;

// Append-only JSON-lines log. The effective state is the latest record per
// (sample_id, mode); a retried failure appends a superseding record.
class ViewManifest {
 public:
  ViewManifest() = default;

  // Missing file -> empty manifest. A torn final line (no trailing newline,
  // not parseable) is dropped; any other bad line throws ManifestCorrupt.
  static ViewManifest load(const std::filesystem::path& path);

  void apply(const ManifestRecord& record);

  const std::vector<ManifestRecord>& history() const noexcept { return history_; }
  const std::map<RecordKey, ManifestRecord>& latest() const noexcept { return latest_; }
  const ManifestRecord* find(const std::string& sample_id, Mode mode) const;
  // Payload of any done record with this cache key.
  std::optional<std::string> payload_for_cache_key(const std::string& cache_key) const;

  std::size_t count(RecordStatus status) const;

  // Byte offset of valid data; bytes beyond it are a torn tail.
  std::uintmax_t valid_bytes() const noexcept { return valid_bytes_; }

 private:
  std::vector<ManifestRecord> history_;
  std::map<RecordKey, ManifestRecord> latest_;
  std::map<std::string, std::string> done_by_cache_key_;
  std::uintmax_t valid_bytes_ = 0;
};

// Serialised appender: one write + fsync per record.
class ManifestWriter {
 public:
  // Truncates a torn tail left by a crash before appending.
  ManifestWriter(const std::filesystem::path& path, std::uintmax_t valid_bytes);
  ~ManifestWriter();
  ManifestWriter(const ManifestWriter&) = delete;
  ManifestWriter& operator=(const ManifestWriter&) = delete;

  void append(const ManifestRecord& record);

 private:
  std::mutex mu_;
  int fd_ = -1;
  std::filesystem::path path_;
};

// {sample_id, views: {ori, ic?, tc?, itc?}}; ori always present.
struct PositiveViewSet {
  std::string sample_id;
  std::string ori;
  std::optional<std::string> ic;
  std::optional<std::string> tc;
  std::optional<std::string> itc;
};

nlohmann::json to_json(const PositiveViewSet& set);

}  // namespace genview::gen
