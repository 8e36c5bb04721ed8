#include "genview/manifest.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include "genview/error.hpp"
#include "genview/feature_io.hpp"

namespace genview::gen {

const char* to_string(RecordStatus status) {
  switch (status) {
    case RecordStatus::kDone: return "done";
    case RecordStatus::kFailed: return "failed";
    case RecordStatus::kSkipped: return "skipped";
  }
  return "?";
}

RecordStatus status_from_string(const std::string& text) {
  if (text == "done") return RecordStatus::kDone;
  if (text == "failed") return RecordStatus::kFailed;
  if (text == "skipped") return RecordStatus::kSkipped;
  throw ParseError("manifest: unknown status '" + text + "'", text);
}

nlohmann::json to_json(const ManifestRecord& r) {
  nlohmann::json j = {{"sample_id", r.sample_id}, {"mode", policy::to_string(r.mode)}};
  j["params"] = r.params ? policy::to_json(*r.params) : nlohmann::json(nullptr);
  j["cache_key"] = r.cache_key;
  j["status"] = to_string(r.status);
  if (r.payload_ref) j["payload_ref"] = *r.payload_ref;
  if (r.generator_id) j["generator_id"] = *r.generator_id;
  if (r.error) j["error"] = *r.error;
  j["attempts"] = r.attempts;
  return j;
}

ManifestRecord record_from_json(const nlohmann::json& j) {
  try {
    ManifestRecord r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.mode = policy::mode_from_string(j.at("mode").get<std::string>());
    if (!j.at("params").is_null()) r.params = policy::params_from_json(j.at("params"));
    r.cache_key = j.at("cache_key").get<std::string>();
    r.status = status_from_string(j.at("status").get<std::string>());
    if (j.contains("payload_ref")) r.payload_ref = j.at("payload_ref").get<std::string>();
    if (j.contains("generator_id")) r.generator_id = j.at("generator_id").get<std::string>();
    if (j.contains("error")) r.error = j.at("error").get<std::string>();
    r.attempts = j.value("attempts", 0);
    if (r.status == RecordStatus::kDone && !r.payload_ref) {
      throw ParseError("manifest: done record without payload_ref", j.dump());
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("manifest record: ") + e.what(), j.dump());
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("manifest record: ") + e.what(), j.dump());
  }
}

ViewManifest ViewManifest::load(const std::filesystem::path& path) {
  ViewManifest m;
  if (!std::filesystem::exists(path)) return m;
  const std::string text = io::read_text(path);
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    ++line_no;
    const auto nl = text.find('\n', pos);
    const bool terminated = nl != std::string::npos;
    const std::string line = text.substr(pos, terminated ? nl - pos : std::string::npos);
    const std::size_t next = terminated ? nl + 1 : text.size();
    if (line.empty()) {
      if (!terminated) break;
      throw ManifestCorrupt(path.string() + ":" + std::to_string(line_no) + ": empty line");
    }
    try {
      m.apply(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      if (!terminated) break;  // torn tail from an interrupted append
      throw ManifestCorrupt(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    pos = next;
    m.valid_bytes_ = pos;
  }
  return m;
}

void ViewManifest::apply(const ManifestRecord& record) {
  history_.push_back(record);
  latest_[{record.sample_id, record.mode}] = record;
  if (record.status == RecordStatus::kDone && record.payload_ref) {
    done_by_cache_key_.emplace(record.cache_key, *record.payload_ref);
  }
}

const ManifestRecord* ViewManifest::find(const std::string& sample_id, Mode mode) const {
  const auto it = latest_.find({sample_id, mode});
  return it == latest_.end() ? nullptr : &it->second;
}

std::optional<std::string> ViewManifest::payload_for_cache_key(const std::string& key) const {
  const auto it = done_by_cache_key_.find(key);
  if (it == done_by_cache_key_.end()) return std::nullopt;
  return it->second;
}

std::size_t ViewManifest::count(RecordStatus status) const {
  std::size_t n = 0;
  for (const auto& [key, r] : latest_) n += r.status == status ? 1 : 0;
  return n;
}

ManifestWriter::ManifestWriter(const std::filesystem::path& path, std::uintmax_t valid_bytes)
    : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) throw IoError("manifest: cannot open " + path.string() + ": " + std::strerror(errno));
  const auto size = std::filesystem::file_size(path);
  if (size > valid_bytes) {
    if (::ftruncate(fd_, static_cast<off_t>(valid_bytes)) != 0) {
      ::close(fd_);
      throw IoError("manifest: cannot truncate torn tail of " + path.string());
    }
  }
  // A complete final record may still lack its newline.
  if (valid_bytes > 0) {
    std::ifstream in(path, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(valid_bytes) - 1);
    char last = '\n';
    in.get(last);
    if (last != '\n' && ::write(fd_, "\n", 1) != 1) {
      ::close(fd_);
      throw IoError("manifest: cannot terminate last record of " + path.string());
    }
  }
}

ManifestWriter::~ManifestWriter() {
  if (fd_ >= 0) ::close(fd_);
}

void ManifestWriter::append(const ManifestRecord& record) {
  const std::string line = to_json(record).dump() + "\n";
  std::lock_guard lock(mu_);
  std::size_t written = 0;
  while (written < line.size()) {
    const auto n = ::write(fd_, line.data() + written, line.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("manifest: write failed: " + std::string(std::strerror(errno)));
    }
    written += static_cast<std::size_t>(n);
  }
  if (::fsync(fd_) != 0) throw IoError("manifest: fsync failed");
}

nlohmann::json to_json(const PositiveViewSet& set) {
  nlohmann::json views = {{"ori", set.ori}};
  if (set.ic) views["ic"] = *set.ic;
  if (set.tc) views["tc"] = *set.tc;
  if (set.itc) views["itc"] = *set.itc;
  return {{"sample_id", set.sample_id}, {"views", views}};
}

}  // namespace genview::gen
