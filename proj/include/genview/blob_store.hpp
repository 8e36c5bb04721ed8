#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace genview::gen {

// Content-addressed store on the local filesystem: blob id = SHA-256 of the
// bytes, stored at root/<id[0:2]>/<id>. Writes go through a temporary file
// and rename, so readers never see partial blobs.
class BlobStore {
 public:
  explicit BlobStore(std::filesystem::path root);

  const std::filesystem::path& root() const noexcept { return root_; }

  std::string put(const std::vector<std::uint8_t>& bytes) const;
  std::vector<std::uint8_t> get(const std::string& id) const;
  bool contains(const std::string& id) const;
  std::filesystem::path path_for(const std::string& id) const;

  // GENVIEW_BLOB_DIR when set, otherwise `fallback`.
  static std::filesystem::path resolve_root(const std::filesystem::path& fallback);

 private:
  std::filesystem::path root_;
};

}  // namespace genview::gen
