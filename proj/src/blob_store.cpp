#include "genview/blob_store.hpp"

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "genview/digest.hpp"
#include "genview/error.hpp"
#include "genview/feature_io.hpp"

namespace genview::gen {

namespace fs = std::filesystem;

BlobStore::BlobStore(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  fs::create_directories(root_, ec);
  if (ec) throw IoError("blob store: cannot create " + root_.string() + ": " + ec.message());
}

fs::path BlobStore::path_for(const std::string& id) const {
  if (id.size() != 64 || id.find_first_not_of("0123456789abcdef") != std::string::npos) {
    throw InvalidArgument("blob store: malformed blob id '" + id + "'");
  }
  return root_ / id.substr(0, 2) / id;
}

std::string BlobStore::put(const std::vector<std::uint8_t>& bytes) const {
  const std::string id = digest::sha256_hex(bytes);
  const fs::path target = path_for(id);
  if (fs::exists(target)) return id;
  fs::create_directories(target.parent_path());
  static std::atomic<std::uint64_t> counter{0};
  const auto tid = std::hash<std::thread::id>{}(std::this_thread::get_id());
  const fs::path tmp = target.string() + ".tmp." + std::to_string(tid) + "." +
                       std::to_string(counter.fetch_add(1));
  io::write_file(tmp, bytes);
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    if (!fs::exists(target)) throw IoError("blob store: rename failed: " + ec.message());
  }
  return id;
}

std::vector<std::uint8_t> BlobStore::get(const std::string& id) const {
  const fs::path p = path_for(id);
  if (!fs::exists(p)) throw IoError("blob store: missing blob " + id);
  return io::read_file(p);
}

bool BlobStore::contains(const std::string& id) const { return fs::exists(path_for(id)); }

fs::path BlobStore::resolve_root(const fs::path& fallback) {
  if (const char* env = std::getenv("GENVIEW_BLOB_DIR"); env != nullptr && *env != '\0') {
    return fs::path(env);
  }
  return fallback;
}

}  // namespace genview::gen
