#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "genview/backend.hpp"
#include "genview/blob_store.hpp"
#include "genview/generation.hpp"
#include "genview/manifest.hpp"

namespace genview::gen {

struct BatchOptions {
  std::vector<Mode> modes = {Mode::kIC, Mode::kTC, Mode::kITC};
  std::size_t max_in_flight = 4;
  RetryPolicy retry;
};

struct BatchStats {
  std::size_t tasks = 0;          // (sample, mode) pairs needing work this run
  std::size_t backend_calls = 0;  // including retries
  std::size_t done = 0;
  std::size_t failed = 0;
  std::size_t skipped = 0;
  std::size_t cache_hits = 0;     // done without a backend call
  std::size_t max_concurrent_calls = 0;

  std::size_t new_records() const noexcept { return done + failed + skipped; }
};

struct BatchResult {
  BatchStats stats;
  ViewManifest manifest;
  std::vector<PositiveViewSet> view_sets;
};

// Plans, generates and records every (sample, mode) whose latest manifest
// record is not done or skipped. Failed records are retried once per run.
// Records are appended in input order (sample-major, then mode) whatever
// the completion order, with at most max_in_flight concurrent backend calls.
// A corrupt manifest throws ManifestCorrupt before any work starts.
BatchResult batch_generate(const std::filesystem::path& manifest_path,
                           std::span<const SampleInput> inputs, GeneratorClient& backend,
                           const BlobStore& store, const PolicyContext& ctx,
                           const BatchOptions& opts = {});

}  // namespace genview::gen
