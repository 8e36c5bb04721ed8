#include "genview/batch.hpp"

#include <algorithm>
#include <exception>
#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>

#include "genview/error.hpp"
#include "genview/feature_io.hpp"

namespace genview::gen {

namespace {

// Counts calls and peak concurrency on the way to the real backend.
class CountingClient final : public GeneratorClient {
 public:
  explicit CountingClient(GeneratorClient& inner) : inner_(inner) {}

  WireReply call(const WireRequest& request) override {
    calls_.fetch_add(1);
    const auto now = in_flight_.fetch_add(1) + 1;
    auto peak = peak_.load();
    while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
    }
    struct Leave {
      std::atomic<std::size_t>& n;
      ~Leave() { n.fetch_sub(1); }
    } leave{in_flight_};
    return inner_.call(request);
  }

  std::size_t calls() const { return calls_.load(); }
  std::size_t peak() const { return peak_.load(); }

 private:
  GeneratorClient& inner_;
  std::atomic<std::size_t> calls_{0};
  std::atomic<std::size_t> in_flight_{0};
  std::atomic<std::size_t> peak_{0};
};

struct Task {
  const SampleInput* sample = nullptr;
  Mode mode = Mode::kIC;
  std::optional<GenerationRequest> request;
  std::optional<ManifestRecord> record;  // final outcome
};

template <typename Fn>
void run_parallel(std::size_t count, std::size_t workers, Fn&& fn) {
  if (count == 0) return;
  workers = std::max<std::size_t>(1, std::min(workers, count));
  std::atomic<std::size_t> next{0};
  std::mutex error_mu;
  std::exception_ptr first_error;
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!first_error) first_error = std::current_exception();
            next.store(count);
          }
        }
      });
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

ManifestRecord failed_record(const Task& task, const std::string& error, int attempts) {
  ManifestRecord r;
  r.sample_id = task.sample->sample_id;
  r.mode = task.mode;
  if (task.request) {
    r.params = task.request->params;
    r.cache_key = task.request->cache_key;
  }
  r.status = RecordStatus::kFailed;
  r.error = error;
  r.attempts = attempts;
  return r;
}

// Hands records to the writer strictly in task order.
class OrderedAppender {
 public:
  OrderedAppender(const std::filesystem::path& path, std::uintmax_t valid_bytes,
                  std::vector<Task>& tasks)
      : path_(path), valid_bytes_(valid_bytes), tasks_(tasks) {}

  void complete(std::size_t index, ManifestRecord record) {
    std::lock_guard lock(mu_);
    tasks_[index].record = std::move(record);
    while (next_ < tasks_.size() && tasks_[next_].record) {
      if (!writer_) writer_ = std::make_unique<ManifestWriter>(path_, valid_bytes_);
      writer_->append(*tasks_[next_].record);
      ++next_;
    }
  }

 private:
  std::mutex mu_;
  std::filesystem::path path_;
  std::uintmax_t valid_bytes_;
  std::vector<Task>& tasks_;
  std::size_t next_ = 0;
  std::unique_ptr<ManifestWriter> writer_;
};

}  // namespace

BatchResult batch_generate(const std::filesystem::path& manifest_path,
                           std::span<const SampleInput> inputs, GeneratorClient& backend,
                           const BlobStore& store, const PolicyContext& ctx,
                           const BatchOptions& opts) {
  if (opts.max_in_flight == 0) throw InvalidArgument("batch_generate: max_in_flight must be >= 1");
  ViewManifest manifest = ViewManifest::load(manifest_path);

  std::vector<Task> tasks;
  for (const auto& sample : inputs) {
    for (Mode mode : opts.modes) {
      const auto* latest = manifest.find(sample.sample_id, mode);
      if (latest != nullptr && latest->status != RecordStatus::kFailed) continue;
      tasks.push_back(Task{&sample, mode, std::nullopt, std::nullopt});
    }
  }

  BatchResult result;
  result.stats.tasks = tasks.size();

  // Phase 1: planning (may consult the complexity scorer).
  std::vector<std::optional<ManifestRecord>> early(tasks.size());
  run_parallel(tasks.size(), opts.max_in_flight, [&](std::size_t i) {
    Task& t = tasks[i];
    if (!has_inputs_for(*t.sample, t.mode)) {
      ManifestRecord r;
      r.sample_id = t.sample->sample_id;
      r.mode = t.mode;
      r.status = RecordStatus::kSkipped;
      r.error = std::string("missing conditioning for mode ") + policy::to_string(t.mode);
      early[i] = std::move(r);
      return;
    }
    try {
      t.request = plan_generation(*t.sample, t.mode, ctx);
    } catch (const Error& e) {
      early[i] = failed_record(t, std::string("planning: ") + e.what(), 0);
    }
  });

  // Phase 2: one backend call per distinct cache key not already done.
  std::map<std::string, std::vector<std::size_t>> by_key;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (!early[i]) by_key[tasks[i].request->cache_key].push_back(i);
  }
  std::vector<std::pair<std::string, std::vector<std::size_t>>> groups(by_key.begin(), by_key.end());
  std::sort(groups.begin(), groups.end(),
            [](const auto& a, const auto& b) { return a.second.front() < b.second.front(); });

  OrderedAppender appender(manifest_path, manifest.valid_bytes(), tasks);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (early[i]) appender.complete(i, std::move(*early[i]));
  }

  CountingClient counted(backend);
  std::atomic<std::size_t> cache_hits{0};
  run_parallel(groups.size(), opts.max_in_flight, [&](std::size_t g) {
    const auto& [key, members] = groups[g];
    std::optional<std::string> payload = manifest.payload_for_cache_key(key);
    std::string generator_id = "cache";
    int attempts = 0;
    std::optional<std::string> error;
    if (payload) {
      cache_hits.fetch_add(members.size());
    } else {
      try {
        auto outcome = generate(*tasks[members.front()].request, counted, store, opts.retry);
        payload = outcome.view.payload_ref;
        generator_id = outcome.view.generator_id;
        attempts = outcome.attempts;
        if (members.size() > 1) cache_hits.fetch_add(members.size() - 1);
      } catch (const GenerationFailure& e) {
        error = std::string(to_string(e.code())) + ": " + e.what();
        attempts = e.attempts();
      } catch (const Error& e) {
        error = std::string(to_string(e.code())) + ": " + e.what();
      }
    }
    for (std::size_t idx : members) {
      const Task& t = tasks[idx];
      if (error) {
        appender.complete(idx, failed_record(t, *error, attempts));
        continue;
      }
      ManifestRecord r;
      r.sample_id = t.sample->sample_id;
      r.mode = t.mode;
      r.params = t.request->params;
      r.cache_key = key;
      r.status = RecordStatus::kDone;
      r.payload_ref = payload;
      r.generator_id = generator_id;
      r.attempts = idx == members.front() ? attempts : 0;
      appender.complete(idx, std::move(r));
    }
  });

  for (auto& t : tasks) {
    manifest.apply(*t.record);
    switch (t.record->status) {
      case RecordStatus::kDone: ++result.stats.done; break;
      case RecordStatus::kFailed: ++result.stats.failed; break;
      case RecordStatus::kSkipped: ++result.stats.skipped; break;
    }
  }
  result.stats.backend_calls = counted.calls();
  result.stats.cache_hits = cache_hits.load();
  result.stats.max_concurrent_calls = counted.peak();

  for (const auto& sample : inputs) {
    if (!sample.features) continue;
    PositiveViewSet set;
    set.sample_id = sample.sample_id;
    set.ori = store.put(io::encode_feature_map(*sample.features));
    const auto ref = [&](Mode m) -> std::optional<std::string> {
      const auto* r = manifest.find(sample.sample_id, m);
      if (r == nullptr || r->status != RecordStatus::kDone) return std::nullopt;
      return r->payload_ref;
    };
    set.ic = ref(Mode::kIC);
    set.tc = ref(Mode::kTC);
    set.itc = ref(Mode::kITC);
    result.view_sets.push_back(std::move(set));
  }
  result.manifest = std::move(manifest);
  return result;
}

}  // namespace genview::gen
