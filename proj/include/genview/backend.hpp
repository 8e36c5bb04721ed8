#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "genview/blob_store.hpp"
#include "genview/error.hpp"
#include "genview/generation.hpp"

namespace genview::gen {

// Generator wire format.
//   request: {mode, noise_level?, guidance_scale?, embedding?: base64 f32[],
//             caption?, seed}
//   reply:   {payload: base64, generator_id} | {error}
struct WireRequest {
  Mode mode = Mode::kIC;
  std::optional<int> noise_level;
  std::optional<int> guidance_scale;
  std::optional<math::Vector> embedding;
  std::optional<std::string> caption;
  std::uint64_t seed = 0;
};

struct WireReply {
  std::vector<std::uint8_t> payload;
  std::string generator_id;
};

WireRequest to_wire(const GenerationRequest& request);
nlohmann::json to_json(const WireRequest& request);
WireRequest wire_request_from_json(const nlohmann::json& j);
nlohmann::json to_json(const WireReply& reply);
// Throws BackendRejected for {error}, ParseError for anything malformed.
WireReply wire_reply_from_json(const nlohmann::json& j);

class GeneratorClient {
 public:
  virtual ~GeneratorClient() = default;
  // Throws TransportError (retryable) or BackendRejected (terminal).
  // Implementations must tolerate concurrent calls.
  virtual WireReply call(const WireRequest& request) = 0;
};

// Server-side helper: runs `backend` on a JSON request body and renders the
// reply (or {error}) as JSON.
nlohmann::json handle_wire_json(GeneratorClient& backend, const nlohmann::json& body);

// Payload = UTF-8 JSON of the request's conditioning ({embedding?, caption?}).
class MockEchoBackend final : public GeneratorClient {
 public:
  WireReply call(const WireRequest& request) override;
  static std::vector<std::uint8_t> expected_payload(const WireRequest& request);
};

struct ToySimulatorOptions {
  std::size_t latent_dim = 32;
  std::size_t text_dim = 32;
  int steps = 20;
};

// Runs toy_reverse_diffusion from a seeded Gaussian latent. Payload is the
// resulting vector in the binary feature container.
class ToySimulatorBackend final : public GeneratorClient {
 public:
  explicit ToySimulatorBackend(ToySimulatorOptions opts = {}) : opts_(opts) {}
  WireReply call(const WireRequest& request) override;

  static constexpr const char* kGeneratorId = "toy-sim-v1";

 private:
  ToySimulatorOptions opts_;
};

// POSTs the wire JSON to <base_url>/generate.
class HttpGeneratorClient final : public GeneratorClient {
 public:
  explicit HttpGeneratorClient(std::string base_url,
                               std::chrono::milliseconds timeout = std::chrono::seconds(30));
  WireReply call(const WireRequest& request) override;

 private:
  std::string scheme_host_port_;
  std::string path_prefix_;
  std::chrono::milliseconds timeout_;
};

std::unique_ptr<GeneratorClient> make_backend(const std::string& spec);

// POSTs the scorer wire request to <base_url>/score; reply {"raw": "..."}.
class HttpScorerTransport final : public policy::ScorerTransport {
 public:
  explicit HttpScorerTransport(std::string base_url,
                               std::chrono::milliseconds timeout = std::chrono::seconds(30));
  std::string send(const policy::ScorerRequest& request) override;

 private:
  std::string scheme_host_port_;
  std::string path_prefix_;
  std::chrono::milliseconds timeout_;
};

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds base_delay{100};
  // Uniform jitter in [0, jitter * delay) added to each backoff.
  double jitter = 0.25;
  // Injected for tests; defaults to std::this_thread::sleep_for.
  std::function<void(std::chrono::milliseconds)> sleep;
};

struct GeneratedView {
  std::string sample_id;
  Mode mode = Mode::kIC;
  GenerationParams params;
  std::string payload_ref;
  std::string generator_id;
};

struct GenerateOutcome {
  GeneratedView view;
  int attempts = 0;
};

// Failed generation; carries the attempt count for the manifest.
class GenerationFailure : public Error {
 public:
  GenerationFailure(ErrorCode code, const std::string& what, int attempts)
      : Error(code, what), attempts_(attempts) {}
  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

// Transport failures retry with backoff base * 2^k (+ jitter) up to
// max_attempts; a rejection stops immediately. Payload goes to `store`.
GenerateOutcome generate(const GenerationRequest& request, GeneratorClient& backend,
                         const BlobStore& store, const RetryPolicy& retry = {});

}  // namespace genview::gen
