#include "genview/backend.hpp"

#include <random>
#include <thread>
#include <tuple>

#include "httplib.h"

#include "genview/digest.hpp"
#include "genview/error.hpp"
#include "genview/feature_io.hpp"

namespace genview::gen {

WireRequest to_wire(const GenerationRequest& request) {
  validate(request);
  WireRequest w;
  w.mode = request.params.mode;
  w.noise_level = request.params.noise_level;
  w.guidance_scale = request.params.guidance_scale;
  w.embedding = request.conditioning.perturbed_embedding;
  w.caption = request.conditioning.caption;
  w.seed = request.params.seed;
  return w;
}

nlohmann::json to_json(const WireRequest& request) {
  nlohmann::json j = {{"mode", policy::to_string(request.mode)}};
  if (request.noise_level) j["noise_level"] = *request.noise_level;
  if (request.guidance_scale) j["guidance_scale"] = *request.guidance_scale;
  if (request.embedding) j["embedding"] = digest::base64_encode(io::pack_f32(*request.embedding));
  if (request.caption) j["caption"] = *request.caption;
  j["seed"] = request.seed;
  return j;
}

WireRequest wire_request_from_json(const nlohmann::json& j) {
  try {
    WireRequest w;
    w.mode = policy::mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("noise_level")) w.noise_level = j.at("noise_level").get<int>();
    if (j.contains("guidance_scale")) w.guidance_scale = j.at("guidance_scale").get<int>();
    if (j.contains("embedding")) {
      w.embedding = io::unpack_f32(digest::base64_decode(j.at("embedding").get<std::string>()));
    }
    if (j.contains("caption")) w.caption = j.at("caption").get<std::string>();
    w.seed = j.at("seed").get<std::uint64_t>();
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("wire request: ") + e.what(), j.dump());
  }
}

nlohmann::json to_json(const WireReply& reply) {
  return {{"payload", digest::base64_encode(reply.payload)},
          {"generator_id", reply.generator_id}};
}

WireReply wire_reply_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("wire reply: not an object", j.dump());
  if (j.contains("error")) {
    const auto& e = j.at("error");
    throw BackendRejected(e.is_string() ? e.get<std::string>() : e.dump());
  }
  try {
    WireReply r;
    r.payload = digest::base64_decode(j.at("payload").get<std::string>());
    r.generator_id = j.at("generator_id").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("wire reply: ") + e.what(), j.dump());
  }
}

nlohmann::json handle_wire_json(GeneratorClient& backend, const nlohmann::json& body) {
  try {
    return to_json(backend.call(wire_request_from_json(body)));
  } catch (const Error& e) {
    return {{"error", e.what()}};
  }
}

std::vector<std::uint8_t> MockEchoBackend::expected_payload(const WireRequest& request) {
  nlohmann::json cond = nlohmann::json::object();
  const auto full = to_json(request);
  if (full.contains("embedding")) cond["embedding"] = full["embedding"];
  if (full.contains("caption")) cond["caption"] = full["caption"];
  const std::string text = cond.dump();
  return {text.begin(), text.end()};
}

WireReply MockEchoBackend::call(const WireRequest& request) {
  return {expected_payload(request), "mock-echo"};
}

WireReply ToySimulatorBackend::call(const WireRequest& request) {
  GenerationParams params;
  params.mode = request.mode;
  params.noise_level = request.noise_level;
  params.guidance_scale = request.guidance_scale;
  params.seed = request.seed;
  try {
    policy::validate(params);
  } catch (const InvalidArgument& e) {
    throw BackendRejected(std::string("toy simulator: ") + e.what());
  }
  ToyConditioning cond;
  if (request.mode != Mode::kTC) {
    if (!request.embedding) throw BackendRejected("toy simulator: image mode without embedding");
    cond.image = request.embedding;
  }
  if (request.mode != Mode::kIC) {
    if (!request.caption) throw BackendRejected("toy simulator: text mode without caption");
    cond.text = toy_text_embedding(*request.caption, opts_.text_dim);
  }
  std::mt19937_64 rng(request.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  math::Vector z0(opts_.latent_dim);
  for (std::size_t i = 0; i < z0.dim(); ++i) z0[i] = gauss(rng);
  const auto out = toy_reverse_diffusion(z0, cond, params, opts_.steps, opts_.latent_dim);
  return {io::encode_vector(out), kGeneratorId};
}

namespace {

// Splits "scheme://host:port/prefix" into origin and a prefix without a
// trailing slash.
std::pair<std::string, std::string> split_url(const std::string& base_url, const char* who) {
  const auto scheme_end = base_url.find("://");
  if (scheme_end == std::string::npos) {
    throw InvalidArgument(std::string(who) + ": url needs a scheme: " + base_url);
  }
  const auto path_start = base_url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {base_url, ""};
  std::string prefix = base_url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {base_url.substr(0, path_start), prefix};
}

httplib::Result post_json(const std::string& origin, const std::string& path,
                          const std::string& body, std::chrono::milliseconds timeout) {
  httplib::Client client(origin);
  const auto secs = timeout.count() / 1000;
  const auto usecs = (timeout.count() % 1000) * 1000;
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  return client.Post(path, body, "application/json");
}

}  // namespace

HttpGeneratorClient::HttpGeneratorClient(std::string base_url,
                                         std::chrono::milliseconds timeout)
    : timeout_(timeout) {
  std::tie(scheme_host_port_, path_prefix_) = split_url(base_url, "http backend");
}

WireReply HttpGeneratorClient::call(const WireRequest& request) {
  const auto res = post_json(scheme_host_port_, path_prefix_ + "/generate",
                             to_json(request).dump(), timeout_);
  if (!res) {
    throw TransportError("http backend: " + httplib::to_string(res.error()));
  }
  if (res->status >= 500) {
    throw TransportError("http backend: status " + std::to_string(res->status));
  }
  nlohmann::json body;
  try {
    body = nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::parse_error&) {
    if (res->status >= 400) {
      throw BackendRejected("http backend: status " + std::to_string(res->status));
    }
    throw ParseError("http backend: reply is not JSON", res->body);
  }
  if (res->status >= 400 && !body.contains("error")) {
    throw BackendRejected("http backend: status " + std::to_string(res->status));
  }
  return wire_reply_from_json(body);
}

HttpScorerTransport::HttpScorerTransport(std::string base_url,
                                         std::chrono::milliseconds timeout)
    : timeout_(timeout) {
  std::tie(scheme_host_port_, path_prefix_) = split_url(base_url, "http scorer");
}

std::string HttpScorerTransport::send(const policy::ScorerRequest& request) {
  const auto res = post_json(scheme_host_port_, path_prefix_ + "/score",
                             policy::to_json(request).dump(), timeout_);
  if (!res) throw TransportError("http scorer: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw TransportError("http scorer: status " + std::to_string(res->status));
  }
  try {
    return nlohmann::json::parse(res->body).at("raw").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError("http scorer: reply lacks a string 'raw' field", res->body);
  }
}

std::unique_ptr<GeneratorClient> make_backend(const std::string& spec) {
  if (spec == "mock") return std::make_unique<MockEchoBackend>();
  if (spec == "toy") return std::make_unique<ToySimulatorBackend>();
  if (spec.rfind("http://", 0) == 0 || spec.rfind("https://", 0) == 0) {
    return std::make_unique<HttpGeneratorClient>(spec);
  }
  throw InvalidArgument("unknown backend '" + spec + "' (expected mock, toy or a URL)");
}

GenerateOutcome generate(const GenerationRequest& request, GeneratorClient& backend,
                         const BlobStore& store, const RetryPolicy& retry) {
  const WireRequest wire = to_wire(request);
  const int max_attempts = std::max(1, retry.max_attempts);
  std::mt19937_64 jitter_rng(digest::derive_seed(0, request.cache_key));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::string last_error;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    try {
      WireReply reply = backend.call(wire);
      GenerateOutcome out;
      out.attempts = attempt;
      out.view.sample_id = request.sample_id;
      out.view.mode = request.params.mode;
      out.view.params = request.params;
      out.view.payload_ref = store.put(reply.payload);
      out.view.generator_id = std::move(reply.generator_id);
      return out;
    } catch (const TransportError& e) {
      last_error = e.what();
      if (attempt == max_attempts) break;
      const double base = static_cast<double>(retry.base_delay.count()) * double(1 << (attempt - 1));
      const auto delay = std::chrono::milliseconds(
          static_cast<long long>(base * (1.0 + retry.jitter * unit(jitter_rng))));
      if (retry.sleep) {
        retry.sleep(delay);
      } else {
        std::this_thread::sleep_for(delay);
      }
    } catch (const BackendRejected& e) {
      throw GenerationFailure(ErrorCode::kBackendRejected, e.what(), attempt);
    } catch (const ParseError& e) {
      throw GenerationFailure(ErrorCode::kParse, e.what(), attempt);
    }
  }
  throw GenerationFailure(ErrorCode::kTransport, last_error, max_attempts);
}

}  // namespace genview::gen
