#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "json.hpp"

#include "genview/math.hpp"
#include "genview/policy.hpp"
#include "genview/saliency.hpp"

namespace genview::gen {

using policy::GenerationParams;
using policy::Mode;

struct Conditioning {
  std::optional<math::Vector> image_embedding;
  std::optional<std::string> caption;
  std::optional<math::Vector> perturbed_embedding;

  bool operator==(const Conditioning&) const = default;
};

struct GenerationRequest {
  std::string sample_id;
  GenerationParams params;
  Conditioning conditioning;
  std::string cache_key;
  // Planning diagnostics; not part of the cache key.
  std::optional<double> foreground_proportion;
  std::optional<int> complexity;
};

// SHA-256 over the canonical JSON of params and conditioning.
std::string compute_cache_key(const GenerationParams& params,
                              const Conditioning& conditioning);

// Throws InvalidArgument when the conditioning does not fit the mode.
void validate(const GenerationRequest& request);

nlohmann::json to_json(const GenerationRequest& request);

struct SampleInput {
  std::string sample_id;
  std::optional<math::DenseFeatureMap> features;
  std::optional<std::string> caption;
  // Defaults to avg_pool(features) when absent.
  std::optional<math::Vector> image_embedding;
};

struct PolicyContext {
  const saliency::ForegroundDirection* direction = nullptr;  // needs alpha
  const policy::NoiseSchedule* schedule = nullptr;
  policy::ComplexityScorer* scorer = nullptr;
  std::uint64_t seed = 0;
};

// IC: saliency -> p -> noise level, embedding perturbed with that level.
// TC: caption complexity -> guidance scale. ITC: both.
// Throws InvalidArgument when the sample lacks what the mode needs.
GenerationRequest plan_generation(const SampleInput& sample, Mode mode,
                                  const PolicyContext& ctx);

bool has_inputs_for(const SampleInput& sample, Mode mode);

// eps_u + g (eps_c - eps_u)
math::Vector cfg_noise_estimate(const math::Vector& eps_uncond,
                                const math::Vector& eps_cond, double g);

struct ToyConditioning {
  std::optional<math::Vector> image;
  std::optional<math::Vector> text;
};

// Fixed seeded linear noise predictor standing in for a diffusion UNet:
//   eps_uncond(z, t) = A z + B_img c_img + (t / T) b
//   eps_cond(z, t)   = eps_uncond(z, t) + B_txt c_txt
class ToyDenoiser {
 public:
  ToyDenoiser(std::size_t latent_dim, std::size_t image_dim,
              std::size_t text_dim, std::uint64_t seed);

  std::size_t latent_dim() const noexcept { return latent_dim_; }

  math::Vector predict_uncond(const math::Vector& z, int t, int steps,
                              const std::optional<math::Vector>& image) const;
  math::Vector predict_cond(const math::Vector& z, int t, int steps,
                            const std::optional<math::Vector>& image,
                            const math::Vector& text) const;

 private:
  std::size_t latent_dim_;
  std::size_t image_dim_;
  std::size_t text_dim_;
  math::Matrix a_;
  math::Matrix b_img_;
  math::Matrix b_txt_;
  math::Vector bias_;
};

// Step size applied to the noise estimate at every reverse step.
double toy_step_size(int steps);

// Runs `steps` reverse updates z <- z - eta * eps_t, where eps_t is the CFG
// combination when text conditioning is present.
math::Vector toy_reverse_diffusion(const math::Vector& z0,
                                   const ToyConditioning& cond,
                                   const GenerationParams& params, int steps,
                                   std::size_t latent_dim = 32);

// Seeded bag-of-words text embedding used by the toy simulator.
math::Vector toy_text_embedding(std::string_view caption, std::size_t dim);

}  // namespace genview::gen
