#include "genview/generation.hpp"

#include <cmath>
#include <random>

#include "genview/digest.hpp"
#include "genview/error.hpp"

namespace genview::gen {

namespace {

nlohmann::json conditioning_json(const Conditioning& c) {
  nlohmann::json j = nlohmann::json::object();
  if (c.image_embedding) j["image_embedding"] = c.image_embedding->values();
  if (c.caption) j["caption"] = *c.caption;
  if (c.perturbed_embedding) j["perturbed_embedding"] = c.perturbed_embedding->values();
  return j;
}

math::Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double sd,
                             std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, sd);
  math::Matrix m(rows, cols);
  for (double& v : m.values()) v = gauss(rng);
  return m;
}

void accumulate(std::vector<double>& out, const math::Matrix& m,
                std::span<const double> x) {
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] += math::dot(m.row(r), x);
}

}  // namespace

std::string compute_cache_key(const GenerationParams& params,
                              const Conditioning& conditioning) {
  const nlohmann::json canonical = {{"params", policy::to_json(params)},
                                    {"conditioning", conditioning_json(conditioning)}};
  return digest::sha256_hex(canonical.dump());
}

void validate(const GenerationRequest& request) {
  policy::validate(request.params);
  const auto& c = request.conditioning;
  const bool image = c.image_embedding.has_value() && c.perturbed_embedding.has_value();
  const bool text = c.caption.has_value();
  switch (request.params.mode) {
    case Mode::kIC:
      if (!image || text) throw InvalidArgument("IC request needs image conditioning only");
      break;
    case Mode::kTC:
      if (image || !text) throw InvalidArgument("TC request needs a caption only");
      break;
    case Mode::kITC:
      if (!image || !text) throw InvalidArgument("ITC request needs image and caption");
      break;
  }
}

nlohmann::json to_json(const GenerationRequest& request) {
  nlohmann::json j = {{"sample_id", request.sample_id},
                      {"params", policy::to_json(request.params)},
                      {"conditioning", conditioning_json(request.conditioning)},
                      {"cache_key", request.cache_key}};
  if (request.foreground_proportion) j["foreground_proportion"] = *request.foreground_proportion;
  if (request.complexity) j["complexity"] = *request.complexity;
  return j;
}

bool has_inputs_for(const SampleInput& sample, Mode mode) {
  const bool image = sample.features.has_value();
  const bool text = sample.caption.has_value() && !sample.caption->empty();
  switch (mode) {
    case Mode::kIC: return image;
    case Mode::kTC: return text;
    case Mode::kITC: return image && text;
  }
  return false;
}

GenerationRequest plan_generation(const SampleInput& sample, Mode mode,
                                  const PolicyContext& ctx) {
  if (!has_inputs_for(sample, mode)) {
    throw InvalidArgument("sample '" + sample.sample_id + "' lacks conditioning for mode " +
                          policy::to_string(mode));
  }
  GenerationRequest req;
  req.sample_id = sample.sample_id;
  req.params.mode = mode;
  req.params.seed = digest::derive_seed(
      ctx.seed, sample.sample_id + "/" + policy::to_string(mode));

  if (mode != Mode::kTC) {
    if (ctx.direction == nullptr || ctx.schedule == nullptr) {
      throw InvalidArgument("plan_generation: image modes need a direction and schedule");
    }
    const auto sal = saliency::analyze(*sample.features, *ctx.direction);
    req.foreground_proportion = sal.foreground_proportion;
    const int level = policy::noise_level(sal.foreground_proportion);
    req.params.noise_level = level;
    math::Vector embedding =
        sample.image_embedding ? *sample.image_embedding : math::avg_pool(*sample.features);
    std::mt19937_64 rng(req.params.seed);
    req.conditioning.perturbed_embedding =
        policy::perturb_embedding(embedding, level, *ctx.schedule, rng);
    req.conditioning.image_embedding = std::move(embedding);
  }
  if (mode != Mode::kIC) {
    if (ctx.scorer == nullptr) {
      throw InvalidArgument("plan_generation: text modes need a complexity scorer");
    }
    const auto score = policy::score_caption_complexity(*sample.caption, *ctx.scorer);
    req.complexity = score.value();
    req.params.guidance_scale = policy::guidance_scale(score);
    req.conditioning.caption = *sample.caption;
  }
  req.cache_key = compute_cache_key(req.params, req.conditioning);
  return req;
}

math::Vector cfg_noise_estimate(const math::Vector& eps_uncond,
                                const math::Vector& eps_cond, double g) {
  if (eps_uncond.dim() != eps_cond.dim()) {
    throw ShapeMismatch("cfg_noise_estimate: dimension mismatch");
  }
  math::Vector out(eps_uncond.dim());
  for (std::size_t i = 0; i < out.dim(); ++i) {
    out[i] = eps_uncond[i] + g * (eps_cond[i] - eps_uncond[i]);
  }
  return out;
}

ToyDenoiser::ToyDenoiser(std::size_t latent_dim, std::size_t image_dim,
                         std::size_t text_dim, std::uint64_t seed)
    : latent_dim_(latent_dim), image_dim_(image_dim), text_dim_(text_dim) {
  if (latent_dim == 0) throw InvalidArgument("ToyDenoiser: latent_dim must be positive");
  std::mt19937_64 rng(seed);
  const double d = static_cast<double>(latent_dim);
  a_ = gaussian_matrix(latent_dim, latent_dim, 1.0 / std::sqrt(d), rng);
  b_img_ = gaussian_matrix(latent_dim, image_dim, image_dim ? 1.0 / std::sqrt(double(image_dim)) : 0.0, rng);
  std::normal_distribution<double> gauss(0.0, 0.1);
  std::vector<double> bias(latent_dim);
  for (double& b : bias) b = gauss(rng);
  bias_ = math::Vector(std::move(bias));
  // Drawn last so adding text conditioning leaves the unconditional path alone.
  b_txt_ = gaussian_matrix(latent_dim, text_dim, text_dim ? 1.0 / std::sqrt(double(text_dim)) : 0.0, rng);
}

math::Vector ToyDenoiser::predict_uncond(const math::Vector& z, int t, int steps,
                                         const std::optional<math::Vector>& image) const {
  if (z.dim() != latent_dim_) throw ShapeMismatch("ToyDenoiser: latent dimension");
  std::vector<double> eps(latent_dim_, 0.0);
  accumulate(eps, a_, z.span());
  if (image) {
    if (image->dim() != image_dim_) throw ShapeMismatch("ToyDenoiser: image dimension");
    accumulate(eps, b_img_, image->span());
  }
  const double tf = static_cast<double>(t) / static_cast<double>(steps);
  for (std::size_t i = 0; i < latent_dim_; ++i) eps[i] += tf * bias_[i];
  return math::Vector(std::move(eps));
}

math::Vector ToyDenoiser::predict_cond(const math::Vector& z, int t, int steps,
                                       const std::optional<math::Vector>& image,
                                       const math::Vector& text) const {
  if (text.dim() != text_dim_) throw ShapeMismatch("ToyDenoiser: text dimension");
  std::vector<double> eps = predict_uncond(z, t, steps, image).values();
  accumulate(eps, b_txt_, text.span());
  return math::Vector(std::move(eps));
}

double toy_step_size(int steps) { return 1.0 / static_cast<double>(steps); }

math::Vector toy_reverse_diffusion(const math::Vector& z0, const ToyConditioning& cond,
                                   const GenerationParams& params, int steps,
                                   std::size_t latent_dim) {
  if (steps < 1) throw InvalidArgument("toy_reverse_diffusion: steps must be >= 1");
  if (z0.dim() != latent_dim) throw ShapeMismatch("toy_reverse_diffusion: z0 dimension");
  const ToyDenoiser denoiser(latent_dim, cond.image ? cond.image->dim() : 0,
                             cond.text ? cond.text->dim() : 0, params.seed);
  const double g = params.guidance_scale ? static_cast<double>(*params.guidance_scale) : 0.0;
  const double eta = toy_step_size(steps);
  math::Vector z = z0;
  for (int t = steps; t >= 1; --t) {
    math::Vector eps = denoiser.predict_uncond(z, t, steps, cond.image);
    if (cond.text) {
      eps = cfg_noise_estimate(eps, denoiser.predict_cond(z, t, steps, cond.image, *cond.text), g);
    }
    for (std::size_t i = 0; i < z.dim(); ++i) z[i] -= eta * eps[i];
  }
  return z;
}

math::Vector toy_text_embedding(std::string_view caption, std::size_t dim) {
  std::vector<double> acc(dim, 0.0);
  for (const auto& word : policy::tokenize(caption)) {
    std::mt19937_64 rng(digest::derive_seed(0x7e47, word));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (double& a : acc) a += gauss(rng);
  }
  const double n = math::norm(acc);
  if (n > 0.0) {
    for (double& a : acc) a /= n;
  }
  return math::Vector(std::move(acc));
}

}  // namespace genview::gen
