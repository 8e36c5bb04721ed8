#include "genview/losses.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "genview/error.hpp"

namespace genview::losses {

namespace {

using math::Matrix;
using math::Vector;

void require_same_dim(const Vector& a, const Vector& b, const char* what) {
  if (a.dim() != b.dim()) {
    throw ShapeMismatch(std::string(what) + ": dimension " + std::to_string(a.dim()) +
                        " vs " + std::to_string(b.dim()));
  }
}

void require_tau(double tau, const char* what) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw InvalidArgument(std::string(what) + ": temperature must be > 0");
  }
}

// d cos(a, b) / d a.
Vector cosine_grad(std::span<const double> a, std::span<const double> b, double cos) {
  const double na = math::norm(a);
  const double nb = math::norm(b);
  Vector g(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = (b[i] / nb - cos * a[i] / na) / na;
  return g;
}

// Shared body of i2t/t2i: anchor against candidates with cosine logits.
LossValue cross_modal(const Vector& anchor, std::span<const Vector> candidates,
                      std::size_t positive, double tau, const char* what) {
  require_tau(tau, what);
  if (candidates.empty()) throw InvalidArgument(std::string(what) + ": no candidates");
  if (positive >= candidates.size()) {
    throw InvalidArgument(std::string(what) + ": positive index out of range");
  }
  std::vector<double> cos(candidates.size());
  std::vector<double> logits(candidates.size());
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    require_same_dim(anchor, candidates[j], what);
    cos[j] = math::cosine_similarity(anchor, candidates[j]);
    logits[j] = cos[j] / tau;
  }
  const auto p = math::softmax(logits);
  LossValue out;
  out.value = math::log_sum_exp(logits) - logits[positive];
  Vector g_anchor(anchor.dim());
  out.grads.emplace_back();
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    const double coeff = (p[j] - (j == positive ? 1.0 : 0.0)) / tau;
    const auto ga = cosine_grad(anchor.span(), candidates[j].span(), cos[j]);
    for (std::size_t i = 0; i < anchor.dim(); ++i) g_anchor[i] += coeff * ga[i];
    out.grads.push_back(
        math::scale(cosine_grad(candidates[j].span(), anchor.span(), cos[j]), coeff));
  }
  out.grads[0] = std::move(g_anchor);
  return out;
}

Vector random_vector(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(dim);
  for (auto& x : v) x = normal(rng) / std::sqrt(static_cast<double>(dim));
  return v;
}

}  // namespace

LossValue nce_loss(const Vector& v1, const Vector& v2, std::span<const Vector> negatives,
                   double tau) {
  require_tau(tau, "nce_loss");
  require_same_dim(v1, v2, "nce_loss");
  std::vector<const Vector*> cands{&v2};
  for (const auto& n : negatives) {
    require_same_dim(v1, n, "nce_loss");
    cands.push_back(&n);
  }
  std::vector<double> logits(cands.size());
  for (std::size_t j = 0; j < cands.size(); ++j) logits[j] = math::dot(v1.span(), cands[j]->span()) / tau;
  const auto p = math::softmax(logits);

  LossValue out;
  out.value = math::log_sum_exp(logits) - logits[0];
  Vector g1(v1.dim());
  for (std::size_t j = 0; j < cands.size(); ++j) {
    const double coeff = (p[j] - (j == 0 ? 1.0 : 0.0)) / tau;
    for (std::size_t i = 0; i < v1.dim(); ++i) g1[i] += coeff * (*cands[j])[i];
  }
  out.grads.push_back(std::move(g1));
  for (std::size_t j = 0; j < cands.size(); ++j) {
    out.grads.push_back(math::scale(v1, (p[j] - (j == 0 ? 1.0 : 0.0)) / tau));
  }
  return out;
}

LossValue cosine_loss(const Vector& p1, const Vector& v2) {
  require_same_dim(p1, v2, "cosine_loss");
  const double c = math::cosine_similarity(p1, v2);
  LossValue out;
  out.value = -c;
  out.grads.push_back(math::scale(cosine_grad(p1.span(), v2.span(), c), -1.0));
  out.grads.emplace_back(v2.dim());
  return out;
}

Assignment sinkhorn_knopp(const Matrix& scores, double epsilon, int iters) {
  const std::size_t n = scores.rows();
  const std::size_t k = scores.cols();
  if (n == 0 || k == 0) throw InvalidArgument("sinkhorn_knopp: empty score matrix");
  if (!(epsilon > 0.0)) throw InvalidArgument("sinkhorn_knopp: epsilon must be > 0");
  if (iters < 1) throw InvalidArgument("sinkhorn_knopp: iters must be >= 1");
  if (!math::all_finite(scores.values())) throw InvalidArgument("sinkhorn_knopp: non-finite scores");

  // P_ij = exp(S_ij / eps + a_i + b_j); a and b absorb the normalisations.
  Matrix log_kernel(n, k);
  for (std::size_t i = 0; i < n * k; ++i) log_kernel.values()[i] = scores.values()[i] / epsilon;
  std::vector<double> a(n, 0.0);
  std::vector<double> b(k, 0.0);
  const double log_row_target = -std::log(static_cast<double>(n));
  const double log_col_target = -std::log(static_cast<double>(k));
  std::vector<double> buf;
  for (int it = 0; it < iters; ++it) {
    buf.resize(n);
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t i = 0; i < n; ++i) buf[i] = log_kernel(i, j) + a[i];
      b[j] = log_col_target - math::log_sum_exp(buf);
    }
    buf.resize(k);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) buf[j] = log_kernel(i, j) + b[j];
      a[i] = log_row_target - math::log_sum_exp(buf);
    }
  }
  Assignment out{Matrix(n, k), iters};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) out.matrix(i, j) = std::exp(log_kernel(i, j) + a[i] + b[j]);
  }
  return out;
}

double marginal_error(const Assignment& a) {
  const auto& m = a.matrix;
  const double row_t = 1.0 / static_cast<double>(m.rows());
  const double col_t = 1.0 / static_cast<double>(m.cols());
  double err = 0.0;
  std::vector<double> cols(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      r += m(i, j);
      cols[j] += m(i, j);
    }
    err = std::max(err, std::abs(r - row_t));
  }
  for (double c : cols) err = std::max(err, std::abs(c - col_t));
  return err;
}

double marginal_tv(const Assignment& a) {
  const auto& m = a.matrix;
  const double row_t = 1.0 / static_cast<double>(m.rows());
  const double col_t = 1.0 / static_cast<double>(m.cols());
  double tv = 0.0;
  std::vector<double> cols(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      r += m(i, j);
      cols[j] += m(i, j);
    }
    tv += std::abs(r - row_t);
  }
  for (double c : cols) tv += std::abs(c - col_t);
  return 0.5 * tv;
}

Matrix swav_targets(const Matrix& scores, double epsilon, int iters) {
  auto plan = sinkhorn_knopp(scores, epsilon, iters).matrix;
  for (std::size_t i = 0; i < plan.rows(); ++i) {
    auto row = plan.row(i);
    double s = 0.0;
    for (double x : row) s += x;
    for (double& x : row) x /= s;
  }
  return plan;
}

LossValue swav_row_loss(const Vector& logits, const Vector& target, double temperature) {
  require_tau(temperature, "swav_loss");
  require_same_dim(logits, target, "swav_loss");
  for (double q : target) {
    if (q < 0.0) throw InvalidArgument("swav_loss: target has a negative entry");
  }
  constexpr double kLogFloor = -27.631021115928547;  // log(1e-12)
  std::vector<double> z(logits.dim());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = logits[i] / temperature;
  const double lse = math::log_sum_exp(z);
  const auto p = math::softmax(z);

  LossValue out;
  double live_mass = 0.0;  // target mass on unclamped terms
  std::vector<bool> live(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double logp = z[k] - lse;
    live[k] = logp > kLogFloor;
    out.value -= target[k] * std::max(logp, kLogFloor);
    if (live[k]) live_mass += target[k];
  }
  Vector g(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    g[j] = (p[j] * live_mass - (live[j] ? target[j] : 0.0)) / temperature;
  }
  out.grads.push_back(std::move(g));
  return out;
}

std::vector<LossValue> swav_loss(const Matrix& logits1, const Matrix& scores2,
                                 const SwavOptions& opts) {
  if (logits1.rows() != scores2.rows() || logits1.cols() != scores2.cols()) {
    throw ShapeMismatch("swav_loss: logits and scores must have the same shape");
  }
  const auto targets = swav_targets(scores2, opts.epsilon, opts.iters);
  std::vector<LossValue> out;
  out.reserve(logits1.rows());
  for (std::size_t i = 0; i < logits1.rows(); ++i) {
    const auto l = logits1.row(i);
    const auto t = targets.row(i);
    out.push_back(swav_row_loss(Vector(std::vector<double>(l.begin(), l.end())),
                                Vector(std::vector<double>(t.begin(), t.end())),
                                opts.temperature));
  }
  return out;
}

LossValue i2t_loss(const Vector& v, std::span<const Vector> texts, std::size_t positive_index,
                   double tau) {
  return cross_modal(v, texts, positive_index, tau, "i2t_loss");
}

LossValue t2i_loss(const Vector& t, std::span<const Vector> images, std::size_t positive_index,
                   double tau) {
  return cross_modal(t, images, positive_index, tau, "t2i_loss");
}

LossValue reweight(std::span<const LossValue> losses, std::span<const double> weights) {
  if (losses.size() != weights.size()) {
    throw ShapeMismatch("reweight: " + std::to_string(losses.size()) + " losses vs " +
                        std::to_string(weights.size()) + " weights");
  }
  LossValue out;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (!std::isfinite(weights[i]) || weights[i] < 0.0) {
      throw InvalidArgument("reweight: weights must be finite and non-negative");
    }
    out.value += weights[i] * losses[i].value;
    for (const auto& g : losses[i].grads) out.grads.push_back(math::scale(g, weights[i]));
  }
  return out;
}

LossValue reweight(std::span<const LossValue> losses, const quality::WeightedBatch& weights) {
  const auto w = weights.weights();
  return reweight(losses, w);
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheck check_gradient(const LossFn& fn, const std::vector<Vector>& inputs, double h,
                         std::span<const std::size_t> frozen) {
  const LossValue base = fn(inputs);
  if (base.grads.size() != inputs.size()) {
    throw ShapeMismatch("check_gradient: loss returned " + std::to_string(base.grads.size()) +
                        " gradients for " + std::to_string(inputs.size()) + " inputs");
  }
  GradCheck out;
  auto probe = inputs;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    if (std::find(frozen.begin(), frozen.end(), a) != frozen.end()) continue;
    for (std::size_t i = 0; i < inputs[a].dim(); ++i) {
      const double x = inputs[a][i];
      probe[a][i] = x + h;
      const double up = fn(probe).value;
      probe[a][i] = x - h;
      const double down = fn(probe).value;
      probe[a][i] = x;
      const double numeric = (up - down) / (2.0 * h);
      out.max_rel_error = std::max(out.max_rel_error, relative_error(base.grads[a][i], numeric));
      ++out.coordinates;
    }
  }
  return out;
}

std::vector<SuiteRow> gradient_suite(std::uint64_t seed, std::size_t instances, double h,
                                     double tolerance) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim_dist(4, 16);
  std::uniform_int_distribution<std::size_t> count_dist(1, 6);
  std::uniform_real_distribution<double> tau_dist(0.1, 1.0);

  struct Case {
    const char* name;
    std::function<GradCheck()> run;
  };
  const std::vector<Case> cases = {
      {"nce",
       [&] {
         const auto d = dim_dist(rng);
         const double tau = tau_dist(rng);
         std::vector<Vector> in{random_vector(rng, d), random_vector(rng, d)};
         for (std::size_t n = count_dist(rng); n > 0; --n) in.push_back(random_vector(rng, d));
         return check_gradient(
             [tau](const std::vector<Vector>& x) {
               return nce_loss(x[0], x[1], std::span(x).subspan(2), tau);
             },
             in, h);
       }},
      {"cosine",
       [&] {
         const auto d = dim_dist(rng);
         const std::vector<Vector> in{random_vector(rng, d), random_vector(rng, d)};
         const std::size_t frozen[] = {1};
         return check_gradient([](const std::vector<Vector>& x) { return cosine_loss(x[0], x[1]); },
                               in, h, frozen);
       }},
      {"swav",
       [&] {
         const auto n = count_dist(rng) + 1;
         const auto k = dim_dist(rng);
         Matrix scores(n, k);
         std::uniform_real_distribution<double> unit(-1.0, 1.0);
         for (auto& s : scores.values()) s = unit(rng);
         const auto targets = swav_targets(scores, 0.05, 3);
         const auto row = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
         Vector target(std::vector<double>(targets.row(row).begin(), targets.row(row).end()));
         Vector logits(k);
         for (auto& x : logits) x = unit(rng);
         return check_gradient(
             [target](const std::vector<Vector>& x) { return swav_row_loss(x[0], target, 0.1); },
             {logits}, h);
       }},
      {"i2t",
       [&] {
         const auto d = dim_dist(rng);
         const auto n = count_dist(rng);
         const double tau = tau_dist(rng);
         const auto pos = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
         std::vector<Vector> in{random_vector(rng, d)};
         for (std::size_t j = 0; j < n; ++j) in.push_back(random_vector(rng, d));
         return check_gradient(
             [tau, pos](const std::vector<Vector>& x) {
               return i2t_loss(x[0], std::span(x).subspan(1), pos, tau);
             },
             in, h);
       }},
      {"t2i",
       [&] {
         const auto d = dim_dist(rng);
         const auto n = count_dist(rng);
         const double tau = tau_dist(rng);
         const auto pos = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
         std::vector<Vector> in{random_vector(rng, d)};
         for (std::size_t j = 0; j < n; ++j) in.push_back(random_vector(rng, d));
         return check_gradient(
             [tau, pos](const std::vector<Vector>& x) {
               return t2i_loss(x[0], std::span(x).subspan(1), pos, tau);
             },
             in, h);
       }},
  };

  std::vector<SuiteRow> rows;
  for (const auto& c : cases) {
    SuiteRow row{c.name, instances, 0.0, false};
    for (std::size_t i = 0; i < instances; ++i) row.max_rel_error = std::max(row.max_rel_error, c.run().max_rel_error);
    row.passed = row.max_rel_error < tolerance;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace genview::losses
