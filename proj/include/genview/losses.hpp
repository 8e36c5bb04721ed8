#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "genview/math.hpp"
#include "genview/quality.hpp"

namespace genview::losses {

inline constexpr double kDefaultTemperature = 0.2;

// A scalar loss and its gradient with respect to each input, in the order
// documented by the function that produced it.
struct LossValue {
  double value = 0.0;
  std::vector<math::Vector> grads;
};

// InfoNCE over the candidate set {v2} U negatives with dot-product logits.
// grads: [v1, v2, negatives...].
LossValue nce_loss(const math::Vector& v1, const math::Vector& v2,
                   std::span<const math::Vector> negatives,
                   double tau = kDefaultTemperature);

// -cos(p1, v2). v2 is a stop-gradient target, so grads[1] is all zeros.
LossValue cosine_loss(const math::Vector& p1, const math::Vector& v2);

// N x K transport plan: rows sum to 1/N, columns to 1/K at convergence.
struct Assignment {
  math::Matrix matrix;
  int iterations = 0;
};

// Log-domain Sinkhorn-Knopp on exp(scores / epsilon). One iteration is a
// column pass followed by a row pass, so row marginals are exact on exit.
Assignment sinkhorn_knopp(const math::Matrix& scores, double epsilon, int iters);

// Largest absolute deviation of any row or column sum from its target.
double marginal_error(const Assignment& a);
// Total-variation distance of both marginals to their targets.
double marginal_tv(const Assignment& a);

struct SwavOptions {
  double temperature = 0.1;  // softmax temperature on the predicting logits
  double epsilon = 0.05;
  int iters = 3;
};

// Rows of SK(scores) rescaled to sum to one.
math::Matrix swav_targets(const math::Matrix& scores, double epsilon, int iters);

// Cross-entropy -sum_k q_k log softmax(logits / T)_k against a fixed target.
// grads: [logits].
LossValue swav_row_loss(const math::Vector& logits, const math::Vector& target,
                        double temperature);

// Swapped prediction for a batch: row i of logits1 predicts row i of
// SK(scores2). One LossValue per row.
std::vector<LossValue> swav_loss(const math::Matrix& logits1, const math::Matrix& scores2,
                                 const SwavOptions& opts = {});

// -log softmax_j(cos(v, t_j) / tau)[positive]. grads: [v, t_0, ..., t_{n-1}].
LossValue i2t_loss(const math::Vector& v, std::span<const math::Vector> texts,
                   std::size_t positive_index, double tau = kDefaultTemperature);
// Same objective with a text anchor against image candidates.
// grads: [t, v_0, ..., v_{n-1}].
LossValue t2i_loss(const math::Vector& t, std::span<const math::Vector> images,
                   std::size_t positive_index, double tau = kDefaultTemperature);

// sum_i w_i L_i. Weights are constants; every gradient of L_i is scaled by
// w_i and the grads of all losses are concatenated in order.
LossValue reweight(std::span<const LossValue> losses, std::span<const double> weights);
LossValue reweight(std::span<const LossValue> losses, const quality::WeightedBatch& weights);

// Central finite-difference check of a loss's analytic gradient.
struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

// Relative error of one coordinate: |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-3);

using LossFn = std::function<LossValue(const std::vector<math::Vector>&)>;

// Perturbs every coordinate of every input by +-h. Inputs listed in
// `frozen` are skipped (stop-gradient arguments).
GradCheck check_gradient(const LossFn& fn, const std::vector<math::Vector>& inputs,
                         double h = 1e-5, std::span<const std::size_t> frozen = {});

struct SuiteRow {
  std::string loss;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

// Runs the FD check on `instances` random problems for each of the five
// losses (nce, cosine, swav, i2t, t2i).
std::vector<SuiteRow> gradient_suite(std::uint64_t seed, std::size_t instances = 100,
                                     double h = 1e-5, double tolerance = 1e-5);

}  // namespace genview::losses
