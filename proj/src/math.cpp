#include "genview/math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "genview/error.hpp"

namespace genview {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kDegenerateInput: return "degenerate_input";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kParse: return "parse_error";
    case ErrorCode::kTransport: return "transport_error";
    case ErrorCode::kBackendRejected: return "backend_rejected";
    case ErrorCode::kManifestCorrupt: return "manifest_corrupt";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kDiverged: return "diverged";
  }
  return "unknown";
}

}  // namespace genview

namespace genview::math {

namespace {

void require_finite(std::span<const double> values, const char* what) {
  if (!all_finite(values)) {
    throw InvalidArgument(std::string(what) + ": non-finite entry");
  }
}

}  // namespace

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

Vector::Vector(std::size_t dim, double fill) : values_(dim, fill) {
  require_finite(values_, "Vector");
}

Vector::Vector(std::vector<double> values) : values_(std::move(values)) {
  require_finite(values_, "Vector");
}

Vector::Vector(std::initializer_list<double> values) : values_(values) {
  require_finite(values_, "Vector");
}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols) {
    throw ShapeMismatch("Matrix: data size does not match rows*cols");
  }
}

DenseFeatureMap::DenseFeatureMap(std::size_t h, std::size_t w, std::size_t k)
    : h_(h), w_(w), k_(k), data_(h * w * k, 0.0) {
  if (h == 0 || w == 0 || k == 0) {
    throw InvalidArgument("DenseFeatureMap: h, w and k must be positive");
  }
}

DenseFeatureMap::DenseFeatureMap(std::size_t h, std::size_t w, std::size_t k,
                                 std::vector<double> data)
    : h_(h), w_(w), k_(k), data_(std::move(data)) {
  if (h == 0 || w == 0 || k == 0) {
    throw InvalidArgument("DenseFeatureMap: h, w and k must be positive");
  }
  if (data_.size() != h * w * k) {
    throw ShapeMismatch("DenseFeatureMap: data size does not match h*w*k");
  }
  require_finite(data_, "DenseFeatureMap");
}

ScalarMap::ScalarMap(std::size_t h, std::size_t w, double fill)
    : h_(h), w_(w), values_(h * w, fill) {
  if (h == 0 || w == 0) {
    throw InvalidArgument("ScalarMap: h and w must be positive");
  }
}

ScalarMap::ScalarMap(std::size_t h, std::size_t w, std::vector<double> values)
    : h_(h), w_(w), values_(std::move(values)) {
  if (h == 0 || w == 0) {
    throw InvalidArgument("ScalarMap: h and w must be positive");
  }
  if (values_.size() != h * w) {
    throw ShapeMismatch("ScalarMap: value count does not match h*w");
  }
  require_finite(values_, "ScalarMap");
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeMismatch("dot: dimension mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine_similarity(std::span<const double> a,
                         std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeMismatch("cosine_similarity: dimension mismatch");
  }
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) {
    throw DegenerateInput("cosine_similarity: zero-norm input");
  }
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double cosine_similarity(const Vector& a, const Vector& b) {
  return cosine_similarity(a.span(), b.span());
}

std::vector<double> softmax(std::span<const double> values,
                            double temperature) {
  if (values.empty()) throw InvalidArgument("softmax: empty input");
  if (!(temperature > 0.0)) {
    throw InvalidArgument("softmax: temperature must be positive");
  }
  require_finite(values, "softmax");
  const double peak = *std::max_element(values.begin(), values.end());
  std::vector<double> out(values.size());
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp((values[i] - peak) / temperature);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw InvalidArgument("log_sum_exp: empty input");
  const double peak = *std::max_element(values.begin(), values.end());
  double total = 0.0;
  for (double v : values) total += std::exp(v - peak);
  return peak + std::log(total);
}

PrincipalComponent principal_component(const Matrix& samples,
                                       const PowerIterationOptions& opts) {
  const std::size_t n = samples.rows();
  const std::size_t k = samples.cols();
  if (n < 2) throw InvalidArgument("principal_component: need >= 2 samples");
  if (k == 0) throw InvalidArgument("principal_component: zero dimension");
  require_finite(samples.values(), "principal_component");

  std::vector<double> mean(k, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = samples.row(r);
    for (std::size_t c = 0; c < k; ++c) mean[c] += row[c];
  }
  for (double& m : mean) m /= static_cast<double>(n);

  // Upper triangle accumulated, mirrored afterwards.
  std::vector<double> cov(k * k, 0.0);
  std::vector<double> centred(k);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = samples.row(r);
    for (std::size_t c = 0; c < k; ++c) centred[c] = row[c] - mean[c];
    for (std::size_t i = 0; i < k; ++i) {
      const double ci = centred[i];
      if (ci == 0.0) continue;
      double* out = cov.data() + i * k;
      for (std::size_t j = i; j < k; ++j) out[j] += ci * centred[j];
    }
  }
  double trace = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i; j < k; ++j) {
      cov[i * k + j] /= static_cast<double>(n - 1);
      cov[j * k + i] = cov[i * k + j];
    }
    trace += cov[i * k + i];
  }
  double scale_ref = 0.0;
  for (double m : mean) scale_ref = std::max(scale_ref, std::abs(m));
  if (!(trace > 1e-24 * std::max(1.0, scale_ref * scale_ref))) {
    throw DegenerateInput("principal_component: zero variance after centring");
  }

  std::vector<double> current(k, 1.0 / std::sqrt(static_cast<double>(k)));
  std::vector<double> next(k);
  double eigenvalue = 0.0;
  int iter = 0;
  // The all-ones start can be orthogonal to the leading eigenvector; after a
  // zero product fall back to successive basis vectors.
  std::size_t restart = 0;
  for (iter = 1; iter <= opts.max_iterations; ++iter) {
    for (std::size_t i = 0; i < k; ++i) {
      double acc = 0.0;
      const double* row = cov.data() + i * k;
      for (std::size_t j = 0; j < k; ++j) acc += row[j] * current[j];
      next[i] = acc;
    }
    const double len = norm(next);
    if (len <= 1e-300) {
      if (restart >= k) {
        throw DegenerateInput("principal_component: power iteration collapsed");
      }
      std::fill(current.begin(), current.end(), 0.0);
      current[restart++] = 1.0;
      continue;
    }
    eigenvalue = len;
    for (double& v : next) v /= len;
    const double agreement = std::abs(dot(next, current));
    current.swap(next);
    if (1.0 - agreement < opts.tolerance) break;
  }
  iter = std::min(iter, opts.max_iterations);

  double orientation = dot(current, mean);
  if (orientation == 0.0) {
    for (double v : current) {
      if (v != 0.0) {
        orientation = v;
        break;
      }
    }
  }
  if (orientation < 0.0) {
    for (double& v : current) v = -v;
  }

  PrincipalComponent out;
  out.direction = Vector(std::move(current));
  out.mean = Vector(std::move(mean));
  out.eigenvalue = eigenvalue;
  out.iterations = iter;
  return out;
}

PrincipalComponent principal_component(std::span<const Vector> samples,
                                       const PowerIterationOptions& opts) {
  if (samples.size() < 2) {
    throw InvalidArgument("principal_component: need >= 2 samples");
  }
  const std::size_t k = samples.front().dim();
  Matrix packed(samples.size(), k);
  for (std::size_t r = 0; r < samples.size(); ++r) {
    if (samples[r].dim() != k) {
      throw ShapeMismatch("principal_component: samples differ in dimension");
    }
    std::copy(samples[r].begin(), samples[r].end(), packed.row(r).begin());
  }
  return principal_component(packed, opts);
}

Vector first_principal_component(std::span<const Vector> samples,
                                 const PowerIterationOptions& opts) {
  return principal_component(samples, opts).direction;
}

ScalarMap min_max_normalize(const ScalarMap& map) {
  const auto& v = map.values();
  require_finite(v, "min_max_normalize");
  const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
  const double lo = *lo_it;
  const double range = *hi_it - lo;
  std::vector<double> out(v.size(), 0.5);
  if (range >= 1e-12) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      out[i] = std::clamp((v[i] - lo) / range, 0.0, 1.0);
    }
  }
  return ScalarMap(map.h(), map.w(), std::move(out));
}

Vector weighted_pool(const ScalarMap& mask, const DenseFeatureMap& features) {
  if (mask.h() != features.h() || mask.w() != features.w()) {
    throw ShapeMismatch("weighted_pool: mask and feature map grids differ");
  }
  std::vector<double> acc(features.k(), 0.0);
  for (std::size_t t = 0; t < features.tokens(); ++t) {
    const double m = mask[t];
    if (m == 0.0) continue;
    const auto tok = features.token(t);
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += m * tok[c];
  }
  return Vector(std::move(acc));
}

Vector avg_pool(const DenseFeatureMap& features) {
  if (features.tokens() == 0) throw InvalidArgument("avg_pool: empty map");
  std::vector<double> acc(features.k(), 0.0);
  for (std::size_t t = 0; t < features.tokens(); ++t) {
    const auto tok = features.token(t);
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += tok[c];
  }
  const double inv = 1.0 / static_cast<double>(features.tokens());
  for (double& a : acc) a *= inv;
  return Vector(std::move(acc));
}

Vector add(const Vector& a, const Vector& b) {
  if (a.dim() != b.dim()) throw ShapeMismatch("add: dimension mismatch");
  Vector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = a[i] + b[i];
  return out;
}

Vector sub(const Vector& a, const Vector& b) {
  if (a.dim() != b.dim()) throw ShapeMismatch("sub: dimension mismatch");
  Vector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = a[i] - b[i];
  return out;
}

Vector scale(const Vector& a, double s) {
  Vector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = a[i] * s;
  return out;
}

Vector normalized(const Vector& a) {
  const double n = norm(a.span());
  if (n == 0.0) throw DegenerateInput("normalized: zero-norm vector");
  return scale(a, 1.0 / n);
}

}  // namespace genview::math
