#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace genview::math {

// Dense real vector. Entries are finite by construction.
class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0);
  explicit Vector(std::vector<double> values);
  Vector(std::initializer_list<double> values);

  std::size_t dim() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  std::span<const double> span() const noexcept { return values_; }
  std::span<double> span() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }
  auto begin() noexcept { return values_.begin(); }
  auto end() noexcept { return values_.end(); }

  bool operator==(const Vector&) const = default;

 private:
  std::vector<double> values_;
};

// Row-major real matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double operator()(std::size_t r, std::size_t c) const {
    return values_[r * cols_ + c];
  }
  double& operator()(std::size_t r, std::size_t c) {
    return values_[r * cols_ + c];
  }

  std::span<const double> row(std::size_t r) const {
    return {values_.data() + r * cols_, cols_};
  }
  std::span<double> row(std::size_t r) {
    return {values_.data() + r * cols_, cols_};
  }
  const std::vector<double>& values() const noexcept { return values_; }
  std::vector<double>& values() noexcept { return values_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

// H x W grid of K-dimensional token features, row-major (h, w, k).
class DenseFeatureMap {
 public:
  DenseFeatureMap() = default;
  DenseFeatureMap(std::size_t h, std::size_t w, std::size_t k);
  DenseFeatureMap(std::size_t h, std::size_t w, std::size_t k,
                  std::vector<double> data);

  std::size_t h() const noexcept { return h_; }
  std::size_t w() const noexcept { return w_; }
  std::size_t k() const noexcept { return k_; }
  std::size_t tokens() const noexcept { return h_ * w_; }

  std::span<const double> token(std::size_t index) const {
    return {data_.data() + index * k_, k_};
  }
  std::span<double> token(std::size_t index) {
    return {data_.data() + index * k_, k_};
  }
  std::span<const double> token(std::size_t row, std::size_t col) const {
    return token(row * w_ + col);
  }

  const std::vector<double>& data() const noexcept { return data_; }
  std::vector<double>& data() noexcept { return data_; }

  bool operator==(const DenseFeatureMap&) const = default;

 private:
  std::size_t h_ = 0;
  std::size_t w_ = 0;
  std::size_t k_ = 0;
  std::vector<double> data_;
};

// H x W grid of scalars (activation or attention maps).
class ScalarMap {
 public:
  ScalarMap() = default;
  ScalarMap(std::size_t h, std::size_t w, double fill = 0.0);
  ScalarMap(std::size_t h, std::size_t w, std::vector<double> values);

  std::size_t h() const noexcept { return h_; }
  std::size_t w() const noexcept { return w_; }
  std::size_t size() const noexcept { return values_.size(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  const std::vector<double>& values() const noexcept { return values_; }

  bool operator==(const ScalarMap&) const = default;

 private:
  std::size_t h_ = 0;
  std::size_t w_ = 0;
  std::vector<double> values_;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

// Throws DegenerateInput on a zero-norm argument.
double cosine_similarity(const Vector& a, const Vector& b);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Max-subtracted softmax of values / temperature.
std::vector<double> softmax(std::span<const double> values,
                            double temperature = 1.0);
double log_sum_exp(std::span<const double> values);

struct PowerIterationOptions {
  int max_iterations = 500;
  // Convergence when 1 - |cos(previous, current)| drops below this.
  double tolerance = 1e-10;
};

struct PrincipalComponent {
  Vector direction;  // unit norm
  Vector mean;
  double eigenvalue = 0.0;
  int iterations = 0;
};

// Leading eigenvector of the sample covariance (samples centred first),
// found by power iteration from the normalised all-ones vector. The sign is
// chosen so that direction . mean >= 0.
PrincipalComponent principal_component(std::span<const Vector> samples,
                                       const PowerIterationOptions& opts = {});
Vector first_principal_component(std::span<const Vector> samples,
                                 const PowerIterationOptions& opts = {});

// Same as above on a row-major n x k sample matrix.
PrincipalComponent principal_component(const Matrix& samples,
                                       const PowerIterationOptions& opts = {});

// Affine rescale to [0, 1]. A (near-)constant map becomes constant 0.5.
ScalarMap min_max_normalize(const ScalarMap& map);

// z = sum_{h,w} M[h,w] * F[h,w,:]  (a weighted sum, not a mean).
Vector weighted_pool(const ScalarMap& mask, const DenseFeatureMap& features);
Vector avg_pool(const DenseFeatureMap& features);

Vector add(const Vector& a, const Vector& b);
Vector sub(const Vector& a, const Vector& b);
Vector scale(const Vector& a, double s);
Vector normalized(const Vector& a);

bool all_finite(std::span<const double> values);

}  // namespace genview::math
