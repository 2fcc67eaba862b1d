// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fgad {

/// Feature vector in the shared vision/text embedding space.
using FeatVec = Eigen::VectorXd;
/// Row-major stack of feature vectors (one row per item).
using FeatMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Multiplier applied to cosine similarities before exponentiation.
class LogitScale {
 public:
  static constexpr double kDefault = 100.0;

  LogitScale() = default;
  explicit LogitScale(double scale);

  double value() const noexcept { return scale_; }

 private:
  double scale_ = kDefault;
};

double cosine(const FeatVec& a, const FeatVec& b);

/// Throws DomainError on a zero (or non-finite) norm.
FeatVec l2_normalize(const FeatVec& v);

bool is_unit_norm(const FeatVec& v, double tol = 1e-6);

/// ab/(a+b). Returns 0 when either input is 0 (the limit of the harmonic form).
double harmonic_combine(double a, double b);

/// Numerically stable softmax of scale*values over the whole list.
std::vector<double> token_softmax_weights(std::span<const double> values, LogitScale scale);

/// Logistic function evaluated without overflow for large |x|.
double stable_sigmoid(double x);

/// h x w grid of anomaly scores, every entry in [0,1].
class ScoreMap {
 public:
  ScoreMap() = default;
  ScoreMap(int height, int width);
  ScoreMap(int height, int width, std::vector<double> scores);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return scores_.size(); }

  double at(int row, int col) const { return scores_[index(row, col)]; }
  void set(int row, int col, double value);
  double operator[](std::size_t i) const { return scores_[i]; }

  const std::vector<double>& values() const noexcept { return scores_; }
  double max() const;
  double min() const;

  bool operator==(const ScoreMap&) const = default;

 private:
  std::size_t index(int row, int col) const;

  int height_ = 0;
  int width_ = 0;
  std::vector<double> scores_;
};

}  // namespace fgad
