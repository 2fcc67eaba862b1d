// SPDX-License-Identifier: Apache-2.0
#include "fgad/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fgad {

LogitScale::LogitScale(double scale) : scale_(scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw DomainError("logit scale must be a positive finite number");
  }
}

double cosine(const FeatVec& a, const FeatVec& b) {
  if (a.size() != b.size()) {
    throw DomainError("cosine: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                      std::to_string(b.size()) + ")");
  }
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) {
    throw DomainError("cosine: zero-norm input");
  }
  const double c = a.dot(b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

FeatVec l2_normalize(const FeatVec& v) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw DomainError("l2_normalize: zero or non-finite norm");
  }
  return v / n;
}

bool is_unit_norm(const FeatVec& v, double tol) { return std::abs(v.norm() - 1.0) <= tol; }

double harmonic_combine(double a, double b) {
  if (a < 0.0 || b < 0.0) {
    throw DomainError("harmonic_combine: negative input");
  }
  if (a == 0.0 || b == 0.0) {
    return 0.0;
  }
  return a * b / (a + b);
}

std::vector<double> token_softmax_weights(std::span<const double> values, LogitScale scale) {
  if (values.empty()) {
    throw DomainError("token_softmax_weights: empty input");
  }
  const double s = scale.value();
  const double peak = *std::max_element(values.begin(), values.end());
  std::vector<double> out(values.size());
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp(s * (values[i] - peak));
    total += out[i];
  }
  for (double& w : out) {
    w /= total;
  }
  return out;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

ScoreMap::ScoreMap(int height, int width)
    : height_(height), width_(width), scores_(static_cast<std::size_t>(height) * width, 0.0) {
  if (height < 0 || width < 0) {
    throw DomainError("ScoreMap: negative dimensions");
  }
}

ScoreMap::ScoreMap(int height, int width, std::vector<double> scores)
    : height_(height), width_(width), scores_(std::move(scores)) {
  if (height < 0 || width < 0 ||
      scores_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw DomainError("ScoreMap: size does not match height*width");
  }
  for (double s : scores_) {
    if (!(s >= 0.0 && s <= 1.0)) {
      throw DomainError("ScoreMap: score outside [0,1]");
    }
  }
}

void ScoreMap::set(int row, int col, double value) {
  if (!(value >= 0.0 && value <= 1.0)) {
    throw DomainError("ScoreMap: score outside [0,1]");
  }
  scores_[index(row, col)] = value;
}

double ScoreMap::max() const {
  if (scores_.empty()) throw DomainError("ScoreMap::max on empty map");
  return *std::max_element(scores_.begin(), scores_.end());
}

double ScoreMap::min() const {
  if (scores_.empty()) throw DomainError("ScoreMap::min on empty map");
  return *std::min_element(scores_.begin(), scores_.end());
}

std::size_t ScoreMap::index(int row, int col) const {
  if (row < 0 || row >= height_ || col < 0 || col >= width_) {
    throw std::out_of_range("ScoreMap: index out of range");
  }
  return static_cast<std::size_t>(row) * width_ + col;
}

}  // namespace fgad
