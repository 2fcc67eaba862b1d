// SPDX-License-Identifier: Apache-2.0
#pragma once
// AUROC and the synthetic benchmark report.

#include <cstdint>
#include <string>
#include <vector>

namespace fgad::eval {

struct LabeledScores {
  std::vector<double> scores;
  std::vector<bool> labels;  ///< true = anomalous
};

/// Mann-Whitney U / (n_pos * n_neg) with midranks for ties. Throws
/// DomainError when a class is missing or lengths differ.
double auroc(const LabeledScores& data);

enum class PixelPooling { Pooled, PerImage };

struct SeedResult {
  std::uint64_t seed = 0;
  double image_auroc = 0.0;
  double pixel_auroc = 0.0;
  bool operator==(const SeedResult&) const = default;
};

struct CategoryReport {
  std::string category;
  double image_auroc = 0.0;  ///< mean over seeds
  double pixel_auroc = 0.0;
  std::vector<SeedResult> per_seed;
  double wall_clock_seconds = 0.0;  ///< excluded from the canonical form
  bool operator==(const CategoryReport&) const = default;
};

struct BenchmarkReport {
  std::string suite;
  std::vector<CategoryReport> categories;

  /// Canonical JSON. Timing is added only when include_timing is set, so
  /// repeated runs produce identical canonical reports.
  std::string to_json(bool include_timing = false) const;
  std::string to_table() const;
};

}  // namespace fgad::eval
