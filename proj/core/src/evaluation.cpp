// SPDX-License-Identifier: Apache-2.0
#include "fgad/evaluation.hpp"

#include "fgad/numeric.hpp"

#include <json.hpp>

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace fgad::eval {

double auroc(const LabeledScores& data) {
  const std::size_t n = data.scores.size();
  if (n != data.labels.size()) throw DomainError("auroc: scores and labels differ in length");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return data.scores[a] < data.scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && data.scores[order[j + 1]] == data.scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (data.labels[order[k]]) {
        rank_sum += midrank;
        ++n_pos;
      }
    }
    i = j + 1;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DomainError("auroc: undefined metric, both classes are required");
  const double np = static_cast<double>(n_pos);
  const double u = rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

std::string BenchmarkReport::to_json(bool include_timing) const {
  using nlohmann::json;
  json cats = json::array();
  for (const auto& c : categories) {
    json seeds = json::array();
    for (const auto& s : c.per_seed) {
      seeds.push_back(json{{"seed", s.seed}, {"image_auroc", s.image_auroc}, {"pixel_auroc", s.pixel_auroc}});
    }
    json cj{{"category", c.category}, {"image_auroc", c.image_auroc}, {"pixel_auroc", c.pixel_auroc}, {"per_seed", seeds}};
    if (include_timing) cj["wall_clock_seconds"] = c.wall_clock_seconds;
    cats.push_back(std::move(cj));
  }
  return json{{"suite", suite}, {"categories", cats}}.dump(2) + "\n";
}

std::string BenchmarkReport::to_table() const {
  std::size_t width = 8;
  for (const auto& c : categories) width = std::max(width, c.category.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width)) << "category" << "  " << std::right << std::setw(10)
     << "image" << "  " << std::setw(10) << "pixel" << "  " << std::setw(8) << "seconds" << '\n';
  os << std::fixed;
  for (const auto& c : categories) {
    os << std::left << std::setw(static_cast<int>(width)) << c.category << "  " << std::right << std::setprecision(4)
       << std::setw(10) << c.image_auroc << "  " << std::setw(10) << c.pixel_auroc << "  " << std::setprecision(2)
       << std::setw(8) << c.wall_clock_seconds << '\n';
  }
  return os.str();
}

}  // namespace fgad::eval
