// SPDX-License-Identifier: Apache-2.0
#include "fgad/region_aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fgad {
namespace {

Eigen::MatrixXd prompt_matrix(const std::vector<FeatVec>& prompts, Eigen::Index d) {
  if (prompts.empty()) throw DomainError("build_reference: no prompts");
  Eigen::MatrixXd P(d, static_cast<Eigen::Index>(prompts.size()));
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    if (prompts[k].size() != d) throw DomainError("build_reference: prompt dimension mismatch");
    const double n = prompts[k].norm();
    if (!(n > 0.0)) throw DomainError("build_reference: zero-norm prompt");
    P.col(static_cast<Eigen::Index>(k)) = prompts[k] / n;
  }
  return P;
}

ReferenceMatrix clamp_unit(ReferenceMatrix m) { return m.cwiseMax(-1.0).cwiseMin(1.0); }

}  // namespace

int RegionMap::foreground_count() const {
  return static_cast<int>(std::count_if(labels.begin(), labels.end(), [](int l) { return l != 0; }));
}

void RegionMap::validate() const {
  if (height <= 0 || width <= 0) throw DomainError("RegionMap: empty map");
  if (labels.size() != static_cast<std::size_t>(height) * width) throw DomainError("RegionMap: label count != h*w");
  for (int l : labels) {
    if (l < 0 || l > component_count) throw DomainError("RegionMap: label out of range");
  }
}

ReferenceMatrix build_reference(const TokenGrid& tokens, const std::vector<FeatVec>& prompts) {
  std::vector<int> rows(static_cast<std::size_t>(tokens.tokens.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  return build_reference(tokens, rows, prompts);
}

ReferenceMatrix build_reference(const TokenGrid& tokens, const std::vector<int>& rows,
                                const std::vector<FeatVec>& prompts) {
  const Eigen::MatrixXd P = prompt_matrix(prompts, tokens.tokens.cols());
  Eigen::MatrixXd Z(static_cast<Eigen::Index>(rows.size()), tokens.tokens.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = tokens.tokens.row(rows[i]);
    const double n = r.norm();
    if (!(n > 0.0)) throw DomainError("build_reference: zero-norm token");
    Z.row(static_cast<Eigen::Index>(i)) = r / n;
  }
  return clamp_unit(Z * P);
}

ClusterCenters select_centers(const ReferenceMatrix& ref) {
  const Eigen::Index T = ref.rows();
  const Eigen::Index P = ref.cols();
  if (P == 0) throw DomainError("select_centers: no prompts");
  if (T < P) throw DomainError("select_centers: fewer tokens than prompts");
  ClusterCenters out;
  std::vector<bool> taken(static_cast<std::size_t>(T), false);
  std::vector<int> order(static_cast<std::size_t>(T));
  for (Eigen::Index k = 0; k < P; ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return ref(a, k) > ref(b, k); });
    auto it = std::find_if(order.begin(), order.end(), [&](int i) { return !taken[static_cast<std::size_t>(i)]; });
    taken[static_cast<std::size_t>(*it)] = true;
    out.centers.push_back(*it);
  }
  return out;
}

std::vector<int> assign_to_centers(const ReferenceMatrix& ref, const ClusterCenters& centers) {
  std::vector<int> out(static_cast<std::size_t>(ref.rows()), 0);
  for (Eigen::Index i = 0; i < ref.rows(); ++i) {
    double best = 0.0;
    for (std::size_t c = 0; c < centers.centers.size(); ++c) {
      const double dist = (ref.row(i) - ref.row(centers.centers[c])).squaredNorm();
      if (c == 0 || dist < best) {
        best = dist;
        out[static_cast<std::size_t>(i)] = static_cast<int>(c);
      }
    }
  }
  // Centers with coinciding reference rows would otherwise fall to the lower index.
  for (std::size_t c = 0; c < centers.centers.size(); ++c) out[static_cast<std::size_t>(centers.centers[c])] = static_cast<int>(c);
  return out;
}

ClusterResult cluster_two_stage_detailed(const TokenGrid& grid, const FeatVec& fg_prompt, const FeatVec& bg_prompt,
                                         const std::vector<FeatVec>& component_prompts) {
  if (component_prompts.empty()) throw DomainError("cluster_two_stage: no component prompts");
  const int T = grid.token_count();
  ClusterResult result;
  RegionMap& map = result.map;
  map.height = grid.height;
  map.width = grid.width;
  map.component_count = static_cast<int>(component_prompts.size());
  map.resolution = grid.resolution;
  map.labels.assign(static_cast<std::size_t>(T), 0);

  const ReferenceMatrix ref1 = build_reference(grid, {fg_prompt, bg_prompt});
  result.stage1 = select_centers(ref1);
  const auto stage1 = assign_to_centers(ref1, result.stage1);
  std::vector<int> foreground;
  for (int i = 0; i < T; ++i) {
    if (stage1[static_cast<std::size_t>(i)] == 0) foreground.push_back(i);
  }
  if (foreground.empty()) throw DomainError("degenerate foreground: stage 1 assigned no token to the foreground");
  if (foreground.size() < component_prompts.size()) {
    throw DomainError("degenerate foreground: fewer foreground tokens than components");
  }

  const ReferenceMatrix ref2 = build_reference(grid, foreground, component_prompts);
  const ClusterCenters local = select_centers(ref2);
  const auto stage2 = assign_to_centers(ref2, local);
  for (std::size_t j = 0; j < foreground.size(); ++j) {
    map.labels[static_cast<std::size_t>(foreground[j])] = stage2[j] + 1;
  }
  for (int c : local.centers) result.stage2.centers.push_back(foreground[static_cast<std::size_t>(c)]);
  return result;
}

RegionMap cluster_two_stage(const TokenGrid& grid, const FeatVec& fg_prompt, const FeatVec& bg_prompt,
                            const std::vector<FeatVec>& component_prompts) {
  return cluster_two_stage_detailed(grid, fg_prompt, bg_prompt, component_prompts).map;
}

RegionMap cluster_one_stage(const TokenGrid& grid, const FeatVec& bg_prompt,
                            const std::vector<FeatVec>& component_prompts) {
  if (component_prompts.empty()) throw DomainError("cluster_one_stage: no component prompts");
  std::vector<FeatVec> prompts = {bg_prompt};
  prompts.insert(prompts.end(), component_prompts.begin(), component_prompts.end());
  const ReferenceMatrix ref = build_reference(grid, prompts);
  const auto labels = assign_to_centers(ref, select_centers(ref));
  return {grid.height, grid.width, static_cast<int>(component_prompts.size()), labels, grid.resolution};
}

RegionMap downsample_region_map(const RegionMap& map, int factor) {
  if (factor < 1) throw DomainError("downsample_region_map: factor must be >= 1");
  if (map.height % factor != 0 || map.width % factor != 0) {
    throw DomainError("downsample_region_map: dimensions not divisible by factor");
  }
  RegionMap out;
  out.height = map.height / factor;
  out.width = map.width / factor;
  out.component_count = map.component_count;
  out.resolution = factor == 1 ? map.resolution : Resolution::Native;
  out.labels.assign(static_cast<std::size_t>(out.height) * out.width, 0);
  std::vector<int> votes(static_cast<std::size_t>(map.component_count) + 1);
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      std::fill(votes.begin(), votes.end(), 0);
      for (int i = 0; i < factor; ++i)
        for (int j = 0; j < factor; ++j) ++votes.at(static_cast<std::size_t>(map.at(r * factor + i, c * factor + j)));
      // max_element returns the first maximum, which is the lower label.
      out.labels[static_cast<std::size_t>(r) * out.width + c] =
          static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    }
  }
  return out;
}

double label_accuracy(const RegionMap& map, const std::vector<int>& truth) {
  if (truth.size() != map.labels.size()) throw DomainError("label_accuracy: size mismatch");
  if (truth.empty()) throw DomainError("label_accuracy: empty map");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += map.labels[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

std::string region_map_to_pgm(const RegionMap& map) {
  std::string out = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
  const int denom = std::max(map.component_count, 1);
  for (int l : map.labels) {
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * l / denom))));
  }
  return out;
}

}  // namespace fgad
