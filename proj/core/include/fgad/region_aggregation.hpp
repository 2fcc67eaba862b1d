// SPDX-License-Identifier: Apache-2.0
#pragma once
// Language-guided region aggregation. Cluster centers are the tokens most
// similar to each guiding prompt, tokens are compared in the space of their
// prompt similarities, and clustering runs in two stages (foreground vs
// background, then components inside the foreground).

#include "fgad/encoder.hpp"
#include "fgad/numeric.hpp"

#include <string>
#include <vector>

namespace fgad {

/// T x P, entry (i,k) = cosine(token_i, prompt_k).
using ReferenceMatrix = Eigen::MatrixXd;

struct RegionMap {
  int height = 0;
  int width = 0;
  int component_count = 0;  ///< Nc; labels are in [0, Nc]
  std::vector<int> labels;  ///< row-major, 0 = background
  Resolution resolution = Resolution::Native;

  int at(int row, int col) const { return labels[static_cast<std::size_t>(row) * width + col]; }
  int token_count() const noexcept { return height * width; }
  int foreground_count() const;
  void validate() const;
  bool operator==(const RegionMap&) const = default;
};

struct ClusterCenters {
  std::vector<int> centers;  ///< one token index per guiding prompt
  bool operator==(const ClusterCenters&) const = default;
};

ReferenceMatrix build_reference(const TokenGrid& tokens, const std::vector<FeatVec>& prompts);
/// Same, restricted to the given token rows (in that order).
ReferenceMatrix build_reference(const TokenGrid& tokens, const std::vector<int>& rows,
                                const std::vector<FeatVec>& prompts);

/// Argmax per column, ties to the lowest token index. A later prompt that
/// collides with an earlier one falls through to its next best token.
ClusterCenters select_centers(const ReferenceMatrix& ref);

/// Index of the nearest center row (Euclidean over reference rows) for every
/// row of ref. Ties go to the lower center index, except that a center token
/// always belongs to its own cluster.
std::vector<int> assign_to_centers(const ReferenceMatrix& ref, const ClusterCenters& centers);

struct ClusterResult {
  RegionMap map;
  ClusterCenters stage1;  ///< {foreground, background}
  ClusterCenters stage2;  ///< token indices into the full grid, one per component
};

/// Throws DomainError("degenerate foreground ...") when stage 1 assigns no token
/// to the foreground, or when the foreground holds fewer tokens than components.
ClusterResult cluster_two_stage_detailed(const TokenGrid& grid, const FeatVec& fg_prompt, const FeatVec& bg_prompt,
                                         const std::vector<FeatVec>& component_prompts);
RegionMap cluster_two_stage(const TokenGrid& grid, const FeatVec& fg_prompt, const FeatVec& bg_prompt,
                            const std::vector<FeatVec>& component_prompts);

/// Ablation: a single clustering over all tokens guided by the background
/// prompt (label 0) and the component prompts (labels 1..Nc).
RegionMap cluster_one_stage(const TokenGrid& grid, const FeatVec& bg_prompt,
                            const std::vector<FeatVec>& component_prompts);

/// Majority label per factor x factor block, ties toward the lower label.
RegionMap downsample_region_map(const RegionMap& map, int factor);

/// Fraction of tokens whose label equals truth.
double label_accuracy(const RegionMap& map, const std::vector<int>& truth);

/// Binary PGM (P5), label k drawn as gray round(255*k/Nc).
std::string region_map_to_pgm(const RegionMap& map);

}  // namespace fgad
