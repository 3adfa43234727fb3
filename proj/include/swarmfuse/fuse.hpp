#pragma once

// Argmax correspondence, feature warping and per-cell hard selection.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "swarmfuse/correspond.hpp"
#include "swarmfuse/tensor.hpp"

namespace swarmfuse::fuse {

inline constexpr int kSelf = -1;

struct CorrespondenceMap {
  int height = 0;  // A grid
  int width = 0;
  int grid_b_height = 0;
  int grid_b_width = 0;
  std::vector<std::int32_t> channel;  // per A cell; grid_b_cells() means no match
  std::vector<float> best_prob;       // probability of the argmax channel
  std::vector<float> no_match_prob;

  int grid_b_cells() const { return grid_b_height * grid_b_width; }
  bool is_match(std::size_t cell) const { return channel[cell] < grid_b_cells(); }
  /// (row, col) in B of a matched cell.
  std::pair<int, int> cell_in_b(std::size_t cell) const {
    return {channel[cell] / grid_b_width, channel[cell] % grid_b_width};
  }
};

/// Per-cell argmax over the channel axis, ties toward the lowest channel.
CorrespondenceMap to_correspondence_map(const correspond::SimilarityVolume& volume);

/// A certain map from channel labels (e.g. ground truth): probability 1 on each label.
CorrespondenceMap map_from_channels(std::span<const std::uint16_t> channels, int height, int width, int grid_b_height,
                                    int grid_b_width);

struct WarpedFeatures {
  Tensor features;             // [1, K, H_A, W_A]
  std::vector<std::uint8_t> valid;  // per A cell
};

/// Copies f_b's feature at each matched cell; unmatched cells are zero and invalid.
WarpedFeatures warp_features(const CorrespondenceMap& map, const Tensor& f_b);

struct Candidate {
  int agent_id = 0;
  const Tensor* warped = nullptr;
  const CorrespondenceMap* map = nullptr;
};

struct Selection {
  Tensor features;                   // [1, K, H_A, W_A]
  std::vector<std::int32_t> source;  // per cell: kSelf or the winning agent id
};

/// Per cell, own feature scores the smallest no-match probability among
/// candidates that matched the cell; each matched candidate scores its
/// best-match probability. The highest score wins, SELF on ties, then the
/// earliest candidate. Candidates whose argmax is no-match are excluded.
Selection hard_select(const Tensor& own, std::span<const Candidate> candidates);

/// Two-agent special case of hard_select.
Selection hard_select_pair(const Tensor& own, const Tensor& warped, const CorrespondenceMap& map, int agent_id);

}  // namespace swarmfuse::fuse
