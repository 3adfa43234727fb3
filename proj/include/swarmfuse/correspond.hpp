#pragma once

// Dense pairwise matching between two agents' feature grids.

#include "swarmfuse/tensor.hpp"

namespace swarmfuse::correspond {

enum class VolumeKind { raw_distance, normalized, smoothed };

/// Per cell of A, one score per cell of B plus a trailing no-match score.
/// `data` is [1, H_B*W_B + 1, H_A, W_A]; channel j < H_B*W_B is B cell
/// (j / W_B, j % W_B).
struct SimilarityVolume {
  Tensor data;
  VolumeKind kind = VolumeKind::normalized;
  int agent_a = 0;
  int agent_b = 1;
  int grid_b_height = 0;
  int grid_b_width = 0;

  int channels() const { return static_cast<int>(data.dim(1)); }
  int height() const { return static_cast<int>(data.dim(2)); }
  int width() const { return static_cast<int>(data.dim(3)); }
  int no_match_channel() const { return channels() - 1; }
  float at(int channel, int y, int x) const {
    return data.data()[(static_cast<std::size_t>(channel) * height() + y) * width() + x];
  }
};

/// L2 distances ||f_a[y, x] - f_b[y', x']|| laid out as [1, H_B*W_B, H_A, W_A].
/// Inputs are [1, K, H, W]; the gradient at a zero distance is taken as 0.
Tensor distance_volume(const Tensor& f_a, const Tensor& f_b);

/// Distance of every A feature to the zero vector, [1, 1, H_A, W_A].
Tensor no_match_scores(const Tensor& f_a);

/// Appends the no-match channel and applies softmax(-volume / tau) per fiber.
SimilarityVolume assemble_and_normalize(const Tensor& distances, const Tensor& no_match, int grid_b_height,
                                        int grid_b_width, float tau = 1.0f);

/// The same arrangement without normalisation (kind raw_distance).
SimilarityVolume assemble_raw(const Tensor& distances, const Tensor& no_match, int grid_b_height, int grid_b_width);

/// distance_volume + no_match_scores + assemble_and_normalize.
SimilarityVolume build_volume(const Tensor& f_a, const Tensor& f_b, float tau = 1.0f, int agent_a = 0,
                              int agent_b = 1);

}  // namespace swarmfuse::correspond
