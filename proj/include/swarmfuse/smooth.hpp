#pragma once

// Convolutional encoder-decoder over the H_A x W_A plane of a normalised
// similarity volume, producing a smoothed volume of the same shape.

#include <cstdint>
#include <string>
#include <vector>

#include "swarmfuse/correspond.hpp"
#include "swarmfuse/tensor.hpp"

namespace swarmfuse::smooth {

struct SmoothingConfig {
  int channels = 65;  // H_B*W_B + 1
  int hidden = 64;
  // The final conv also sees the input volume at full resolution, and its
  // output is added to log(input) before the fiber softmax.
  bool input_skip = true;
  bool log_residual = true;
};

class SmoothingNet {
 public:
  SmoothingNet(SmoothingConfig config, std::uint64_t seed, std::string prefix = "smooth");

  const SmoothingConfig& config() const { return config_; }

  /// Normalised volume in, smoothed volume out. Spatial extent must be divisible by 4.
  correspond::SimilarityVolume smooth_volume(const correspond::SimilarityVolume& volume) const;

  std::vector<NamedTensor> parameters() const;

 private:
  struct Conv {
    Tensor weight;
    Tensor bias;
  };
  SmoothingConfig config_;
  std::string prefix_;
  std::vector<Conv> convs_;  // down1, down2, up1, out
};

/// Replaces each fiber by a one-hot vector at its argmax (ties -> lowest channel).
/// The result is a constant: no gradient flows back through the collapse.
correspond::SimilarityVolume one_hot_collapse(const correspond::SimilarityVolume& volume);

}  // namespace swarmfuse::smooth
