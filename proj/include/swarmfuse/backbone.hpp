#pragma once

// Split encoder/decoder network. The encoder maps an image to a coarse
// feature grid (the exchange point); the decoder maps a feature grid back
// to per-pixel task output.

#include <cstdint>
#include <string>
#include <vector>

#include "swarmfuse/scenegen.hpp"
#include "swarmfuse/tensor.hpp"

namespace swarmfuse::backbone {

enum class Task { segmentation, reconstruction };

struct BackboneConfig {
  int height = 32;
  int width = 32;
  int feature_dim = 16;             // K
  std::vector<int> widths{16, 32};  // one conv-relu-pool block each
  Task task = Task::segmentation;
  int num_classes = 5;
  int input_channels = 3;  // 6 when two images are stacked
  int decoder_input = 0;   // 0 means feature_dim

  int stride() const { return 1 << widths.size(); }
  int grid_height() const { return height / stride(); }
  int grid_width() const { return width / stride(); }
  int decoder_channels() const { return decoder_input > 0 ? decoder_input : feature_dim; }
  int output_channels() const { return task == Task::segmentation ? num_classes : 3; }
  void validate() const;
};

/// Encoder output for one agent; `data` is [1, K, H_s, W_s].
struct FeatureMap {
  int agent_id = 0;
  int frame_id = 0;
  Tensor data;

  int channels() const { return static_cast<int>(data.dim(1)); }
  int height() const { return static_cast<int>(data.dim(2)); }
  int width() const { return static_cast<int>(data.dim(3)); }
};

/// [1, 3, H, W] constant tensor from a planar image.
Tensor image_tensor(const scene::Image& image);

/// He-normal initialised weights; biases start at zero.
Tensor he_normal(Shape shape, Rng& rng);

class Backbone {
 public:
  Backbone(BackboneConfig config, std::uint64_t seed, std::string prefix = "backbone");

  const BackboneConfig& config() const { return config_; }

  /// [1, C_in, H, W] -> [1, K, H_s, W_s].
  Tensor encode(const Tensor& image) const;
  FeatureMap encode(const scene::Image& image, int agent_id = 0, int frame_id = 0) const;

  /// [1, K_dec, H_s, W_s] -> [1, C_out, H, W]; reconstruction output is clamped to [0, 1].
  Tensor decode(const Tensor& features) const;

  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;

 private:
  struct Conv {
    Tensor weight;
    Tensor bias;
  };
  Conv make_conv(int in, int out, Rng& rng) const;
  static Tensor apply(const Conv& conv, const Tensor& x) { return conv2d(x, conv.weight, conv.bias, 1, 1); }

  BackboneConfig config_;
  std::string prefix_;
  std::vector<Conv> encoder_;  // blocks..., then the K projection
  std::vector<Conv> decoder_;  // K_dec projection, one per upsampling, output head last
};

}  // namespace swarmfuse::backbone
