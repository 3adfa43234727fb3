#include "swarmfuse/smooth.hpp"

#include <array>

#include "swarmfuse/backbone.hpp"
#include "swarmfuse/errors.hpp"

namespace swarmfuse::smooth {

using correspond::SimilarityVolume;

SmoothingNet::SmoothingNet(SmoothingConfig config, std::uint64_t seed, std::string prefix)
    : config_(config), prefix_(std::move(prefix)) {
  if (config_.channels < 2 || config_.hidden < 1) throw ConfigError("smoothing net needs channels >= 2, hidden >= 1");
  Rng rng(seed);
  const auto c = static_cast<std::size_t>(config_.channels);
  const auto h = static_cast<std::size_t>(config_.hidden);
  auto conv = [&](std::size_t in, std::size_t out) {
    return Conv{backbone::he_normal({out, in, 3, 3}, rng), Tensor::zeros({out}, true)};
  };
  convs_.push_back(conv(c, h));
  convs_.push_back(conv(h, h));
  convs_.push_back(conv(h, h));
  convs_.push_back(conv(config_.input_skip ? h + c : h, c));
  if (config_.log_residual) {
    // start as the identity map on the volume
    for (auto& w : convs_.back().weight.mutable_data()) w = 0.0f;
  }
}

SimilarityVolume SmoothingNet::smooth_volume(const SimilarityVolume& volume) const {
  const Tensor& v = volume.data;
  if (v.rank() != 4 || v.dim(0) != 1 || v.dim(1) != static_cast<std::size_t>(config_.channels)) {
    throw DimensionError("smoothing net trained for " + std::to_string(config_.channels) + " channels, got volume " +
                         shape_str(v.shape()));
  }
  if (v.dim(2) % 4 || v.dim(3) % 4) throw DimensionError("smoothing net needs spatial extent divisible by 4");
  auto apply = [](const Conv& c, const Tensor& x) { return conv2d(x, c.weight, c.bias, 1, 1); };

  Tensor x = max_pool2x2(relu(apply(convs_[0], v)));
  x = max_pool2x2(relu(apply(convs_[1], x)));
  x = relu(apply(convs_[2], upsample2x(x)));
  x = upsample2x(x);
  if (config_.input_skip) {
    std::array<Tensor, 2> parts{x, v};
    x = concat(parts, 1);
  }
  Tensor logits = apply(convs_[3], x);
  if (config_.log_residual) logits = add(logits, log(v));

  SimilarityVolume out = volume;
  out.data = softmax(logits, 1);
  out.kind = correspond::VolumeKind::smoothed;
  return out;
}

std::vector<NamedTensor> SmoothingNet::parameters() const {
  static constexpr std::array<const char*, 4> kNames{"down1", "down2", "up1", "out"};
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    out.push_back({prefix_ + "." + kNames[i] + ".weight", convs_[i].weight});
    out.push_back({prefix_ + "." + kNames[i] + ".bias", convs_[i].bias});
  }
  return out;
}

SimilarityVolume one_hot_collapse(const SimilarityVolume& volume) {
  const int c = volume.channels(), plane = volume.height() * volume.width();
  const auto src = volume.data.data();
  std::vector<float> out(src.size(), 0.0f);
  for (int p = 0; p < plane; ++p) {
    int best = 0;
    for (int ch = 1; ch < c; ++ch) {
      if (src[static_cast<std::size_t>(ch) * plane + p] > src[static_cast<std::size_t>(best) * plane + p]) best = ch;
    }
    out[static_cast<std::size_t>(best) * plane + p] = 1.0f;
  }
  SimilarityVolume result = volume;
  result.data = Tensor::from(volume.data.shape(), std::move(out));
  result.kind = correspond::VolumeKind::normalized;
  return result;
}

}  // namespace swarmfuse::smooth
