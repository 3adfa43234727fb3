#include "swarmfuse/backbone.hpp"

#include <cmath>

#include "swarmfuse/errors.hpp"

namespace swarmfuse::backbone {

void BackboneConfig::validate() const {
  if (widths.empty()) throw ConfigError("backbone needs at least one downsampling block");
  if (height <= 0 || width <= 0 || height % stride() || width % stride()) {
    throw ConfigError("image extent " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by stride " + std::to_string(stride()));
  }
  if (feature_dim <= 0 || input_channels <= 0 || num_classes < 1) throw ConfigError("non-positive channel count");
  for (int w : widths) {
    if (w <= 0) throw ConfigError("non-positive block width");
  }
}

Tensor image_tensor(const scene::Image& image) {
  return Tensor::from({1, 3, static_cast<std::size_t>(image.height), static_cast<std::size_t>(image.width)},
                      image.pixels);
}

Tensor he_normal(Shape shape, Rng& rng) {
  const std::size_t fan_in = shape_numel(shape) / shape[0];
  const float sd = std::sqrt(2.0f / static_cast<float>(fan_in));
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = sd * static_cast<float>(rng.normal());
  return Tensor::from(std::move(shape), std::move(v), true);
}

Backbone::Conv Backbone::make_conv(int in, int out, Rng& rng) const {
  auto o = static_cast<std::size_t>(out);
  return {he_normal({o, static_cast<std::size_t>(in), 3, 3}, rng), Tensor::zeros({o}, true)};
}

Backbone::Backbone(BackboneConfig config, std::uint64_t seed, std::string prefix)
    : config_(std::move(config)), prefix_(std::move(prefix)) {
  config_.validate();
  Rng rng(seed);
  const auto& w = config_.widths;
  int in = config_.input_channels;
  for (int width : w) {
    encoder_.push_back(make_conv(in, width, rng));
    in = width;
  }
  encoder_.push_back(make_conv(in, config_.feature_dim, rng));

  decoder_.push_back(make_conv(config_.decoder_channels(), w.back(), rng));
  for (std::size_t b = w.size(); b-- > 1;) decoder_.push_back(make_conv(w[b], w[b - 1], rng));
  decoder_.push_back(make_conv(w.front(), config_.output_channels(), rng));
}

Tensor Backbone::encode(const Tensor& image) const {
  const Shape want{1, static_cast<std::size_t>(config_.input_channels), static_cast<std::size_t>(config_.height),
                   static_cast<std::size_t>(config_.width)};
  if (image.shape() != want) {
    throw DimensionError("encode expects " + shape_str(want) + ", got " + shape_str(image.shape()));
  }
  Tensor x = image;
  for (std::size_t b = 0; b + 1 < encoder_.size(); ++b) x = max_pool2x2(relu(apply(encoder_[b], x)));
  return apply(encoder_.back(), x);
}

FeatureMap Backbone::encode(const scene::Image& image, int agent_id, int frame_id) const {
  return {agent_id, frame_id, encode(image_tensor(image))};
}

Tensor Backbone::decode(const Tensor& features) const {
  const Shape want{1, static_cast<std::size_t>(config_.decoder_channels()),
                   static_cast<std::size_t>(config_.grid_height()), static_cast<std::size_t>(config_.grid_width())};
  if (features.shape() != want) {
    throw DimensionError("decode expects " + shape_str(want) + ", got " + shape_str(features.shape()));
  }
  // projection at grid resolution, then upsample before every later conv
  Tensor x = relu(apply(decoder_.front(), features));
  for (std::size_t l = 1; l < decoder_.size(); ++l) {
    x = apply(decoder_[l], upsample2x(x));
    if (l + 1 < decoder_.size()) x = relu(x);
  }
  if (config_.task == Task::reconstruction) x = clamp(x, 0.0f, 1.0f);
  return x;
}

std::vector<NamedTensor> Backbone::parameters() const {
  std::vector<NamedTensor> out;
  auto add = [&](const std::string& part, const std::vector<Conv>& convs) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      const std::string base = prefix_ + "." + part + std::to_string(i);
      out.push_back({base + ".weight", convs[i].weight});
      out.push_back({base + ".bias", convs[i].bias});
    }
  };
  add("enc", encoder_);
  add("dec", decoder_);
  return out;
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

}  // namespace swarmfuse::backbone
