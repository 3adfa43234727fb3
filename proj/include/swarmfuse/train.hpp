#pragma once

// Methods (the full model, its ablations and the baselines), losses,
// evaluation and the training loop.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "swarmfuse/backbone.hpp"
#include "swarmfuse/correspond.hpp"
#include "swarmfuse/fuse.hpp"
#include "swarmfuse/metrics.hpp"
#include "swarmfuse/scenegen.hpp"
#include "swarmfuse/smooth.hpp"

namespace swarmfuse::train {

// Declaration order is the report's row order.
enum class Method { Inpainting, InputStack, FeatureStack, ViewPooling, NoSimLoss, NoSmoothing, OneHot, MAIN };

inline constexpr std::array<Method, 8> kAllMethods{Method::Inpainting,  Method::InputStack, Method::FeatureStack,
                                                   Method::ViewPooling, Method::NoSimLoss,  Method::NoSmoothing,
                                                   Method::OneHot,      Method::MAIN};

std::string method_name(Method m);
/// Throws ConfigError for unknown names.
Method parse_method(const std::string& name);

struct MethodSpec {
  Method method = Method::MAIN;
  float w_seg = 1.0f;
  float w_corr = 1.0f;

  static MethodSpec make(Method m, float w_seg = 1.0f, float w_corr = 1.0f);
  std::string name() const { return method_name(method); }
  /// Builds similarity volumes (MAIN and its ablations).
  bool builds_volume() const;
  bool uses_smoothing() const;
  /// w_corr as applied: zero for NoSimLoss and the baselines.
  float effective_corr_weight() const;
};

struct ModelConfig {
  backbone::BackboneConfig backbone;
  int smooth_hidden = 64;
  bool smooth_input_skip = true;
  bool smooth_log_residual = true;
  float tau = 1.0f;
  std::uint64_t seed = 1;
};

class Model {
 public:
  Model(ModelConfig config, MethodSpec method);

  const ModelConfig& config() const { return config_; }
  const MethodSpec& method() const { return method_; }
  const backbone::Backbone& net() const { return net_; }
  /// Null for methods without a smoothing network.
  const smooth::SmoothingNet* smoother() const { return smoother_ ? &*smoother_ : nullptr; }

  std::vector<NamedTensor> parameters() const;
  void save(const std::string& path) const;
  /// Every parameter must be present by name and shape; extra tensors are ignored.
  void load(const std::string& path);

 private:
  ModelConfig config_;
  MethodSpec method_;
  backbone::Backbone net_;
  std::optional<smooth::SmoothingNet> smoother_;
};

struct ForwardOptions {
  bool bypass_smoothing = false;  // route the normalised volume straight to fusion
};

/// Everything the fused path produced for one receiving agent.
struct FusionOutput {
  Tensor logits;
  std::vector<correspond::SimilarityVolume> normalized;  // per incoming map
  std::vector<correspond::SimilarityVolume> smoothed;    // equals normalized when smoothing is bypassed
  std::vector<fuse::CorrespondenceMap> maps;
  std::vector<fuse::WarpedFeatures> warped;
  fuse::Selection selection;
};

/// Matching, smoothing, warping, selection and decoding for one receiver.
/// Only valid for methods that build volumes.
FusionOutput fuse_and_decode(const Model& model, const backbone::FeatureMap& own,
                             std::span<const backbone::FeatureMap> incoming, const ForwardOptions& options = {});

struct ForwardResult {
  Tensor logits;                          // [1, C, H, W] for agent 0
  std::vector<backbone::FeatureMap> features;  // per agent that was encoded
  std::optional<FusionOutput> fusion;     // volume-building methods only
};

/// Agent 0 is the primary. Volume methods use every other agent as a
/// candidate; the stacking and pooling baselines use agent 1 (pooling all).
ForwardResult forward_method(const scene::SceneSample& sample, const Model& model, const ForwardOptions& options = {});

/// Reads of ground-truth correspondence and label data.
struct AccessCounters {
  std::uint64_t correspondence_reads = 0;
  std::uint64_t label_reads = 0;
};

struct LossResult {
  Tensor total;
  double seg = 0.0;
  double corr = 0.0;  // unweighted; 0 when not supervised
  ForwardResult forward;
};

/// w_seg * CE(segmentation) + w_corr * (CE(normalized) + CE(smoothed)), the
/// correspondence terms averaged over incoming maps.
LossResult total_loss(const scene::SceneSample& sample, const Model& model, AccessCounters* counters = nullptr);

/// Cells (on the feature grid) whose pixels are all clean in agent 0.
std::vector<std::uint8_t> clean_cells(const scene::SceneSample& sample, int stride);

struct Evaluation {
  metrics::Confusion confusion;     // agent 0, degradation mask
  metrics::Counts corr_final;       // argmax of the volume used for fusion
  metrics::Counts corr_raw;         // argmax of the normalised volume
  metrics::Counts corr_final_clean; // same, clean cells only
  metrics::Counts corr_raw_clean;
  std::size_t samples = 0;

  double mean_iou() const { return metrics::mean_iou(confusion); }
  double mean_accuracy() const { return metrics::mean_accuracy(confusion); }
};

/// Scores `model` on every sample (parallel over samples, no graph recording).
Evaluation evaluate(const Model& model, const scene::Dataset& data, const ForwardOptions& options = {});

struct Hyperparams {
  int epochs = 20;
  int batch = 8;
  float lr = 0.01f;
  float momentum = 0.9f;
  std::uint64_t seed = 1;
};

struct EpochLog {
  int epoch = 0;
  double seg_loss = 0.0;
  double corr_loss = 0.0;
  double val_miou = 0.0;
  double val_corr_acc = 0.0;
};

std::string log_header();
std::string format_log_row(const EpochLog& row);

struct FitOptions {
  std::string checkpoint_path;  // written whenever validation mIoU improves
  std::string log_path;         // CSV, rewritten after every epoch
  std::function<void(const EpochLog&)> on_epoch;
};

struct FitResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_miou = 0.0;
  AccessCounters counters;
};

/// Momentum SGD over shuffled mini-batches. On return the model holds the
/// parameters of the best validation epoch. A non-finite loss restores the
/// last good parameters, writes them, and throws DivergenceError.
FitResult fit(Model& model, const scene::Dataset& train, const scene::Dataset& val, const Hyperparams& hp,
              const FitOptions& options = {});

}  // namespace swarmfuse::train
