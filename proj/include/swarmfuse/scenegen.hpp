#pragma once

// Procedural multi-view dataset: a labelled, textured top-down world seen by
// N agents through square viewports that are stride-aligned and rotated by
// multiples of 90 degrees, so cell-level correspondences are exact.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "swarmfuse/rng.hpp"

namespace swarmfuse::scene {

struct World {
  std::uint64_t seed = 0;
  int size = 0;
  int num_classes = 0;
  std::vector<std::uint8_t> labels;  // size * size
  std::vector<float> texture;        // size * size * 3, interleaved RGB

  std::uint8_t label(int row, int col) const { return labels[static_cast<std::size_t>(row) * size + col]; }
  float color(int row, int col, int channel) const {
    return texture[(static_cast<std::size_t>(row) * size + col) * 3 + channel];
  }
};

/// Class 0 is background; `num_shapes` random rectangles take classes
/// 1..num_classes-1. `view_extent` is the largest viewport the world must
/// host; the world must be at least four times larger.
World generate_world(std::uint64_t seed, int size, int num_classes, int num_shapes, int view_extent = 32);

/// Base colour of a class; the texture adds +-kTextureNoise per texel.
std::array<float, 3> class_color(int cls);
inline constexpr float kTextureNoise = 0.15f;

struct Viewport {
  int row = 0;  // world texel of the footprint's top-left corner
  int col = 0;
  int quarter_turns = 0;  // counter-clockwise image rotation, 0..3
  int height = 32;
  int width = 32;

  bool operator==(const Viewport&) const = default;
};

/// Channel-planar RGB image, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // [3][height][width]

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(3) * h * w, 0.0f) {}
  float& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

struct View {
  Image image;
  std::vector<std::uint8_t> labels;  // height * width
};

View render(const World& world, const Viewport& view);

/// World texel seen at image pixel (y, x).
std::pair<int, int> pixel_to_world(const Viewport& view, int y, int x);

struct ViewSampling {
  int height = 32;
  int width = 32;
  int stride = 4;
  double overlap = 0.5;         // minimum fraction of agent-0 cells visible to agent j
  double overlap_max = -1.0;    // if > overlap, each agent draws its minimum from [overlap, overlap_max]
  double disjoint_prob = 0.0;   // chance that agent j sees none of agent 0's cells
  bool rotate_each = false;     // independent rotation per agent (else shared)
  int max_shift_cells = -1;     // bound on |offset| from agent 0, in cells; -1 = none
  int max_attempts = 1000;
};

/// Agent 0 is placed uniformly; agents j > 0 by rejection sampling.
/// Throws PlacementError when no acceptable placement is found.
std::vector<Viewport> sample_views(const World& world, int n_agents, const ViewSampling& cfg, Rng& rng);

/// Per cell of `a`, the row-major index of the cell of `b` containing the
/// same world point, or cells(b) for no-match.
std::vector<std::uint16_t> ground_truth_correspondence(const Viewport& a, const Viewport& b, int stride);

/// Fraction of cells with a match.
double overlap_fraction(const std::vector<std::uint16_t>& correspondence, int cells);

struct Degradation {
  Image image;
  std::vector<std::uint8_t> mask;  // 1 inside the noise rectangle
  int top = 0, left = 0, rect_height = 0, rect_width = 0;
};

/// Replace one axis-aligned rectangle covering a fraction of the image area
/// in [min_frac, max_frac] with i.i.d. uniform noise.
Degradation apply_degradation(const Image& image, Rng& rng, double min_frac, double max_frac);

struct SceneSample {
  std::vector<Image> images;                          // per agent; agent 0 is degraded
  std::vector<std::vector<std::uint8_t>> labels;      // per agent, clean
  std::vector<std::uint8_t> degradation;              // agent 0 only
  std::vector<std::vector<std::uint16_t>> correspondence;  // [j - 1] holds 0 -> j

  int agents() const { return static_cast<int>(images.size()); }
  bool operator==(const SceneSample&) const = default;
};

struct DatasetHeader {
  int agents = 2;
  int height = 32;
  int width = 32;
  int stride = 4;
  int num_classes = 5;

  int cells() const { return (height / stride) * (width / stride); }
  bool operator==(const DatasetHeader&) const = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<SceneSample> samples;
};

struct Preset {
  std::string name;
  int world_size = 128;
  int num_classes = 5;
  int num_shapes = 150;
  int agents = 2;
  ViewSampling views;
  double min_degraded = 0.1;
  double max_degraded = 0.3;
};

/// "sequence": shared rotation, small offsets, high overlap.
/// "cross": independent rotations, overlap drawn from [0, 0.8], some disjoint views.
Preset make_preset(const std::string& name, int agents);

struct GeneratedSample {
  SceneSample sample;
  std::vector<Viewport> views;
};

/// Sample `index` of a dataset; depends only on (preset, seed, index).
GeneratedSample generate_sample(const Preset& preset, std::uint64_t seed, std::uint64_t index);

Dataset generate_dataset(const Preset& preset, std::uint64_t seed, std::size_t count, std::size_t first_index = 0);

void write_dataset(const std::string& path, const Dataset& dataset);
Dataset read_dataset(const std::string& path);

inline constexpr std::size_t kDatasetHeaderBytes = 4 + 4 + 5 * 4 + 4;
std::size_t sample_record_bytes(const DatasetHeader& header);

}  // namespace swarmfuse::scene
