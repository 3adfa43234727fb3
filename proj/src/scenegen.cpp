#include "swarmfuse/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "swarmfuse/errors.hpp"

namespace swarmfuse::scene {

namespace {

constexpr char kDatasetMagic[4] = {'S', 'W', 'F', 'D'};
constexpr std::uint32_t kDatasetVersion = 1;

void check_view_geometry(const Viewport& v) {
  if (v.quarter_turns < 0 || v.quarter_turns > 3) throw ConfigError("quarter_turns must be in 0..3");
  if (v.quarter_turns % 2 == 1 && v.height != v.width) {
    throw ConfigError("odd quarter turns need a square viewport");
  }
}

// Continuous image coordinates -> coordinates inside the footprint block.
std::pair<double, double> image_to_block(const Viewport& v, double u, double w) {
  const double h = v.height, wd = v.width;
  switch (v.quarter_turns) {
    case 1: return {w, h - u};
    case 2: return {h - u, wd - w};
    case 3: return {wd - w, u};
    default: return {u, w};
  }
}

std::pair<double, double> block_to_image(const Viewport& v, double a, double b) {
  const double h = v.height, wd = v.width;
  switch (v.quarter_turns) {
    case 1: return {h - b, a};
    case 2: return {h - a, wd - b};
    case 3: return {b, wd - a};
    default: return {a, b};
  }
}

}  // namespace

std::array<float, 3> class_color(int cls) {
  static constexpr std::array<std::array<float, 3>, 5> kPalette{{
      {0.45f, 0.45f, 0.45f},  // road
      {0.70f, 0.35f, 0.25f},  // building
      {0.90f, 0.80f, 0.15f},  // bus
      {0.20f, 0.40f, 0.85f},  // car
      {0.30f, 0.70f, 0.30f},  // truck
  }};
  if (cls >= 0 && cls < static_cast<int>(kPalette.size())) return kPalette[static_cast<std::size_t>(cls)];
  Rng rng(0xC0105ULL + static_cast<std::uint64_t>(cls));
  return {rng.uniform(0.2f, 0.8f), rng.uniform(0.2f, 0.8f), rng.uniform(0.2f, 0.8f)};
}

World generate_world(std::uint64_t seed, int size, int num_classes, int num_shapes, int view_extent) {
  if (num_classes < 2 || num_classes > 255) throw ConfigError("num_classes must be in [2, 255]");
  if (size < 4 * view_extent) {
    throw ConfigError("world size " + std::to_string(size) + " must be at least 4x the view extent " +
                      std::to_string(view_extent));
  }
  if (num_shapes < 0) throw ConfigError("num_shapes must be non-negative");
  World world;
  world.seed = seed;
  world.size = size;
  world.num_classes = num_classes;
  world.labels.assign(static_cast<std::size_t>(size) * size, 0);

  Rng rng(seed);
  const int max_side = std::max(4, size / 10);
  for (int k = 0; k < num_shapes; ++k) {
    const int cls = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes - 1)));
    const int h = rng.between(3, max_side);
    const int w = rng.between(3, max_side);
    const int top = rng.between(0, size - h);
    const int left = rng.between(0, size - w);
    for (int r = top; r < top + h; ++r) {
      std::fill_n(world.labels.begin() + static_cast<std::ptrdiff_t>(r) * size + left, w, static_cast<std::uint8_t>(cls));
    }
  }

  world.texture.resize(static_cast<std::size_t>(size) * size * 3);
  for (std::size_t i = 0; i < world.labels.size(); ++i) {
    const auto base = class_color(world.labels[i]);
    for (int c = 0; c < 3; ++c) {
      world.texture[i * 3 + c] = std::clamp(base[c] + rng.uniform(-kTextureNoise, kTextureNoise), 0.0f, 1.0f);
    }
  }
  return world;
}

std::pair<int, int> pixel_to_world(const Viewport& view, int y, int x) {
  const int h = view.height, w = view.width;
  int a = y, b = x;
  switch (view.quarter_turns) {
    case 1: a = x; b = h - 1 - y; break;
    case 2: a = h - 1 - y; b = w - 1 - x; break;
    case 3: a = w - 1 - x; b = y; break;
    default: break;
  }
  return {view.row + a, view.col + b};
}

View render(const World& world, const Viewport& view) {
  check_view_geometry(view);
  if (view.row < 0 || view.col < 0 || view.row + view.height > world.size || view.col + view.width > world.size) {
    throw ConfigError("viewport lies outside the world");
  }
  View out{Image(view.height, view.width), std::vector<std::uint8_t>(static_cast<std::size_t>(view.height) * view.width)};
  for (int y = 0; y < view.height; ++y) {
    for (int x = 0; x < view.width; ++x) {
      auto [r, c] = pixel_to_world(view, y, x);
      for (int ch = 0; ch < 3; ++ch) out.image.at(ch, y, x) = world.color(r, c, ch);
      out.labels[static_cast<std::size_t>(y) * view.width + x] = world.label(r, c);
    }
  }
  return out;
}

std::vector<std::uint16_t> ground_truth_correspondence(const Viewport& a, const Viewport& b, int stride) {
  check_view_geometry(a);
  check_view_geometry(b);
  const int rows_a = a.height / stride, cols_a = a.width / stride;
  const int rows_b = b.height / stride, cols_b = b.width / stride;
  const auto no_match = static_cast<std::uint16_t>(rows_b * cols_b);
  std::vector<std::uint16_t> out(static_cast<std::size_t>(rows_a) * cols_a, no_match);
  for (int cy = 0; cy < rows_a; ++cy) {
    for (int cx = 0; cx < cols_a; ++cx) {
      auto [ba, bb] = image_to_block(a, (cy + 0.5) * stride, (cx + 0.5) * stride);
      const double wr = a.row + ba, wc = a.col + bb;
      const double qa = wr - b.row, qb = wc - b.col;
      if (qa < 0 || qb < 0 || qa >= b.height || qb >= b.width) continue;
      auto [u, v] = block_to_image(b, qa, qb);
      const int ry = static_cast<int>(std::floor(u / stride));
      const int rx = static_cast<int>(std::floor(v / stride));
      if (ry < 0 || rx < 0 || ry >= rows_b || rx >= cols_b) continue;
      out[static_cast<std::size_t>(cy) * cols_a + cx] = static_cast<std::uint16_t>(ry * cols_b + rx);
    }
  }
  return out;
}

double overlap_fraction(const std::vector<std::uint16_t>& correspondence, int cells) {
  if (correspondence.empty()) return 0.0;
  const auto matched = std::count_if(correspondence.begin(), correspondence.end(),
                                     [cells](std::uint16_t c) { return c < cells; });
  return static_cast<double>(matched) / static_cast<double>(correspondence.size());
}

std::vector<Viewport> sample_views(const World& world, int n_agents, const ViewSampling& cfg, Rng& rng) {
  if (n_agents < 1) throw ConfigError("n_agents must be >= 1");
  if (cfg.stride < 1 || cfg.height % cfg.stride || cfg.width % cfg.stride) {
    throw ConfigError("stride must divide the view extent");
  }
  if (cfg.height > world.size || cfg.width > world.size) throw ConfigError("view larger than world");
  const bool square = cfg.height == cfg.width;
  const int s = cfg.stride;
  const int rows_cells = cfg.height / s, cols_cells = cfg.width / s;
  const int max_r = (world.size - cfg.height) / s;  // aligned origin range, in cells
  const int max_c = (world.size - cfg.width) / s;

  auto random_turns = [&] { return square ? static_cast<int>(rng.below(4)) : 2 * static_cast<int>(rng.below(2)); };

  std::vector<Viewport> views;
  Viewport first;
  first.height = cfg.height;
  first.width = cfg.width;
  first.row = s * rng.between(0, max_r);
  first.col = s * rng.between(0, max_c);
  first.quarter_turns = random_turns();
  views.push_back(first);

  for (int j = 1; j < n_agents; ++j) {
    Viewport cand = first;
    if (cfg.rotate_each) cand.quarter_turns = random_turns();
    const bool disjoint = rng.bernoulli(cfg.disjoint_prob);
    double target = cfg.overlap;
    if (!disjoint && cfg.overlap_max > cfg.overlap) target = cfg.overlap + (cfg.overlap_max - cfg.overlap) * rng.uniform();

    // No offset larger than this along either axis can reach the target.
    int reach = std::max(rows_cells, cols_cells);
    if (!disjoint && target > 0.0) {
      reach = static_cast<int>(std::floor(std::min(rows_cells, cols_cells) * (1.0 - target) + 1e-9));
    }
    if (!disjoint && cfg.max_shift_cells >= 0) reach = std::min(reach, cfg.max_shift_cells);
    if (reach < 0) throw PlacementError("overlap " + std::to_string(target) + " is unreachable");

    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_attempts && !placed; ++attempt) {
      if (disjoint) {
        cand.row = s * rng.between(0, max_r);
        cand.col = s * rng.between(0, max_c);
      } else {
        cand.row = first.row + s * rng.between(-reach, reach);
        cand.col = first.col + s * rng.between(-reach, reach);
        if (cand.row < 0 || cand.col < 0 || cand.row / s > max_r || cand.col / s > max_c) continue;
      }
      const double frac = overlap_fraction(ground_truth_correspondence(first, cand, s), rows_cells * cols_cells);
      placed = disjoint ? frac == 0.0 : frac >= target;
    }
    if (!placed) {
      throw PlacementError("could not place agent " + std::to_string(j) + " with overlap " + std::to_string(target) +
                           " after " + std::to_string(cfg.max_attempts) + " attempts");
    }
    views.push_back(cand);
  }
  return views;
}

Degradation apply_degradation(const Image& image, Rng& rng, double min_frac, double max_frac) {
  if (!(min_frac > 0.0 && min_frac <= max_frac && max_frac <= 1.0)) {
    throw ConfigError("degradation fractions must satisfy 0 < min <= max <= 1");
  }
  const int h = image.height, w = image.width;
  const double area = static_cast<double>(h) * w;
  std::vector<std::pair<int, int>> shapes, any_aspect;
  for (int rh = 1; rh <= h; ++rh) {
    for (int rw = 1; rw <= w; ++rw) {
      const double frac = rh * rw / area;
      if (frac < min_frac - 1e-12 || frac > max_frac + 1e-12) continue;
      any_aspect.emplace_back(rh, rw);
      if (std::max(rh, rw) <= 2 * std::min(rh, rw)) shapes.emplace_back(rh, rw);
    }
  }
  if (shapes.empty()) shapes = any_aspect;
  if (shapes.empty()) throw ConfigError("no rectangle fits the requested degradation fraction");
  auto [rh, rw] = shapes[rng.below(shapes.size())];

  Degradation out;
  out.image = image;
  out.mask.assign(static_cast<std::size_t>(h) * w, 0);
  out.rect_height = rh;
  out.rect_width = rw;
  out.top = rng.between(0, h - rh);
  out.left = rng.between(0, w - rw);
  for (int y = out.top; y < out.top + rh; ++y) {
    for (int x = out.left; x < out.left + rw; ++x) {
      out.mask[static_cast<std::size_t>(y) * w + x] = 1;
      for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = rng.uniform();
    }
  }
  return out;
}

Preset make_preset(const std::string& name, int agents) {
  if (agents < 1) throw ConfigError("agents must be >= 1");
  Preset p;
  p.name = name;
  p.agents = agents;
  if (name == "sequence") {
    p.views.overlap = 0.5;
    p.views.max_shift_cells = 2;
    p.views.rotate_each = false;
  } else if (name == "cross") {
    p.views.overlap = 0.0;
    p.views.overlap_max = 0.8;
    p.views.disjoint_prob = 0.1;
    p.views.rotate_each = true;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected sequence or cross)");
  }
  return p;
}

GeneratedSample generate_sample(const Preset& preset, std::uint64_t seed, std::uint64_t index) {
  Rng rng = Rng::stream(seed, index);
  const int extent = std::max(preset.views.height, preset.views.width);
  World world = generate_world(rng.next(), preset.world_size, preset.num_classes, preset.num_shapes, extent);
  GeneratedSample out;
  out.views = sample_views(world, preset.agents, preset.views, rng);
  for (int i = 0; i < preset.agents; ++i) {
    View v = render(world, out.views[static_cast<std::size_t>(i)]);
    if (i == 0) {
      Degradation d = apply_degradation(v.image, rng, preset.min_degraded, preset.max_degraded);
      out.sample.images.push_back(std::move(d.image));
      out.sample.degradation = std::move(d.mask);
    } else {
      out.sample.images.push_back(std::move(v.image));
    }
    out.sample.labels.push_back(std::move(v.labels));
  }
  for (int j = 1; j < preset.agents; ++j) {
    out.sample.correspondence.push_back(
        ground_truth_correspondence(out.views[0], out.views[static_cast<std::size_t>(j)], preset.views.stride));
  }
  return out;
}

Dataset generate_dataset(const Preset& preset, std::uint64_t seed, std::size_t count, std::size_t first_index) {
  Dataset ds;
  ds.header = {preset.agents, preset.views.height, preset.views.width, preset.views.stride, preset.num_classes};
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ds.samples.push_back(generate_sample(preset, seed, first_index + i).sample);
  return ds;
}

// ---- binary format -----------------------------------------------------------

std::size_t sample_record_bytes(const DatasetHeader& h) {
  const std::size_t pixels = static_cast<std::size_t>(h.height) * h.width;
  const std::size_t n = static_cast<std::size_t>(h.agents);
  return n * 3 * pixels * 4 + n * pixels + pixels + (n - 1) * static_cast<std::size_t>(h.cells()) * 2;
}

namespace {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

class Cursor {
 public:
  explicit Cursor(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  float f32(const char* what) {
    auto bits = get<std::uint32_t>(what);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated dataset while reading ") + what, pos_);
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

void validate(const DatasetHeader& h, const SceneSample& s) {
  const std::size_t pixels = static_cast<std::size_t>(h.height) * h.width;
  bool ok = s.agents() == h.agents && s.labels.size() == s.images.size() && s.degradation.size() == pixels &&
            s.correspondence.size() == static_cast<std::size_t>(h.agents - 1);
  for (std::size_t i = 0; ok && i < s.images.size(); ++i) {
    ok = s.images[i].height == h.height && s.images[i].width == h.width && s.labels[i].size() == pixels;
  }
  for (std::size_t j = 0; ok && j < s.correspondence.size(); ++j) ok = s.correspondence[j].size() == static_cast<std::size_t>(h.cells());
  if (!ok) throw DimensionError("scene sample does not match dataset header");
}

}  // namespace

void write_dataset(const std::string& path, const Dataset& dataset) {
  const auto& h = dataset.header;
  std::string out(kDatasetMagic, 4);
  put_le<std::uint32_t>(out, kDatasetVersion);
  for (int v : {h.agents, h.height, h.width, h.stride, h.num_classes}) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.samples.size()));
  out.reserve(out.size() + dataset.samples.size() * sample_record_bytes(h));
  for (const auto& s : dataset.samples) {
    validate(h, s);
    for (const auto& img : s.images) {
      for (float v : img.pixels) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_le(out, bits);
      }
    }
    for (const auto& lab : s.labels) out.append(reinterpret_cast<const char*>(lab.data()), lab.size());
    out.append(reinterpret_cast<const char*>(s.degradation.data()), s.degradation.size());
    for (const auto& corr : s.correspondence) {
      for (auto c : corr) put_le(out, c);
    }
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("cannot open '" + path + "' for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw std::runtime_error("failed writing '" + path + "'");
}

Dataset read_dataset(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open dataset '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  Cursor in(bytes);
  in.need(4, "magic");
  if (bytes.compare(0, 4, kDatasetMagic, 4) != 0) throw FormatError("bad dataset magic", 0);
  in.get<std::uint32_t>("magic");
  const std::size_t version_at = in.pos();
  if (in.get<std::uint32_t>("version") != kDatasetVersion) throw FormatError("unsupported dataset version", version_at);
  Dataset ds;
  auto& h = ds.header;
  const std::size_t config_at = in.pos();
  h.agents = static_cast<int>(in.get<std::uint32_t>("agents"));
  h.height = static_cast<int>(in.get<std::uint32_t>("height"));
  h.width = static_cast<int>(in.get<std::uint32_t>("width"));
  h.stride = static_cast<int>(in.get<std::uint32_t>("stride"));
  h.num_classes = static_cast<int>(in.get<std::uint32_t>("classes"));
  if (h.agents < 1 || h.height < 1 || h.width < 1 || h.stride < 1 || h.height % h.stride || h.width % h.stride ||
      h.num_classes < 2 || h.num_classes > 255 || h.agents > 64 || h.height > 4096 || h.width > 4096) {
    throw FormatError("implausible dataset configuration", config_at);
  }
  const std::uint32_t count = in.get<std::uint32_t>("sample count");
  const std::size_t record = sample_record_bytes(h);
  if (in.remaining() < static_cast<std::size_t>(count) * record) {
    throw FormatError("truncated dataset: " + std::to_string(count) + " samples need " +
                          std::to_string(static_cast<std::size_t>(count) * record) + " bytes, " +
                          std::to_string(in.remaining()) + " present",
                      in.pos());
  }
  const std::size_t pixels = static_cast<std::size_t>(h.height) * h.width;
  ds.samples.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    SceneSample s;
    for (int a = 0; a < h.agents; ++a) {
      Image img(h.height, h.width);
      for (auto& v : img.pixels) v = in.f32("image");
      s.images.push_back(std::move(img));
    }
    for (int a = 0; a < h.agents; ++a) {
      std::vector<std::uint8_t> lab(pixels);
      for (auto& v : lab) {
        const std::size_t at = in.pos();
        v = in.get<std::uint8_t>("labels");
        if (v >= h.num_classes) throw FormatError("label outside class range", at);
      }
      s.labels.push_back(std::move(lab));
    }
    s.degradation.resize(pixels);
    for (auto& v : s.degradation) {
      const std::size_t at = in.pos();
      v = in.get<std::uint8_t>("degradation mask");
      if (v > 1) throw FormatError("degradation mask value not 0/1", at);
    }
    for (int j = 1; j < h.agents; ++j) {
      std::vector<std::uint16_t> corr(static_cast<std::size_t>(h.cells()));
      for (auto& c : corr) {
        const std::size_t at = in.pos();
        c = in.get<std::uint16_t>("correspondence");
        if (c > h.cells()) throw FormatError("correspondence label beyond no-match channel", at);
      }
      s.correspondence.push_back(std::move(corr));
    }
    ds.samples.push_back(std::move(s));
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after last sample", in.pos());
  return ds;
}

}  // namespace swarmfuse::scene
