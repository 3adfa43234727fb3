#include "swarmfuse/fuse.hpp"

#include <array>
#include <limits>
#include <stdexcept>

#include "swarmfuse/errors.hpp"

namespace swarmfuse::fuse {

CorrespondenceMap to_correspondence_map(const correspond::SimilarityVolume& volume) {
  CorrespondenceMap map;
  map.height = volume.height();
  map.width = volume.width();
  map.grid_b_height = volume.grid_b_height;
  map.grid_b_width = volume.grid_b_width;
  const int c = volume.channels();
  if (c != map.grid_b_cells() + 1) throw DimensionError("volume channels do not match its B grid");
  const std::size_t plane = static_cast<std::size_t>(map.height) * map.width;
  const auto v = volume.data.data();
  map.channel.resize(plane);
  map.best_prob.resize(plane);
  map.no_match_prob.resize(plane);
  for (std::size_t p = 0; p < plane; ++p) {
    int best = 0;
    for (int ch = 1; ch < c; ++ch) {
      if (v[static_cast<std::size_t>(ch) * plane + p] > v[static_cast<std::size_t>(best) * plane + p]) best = ch;
    }
    map.channel[p] = best;
    map.best_prob[p] = v[static_cast<std::size_t>(best) * plane + p];
    map.no_match_prob[p] = v[static_cast<std::size_t>(c - 1) * plane + p];
  }
  return map;
}

CorrespondenceMap map_from_channels(std::span<const std::uint16_t> channels, int height, int width, int grid_b_height,
                                    int grid_b_width) {
  if (channels.size() != static_cast<std::size_t>(height) * width) throw DimensionError("map_from_channels: size");
  CorrespondenceMap map{height, width, grid_b_height, grid_b_width, {}, {}, {}};
  for (auto c : channels) {
    if (c > map.grid_b_cells()) throw DimensionError("map_from_channels: channel out of range");
    map.channel.push_back(c);
    const bool match = c < map.grid_b_cells();
    map.best_prob.push_back(1.0f);
    map.no_match_prob.push_back(match ? 0.0f : 1.0f);
  }
  return map;
}

WarpedFeatures warp_features(const CorrespondenceMap& map, const Tensor& f_b) {
  if (f_b.rank() != 4 || f_b.dim(0) != 1 || f_b.dim(2) != static_cast<std::size_t>(map.grid_b_height) ||
      f_b.dim(3) != static_cast<std::size_t>(map.grid_b_width)) {
    throw DimensionError("warp_features: map expects a " + std::to_string(map.grid_b_height) + "x" +
                         std::to_string(map.grid_b_width) + " grid, got " + shape_str(f_b.shape()));
  }
  const std::size_t k = f_b.dim(1);
  const std::size_t cells_b = static_cast<std::size_t>(map.grid_b_cells());
  WarpedFeatures out;
  std::vector<std::int32_t> index(map.channel.size());
  out.valid.resize(map.channel.size());
  for (std::size_t p = 0; p < index.size(); ++p) {
    const auto ch = map.channel[p];
    if (ch < 0 || static_cast<std::size_t>(ch) > cells_b) throw std::logic_error("correspondence channel out of range");
    out.valid[p] = map.is_match(p) ? 1 : 0;
    index[p] = out.valid[p] ? ch : -1;
  }
  Tensor flat = reshape(f_b, {1, k, cells_b});
  out.features = reshape(gather(flat, 2, index),
                         {1, k, static_cast<std::size_t>(map.height), static_cast<std::size_t>(map.width)});
  return out;
}

Selection hard_select(const Tensor& own, std::span<const Candidate> candidates) {
  Selection sel;
  const std::size_t plane = own.rank() == 4 ? own.dim(2) * own.dim(3) : 0;
  if (own.rank() != 4 || own.dim(0) != 1) throw DimensionError("hard_select expects [1, K, H, W] features");
  sel.source.assign(plane, kSelf);
  if (candidates.empty()) {
    sel.features = own;
    return sel;
  }
  std::vector<Tensor> sources{own};
  for (const auto& c : candidates) {
    if (c.warped->shape() != own.shape() || c.map->channel.size() != plane) {
      throw DimensionError("hard_select: candidate " + std::to_string(c.agent_id) + " has shape " +
                           shape_str(c.warped->shape()) + ", own " + shape_str(own.shape()));
    }
    sources.push_back(*c.warped);
  }
  std::vector<std::int32_t> choice(plane, 0);
  for (std::size_t p = 0; p < plane; ++p) {
    float self_score = std::numeric_limits<float>::infinity();
    bool any = false;
    for (const auto& c : candidates) {
      if (!c.map->is_match(p)) continue;
      any = true;
      self_score = std::min(self_score, c.map->no_match_prob[p]);
    }
    if (!any) continue;
    float best = self_score;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto& m = *candidates[i].map;
      if (m.is_match(p) && m.best_prob[p] > best) {
        best = m.best_prob[p];
        choice[p] = static_cast<std::int32_t>(i + 1);
        sel.source[p] = candidates[i].agent_id;
      }
    }
  }
  sel.features = select(sources, choice);
  return sel;
}

Selection hard_select_pair(const Tensor& own, const Tensor& warped, const CorrespondenceMap& map, int agent_id) {
  if (own.rank() != 4 || warped.shape() != own.shape() || map.channel.size() != own.dim(2) * own.dim(3)) {
    throw DimensionError("hard_select_pair: shape mismatch");
  }
  const std::size_t plane = map.channel.size();
  Selection sel;
  sel.source.assign(plane, kSelf);
  std::vector<std::int32_t> choice(plane, 0);
  for (std::size_t p = 0; p < plane; ++p) {
    if (map.is_match(p) && map.best_prob[p] > map.no_match_prob[p]) {
      choice[p] = 1;
      sel.source[p] = agent_id;
    }
  }
  std::array<Tensor, 2> sources{own, warped};
  sel.features = select(sources, choice);
  return sel;
}

}  // namespace swarmfuse::fuse
