#pragma once

// Finite-difference check of the full MAIN training loss.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "swarmfuse/train.hpp"

namespace swarmfuse::testing {

// A narrow 16x16 MAIN model whose smoothing head is randomised so that
// gradients reach every smoothing parameter.
inline train::Model small_main_model() {
  train::ModelConfig cfg;
  cfg.backbone.height = cfg.backbone.width = 16;
  cfg.backbone.widths = {4, 6};
  cfg.backbone.feature_dim = 4;
  cfg.smooth_hidden = 4;
  cfg.seed = 12;
  train::Model model(cfg, train::MethodSpec::make(train::Method::MAIN));
  Rng rng(12);
  for (const auto& p : model.smoother()->parameters()) {
    auto t = p.tensor;
    if (p.name.find("out") != std::string::npos) {
      for (auto& v : t.mutable_data()) v = rng.uniform(-0.1f, 0.1f);
    }
  }
  return model;
}

// 16x16 two-agent sample cut from a generated one, with a hand-made map.
inline scene::SceneSample crop_sample(const scene::SceneSample& src) {
  scene::SceneSample s;
  for (std::size_t a = 0; a < 2; ++a) {
    scene::Image img(16, 16);
    std::vector<std::uint8_t> lab(256);
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = src.images[a].at(c, y, x + 8);
        lab[static_cast<std::size_t>(y * 16 + x)] = src.labels[a][static_cast<std::size_t>(y * 32 + x + 8)];
      }
    }
    s.images.push_back(img);
    s.labels.push_back(lab);
  }
  s.degradation.assign(256, 0);
  s.correspondence.push_back({});
  for (int c = 0; c < 16; ++c) s.correspondence[0].push_back(static_cast<std::uint16_t>(c % 3 == 0 ? 16 : c));
  return s;
}

// Every discrete decision taken by a forward pass: relu signs, pool
// winners, log floors, correspondence argmaxes and selections.
inline std::vector<std::int64_t> decisions(const train::LossResult& loss) {
  std::vector<std::int64_t> out;
  for (const auto& e : trace(loss.total).nodes) {
    const auto* node = static_cast<const detail::Node*>(e.id);
    const std::string op = e.op;
    if (op == "relu" || op == "log") {
      const float cut = op == "relu" ? 0.0f : 1e-8f;
      for (float v : node->parents[0]->data) out.push_back(v > cut);
    } else if (op == "max_pool2x2") {
      const auto& in = node->parents[0]->data;
      const std::size_t h = node->parents[0]->shape[2], w = node->parents[0]->shape[3];
      const std::size_t planes = in.size() / (h * w);
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t y = 0; y < h; y += 2) {
          for (std::size_t x = 0; x < w; x += 2) {
            const std::size_t base = p * h * w + y * w + x;
            const std::array<std::size_t, 4> idx{base, base + 1, base + w, base + w + 1};
            std::size_t best = 0;
            for (std::size_t k = 1; k < 4; ++k) {
              if (in[idx[k]] > in[idx[best]]) best = k;
            }
            out.push_back(static_cast<std::int64_t>(best));
          }
        }
      }
    }
  }
  for (const auto& m : loss.forward.fusion->maps) out.insert(out.end(), m.channel.begin(), m.channel.end());
  const auto& src = loss.forward.fusion->selection.source;
  out.insert(out.end(), src.begin(), src.end());
  return out;
}

struct KinkAwareResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

// Central differences on the total loss over a strided subset of every
// parameter. Coordinates whose stencil crosses a switching point are skipped:
// the loss is only piecewise smooth there and the analytic gradient is that
// of the active piece.
inline KinkAwareResult kink_aware_check(const train::Model& model, const scene::SceneSample& s, std::size_t per_param) {
  const double eps = 1e-3;
  auto params = model.parameters();
  for (auto p : params) p.tensor.zero_grad();
  train::total_loss(s, model).total.backward();
  KinkAwareResult r;
  for (auto p : params) {
    const std::size_t n = p.tensor.numel();
    const std::size_t step = std::max<std::size_t>(1, n / per_param);
    for (std::size_t i = 0; i < n; i += step) {
      const float original = p.tensor.data()[i];
      const float up = static_cast<float>(original + eps), down = static_cast<float>(original - eps);
      p.tensor.mutable_data()[i] = up;
      auto hi = train::total_loss(s, model);
      p.tensor.mutable_data()[i] = down;
      auto lo = train::total_loss(s, model);
      p.tensor.mutable_data()[i] = original;
      if (decisions(hi) != decisions(lo)) {
        ++r.skipped;
        continue;
      }
      const double numeric = (static_cast<double>(hi.total.item()) - lo.total.item()) / (static_cast<double>(up) - down);
      const double analytic = p.tensor.grad()[i];
      r.max_rel_error = std::max(r.max_rel_error, std::abs(numeric - analytic) /
                                                      std::max({1.0, std::abs(numeric), std::abs(analytic)}));
      ++r.checked;
    }
  }
  return r;
}

}  // namespace swarmfuse::testing
