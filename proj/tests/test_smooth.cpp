#include <doctest.h>

#include "gradcheck.hpp"
#include "swarmfuse/errors.hpp"
#include "swarmfuse/smooth.hpp"

using namespace swarmfuse;
using namespace swarmfuse::correspond;
using namespace swarmfuse::smooth;
using swarmfuse::testing::grad_check;
using swarmfuse::testing::random_tensor;

namespace {

SimilarityVolume random_volume(Rng& rng, float spread, int grid = 8) {
  auto a = random_tensor({1, 16, static_cast<std::size_t>(grid), static_cast<std::size_t>(grid)}, rng, -spread, spread, false);
  auto b = random_tensor({1, 16, static_cast<std::size_t>(grid), static_cast<std::size_t>(grid)}, rng, -spread, spread, false);
  return build_volume(a, b);
}

// Randomises every parameter so the test does not depend on the zero-initialised head.
void scramble(const SmoothingNet& net, Rng& rng, float spread) {
  for (const auto& p : net.parameters()) {
    auto t = p.tensor;
    for (auto& v : t.mutable_data()) v = rng.uniform(-spread, spread);
  }
}

SimilarityVolume volume_from(std::vector<float> fibers, int channels, int h, int w, int gb_h, int gb_w) {
  SimilarityVolume v;
  v.data = Tensor::from({1, static_cast<std::size_t>(channels), static_cast<std::size_t>(h), static_cast<std::size_t>(w)},
                        std::move(fibers));
  v.grid_b_height = gb_h;
  v.grid_b_width = gb_w;
  return v;
}

}  // namespace

TEST_SUITE("smooth_volume") {
  TEST_CASE("output keeps the 8x8x65 shape and is a distribution per fiber") {
    SmoothingNet net({}, 1);
    Rng rng(1);
    scramble(net, rng, 0.1f);
    auto v = random_volume(rng, 1.0f);
    auto s = net.smooth_volume(v);
    CHECK(s.kind == VolumeKind::smoothed);
    CHECK(s.data.shape() == v.data.shape());
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        double sum = 0.0;
        for (int c = 0; c < 65; ++c) {
          CHECK(s.at(c, y, x) >= 0.0f);
          sum += s.at(c, y, x);
        }
        CHECK(std::abs(sum - 1.0) <= 1e-5);
      }
    }
  }

  TEST_CASE("normalisation holds over 1000 random inputs") {
    SmoothingNet net({}, 2);
    Rng rng(2);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      if (trial % 100 == 0) scramble(net, rng, 0.02f * static_cast<float>(1 + trial / 100));
      auto s = net.smooth_volume(random_volume(rng, trial % 2 ? 0.2f : 3.0f));
      for (int p = 0; p < 64; ++p) {
        double sum = 0.0;
        for (int c = 0; c < 65; ++c) sum += s.data.data()[static_cast<std::size_t>(c) * 64 + static_cast<std::size_t>(p)];
        worst = std::max(worst, std::abs(sum - 1.0));
      }
    }
    CHECK(worst <= 1e-5);
  }

  TEST_CASE("freshly initialised net reproduces its input") {
    SmoothingNet net({}, 3);
    Rng rng(3);
    auto v = random_volume(rng, 0.5f);
    auto s = net.smooth_volume(v);
    for (std::size_t i = 0; i < v.data.numel(); ++i) CHECK(s.data.data()[i] == doctest::Approx(v.data.data()[i]).epsilon(1e-4));
  }

  TEST_CASE("channel mismatch is a dimension error") {
    SmoothingNet net({}, 4);
    Rng rng(4);
    auto small = build_volume(random_tensor({1, 4, 4, 4}, rng), random_tensor({1, 4, 2, 2}, rng));
    CHECK_THROWS_AS(net.smooth_volume(small), DimensionError);
  }

  TEST_CASE("gradients reach the input and every parameter") {
    SmoothingConfig cfg;
    cfg.channels = 5;
    cfg.hidden = 3;
    SmoothingNet net(cfg, 5);
    Rng rng(5);
    scramble(net, rng, 0.5f);
    auto a = random_tensor({1, 4, 4, 4}, rng);
    auto b = random_tensor({1, 4, 2, 2}, rng);
    std::vector<Tensor> inputs{a};
    for (const auto& p : net.parameters()) inputs.push_back(p.tensor);
    auto r = grad_check([&](const std::vector<Tensor>& in) { return net.smooth_volume(build_volume(in[0], b)).data; },
                        inputs, 1e-3, 40);
    CHECK(r.max_rel_error < 1e-3);
  }

  TEST_CASE("variants without skip or residual still normalise") {
    SmoothingConfig cfg;
    cfg.input_skip = false;
    cfg.log_residual = false;
    SmoothingNet net(cfg, 6);
    Rng rng(6);
    auto s = net.smooth_volume(random_volume(rng, 1.0f));
    double sum = 0.0;
    for (int c = 0; c < 65; ++c) sum += s.at(c, 3, 3);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(net.parameters().back().tensor.shape() == Shape{65});
    CHECK(net.parameters()[6].tensor.shape() == Shape{65, 64, 3, 3});
  }
}

TEST_SUITE("one_hot_collapse") {
  TEST_CASE("[0.1, 0.7, 0.2] becomes [0, 1, 0]") {
    auto v = volume_from({0.1f, 0.7f, 0.2f}, 3, 1, 1, 1, 2);
    auto o = one_hot_collapse(v);
    CHECK(o.at(0, 0, 0) == 0.0f);
    CHECK(o.at(1, 0, 0) == 1.0f);
    CHECK(o.at(2, 0, 0) == 0.0f);
  }

  TEST_CASE("uniform fiber collapses to channel 0") {
    auto o = one_hot_collapse(volume_from(std::vector<float>(5, 0.2f), 5, 1, 1, 2, 2));
    CHECK(o.at(0, 0, 0) == 1.0f);
    for (int c = 1; c < 5; ++c) CHECK(o.at(c, 0, 0) == 0.0f);
  }

  TEST_CASE("idempotent, zero entropy") {
    Rng rng(7);
    auto v = random_volume(rng, 1.0f);
    auto once = one_hot_collapse(v);
    auto twice = one_hot_collapse(once);
    CHECK(std::equal(once.data.data().begin(), once.data.data().end(), twice.data.data().begin()));
    for (int p = 0; p < 64; ++p) {
      double entropy = 0.0;
      for (int c = 0; c < 65; ++c) {
        const double q = once.data.data()[static_cast<std::size_t>(c) * 64 + static_cast<std::size_t>(p)];
        if (q > 0.0) entropy -= q * std::log(q);
      }
      CHECK(entropy == 0.0);
    }
  }
}
