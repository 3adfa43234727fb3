#include <doctest.h>

#include "gradcheck.hpp"
#include "swarmfuse/backbone.hpp"
#include "swarmfuse/errors.hpp"

using namespace swarmfuse;
using namespace swarmfuse::backbone;
using swarmfuse::testing::grad_check;
using swarmfuse::testing::random_tensor;

TEST_SUITE("backbone") {
  TEST_CASE("encode 32x32 to an 8x8x16 grid") {
    Backbone net({}, 1);
    Rng rng(1);
    auto f = net.encode(random_tensor({1, 3, 32, 32}, rng, 0.0f, 1.0f, false));
    CHECK(f.shape() == Shape{1, 16, 8, 8});
    CHECK(net.config().stride() == 4);
  }

  TEST_CASE("128x128 input gives a 32x32 grid") {
    BackboneConfig cfg;
    cfg.height = cfg.width = 128;
    cfg.feature_dim = 8;
    Backbone net(cfg, 2);
    Rng rng(2);
    CHECK(net.encode(random_tensor({1, 3, 128, 128}, rng, 0.0f, 1.0f, false)).shape() == Shape{1, 8, 32, 32});
  }

  TEST_CASE("identical images give identical features; FeatureMap carries ids") {
    Backbone net({}, 3);
    scene::Image img(32, 32);
    Rng rng(3);
    for (auto& v : img.pixels) v = rng.uniform();
    auto a = net.encode(img, 4, 9);
    auto b = net.encode(img, 4, 9);
    CHECK(a.agent_id == 4);
    CHECK(a.frame_id == 9);
    CHECK(a.height() == 8);
    CHECK(a.channels() == 16);
    CHECK(std::equal(a.data.data().begin(), a.data.data().end(), b.data.data().begin()));
  }

  TEST_CASE("decode 8x8x16 to 32x32x5 logits") {
    Backbone net({}, 4);
    Rng rng(4);
    CHECK(net.decode(random_tensor({1, 16, 8, 8}, rng, -1.0f, 1.0f, false)).shape() == Shape{1, 5, 32, 32});
  }

  TEST_CASE("reconstruction head stays in [0, 1]") {
    BackboneConfig cfg;
    cfg.task = Task::reconstruction;
    Backbone net(cfg, 5);
    Rng rng(5);
    auto out = net.decode(random_tensor({1, 16, 8, 8}, rng, -20.0f, 20.0f, false));
    CHECK(out.shape() == Shape{1, 3, 32, 32});
    for (float v : out.data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }

  TEST_CASE("shape mismatches are dimension errors") {
    Backbone net({}, 6);
    CHECK_THROWS_AS(net.encode(Tensor::zeros({1, 3, 16, 32})), DimensionError);
    CHECK_THROWS_AS(net.encode(Tensor::zeros({1, 6, 32, 32})), DimensionError);
    CHECK_THROWS_AS(net.decode(Tensor::zeros({1, 8, 8, 8})), DimensionError);
    BackboneConfig bad;
    bad.height = 30;
    CHECK_THROWS_AS(Backbone(bad, 1), ConfigError);
  }

  TEST_CASE("decode(encode(x)) gradient w.r.t. first-layer weights matches finite differences") {
    BackboneConfig cfg;
    cfg.height = cfg.width = 16;
    cfg.widths = {4, 6};
    cfg.feature_dim = 5;
    cfg.num_classes = 3;
    Backbone net(cfg, 7);
    Rng rng(7);
    auto x = random_tensor({1, 3, 16, 16}, rng, 0.0f, 1.0f, false);
    std::vector<std::int32_t> labels(256);
    for (auto& l : labels) l = static_cast<std::int32_t>(rng.below(3));
    auto params = net.parameters();
    REQUIRE(params[0].name == "backbone.enc0.weight");
    auto r = grad_check(
        [&](const std::vector<Tensor>&) { return cross_entropy(net.decode(net.encode(x)), labels); }, {params[0].tensor},
        1e-3, 108);
    CHECK(r.checked == 108);
    CHECK(r.max_rel_error < 1e-3);
  }

  TEST_CASE("encoder is covariant to whole-cell shifts on periodic textures") {
    Backbone net({}, 8);
    // periodic texture with period 32 in both axes
    auto texture = [](int c, int y, int x) {
      return 0.5f + 0.25f * std::sin(0.19634954f * (3 * y + c)) * std::cos(0.19634954f * (5 * x - 2 * c));
    };
    std::vector<float> base(3 * 32 * 32), shifted(3 * 32 * 32);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
          base[(c * 32 + y) * 32 + x] = texture(c, y, x);
          shifted[(c * 32 + y) * 32 + x] = texture(c, y, (x + 4) % 32);  // content moves left by s
        }
      }
    }
    auto fa = net.encode(Tensor::from({1, 3, 32, 32}, base));
    auto fb = net.encode(Tensor::from({1, 3, 32, 32}, shifted));
    // interior cells only: zero padding perturbs the outer two rings
    for (int k = 0; k < 16; ++k) {
      for (int y = 2; y < 6; ++y) {
        for (int x = 2; x < 5; ++x) {
          CHECK(fb.at({0, static_cast<std::size_t>(k), static_cast<std::size_t>(y), static_cast<std::size_t>(x)}) ==
                doctest::Approx(fa.at({0, static_cast<std::size_t>(k), static_cast<std::size_t>(y),
                                       static_cast<std::size_t>(x + 1)}))
                    .epsilon(1e-5));
        }
      }
    }
  }

  TEST_CASE("one parameter set regardless of how many agents use it") {
    Backbone net({}, 9);
    const auto before = net.parameter_count();
    scene::Image img(32, 32);
    for (int agent = 0; agent < 6; ++agent) net.encode(img, agent);
    CHECK(net.parameter_count() == before);
    // enc: 3*16*9+16, 16*32*9+32, 32*16*9+16; dec: 16*32*9+32, 32*16*9+16, 16*5*9+5
    CHECK(before == 448u + 4640u + 4624u + 4640u + 4624u + 725u);
  }

  TEST_CASE("same seed gives the same initial weights") {
    Backbone a({}, 10), b({}, 10), c({}, 11);
    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    CHECK(std::equal(pa[0].tensor.data().begin(), pa[0].tensor.data().end(), pb[0].tensor.data().begin()));
    CHECK_FALSE(std::equal(pa[0].tensor.data().begin(), pa[0].tensor.data().end(), pc[0].tensor.data().begin()));
  }
}
