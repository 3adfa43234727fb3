#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <cstring>
#include <array>

#include "gradcheck.hpp"
#include "swarmfuse/errors.hpp"
#include "swarmfuse/tensor.hpp"

using namespace swarmfuse;
using swarmfuse::testing::grad_check;
using swarmfuse::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-3;

const Shape kShapes3[] = {{1, 2, 4, 4}, {2, 3, 6, 8}, {1, 5, 8, 2}};

}  // namespace

TEST_SUITE("conv2d") {
  TEST_CASE("all-ones 3x3 sums to 9") {
    auto x = Tensor::full({1, 1, 3, 3}, 1.0f);
    auto w = Tensor::full({1, 1, 3, 3}, 1.0f);
    auto y = conv2d(x, w, Tensor::zeros({1}), 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 9.0f);
  }

  TEST_CASE("identity kernel reproduces input") {
    Rng rng(1);
    auto x = random_tensor({1, 1, 5, 7}, rng, -1, 1, false);
    std::vector<float> k(9, 0.0f);
    k[4] = 1.0f;
    auto y = conv2d(x, Tensor::from({1, 1, 3, 3}, k), Tensor::zeros({1}), 1, 1);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
  }

  TEST_CASE("output extent follows (H + 2p - k)/s + 1") {
    auto y = conv2d(Tensor::zeros({1, 2, 9, 7}), Tensor::zeros({3, 2, 3, 3}), Tensor::zeros({3}), 2, 1);
    CHECK(y.shape() == Shape{1, 3, 5, 4});
  }

  TEST_CASE("channel mismatch names both shapes") {
    try {
      conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1}));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      std::string msg = e.what();
      CHECK(msg.find("[1,2,4,4]") != std::string::npos);
      CHECK(msg.find("[1,3,3,3]") != std::string::npos);
    }
  }

  TEST_CASE("even kernel rejected") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1})),
                    DimensionError);
  }

  TEST_CASE("finite-difference gradient on 2x3x8x8 / 4x3x3x3") {
    Rng rng(3);
    auto r = grad_check([](const std::vector<Tensor>& in) { return conv2d(in[0], in[1], in[2], 1, 1); },
                        {random_tensor({2, 3, 8, 8}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)});
    CHECK(r.max_rel_error < kGradTol);
  }

  TEST_CASE("strided and unpadded gradients") {
    Rng rng(4);
    auto r = grad_check([](const std::vector<Tensor>& in) { return conv2d(in[0], in[1], in[2], 2, 0); },
                        {random_tensor({1, 2, 7, 9}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
    CHECK(r.max_rel_error < kGradTol);
    auto r2 = grad_check([](const std::vector<Tensor>& in) { return conv2d(in[0], in[1], in[2], 1, 2); },
                         {random_tensor({1, 1, 4, 4}, rng), random_tensor({2, 1, 5, 3}, rng), random_tensor({2}, rng)});
    CHECK(r2.max_rel_error < kGradTol);
  }

  TEST_CASE("forward is bit-deterministic") {
    Rng rng(5);
    auto x = random_tensor({1, 3, 16, 16}, rng, -1, 1, false);
    auto w = random_tensor({8, 3, 3, 3}, rng, -1, 1, false);
    auto b = random_tensor({8}, rng, -1, 1, false);
    auto y1 = conv2d(x, w, b, 1, 1);
    auto y2 = conv2d(x, w, b, 1, 1);
    CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
  }
}

TEST_SUITE("softmax") {
  TEST_CASE("uniform input") {
    auto y = softmax(Tensor::zeros({5}), 0);
    for (float v : y.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-6));
  }

  TEST_CASE("[ln 2, 0] -> [2/3, 1/3]") {
    auto y = softmax(Tensor::from({2}, {std::log(2.0f), 0.0f}), 0);
    CHECK(y.data()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
    CHECK(y.data()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  }

  TEST_CASE("shift invariance under +1000") {
    Rng rng(6);
    // multiples of 1/64 stay exact after adding 1000
    std::vector<float> v(21);
    for (auto& e : v) e = static_cast<float>(rng.between(-128, 128)) / 64.0f;
    auto x = Tensor::from({3, 7}, v);
    std::vector<float> shifted(x.data().begin(), x.data().end());
    for (auto& v : shifted) v += 1000.0f;
    auto a = softmax(x, 1);
    auto b = softmax(Tensor::from({3, 7}, shifted), 1);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-6);
  }

  TEST_CASE("rows sum to one for magnitudes up to 1e4") {
    Rng rng(7);
    auto x = random_tensor({4, 65, 3}, rng, -1e4f, 1e4f, false);
    auto y = softmax(x, 1);
    for (std::size_t o = 0; o < 4; ++o) {
      for (std::size_t i = 0; i < 3; ++i) {
        double total = 0.0;
        for (std::size_t k = 0; k < 65; ++k) {
          float v = y.at({o, k, i});
          CHECK(v >= 0.0f);
          total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-5);
      }
    }
  }

  TEST_CASE("axis out of range") { CHECK_THROWS_AS(softmax(Tensor::zeros({2, 3}), 2), DimensionError); }

  TEST_CASE("finite-difference gradients on three shapes and axes") {
    Rng rng(8);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto r = grad_check([axis](const std::vector<Tensor>& in) { return softmax(in[0], axis); },
                          {random_tensor({3, 4, 5}, rng, -3, 3)});
      CHECK(r.max_rel_error < kGradTol);
    }
  }
}

TEST_SUITE("cross_entropy") {
  TEST_CASE("uniform probabilities over 5 classes") {
    auto p = Tensor::full({3, 5}, 0.2f);
    std::vector<std::int32_t> labels{0, 2, 4};
    auto loss = cross_entropy(p, labels, {.input_is_probs = true});
    CHECK(loss.item() == doctest::Approx(-std::log(0.2)).epsilon(1e-5));
    CHECK(loss.item() == doctest::Approx(1.6094).epsilon(1e-4));
  }

  TEST_CASE("perfect one-hot prediction") {
    auto p = Tensor::from({2, 3}, {0, 1, 0, 1, 0, 0});
    std::vector<std::int32_t> labels{1, 0};
    CHECK(cross_entropy(p, labels, {.input_is_probs = true}).item() == 0.0f);
  }

  TEST_CASE("all rows ignored gives zero and a flag") {
    bool flag = false;
    std::vector<std::int32_t> labels{9, 9};
    auto loss = cross_entropy(Tensor::full({2, 3}, 0.3f), labels, {.ignore_index = 9}, &flag);
    CHECK(flag);
    CHECK(loss.item() == 0.0f);
  }

  TEST_CASE("ignored rows do not contribute") {
    auto logits = Tensor::from({2, 2}, {0.0f, 0.0f, 5.0f, -5.0f});
    std::vector<std::int32_t> labels{0, -1};
    bool flag = true;
    auto loss = cross_entropy(logits, labels, {.ignore_index = -1}, &flag);
    CHECK_FALSE(flag);
    CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  }

  TEST_CASE("label out of range") {
    std::vector<std::int32_t> labels{3};
    CHECK_THROWS(cross_entropy(Tensor::zeros({1, 3}), labels));
  }

  TEST_CASE("logit gradients on random 4x7") {
    Rng rng(9);
    std::vector<std::int32_t> labels{0, 6, 3, 3};
    auto r = grad_check([&](const std::vector<Tensor>& in) { return cross_entropy(in[0], labels); },
                        {random_tensor({4, 7}, rng, -2, 2)});
    CHECK(r.max_rel_error < kGradTol);
  }

  TEST_CASE("probability-input gradients through softmax over spatial layout") {
    Rng rng(10);
    std::vector<std::int32_t> labels{0, 4, 2, 1, 3, 3};
    auto r = grad_check(
        [&](const std::vector<Tensor>& in) {
          return cross_entropy(softmax(in[0], 1), labels, {.input_is_probs = true});
        },
        {random_tensor({1, 5, 2, 3}, rng, -2, 2)});
    CHECK(r.max_rel_error < kGradTol);
  }
}

TEST_SUITE("sgd_step") {
  TEST_CASE("p=1, grad=2, lr=0.1 -> 0.8") {
    auto p = Tensor::full({1}, 1.0f, true);
    p.mutable_grad()[0] = 2.0f;
    std::vector<NamedTensor> params{{"p", p}};
    sgd_step(params, 0.1f);
    CHECK(p.item() == doctest::Approx(0.8f));
    CHECK(p.grad()[0] == 0.0f);
  }

  TEST_CASE("lr=0 leaves params unchanged") {
    auto p = Tensor::from({2}, {1.5f, -2.0f}, true);
    p.mutable_grad()[0] = 3.0f;
    std::vector<NamedTensor> params{{"p", p}};
    sgd_step(params, 0.0f);
    CHECK(p.data()[0] == 1.5f);
    CHECK(p.data()[1] == -2.0f);
  }

  TEST_CASE("ten steps on p^2 follow 0.8^n") {
    auto p = Tensor::full({1}, 1.0f, true);
    std::vector<NamedTensor> params{{"p", p}};
    for (int i = 0; i < 10; ++i) {
      sum(mul(p, p)).backward();
      sgd_step(params, 0.1f);
    }
    CHECK(p.item() == doctest::Approx(std::pow(0.8, 10)).epsilon(1e-5));
    CHECK(p.item() == doctest::Approx(0.1074).epsilon(1e-3));
  }

  TEST_CASE("missing gradient names the parameter") {
    std::vector<NamedTensor> params{{"encoder.conv1.weight", Tensor::zeros({2}, true)}};
    try {
      sgd_step(params, 0.1f);
      FAIL("expected error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("encoder.conv1.weight") != std::string::npos);
    }
  }

  TEST_CASE("momentum with mu=0 equals plain sgd") {
    auto a = Tensor::from({2}, {1.0f, 2.0f}, true);
    auto b = Tensor::from({2}, {1.0f, 2.0f}, true);
    a.mutable_grad()[0] = 0.5f;
    b.mutable_grad()[0] = 0.5f;
    std::vector<NamedTensor> pa{{"a", a}}, pb{{"b", b}};
    sgd_step(pa, 0.2f);
    MomentumSgd opt(0.2f, 0.0f);
    opt.step(pb);
    CHECK(a.data()[0] == b.data()[0]);
    CHECK(a.data()[1] == b.data()[1]);
  }
}

TEST_SUITE("elementwise and structural ops") {
  TEST_CASE("matmul values and gradients") {
    auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
    auto b = Tensor::from({2, 1}, {5, 6});
    auto c = matmul(a, b);
    CHECK(c.data()[0] == 17.0f);
    CHECK(c.data()[1] == 39.0f);
    CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 1})), DimensionError);
    Rng rng(11);
    for (auto [m, k, n] : {std::array<std::size_t, 3>{2, 3, 4}, {5, 1, 2}, {4, 6, 3}}) {
      auto r = grad_check([](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); },
                          {random_tensor({m, k}, rng), random_tensor({k, n}, rng)});
      CHECK(r.max_rel_error < kGradTol);
    }
  }

  TEST_CASE("relu, add, mul, scale gradients") {
    Rng rng(12);
    for (const auto& s : kShapes3) {
      auto x = random_tensor(s, rng);
      for (auto& v : x.mutable_data()) {
        if (std::abs(v) < 0.01f) v += 0.02f;  // away from the relu kink
      }
      auto r = grad_check(
          [](const std::vector<Tensor>& in) { return add(relu(in[0]), scale(mul(in[0], in[1]), 0.7f)); },
          {x, random_tensor(s, rng)});
      CHECK(r.max_rel_error < kGradTol);
    }
  }

  TEST_CASE("clamp passes gradient inside the range only") {
    Rng rng(19);
    for (const auto& s : kShapes3) {
      auto x = random_tensor(s, rng);
      // keep samples clear of the kinks at +-0.5
      for (auto& v : x.mutable_data()) {
        if (std::abs(std::abs(v) - 0.5f) < 0.01f) v *= 0.9f;
      }
      auto r = grad_check([](const std::vector<Tensor>& in) { return clamp(in[0], -0.5f, 0.5f); }, {x});
      CHECK(r.max_rel_error < kGradTol);
    }
    auto y = clamp(Tensor::from({3}, {-2.0f, 0.25f, 9.0f}), 0.0f, 1.0f);
    CHECK(y.data()[0] == 0.0f);
    CHECK(y.data()[1] == 0.25f);
    CHECK(y.data()[2] == 1.0f);
  }

  TEST_CASE("log floors its input and differentiates above the floor") {
    auto y = log(Tensor::from({3}, {1.0f, 0.0f, std::exp(2.0f)}), 1e-4f);
    CHECK(y.data()[0] == 0.0f);
    CHECK(y.data()[1] == doctest::Approx(std::log(1e-4)));
    CHECK(y.data()[2] == doctest::Approx(2.0));
    Rng rng(23);
    auto x = random_tensor({2, 3, 4}, rng, 0.5f, 2.0f);
    auto r = grad_check([](const std::vector<Tensor>& in) { return log(in[0]); }, {x});
    CHECK(r.max_rel_error < kGradTol);
  }

  TEST_CASE("max_pool2x2 picks window maxima, ties to first") {
    auto x = Tensor::from({1, 1, 2, 4}, {1, 5, 2, 2, 3, 4, 2, 2}, true);
    auto y = max_pool2x2(x);
    CHECK(y.data()[0] == 5.0f);
    CHECK(y.data()[1] == 2.0f);
    sum(y).backward();
    CHECK(x.grad()[1] == 1.0f);
    CHECK(x.grad()[2] == 1.0f);  // first of the tied 2s
    CHECK(x.grad()[3] == 0.0f);
    CHECK_THROWS_AS(max_pool2x2(Tensor::zeros({1, 1, 3, 4})), DimensionError);
  }

  TEST_CASE("pooling and upsampling gradients") {
    Rng rng(13);
    for (const auto& s : kShapes3) {
      auto r = grad_check([](const std::vector<Tensor>& in) { return max_pool2x2(in[0]); }, {random_tensor(s, rng)});
      CHECK(r.max_rel_error < kGradTol);
      auto u = grad_check([](const std::vector<Tensor>& in) { return upsample2x(in[0]); }, {random_tensor(s, rng)});
      CHECK(u.max_rel_error < kGradTol);
    }
  }

  TEST_CASE("upsample2x is nearest-neighbour") {
    auto y = upsample2x(Tensor::from({1, 1, 1, 2}, {1, 2}));
    CHECK(y.shape() == Shape{1, 1, 2, 4});
    std::vector<float> expect{1, 1, 2, 2, 1, 1, 2, 2};
    CHECK(std::equal(expect.begin(), expect.end(), y.data().begin()));
  }

  TEST_CASE("concat along channels") {
    auto a = Tensor::from({1, 1, 1, 2}, {1, 2});
    auto b = Tensor::from({1, 2, 1, 2}, {3, 4, 5, 6});
    std::vector<Tensor> parts{a, b};
    auto c = concat(parts, 1);
    CHECK(c.shape() == Shape{1, 3, 1, 2});
    std::vector<float> expect{1, 2, 3, 4, 5, 6};
    CHECK(std::equal(expect.begin(), expect.end(), c.data().begin()));
    std::vector<Tensor> bad{a, Tensor::zeros({1, 1, 2, 2})};
    CHECK_THROWS_AS(concat(bad, 1), DimensionError);
    Rng rng(14);
    for (const auto& s : kShapes3) {
      Shape s2 = s;
      s2[1] += 2;
      auto r = grad_check([](const std::vector<Tensor>& in) { return concat(in, 1); },
                          {random_tensor(s, rng), random_tensor(s2, rng)});
      CHECK(r.max_rel_error < kGradTol);
    }
  }

  TEST_CASE("gather with -1 zero fill") {
    auto x = Tensor::from({1, 2, 3}, {1, 2, 3, 4, 5, 6});
    std::vector<std::int32_t> idx{2, -1, 0, 0};
    auto y = gather(x, 2, idx);
    CHECK(y.shape() == Shape{1, 2, 4});
    std::vector<float> expect{3, 0, 1, 1, 6, 0, 4, 4};
    CHECK(std::equal(expect.begin(), expect.end(), y.data().begin()));
    std::vector<std::int32_t> bad{3};
    CHECK_THROWS_AS(gather(x, 2, bad), std::out_of_range);
    Rng rng(15);
    for (const auto& s : kShapes3) {
      for (std::size_t axis = 1; axis < 4; ++axis) {
        std::vector<std::int32_t> pick;
        for (std::size_t i = 0; i < s[axis] + 2; ++i) pick.push_back(static_cast<std::int32_t>(rng.below(s[axis] + 1)) - 1);
        auto r = grad_check([&](const std::vector<Tensor>& in) { return gather(in[0], axis, pick); },
                            {random_tensor(s, rng)});
        CHECK(r.max_rel_error < kGradTol);
      }
    }
  }

  TEST_CASE("select routes per position and gradient reaches the chosen source only") {
    auto a = Tensor::from({1, 2, 1, 2}, {1, 2, 3, 4}, true);
    auto b = Tensor::from({1, 2, 1, 2}, {5, 6, 7, 8}, true);
    std::vector<Tensor> src{a, b};
    std::vector<std::int32_t> choice{1, 0};
    auto y = select(src, choice);
    std::vector<float> expect{5, 2, 7, 4};
    CHECK(std::equal(expect.begin(), expect.end(), y.data().begin()));
    sum(y).backward();
    CHECK(a.grad()[0] == 0.0f);
    CHECK(a.grad()[1] == 1.0f);
    CHECK(b.grad()[0] == 1.0f);
    CHECK(b.grad()[1] == 0.0f);
    Rng rng(16);
    for (const auto& s : kShapes3) {
      std::vector<std::int32_t> pick(s[0] * s[2] * s[3]);
      for (auto& p : pick) p = static_cast<std::int32_t>(rng.below(3));
      auto r = grad_check([&](const std::vector<Tensor>& in) { return select(in, pick); },
                          {random_tensor(s, rng), random_tensor(s, rng), random_tensor(s, rng)});
      CHECK(r.max_rel_error < kGradTol);
    }
  }

  TEST_CASE("elementwise_max with argmax") {
    auto a = Tensor::from({3}, {1, 5, 2});
    auto b = Tensor::from({3}, {4, 5, 0});
    std::vector<Tensor> in{a, b};
    auto m = elementwise_max(in);
    std::vector<float> expect{4, 5, 2};
    CHECK(std::equal(expect.begin(), expect.end(), m.value.data().begin()));
    CHECK(m.argmax == std::vector<std::int32_t>{1, 0, 0});
    Rng rng(17);
    for (const auto& s : kShapes3) {
      auto r = grad_check([](const std::vector<Tensor>& v) { return elementwise_max(v).value; },
                          {random_tensor(s, rng), random_tensor(s, rng)});
      CHECK(r.max_rel_error < kGradTol);
    }
  }

  TEST_CASE("reshape keeps values and rejects size changes") {
    auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(reshape(x, {3, 2}).at({2, 1}) == 6.0f);
    CHECK_THROWS_AS(reshape(x, {4}), DimensionError);
  }
}

TEST_SUITE("graph") {
  TEST_CASE("shared input accumulates: d/dx (x*x + x) = 2x + 1") {
    auto x = Tensor::from({2}, {3.0f, -1.0f}, true);
    sum(add(mul(x, x), x)).backward();
    CHECK(x.grad()[0] == 7.0f);
    CHECK(x.grad()[1] == -1.0f);
  }

  TEST_CASE("trace is topological and lists each node once") {
    auto x = Tensor::from({2}, {1, 2}, true);
    auto y = relu(x);
    auto z = add(mul(y, y), y);
    auto g = trace(sum(z));
    std::set<const void*> ids;
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
      CHECK(ids.insert(g.nodes[i].id).second);
      for (auto in : g.nodes[i].inputs) CHECK(in < i);
    }
    CHECK(g.nodes.size() == 5);  // x, relu, mul, add, sum
  }

  TEST_CASE("no-grad guard suppresses recording") {
    auto x = Tensor::from({1}, {2.0f}, true);
    NoGradGuard guard;
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }

  TEST_CASE("non-scalar backward is a dimension error") {
    auto x = Tensor::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(relu(x).backward(), DimensionError);
  }
}

TEST_SUITE("checkpoint") {
  namespace fs = std::filesystem;

  TEST_CASE("round trip preserves names, shapes and bits") {
    Rng rng(18);
    std::vector<NamedTensor> params{{"a.weight", random_tensor({2, 3, 3, 3}, rng)}, {"b", random_tensor({5}, rng)}};
    auto path = (fs::temp_directory_path() / "swarmfuse_ckpt_test.bin").string();
    save_checkpoint(path, params);
    auto loaded = load_checkpoint(path);
    REQUIRE(loaded.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(loaded[i].name == params[i].name);
      CHECK(loaded[i].tensor.shape() == params[i].tensor.shape());
      CHECK(std::memcmp(loaded[i].tensor.data().data(), params[i].tensor.data().data(), 4 * params[i].tensor.numel()) == 0);
    }
    // magic + version + count + (4 + 8 + 4 + 16 + 216) + (4 + 1 + 4 + 4 + 20)
    CHECK(fs::file_size(path) == 12 + 248 + 33);
    fs::remove(path);
  }

  TEST_CASE("truncation and bad magic are format errors") {
    std::vector<NamedTensor> params{{"w", Tensor::full({4}, 1.0f)}};
    auto path = (fs::temp_directory_path() / "swarmfuse_ckpt_trunc.bin").string();
    save_checkpoint(path, params);
    fs::resize_file(path, fs::file_size(path) - 3);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    {
      std::ofstream f(path, std::ios::binary | std::ios::trunc);
      f << "XXXX";
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    fs::remove(path);
  }

  TEST_CASE("assign_checkpoint checks shapes") {
    std::vector<NamedTensor> target{{"w", Tensor::zeros({2}, true)}};
    std::vector<NamedTensor> stored{{"w", Tensor::from({2}, {1, 2})}};
    assign_checkpoint(target, stored);
    CHECK(target[0].tensor.data()[1] == 2.0f);
    std::vector<NamedTensor> wrong{{"w", Tensor::from({3}, {1, 2, 3})}};
    CHECK_THROWS_AS(assign_checkpoint(target, wrong), DimensionError);
  }
}
