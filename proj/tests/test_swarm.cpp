#include <doctest.h>

#include <algorithm>

#include "swarmfuse/errors.hpp"
#include "swarmfuse/swarm.hpp"

using namespace swarmfuse;
using namespace swarmfuse::swarm;
using train::Method;

namespace {

const train::Model& model_for(Method m) {
  static const train::Model main_model(train::ModelConfig{}, train::MethodSpec::make(Method::MAIN));
  static const train::Model inpaint(train::ModelConfig{}, train::MethodSpec::make(Method::Inpainting));
  return m == Method::MAIN ? main_model : inpaint;
}

const scene::Dataset& six() {
  static const auto ds = scene::generate_dataset(scene::make_preset("cross", 6), 5, 4);
  return ds;
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

scene::SceneSample single(const scene::SceneSample& s, std::size_t agent) {
  scene::SceneSample out;
  out.images = {s.images[agent]};
  out.labels = {s.labels[agent]};
  out.degradation = s.degradation;
  return out;
}

SwarmConfig config(int n, Topology t = Topology::fully_connected, double drop = 0.0, std::uint64_t seed = 1) {
  SwarmConfig c;
  c.n_agents = n;
  c.topology = t;
  c.drop_prob = drop;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_SUITE("swarm") {
  TEST_CASE("links per topology") {
    CHECK(directed_links(config(6)).size() == 30);
    CHECK(directed_links(config(6, Topology::ring)).size() == 12);
    CHECK(directed_links(config(6, Topology::star)).size() == 10);
    CHECK(directed_links(config(1)).empty());
    CHECK(directed_links(config(2, Topology::ring)).size() == 2);  // both neighbours are the same agent
    auto links = directed_links(config(4, Topology::star));
    for (const auto& [from, to] : links) CHECK((from == 0 || to == 0));
    CHECK(std::is_sorted(links.begin(), links.end()));
  }

  TEST_CASE("fully connected six-agent round sends 30 messages of Hs*Ws*K*4 bytes") {
    auto r = run_round(six().samples[0], model_for(Method::MAIN), config(6));
    const std::size_t expected = 8 * 8 * 16 * 4;
    CHECK(r.stats.sent() == 30);
    CHECK(r.stats.delivered() == 30);
    CHECK(r.stats.bytes_sent() == 30 * expected);
    for (const auto& m : r.stats.messages) CHECK(m.bytes == expected);
    for (const auto& out : r.outputs) {
      CHECK(out.received_from.size() == 5);
      CHECK(out.logits.shape() == Shape{1, 5, 32, 32});
    }
  }

  TEST_CASE("drop 1 gives each agent its single-agent output") {
    const auto& s = six().samples[1];
    auto r = run_round(s, model_for(Method::MAIN), config(6, Topology::fully_connected, 1.0));
    CHECK(r.stats.delivered() == 0);
    CHECK(r.stats.sent() == 30);
    for (std::size_t a = 0; a < 6; ++a) {
      auto alone = run_round(single(s, a), model_for(Method::MAIN), config(1));
      CHECK(alone.stats.sent() == 0);
      CHECK(same_values(r.outputs[a].logits, alone.outputs[0].logits));
      CHECK(r.outputs[a].received_from.empty());
      CHECK(std::all_of(r.outputs[a].source.begin(), r.outputs[a].source.end(),
                        [](auto v) { return v == fuse::kSelf; }));
    }
  }

  TEST_CASE("single agent output is encode then decode") {
    const auto& s = six().samples[2];
    const auto& m = model_for(Method::MAIN);
    auto r = run_round(single(s, 3), m, config(1));
    NoGradGuard g;
    CHECK(same_values(r.outputs[0].logits, m.net().decode(m.net().encode(s.images[3], 0, 0).data)));
  }

  TEST_CASE("sources name delivered senders only") {
    auto r = run_round(six().samples[0], model_for(Method::MAIN), config(6, Topology::ring, 0.3, 9));
    for (std::size_t a = 0; a < 6; ++a) {
      const auto& out = r.outputs[a];
      for (auto src : out.source) {
        if (src != fuse::kSelf) {
          CHECK(std::find(out.received_from.begin(), out.received_from.end(), src) != out.received_from.end());
        }
      }
    }
  }

  TEST_CASE("rounds are deterministic in seed and frame") {
    const auto& s = six().samples[3];
    const auto& m = model_for(Method::MAIN);
    auto a = run_round(s, m, config(6, Topology::fully_connected, 0.5, 4), 7);
    auto b = run_round(s, m, config(6, Topology::fully_connected, 0.5, 4), 7);
    CHECK(stats_csv(std::span(&a.stats, 1)) == stats_csv(std::span(&b.stats, 1)));
    for (std::size_t i = 0; i < 6; ++i) CHECK(same_values(a.outputs[i].logits, b.outputs[i].logits));
    bool differs = false;
    for (int f = 8; f < 20 && !differs; ++f) {
      auto c = run_round(s, model_for(Method::Inpainting), config(6, Topology::fully_connected, 0.5, 4), f);
      for (std::size_t k = 0; k < 30; ++k) differs |= c.stats.messages[k].delivered != a.stats.messages[k].delivered;
    }
    CHECK(differs);
  }

  TEST_CASE("delivered count is nonincreasing in drop probability over 100 seeds") {
    const auto& s = six().samples[0];
    std::vector<std::size_t> totals;
    for (double p : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
      std::size_t delivered = 0;
      for (std::uint64_t seed = 0; seed < 100; ++seed) {
        delivered += run_round(s, model_for(Method::Inpainting), config(6, Topology::fully_connected, p, seed))
                         .stats.delivered();
      }
      totals.push_back(delivered);
    }
    CHECK(totals.front() == 3000);
    CHECK(totals.back() == 0);
    for (std::size_t i = 1; i < totals.size(); ++i) CHECK(totals[i] <= totals[i - 1]);
    CHECK(totals[2] > 1500 * 0.8);  // drop 0.4 -> expect 1800
    CHECK(totals[2] < 1800 * 1.1);
  }

  TEST_CASE("perturbing an undelivered sender leaves the receiver bit-identical over 50 rounds") {
    const auto& m = model_for(Method::MAIN);
    int checked = 0;
    for (int round = 0; round < 50; ++round) {
      auto s = six().samples[static_cast<std::size_t>(round) % six().samples.size()];
      auto cfg = config(6, Topology::fully_connected, 0.5, 100 + static_cast<std::uint64_t>(round));
      auto base = run_round(s, m, cfg, round);
      const auto it = std::find_if(base.stats.messages.begin(), base.stats.messages.end(),
                                   [](const auto& msg) { return !msg.delivered; });
      REQUIRE(it != base.stats.messages.end());
      auto& img = s.images[static_cast<std::size_t>(it->sender)];
      for (auto& v : img.pixels) v = 1.0f - v;
      auto perturbed = run_round(s, m, cfg, round);
      const auto r = static_cast<std::size_t>(it->receiver);
      const bool other_link = std::any_of(base.stats.messages.begin(), base.stats.messages.end(), [&](const auto& msg) {
        return msg.sender == it->sender && msg.receiver == it->receiver && msg.delivered;
      });
      REQUIRE_FALSE(other_link);
      CHECK(same_values(base.outputs[r].logits, perturbed.outputs[r].logits));
      CHECK_FALSE(same_values(base.outputs[static_cast<std::size_t>(it->sender)].logits,
                              perturbed.outputs[static_cast<std::size_t>(it->sender)].logits));
      ++checked;
    }
    CHECK(checked == 50);
  }

  TEST_CASE("stats csv lists every message") {
    auto r = run_round(six().samples[0], model_for(Method::Inpainting), config(6, Topology::star, 0.0), 3);
    auto csv = stats_csv(std::span(&r.stats, 1));
    CHECK(csv.rfind("frame_id,sender,receiver,delivered,bytes\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 11);
    CHECK(csv.find("\n3,0,1,1,4096\n") != std::string::npos);
  }

  TEST_CASE("bandwidth report") {
    CHECK(bandwidth_report({}).empty());
    std::vector<RoundStats> rounds;
    const auto& s = six().samples[0];
    for (int f = 0; f < 3; ++f) {
      rounds.push_back(run_round(s, model_for(Method::Inpainting), config(6), f).stats);
      rounds.push_back(run_round(s, model_for(Method::Inpainting), config(6, Topology::ring, 1.0), f).stats);
    }
    auto rows = bandwidth_report(rounds);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].topology == "fully_connected");
    CHECK(rows[0].rounds == 3);
    CHECK(rows[0].messages == 90);
    CHECK(rows[0].bytes == 90 * 4096);
    CHECK(rows[0].bytes_per_agent_round == doctest::Approx(5 * 4096.0));
    // 8x8x16 floats against 32x32x3 floats
    CHECK(rows[0].ratio == doctest::Approx(1.0 / 3.0));
    CHECK(rows[1].topology == "ring");
    CHECK(rows[1].delivered == 0);
    CHECK(rows[1].bytes == 0);
    CHECK(rows[1].bytes_per_agent_round == doctest::Approx(2 * 4096.0));
    CHECK(format_bandwidth(rows).find("ring") != std::string::npos);
  }

  TEST_CASE("configuration errors") {
    CHECK_THROWS_AS(config(0).validate(), ConfigError);
    CHECK_THROWS_AS(config(3, Topology::ring, 1.5).validate(), ConfigError);
    CHECK_THROWS_AS(config(3, Topology::ring, -0.1).validate(), ConfigError);
    auto star = config(3, Topology::star);
    star.hub = 3;
    CHECK_THROWS_AS(star.validate(), ConfigError);
    CHECK_THROWS_AS(parse_topology("mesh"), ConfigError);
    CHECK(parse_topology("star") == Topology::star);
    CHECK_THROWS_AS(run_round(six().samples[0], model_for(Method::MAIN), config(2)), ConfigError);
    train::Model stack(train::ModelConfig{}, train::MethodSpec::make(Method::InputStack));
    CHECK_THROWS_AS(run_round(six().samples[0], stack, config(6)), ConfigError);
  }
}

TEST_SUITE("swarm evaluation") {
  TEST_CASE("fully connected round matches the in-process forward for agent 0") {
    const auto& m = model_for(Method::MAIN);
    auto e = evaluate_swarm(m, six(), config(6));
    auto ref = train::evaluate(m, six());
    CHECK(e.samples == 4);
    CHECK(e.confusion == ref.confusion);
    CHECK(e.confusion.total() > 0);
  }

  TEST_CASE("drop 1 matches the single-agent path") {
    const auto& m = model_for(Method::MAIN);
    scene::Dataset alone{six().header, {}};
    for (const auto& s : six().samples) alone.samples.push_back(single(s, 0));
    auto e = evaluate_swarm(m, six(), config(6, Topology::fully_connected, 1.0));
    CHECK(e.confusion == train::evaluate(m, alone).confusion);
  }
}
