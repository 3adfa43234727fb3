#include "swarmfuse/swarm.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include "swarmfuse/errors.hpp"
#include "swarmfuse/parallel.hpp"

namespace swarmfuse::swarm {

std::string topology_name(Topology t) {
  switch (t) {
    case Topology::fully_connected: return "fully_connected";
    case Topology::ring: return "ring";
    case Topology::star: return "star";
  }
  return "?";
}

Topology parse_topology(const std::string& name) {
  for (Topology t : {Topology::fully_connected, Topology::ring, Topology::star}) {
    if (topology_name(t) == name) return t;
  }
  throw ConfigError("unknown topology '" + name + "' (fully_connected, ring, star)");
}

void SwarmConfig::validate() const {
  if (n_agents < 1) throw ConfigError("n_agents must be >= 1");
  if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw ConfigError("drop_prob must be in [0, 1]");
  if (hub < 0 || hub >= n_agents) throw ConfigError("star hub out of range");
}

std::vector<std::pair<int, int>> directed_links(const SwarmConfig& config) {
  config.validate();
  const int n = config.n_agents;
  std::set<std::pair<int, int>> links;
  for (int i = 0; i < n; ++i) {
    switch (config.topology) {
      case Topology::fully_connected:
        for (int j = 0; j < n; ++j) links.insert({i, j});
        break;
      case Topology::ring:
        links.insert({i, (i + 1) % n});
        links.insert({i, (i + n - 1) % n});
        break;
      case Topology::star:
        if (i != config.hub) {
          links.insert({i, config.hub});
          links.insert({config.hub, i});
        }
        break;
    }
  }
  std::vector<std::pair<int, int>> out;
  for (const auto& l : links) {
    if (l.first != l.second) out.push_back(l);
  }
  return out;
}

std::size_t payload_bytes(const backbone::FeatureMap& features) { return features.data.numel() * sizeof(float); }

std::size_t RoundStats::delivered() const {
  return static_cast<std::size_t>(std::count_if(messages.begin(), messages.end(), [](const auto& m) { return m.delivered; }));
}

std::size_t RoundStats::bytes_sent() const {
  std::size_t n = 0;
  for (const auto& m : messages) n += m.bytes;
  return n;
}

std::size_t RoundStats::bytes_delivered() const {
  std::size_t n = 0;
  for (const auto& m : messages) n += m.delivered ? m.bytes : 0;
  return n;
}

std::string stats_csv(std::span<const RoundStats> rounds) {
  std::ostringstream out;
  out << "frame_id,sender,receiver,delivered,bytes\n";
  for (const auto& r : rounds) {
    for (const auto& m : r.messages) {
      out << m.frame_id << ',' << m.sender << ',' << m.receiver << ',' << (m.delivered ? 1 : 0) << ',' << m.bytes << '\n';
    }
  }
  return out.str();
}

RoundResult run_round(const scene::SceneSample& sample, const train::Model& model, const SwarmConfig& config,
                      int frame_id) {
  config.validate();
  if (sample.agents() != config.n_agents) {
    throw ConfigError("sample has " + std::to_string(sample.agents()) + " agents, swarm expects " +
                      std::to_string(config.n_agents));
  }
  const auto& spec = model.method();
  if (!spec.builds_volume() && spec.method != train::Method::Inpainting) {
    throw ConfigError(spec.name() + " cannot run distributed: it needs raw inputs from other agents");
  }
  NoGradGuard guard;
  FlushDenormalsGuard ftz;
  const auto n = static_cast<std::size_t>(config.n_agents);

  // phase 1: local encoding
  std::vector<backbone::FeatureMap> features(n);
  parallel_for(n, [&](std::size_t a) {
    features[a] = model.net().encode(sample.images[a], static_cast<int>(a), frame_id);
  });

  // phase 2: exchange; drops are drawn in link order from a per-frame stream
  RoundResult result;
  result.stats.frame_id = frame_id;
  result.stats.topology = config.topology;
  result.stats.n_agents = config.n_agents;
  result.stats.image_height = sample.images[0].height;
  result.stats.image_width = sample.images[0].width;
  std::vector<std::vector<AgentMessage>> inbox(n);
  Rng rng = Rng::stream(config.seed, static_cast<std::uint64_t>(frame_id));
  for (const auto& [from, to] : directed_links(config)) {
    AgentMessage msg{from, to, frame_id, features[static_cast<std::size_t>(from)], 0};
    msg.payload_bytes = payload_bytes(msg.payload);
    const bool delivered = !rng.bernoulli(config.drop_prob);
    result.stats.messages.push_back({frame_id, from, to, delivered, msg.payload_bytes});
    if (delivered && spec.builds_volume()) inbox[static_cast<std::size_t>(to)].push_back(std::move(msg));
  }

  // phase 3: fuse what arrived, decode
  result.outputs.resize(n);
  parallel_for(n, [&](std::size_t a) {
    auto& out = result.outputs[a];
    const auto plane = static_cast<std::size_t>(features[a].height() * features[a].width());
    std::vector<backbone::FeatureMap> incoming;
    for (const auto& m : inbox[a]) {
      out.received_from.push_back(m.sender);
      incoming.push_back(m.payload);
    }
    if (incoming.empty()) {
      out.logits = model.net().decode(features[a].data);
      out.source.assign(plane, fuse::kSelf);
    } else {
      auto fused = train::fuse_and_decode(model, features[a], incoming);
      out.logits = fused.logits;
      out.source = fused.selection.source;
    }
  });
  return result;
}

train::Evaluation evaluate_swarm(const train::Model& model, const scene::Dataset& data, const SwarmConfig& config) {
  train::Evaluation e;
  e.confusion = metrics::Confusion(model.config().backbone.num_classes);
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    auto r = run_round(s, model, config, static_cast<int>(i));
    e.confusion += metrics::confusion(metrics::argmax_labels(r.outputs[0].logits), s.labels[0], s.degradation,
                                      e.confusion.classes);
    ++e.samples;
  }
  return e;
}

std::vector<BandwidthRow> bandwidth_report(std::span<const RoundStats> rounds) {
  std::vector<BandwidthRow> rows;
  std::vector<std::size_t> agent_rounds;
  std::vector<std::size_t> raw_bytes;
  for (const auto& r : rounds) {
    const auto name = topology_name(r.topology);
    auto it = std::find_if(rows.begin(), rows.end(), [&](const auto& row) { return row.topology == name; });
    if (it == rows.end()) {
      rows.push_back({name});
      agent_rounds.push_back(0);
      raw_bytes.push_back(0);
      it = rows.end() - 1;
    }
    const auto i = static_cast<std::size_t>(it - rows.begin());
    it->rounds += 1;
    it->messages += r.sent();
    it->delivered += r.delivered();
    it->bytes += r.bytes_delivered();
    agent_rounds[i] += static_cast<std::size_t>(r.n_agents);
    raw_bytes[i] += r.sent() * static_cast<std::size_t>(r.image_height) * r.image_width * 3 * sizeof(float);
    it->bytes_per_agent_round += static_cast<double>(r.bytes_sent());  // normalised below
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& row = rows[i];
    const double sent = row.bytes_per_agent_round;
    const double ar = static_cast<double>(std::max<std::size_t>(1, agent_rounds[i]));
    row.bytes_per_agent_round = sent / ar;
    row.raw_bytes_per_agent_round = static_cast<double>(raw_bytes[i]) / ar;
    row.ratio = raw_bytes[i] ? sent / static_cast<double>(raw_bytes[i]) : 0.0;
  }
  return rows;
}

std::string format_bandwidth(std::span<const BandwidthRow> rows) {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-16s %7s %9s %9s %12s %14s %14s %7s\n", "topology", "rounds", "messages",
                "delivered", "bytes", "bytes/agent", "raw/agent", "ratio");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-16s %7zu %9zu %9zu %12zu %14.1f %14.1f %7.4f\n", r.topology.c_str(), r.rounds,
                  r.messages, r.delivered, r.bytes, r.bytes_per_agent_round, r.raw_bytes_per_agent_round, r.ratio);
    out << buf;
  }
  return out.str();
}

}  // namespace swarmfuse::swarm
