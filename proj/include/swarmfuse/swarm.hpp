#pragma once

// Simulated deployment: every agent encodes locally, sends its feature map
// to its topology neighbours over a lossy channel, then fuses whatever it
// received and decodes.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "swarmfuse/train.hpp"

namespace swarmfuse::swarm {

enum class Topology { fully_connected, ring, star };

std::string topology_name(Topology t);
Topology parse_topology(const std::string& name);

struct SwarmConfig {
  int n_agents = 6;
  Topology topology = Topology::fully_connected;
  double drop_prob = 0.0;
  std::uint64_t seed = 1;
  int hub = 0;  // star centre

  void validate() const;
};

/// Directed (sender, receiver) pairs, sorted by sender then receiver.
std::vector<std::pair<int, int>> directed_links(const SwarmConfig& config);

struct AgentMessage {
  int sender = 0;
  int receiver = 0;
  int frame_id = 0;
  backbone::FeatureMap payload;
  std::size_t payload_bytes = 0;  // float32 payload size
};

std::size_t payload_bytes(const backbone::FeatureMap& features);

struct MessageRecord {
  int frame_id = 0;
  int sender = 0;
  int receiver = 0;
  bool delivered = false;
  std::size_t bytes = 0;
};

struct RoundStats {
  int frame_id = 0;
  Topology topology = Topology::fully_connected;
  int n_agents = 0;
  int image_height = 0;
  int image_width = 0;
  std::vector<MessageRecord> messages;

  std::size_t sent() const { return messages.size(); }
  std::size_t delivered() const;
  std::size_t dropped() const { return sent() - delivered(); }
  std::size_t bytes_sent() const;
  std::size_t bytes_delivered() const;
};

/// Rows "frame_id,sender,receiver,delivered,bytes" with a header line.
std::string stats_csv(std::span<const RoundStats> rounds);

struct AgentOutput {
  Tensor logits;                       // [1, C, H, W]
  std::vector<int> received_from;      // senders of delivered messages, ascending
  std::vector<std::int32_t> source;    // per cell: fuse::kSelf or the winning sender
};

struct RoundResult {
  std::vector<AgentOutput> outputs;  // indexed by agent id
  RoundStats stats;
};

/// One synchronous round. `model` must be Inpainting or a volume-building
/// method. Drops depend only on (seed, frame_id), never on payloads.
RoundResult run_round(const scene::SceneSample& sample, const train::Model& model, const SwarmConfig& config,
                      int frame_id = 0);

/// Agent 0's segmentation inside the degradation mask, one round per
/// sample with frame id = sample index. Correspondence counts stay empty.
train::Evaluation evaluate_swarm(const train::Model& model, const scene::Dataset& data, const SwarmConfig& config);

struct BandwidthRow {
  std::string topology;
  std::size_t rounds = 0;
  std::size_t messages = 0;
  std::size_t delivered = 0;
  std::size_t bytes = 0;                 // delivered payload bytes
  double bytes_per_agent_round = 0.0;    // sent bytes / (agents * rounds)
  double raw_bytes_per_agent_round = 0.0;  // same exchange with H*W*3*4-byte images
  double ratio = 0.0;                    // feature bytes / raw image bytes
};

/// Per-topology totals, in first-seen order. Empty input -> empty report.
std::vector<BandwidthRow> bandwidth_report(std::span<const RoundStats> rounds);
std::string format_bandwidth(std::span<const BandwidthRow> rows);

}  // namespace swarmfuse::swarm
