#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "flowkit/flow.hpp"
#include "flowkit/packet.hpp"

namespace flowkit::synth {

class InvalidSpec : public Error {
 public:
  using Error::Error;
};

struct ProtocolMix {
  double tcp = 0.6;
  double udp = 0.3;
  double icmp = 0.1;
};

// Deterministic workload description: the same spec always yields the same
// frames and the same oracle answer.
struct SyntheticWorkloadSpec {
  std::uint64_t seed = 1;
  std::size_t flow_count = 100;
  std::uint32_t packets_min = 10;  // per flow, uniform in [min, max]
  std::uint32_t packets_max = 10;
  ProtocolMix mix;
  std::vector<Prefix> v4_pool{Prefix::parse("10.0.0.0/8")};
  std::vector<Prefix> v6_pool{Prefix::parse("2001:db8::/32")};
  double v6_fraction = 0.0;
  std::int64_t start_us = 1'735'732'800'000'000;  // 2025-01-01T12:00:00Z
  std::int64_t span_ms = 60'000;                  // flow starts spread over this span
  std::int64_t gap_min_ms = 1;
  std::int64_t gap_max_ms = 100;
  // Chance that an inter-packet gap lands within 2 s of the idle timeout.
  double straddle_probability = 0.0;
  std::uint32_t payload_min = 0;
  std::uint32_t payload_max = 1400;
  double vlan_fraction = 0.0;
  std::size_t arp_frames = 0;
  double v6_extension_fraction = 0.0;  // IPv6 flows carrying a hop-by-hop header
  double rst_probability = 0.0;        // TCP flows with an RST on a middle packet
  // Metering parameters the oracle answer is computed for.
  std::uint32_t idle_timeout_s = 15;
  std::uint32_t active_timeout_s = 300;
  bool tcp_finrst_expiry = true;

  // Throws InvalidSpec.
  void validate() const;
  // JSON object with the field names above; absent fields keep defaults.
  static SyntheticWorkloadSpec from_json(std::string_view text);
  static SyntheticWorkloadSpec load(const std::filesystem::path& path);
  std::string to_json() const;
};

// Ground truth for one generated IP packet, recorded by the generator itself.
struct TruthPacket {
  std::int64_t timestamp_us = 0;
  FlowKey key;
  std::uint32_t ip_length = 0;
  std::uint8_t tcp_flags = 0;
};

struct Workload {
  std::vector<RawFrame> frames;     // timestamp order
  std::vector<TruthPacket> truth;   // the IP frames, same order
  std::uint64_t ip_bytes() const;
  std::uint64_t frame_bytes() const;
};

Workload generate(const SyntheticWorkloadSpec& spec);

// Writes the pcap and the oracle file for `spec`.
void generate_files(const SyntheticWorkloadSpec& spec, const std::filesystem::path& pcap,
                    const std::filesystem::path& oracle);

}  // namespace flowkit::synth

namespace flowkit::oracle {

struct Params {
  std::int64_t idle_ms = 15'000;
  std::int64_t active_ms = 300'000;
  bool tcp_finrst_expiry = true;
};

// Straightforward per-key grouping of the ground-truth packets.
std::vector<FlowRecord> expected_flows(const std::vector<synth::TruthPacket>& packets,
                                       const Params& params);

// Orders by key, then first/last seen, packets, bytes, flags.
void sort_canonical(std::vector<FlowRecord>& flows);

// One flow per line:
//   ver proto src_ip src_port dst_ip dst_port packets bytes first_ms last_ms flags
// Lines starting with '#' are comments.
void write(std::ostream& out, const std::vector<FlowRecord>& flows, const Params& params);
std::vector<FlowRecord> read(std::istream& in);
std::vector<FlowRecord> read_file(const std::filesystem::path& path);

}  // namespace flowkit::oracle
