#pragma once

#include <cstdint>
#include <map>
#include <unordered_map>
#include <vector>

#include "flowkit/flow.hpp"
#include "flowkit/packet.hpp"

namespace flowkit {

struct MeterConfig {
  std::uint32_t idle_timeout_s = 15;
  std::uint32_t active_timeout_s = 300;
  std::size_t max_cache_entries = 1'048'576;
  bool tcp_finrst_expiry = true;
  // 1 = unsampled; n > 1 counts every n-th packet only.
  std::uint32_t sample_rate_n = 1;
  std::int64_t sweep_interval_ms = 1000;

  std::int64_t idle_ms() const { return std::int64_t{idle_timeout_s} * 1000; }
  std::int64_t active_ms() const { return std::int64_t{active_timeout_s} * 1000; }
  // Throws std::invalid_argument on a violated invariant.
  void validate() const;
};

// Keyed flow cache with two time indexes so that idle expiry, active expiry
// and oldest-entry eviction never scan the whole table.
class FlowCache {
 public:
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool contains(const FlowKey& key) const { return entries_.contains(key); }
  const FlowRecord* find(const FlowKey& key) const;

 private:
  using TimeIndex = std::multimap<std::int64_t, FlowKey>;
  struct Entry {
    FlowRecord record;
    TimeIndex::iterator by_last;
    TimeIndex::iterator by_first;
  };

  void insert(const FlowRecord& record);
  void touch(Entry& entry, std::int64_t time_ms, std::uint64_t bytes, std::uint8_t flags);
  FlowRecord take(const FlowKey& key, EndReason reason);

  std::unordered_map<FlowKey, Entry, FlowKeyHash> entries_;
  TimeIndex by_last_;
  TimeIndex by_first_;
  std::uint64_t sampler_count_ = 0;

  friend void process_packet(FlowCache&, const ParsedPacket&, const MeterConfig&,
                             std::vector<FlowRecord>&);
  friend void sweep(FlowCache&, std::int64_t, const MeterConfig&, std::vector<FlowRecord>&);
  friend void flush(FlowCache&, std::vector<FlowRecord>&);
};

// Flows expired by this packet are appended to `out`. Idle and active
// timeouts are also checked against the packet's own timestamp, so split
// points depend only on packet times, not on the sweep cadence.
void process_packet(FlowCache& cache, const ParsedPacket& pkt, const MeterConfig& cfg,
                    std::vector<FlowRecord>& out);
void sweep(FlowCache& cache, std::int64_t now_ms, const MeterConfig& cfg,
           std::vector<FlowRecord>& out);
void flush(FlowCache& cache, std::vector<FlowRecord>& out);

std::vector<FlowRecord> process_packet(FlowCache& cache, const ParsedPacket& pkt,
                                       const MeterConfig& cfg);
std::vector<FlowRecord> sweep(FlowCache& cache, std::int64_t now_ms, const MeterConfig& cfg);
std::vector<FlowRecord> flush(FlowCache& cache);

FlowKey flow_key_of(const ParsedPacket& pkt);

struct MeterStats {
  std::uint64_t frames = 0;
  std::uint64_t ip_packets = 0;
  std::uint64_t ip_bytes = 0;
  std::uint64_t non_ip = 0;
  std::uint64_t decode_errors = 0;
  std::uint64_t flows_emitted = 0;
};

// Frame-level driver: decodes, meters and runs sweeps. With
// `input_time_sweeps` the sweep clock is the packet timestamp (file replay);
// otherwise the caller drives sweeps through on_clock (live capture).
class Meter {
 public:
  explicit Meter(MeterConfig cfg, bool input_time_sweeps = true);

  void on_frame(const RawFrame& frame, std::vector<FlowRecord>& out);
  void on_packet(const ParsedPacket& pkt, std::vector<FlowRecord>& out);
  void on_clock(std::int64_t now_ms, std::vector<FlowRecord>& out);
  void finish(std::vector<FlowRecord>& out);

  const MeterStats& stats() const { return stats_; }
  const FlowCache& cache() const { return cache_; }
  const MeterConfig& config() const { return cfg_; }

 private:
  MeterConfig cfg_;
  bool input_time_sweeps_;
  FlowCache cache_;
  MeterStats stats_;
  std::int64_t next_sweep_ms_ = 0;
  bool clock_started_ = false;
};

}  // namespace flowkit
