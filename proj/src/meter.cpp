#include "flowkit/meter.hpp"

#include <algorithm>
#include <stdexcept>

namespace flowkit {

void MeterConfig::validate() const {
  if (idle_timeout_s >= active_timeout_s) {
    throw std::invalid_argument("idle timeout must be shorter than active timeout");
  }
  if (sample_rate_n < 1) throw std::invalid_argument("sample rate must be >= 1");
  if (max_cache_entries < 1) throw std::invalid_argument("cache must hold at least one flow");
  if (sweep_interval_ms < 1) throw std::invalid_argument("sweep interval must be positive");
}

FlowKey flow_key_of(const ParsedPacket& pkt) {
  return FlowKey{pkt.ip_version, pkt.src_ip, pkt.dst_ip, pkt.protocol, pkt.src_port, pkt.dst_port};
}

const FlowRecord* FlowCache::find(const FlowKey& key) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second.record;
}

void FlowCache::insert(const FlowRecord& record) {
  Entry entry{record, by_last_.emplace(record.last_seen_ms, record.key),
              by_first_.emplace(record.first_seen_ms, record.key)};
  entries_.emplace(record.key, entry);
}

void FlowCache::touch(Entry& entry, std::int64_t time_ms, std::uint64_t bytes,
                      std::uint8_t flags) {
  FlowRecord& r = entry.record;
  r.packets += 1;
  r.bytes += bytes;
  r.tcp_flags |= flags;
  // Mirror ports may reorder; keep first <= last.
  if (time_ms > r.last_seen_ms) {
    r.last_seen_ms = time_ms;
    by_last_.erase(entry.by_last);
    entry.by_last = by_last_.emplace(time_ms, r.key);
  }
  if (time_ms < r.first_seen_ms) {
    r.first_seen_ms = time_ms;
    by_first_.erase(entry.by_first);
    entry.by_first = by_first_.emplace(time_ms, r.key);
  }
}

FlowRecord FlowCache::take(const FlowKey& key, EndReason reason) {
  auto it = entries_.find(key);
  FlowRecord r = it->second.record;
  r.end_reason = reason;
  by_last_.erase(it->second.by_last);
  by_first_.erase(it->second.by_first);
  entries_.erase(it);
  return r;
}

void process_packet(FlowCache& cache, const ParsedPacket& pkt, const MeterConfig& cfg,
                    std::vector<FlowRecord>& out) {
  if (cfg.sample_rate_n > 1) {
    const std::uint64_t seen = ++cache.sampler_count_;
    if (seen % cfg.sample_rate_n != 0) return;
  }

  const std::int64_t t = pkt.timestamp_us / 1000;
  const FlowKey key = flow_key_of(pkt);
  auto it = cache.entries_.find(key);

  if (it != cache.entries_.end()) {
    const FlowRecord& r = it->second.record;
    if (t - r.last_seen_ms >= cfg.idle_ms()) {
      out.push_back(cache.take(key, EndReason::Idle));
      it = cache.entries_.end();
    } else if (t - r.first_seen_ms >= cfg.active_ms()) {
      // The triggering packet opens the continuation flow.
      out.push_back(cache.take(key, EndReason::Active));
      it = cache.entries_.end();
    }
  }

  if (it == cache.entries_.end()) {
    if (cache.size() >= cfg.max_cache_entries) {
      const FlowKey oldest = cache.by_last_.begin()->second;
      out.push_back(cache.take(oldest, EndReason::Evicted));
    }
    FlowRecord r;
    r.key = key;
    r.first_seen_ms = r.last_seen_ms = t;
    r.packets = 1;
    r.bytes = pkt.ip_payload_len;
    r.tcp_flags = pkt.tcp_flags;
    cache.insert(r);
  } else {
    cache.touch(it->second, t, pkt.ip_payload_len, pkt.tcp_flags);
  }

  if (cfg.tcp_finrst_expiry && pkt.protocol == ip_proto::kTcp &&
      (pkt.tcp_flags & (tcp_flag::kFin | tcp_flag::kRst)) != 0) {
    out.push_back(cache.take(key, EndReason::FinRst));
  }
}

void sweep(FlowCache& cache, std::int64_t now_ms, const MeterConfig& cfg,
           std::vector<FlowRecord>& out) {
  while (!cache.by_last_.empty() && now_ms - cache.by_last_.begin()->first >= cfg.idle_ms()) {
    const FlowKey key = cache.by_last_.begin()->second;
    out.push_back(cache.take(key, EndReason::Idle));
  }
  while (!cache.by_first_.empty() &&
         now_ms - cache.by_first_.begin()->first >= cfg.active_ms()) {
    const FlowKey key = cache.by_first_.begin()->second;
    out.push_back(cache.take(key, EndReason::Active));
  }
}

void flush(FlowCache& cache, std::vector<FlowRecord>& out) {
  while (!cache.by_first_.empty()) {
    const FlowKey key = cache.by_first_.begin()->second;
    out.push_back(cache.take(key, EndReason::Eof));
  }
}

std::vector<FlowRecord> process_packet(FlowCache& cache, const ParsedPacket& pkt,
                                       const MeterConfig& cfg) {
  std::vector<FlowRecord> out;
  process_packet(cache, pkt, cfg, out);
  return out;
}

std::vector<FlowRecord> sweep(FlowCache& cache, std::int64_t now_ms, const MeterConfig& cfg) {
  std::vector<FlowRecord> out;
  sweep(cache, now_ms, cfg, out);
  return out;
}

std::vector<FlowRecord> flush(FlowCache& cache) {
  std::vector<FlowRecord> out;
  flush(cache, out);
  return out;
}

Meter::Meter(MeterConfig cfg, bool input_time_sweeps)
    : cfg_(cfg), input_time_sweeps_(input_time_sweeps) {
  cfg_.validate();
}

void Meter::on_frame(const RawFrame& frame, std::vector<FlowRecord>& out) {
  ++stats_.frames;
  DecodedFrame decoded;
  try {
    decoded = decode_frame(frame);
  } catch (const FrameError&) {
    ++stats_.decode_errors;
    return;
  }
  if (const auto* pkt = std::get_if<ParsedPacket>(&decoded)) {
    on_packet(*pkt, out);
  } else {
    ++stats_.non_ip;
  }
}

void Meter::on_packet(const ParsedPacket& pkt, std::vector<FlowRecord>& out) {
  const auto before = out.size();
  if (input_time_sweeps_) {
    const std::int64_t t = pkt.timestamp_us / 1000;
    if (!clock_started_) {
      clock_started_ = true;
      next_sweep_ms_ = (t / cfg_.sweep_interval_ms + 1) * cfg_.sweep_interval_ms;
    } else if (t >= next_sweep_ms_) {
      sweep(cache_, t, cfg_, out);
      next_sweep_ms_ = (t / cfg_.sweep_interval_ms + 1) * cfg_.sweep_interval_ms;
    }
  }
  ++stats_.ip_packets;
  stats_.ip_bytes += pkt.ip_payload_len;
  process_packet(cache_, pkt, cfg_, out);
  stats_.flows_emitted += out.size() - before;
}

void Meter::on_clock(std::int64_t now_ms, std::vector<FlowRecord>& out) {
  const auto before = out.size();
  sweep(cache_, now_ms, cfg_, out);
  stats_.flows_emitted += out.size() - before;
}

void Meter::finish(std::vector<FlowRecord>& out) {
  const auto before = out.size();
  flush(cache_, out);
  stats_.flows_emitted += out.size() - before;
}

}  // namespace flowkit
