#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

#include "flowkit/ip_address.hpp"

namespace flowkit {

// Directional 5-tuple plus IP version.
struct FlowKey {
  std::uint8_t ip_version = 4;
  IpAddress src_ip;
  IpAddress dst_ip;
  std::uint8_t protocol = 0;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;

  auto operator<=>(const FlowKey&) const = default;
  bool operator==(const FlowKey&) const = default;
};

struct FlowKeyHash {
  std::size_t operator()(const FlowKey& k) const noexcept;
};

enum class EndReason : std::uint8_t { Idle, Active, Eof, FinRst, Evicted };

std::string_view to_string(EndReason reason);

struct FlowRecord {
  FlowKey key;
  std::int64_t first_seen_ms = 0;
  std::int64_t last_seen_ms = 0;
  std::uint64_t packets = 0;
  std::uint64_t bytes = 0;
  std::uint8_t tcp_flags = 0;  // OR of all observed flags
  EndReason end_reason = EndReason::Eof;

  bool operator==(const FlowRecord&) const = default;
};

// Field-for-field equality over everything the wire and the store carry.
inline bool same_flow_data(const FlowRecord& a, const FlowRecord& b) {
  return a.key == b.key && a.first_seen_ms == b.first_seen_ms &&
         a.last_seen_ms == b.last_seen_ms && a.packets == b.packets && a.bytes == b.bytes &&
         a.tcp_flags == b.tcp_flags;
}

}  // namespace flowkit
