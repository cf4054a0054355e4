#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "flowkit/ip_address.hpp"

namespace flowkit {

enum class LinkType : std::uint8_t { Ethernet = 1 };

struct RawFrame {
  std::int64_t timestamp_us = 0;  // since Unix epoch, UTC
  std::vector<std::uint8_t> data;
  LinkType link_type = LinkType::Ethernet;
};

namespace tcp_flag {
inline constexpr std::uint8_t kFin = 0x01;
inline constexpr std::uint8_t kSyn = 0x02;
inline constexpr std::uint8_t kRst = 0x04;
inline constexpr std::uint8_t kPsh = 0x08;
inline constexpr std::uint8_t kAck = 0x10;
inline constexpr std::uint8_t kUrg = 0x20;
}  // namespace tcp_flag

namespace ip_proto {
inline constexpr std::uint8_t kIcmp = 1;
inline constexpr std::uint8_t kTcp = 6;
inline constexpr std::uint8_t kUdp = 17;
inline constexpr std::uint8_t kIcmp6 = 58;
}  // namespace ip_proto

struct ParsedPacket {
  std::int64_t timestamp_us = 0;
  std::uint8_t ip_version = 4;
  IpAddress src_ip;
  IpAddress dst_ip;
  std::uint8_t protocol = 0;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint8_t tcp_flags = 0;
  // Bytes of the IP packet including its header; the byte-counting basis.
  std::uint32_t ip_payload_len = 0;
  std::optional<std::uint16_t> vlan_id;

  bool operator==(const ParsedPacket&) const = default;
};

struct NonIp {
  std::uint16_t ethertype = 0;
};

enum class FrameErrorKind { TruncatedFrame, UnsupportedLinkType, MalformedHeader };

class FrameError : public Error {
 public:
  FrameError(FrameErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  FrameErrorKind kind() const { return kind_; }

 private:
  FrameErrorKind kind_;
};

using DecodedFrame = std::variant<ParsedPacket, NonIp>;

// Parses Ethernet (up to two 802.1Q/802.1ad tags) then IPv4/IPv6 through the
// transport header. Never reads outside `frame.data`.
DecodedFrame decode_frame(const RawFrame& frame);
DecodedFrame decode_ethernet(std::span<const std::uint8_t> data, std::int64_t timestamp_us);

}  // namespace flowkit
