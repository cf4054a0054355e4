#include "flowkit/packet.hpp"

#include "flowkit/bytes.hpp"

namespace flowkit {
namespace {

constexpr std::uint16_t kEtherIpv4 = 0x0800;
constexpr std::uint16_t kEtherIpv6 = 0x86DD;
constexpr std::uint16_t kEtherVlan = 0x8100;
constexpr std::uint16_t kEtherQinQ = 0x88A8;
constexpr std::uint16_t kEtherQinQLegacy = 0x9100;
constexpr std::size_t kEthernetHeader = 14;
constexpr std::size_t kMaxVlanTags = 2;
constexpr std::size_t kMaxIpv6ExtHeaders = 16;

[[noreturn]] void truncated(const char* what) {
  throw FrameError(FrameErrorKind::TruncatedFrame, std::string("truncated frame: ") + what);
}
[[noreturn]] void malformed(const char* what) {
  throw FrameError(FrameErrorKind::MalformedHeader, std::string("malformed header: ") + what);
}

bool is_vlan(std::uint16_t ethertype) {
  return ethertype == kEtherVlan || ethertype == kEtherQinQ || ethertype == kEtherQinQLegacy;
}

// `l4` is bounded by both the captured bytes and the IP length field.
void decode_transport(ParsedPacket& pkt, std::span<const std::uint8_t> l4) {
  switch (pkt.protocol) {
    case ip_proto::kTcp:
      if (l4.size() < 20) truncated("tcp header");
      pkt.src_port = bytes::load_be16(l4.data());
      pkt.dst_port = bytes::load_be16(l4.data() + 2);
      pkt.tcp_flags = l4[13];
      break;
    case ip_proto::kUdp:
      if (l4.size() < 8) truncated("udp header");
      pkt.src_port = bytes::load_be16(l4.data());
      pkt.dst_port = bytes::load_be16(l4.data() + 2);
      break;
    default:
      break;
  }
}

ParsedPacket decode_ipv4(std::span<const std::uint8_t> ip) {
  if (ip.size() < 20) truncated("ipv4 header");
  if ((ip[0] >> 4) != 4) malformed("ipv4 version nibble");
  const std::size_t header_len = std::size_t{ip[0] & 0x0fu} * 4;
  if (header_len < 20) malformed("ipv4 ihl < 5");
  if (ip.size() < header_len) truncated("ipv4 options");
  const std::uint16_t total_len = bytes::load_be16(ip.data() + 2);
  if (total_len < header_len) malformed("ipv4 total length below header length");

  ParsedPacket pkt;
  pkt.ip_version = 4;
  pkt.ip_payload_len = total_len;
  pkt.protocol = ip[9];
  pkt.src_ip = IpAddress::v4(std::span<const std::uint8_t, 4>(ip.data() + 12, 4));
  pkt.dst_ip = IpAddress::v4(std::span<const std::uint8_t, 4>(ip.data() + 16, 4));

  const std::uint16_t fragment_offset = bytes::load_be16(ip.data() + 6) & 0x1fff;
  if (fragment_offset != 0) return pkt;

  const std::size_t end = std::min<std::size_t>(ip.size(), total_len);
  decode_transport(pkt, ip.subspan(header_len, end - header_len));
  return pkt;
}

ParsedPacket decode_ipv6(std::span<const std::uint8_t> ip) {
  if (ip.size() < 40) truncated("ipv6 header");
  if ((ip[0] >> 4) != 6) malformed("ipv6 version nibble");
  const std::uint16_t payload_len = bytes::load_be16(ip.data() + 4);

  ParsedPacket pkt;
  pkt.ip_version = 6;
  pkt.ip_payload_len = 40u + payload_len;
  pkt.src_ip = IpAddress::v6(std::span<const std::uint8_t, 16>(ip.data() + 8, 16));
  pkt.dst_ip = IpAddress::v6(std::span<const std::uint8_t, 16>(ip.data() + 24, 16));

  const std::size_t end = std::min<std::size_t>(ip.size(), 40u + payload_len);
  std::uint8_t next = ip[6];
  std::size_t offset = 40;
  bool later_fragment = false;
  for (std::size_t hops = 0; hops < kMaxIpv6ExtHeaders; ++hops) {
    std::size_t ext_len = 0;
    switch (next) {
      case 0:   // hop-by-hop
      case 43:  // routing
      case 60:  // destination options
        if (end < offset + 2) truncated("ipv6 extension header");
        ext_len = (std::size_t{ip[offset + 1]} + 1) * 8;
        break;
      case 44:  // fragment
        if (end < offset + 8) truncated("ipv6 fragment header");
        ext_len = 8;
        if ((bytes::load_be16(ip.data() + offset + 2) >> 3) != 0) later_fragment = true;
        break;
      case 51:  // authentication header
        if (end < offset + 2) truncated("ipv6 authentication header");
        ext_len = (std::size_t{ip[offset + 1]} + 2) * 4;
        break;
      default:
        pkt.protocol = next;
        if (!later_fragment) decode_transport(pkt, ip.subspan(offset, end - offset));
        return pkt;
    }
    if (end < offset + ext_len) truncated("ipv6 extension header body");
    next = ip[offset];
    offset += ext_len;
  }
  malformed("ipv6 extension header chain too long");
}

}  // namespace

DecodedFrame decode_ethernet(std::span<const std::uint8_t> data, std::int64_t timestamp_us) {
  if (data.size() < kEthernetHeader) truncated("ethernet header");
  std::uint16_t ethertype = bytes::load_be16(data.data() + 12);
  std::size_t offset = kEthernetHeader;
  std::optional<std::uint16_t> vlan;
  for (std::size_t tags = 0; tags < kMaxVlanTags && is_vlan(ethertype); ++tags) {
    if (data.size() < offset + 4) truncated("802.1Q tag");
    if (!vlan) vlan = bytes::load_be16(data.data() + offset) & 0x0fff;
    ethertype = bytes::load_be16(data.data() + offset + 2);
    offset += 4;
  }

  ParsedPacket pkt;
  switch (ethertype) {
    case kEtherIpv4:
      pkt = decode_ipv4(data.subspan(offset));
      break;
    case kEtherIpv6:
      pkt = decode_ipv6(data.subspan(offset));
      break;
    default:
      return NonIp{ethertype};
  }
  pkt.timestamp_us = timestamp_us;
  pkt.vlan_id = vlan;
  return pkt;
}

DecodedFrame decode_frame(const RawFrame& frame) {
  if (frame.link_type != LinkType::Ethernet) {
    throw FrameError(FrameErrorKind::UnsupportedLinkType, "unsupported link type");
  }
  return decode_ethernet(frame.data, frame.timestamp_us);
}

}  // namespace flowkit
