#include "doctest.h"
#include "flowkit/capture.hpp"
#include "flowkit/packet.hpp"
#include "support.hpp"

using namespace flowkit;
using fk_test::ip;

namespace {

ParsedPacket decode_ip(std::vector<std::uint8_t> data, std::int64_t ts = 0) {
  auto d = decode_frame(RawFrame{ts, std::move(data), LinkType::Ethernet});
  REQUIRE(std::holds_alternative<ParsedPacket>(d));
  return std::get<ParsedPacket>(d);
}

std::vector<std::uint8_t> with_vlan(std::vector<std::uint8_t> frame, std::uint16_t tpid,
                                    std::uint16_t id) {
  const std::uint8_t tag[4] = {static_cast<std::uint8_t>(tpid >> 8), static_cast<std::uint8_t>(tpid),
                               static_cast<std::uint8_t>(id >> 8), static_cast<std::uint8_t>(id)};
  frame.insert(frame.begin() + 12, tag, tag + 4);
  return frame;
}

// Ethernet + IPv6 header (next header `nh`, payload length `plen`) + rest.
std::vector<std::uint8_t> ipv6_frame(std::uint8_t nh, std::vector<std::uint8_t> rest) {
  std::vector<std::uint8_t> f = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 0x86, 0xdd,
                                 0x60, 0, 0, 0,
                                 static_cast<std::uint8_t>(rest.size() >> 8),
                                 static_cast<std::uint8_t>(rest.size()), nh, 64};
  const auto src_addr = ip("2001:db8::1");
  const auto dst_addr = ip("2001:db8::2");
  const auto src = src_addr.octets();
  const auto dst = dst_addr.octets();
  f.insert(f.end(), src.begin(), src.end());
  f.insert(f.end(), dst.begin(), dst.end());
  f.insert(f.end(), rest.begin(), rest.end());
  return f;
}

}  // namespace

TEST_CASE("ip address parsing and masking") {
  CHECK(ip("10.1.2.3").is_v4());
  CHECK(ip("10.1.2.3").to_string() == "10.1.2.3");
  CHECK(ip("2001:db8::1").version() == 6);
  CHECK(ip("2001:db8::1").to_string() == "2001:db8::1");
  CHECK_FALSE(IpAddress::parse("10.1.2"));
  CHECK_FALSE(IpAddress::parse("hello"));
  CHECK(ip("10.1.2.3").masked(24) == ip("10.1.2.0"));
  CHECK(ip("10.1.2.3").masked(0) == ip("0.0.0.0"));
  CHECK(ip("2001:db8:aaaa:bbbb::1").masked(48) == ip("2001:db8:aaaa::"));
  CHECK(ip("10.0.0.1") != ip("::a00:1"));
  CHECK(IpAddress::v4(0x0a000001) == ip("10.0.0.1"));
}

TEST_CASE("prefix parsing") {
  auto p = Prefix::parse("10.1.2.3/8");
  CHECK(p.network == ip("10.0.0.0"));
  CHECK(p.length == 8);
  CHECK(p.contains(ip("10.200.0.1")));
  CHECK_FALSE(p.contains(ip("11.0.0.1")));
  CHECK_FALSE(p.contains(ip("::a00:1")));
  CHECK(Prefix::parse("192.0.2.7").length == 32);
  CHECK(Prefix::parse("2001:db8::/32").to_string() == "2001:db8::/32");
  CHECK_THROWS_AS(Prefix::parse("10.0.0.0/33"), InvalidCidr);
  CHECK_THROWS_AS(Prefix::parse("10.0.0.0/"), InvalidCidr);
  CHECK_THROWS_AS(Prefix::parse("10.0.0/8"), InvalidCidr);
  CHECK_THROWS_AS(Prefix::parse("::/129"), InvalidCidr);
}

TEST_CASE("60-byte IPv4/TCP SYN frame") {
  auto frame = fk_test::ipv4_tcp_frame(0x0a000001, 0x0a000002, 1234, 80, tcp_flag::kSyn);
  REQUIRE(frame.size() == 60);
  auto p = decode_ip(frame, 1'700'000'000'123'456);
  CHECK(p.timestamp_us == 1'700'000'000'123'456);
  CHECK(p.ip_version == 4);
  CHECK(p.src_ip == ip("10.0.0.1"));
  CHECK(p.dst_ip == ip("10.0.0.2"));
  CHECK(p.protocol == ip_proto::kTcp);
  CHECK(p.src_port == 1234);
  CHECK(p.dst_port == 80);
  CHECK(p.tcp_flags == tcp_flag::kSyn);
  CHECK(p.ip_payload_len == 40);  // total length field, not the padded frame
  CHECK_FALSE(p.vlan_id);
}

TEST_CASE("short frames are truncated") {
  auto check_truncated = [](std::vector<std::uint8_t> data) {
    try {
      decode_frame(RawFrame{0, std::move(data), LinkType::Ethernet});
      FAIL("expected FrameError");
    } catch (const FrameError& e) {
      CHECK(e.kind() == FrameErrorKind::TruncatedFrame);
    }
  };
  check_truncated(std::vector<std::uint8_t>(10, 0));
  check_truncated({});
  auto frame = fk_test::ipv4_tcp_frame(1, 2, 3, 4, 0);
  frame.resize(14 + 19);  // cut inside the IPv4 header
  check_truncated(frame);
  frame = fk_test::ipv4_tcp_frame(1, 2, 3, 4, 0);
  frame.resize(14 + 20 + 10);  // cut inside the TCP header
  check_truncated(frame);
}

TEST_CASE("non-IP frames") {
  std::vector<std::uint8_t> arp(42, 0);
  arp[12] = 0x08;
  arp[13] = 0x06;
  auto d = decode_frame(RawFrame{0, arp, LinkType::Ethernet});
  REQUIRE(std::holds_alternative<NonIp>(d));
  CHECK(std::get<NonIp>(d).ethertype == 0x0806);
}

TEST_CASE("VLAN tags are skipped and the outermost id recorded") {
  auto base = fk_test::ipv4_tcp_frame(0x0a000001, 0x0a000002, 1, 2, 0);
  auto single = decode_ip(with_vlan(base, 0x8100, 42));
  CHECK(single.vlan_id == 42);
  CHECK(single.src_port == 1);
  auto qinq = decode_ip(with_vlan(with_vlan(base, 0x8100, 7), 0x88a8, 100));
  CHECK(qinq.vlan_id == 100);
  CHECK(qinq.dst_port == 2);
  // Priority bits are not part of the id.
  CHECK(decode_ip(with_vlan(base, 0x8100, 0xe00a)).vlan_id == 10);
}

TEST_CASE("IPv4 options are skipped through IHL") {
  auto f = fk_test::ipv4_tcp_frame(0x0a000001, 0x0a000002, 5000, 443, tcp_flag::kAck);
  f.resize(54);
  f[14] = 0x46;  // IHL 6
  f[17] = 44;    // total length 24 + 20
  f.insert(f.begin() + 34, {1, 1, 1, 0});  // NOP NOP NOP EOL
  auto p = decode_ip(f);
  CHECK(p.src_port == 5000);
  CHECK(p.dst_port == 443);
  CHECK(p.tcp_flags == tcp_flag::kAck);
  CHECK(p.ip_payload_len == 44);
}

TEST_CASE("later IPv4 fragments carry no ports") {
  auto f = fk_test::ipv4_tcp_frame(0x0a000001, 0x0a000002, 5000, 443, tcp_flag::kAck);
  f[20] = 0x00;
  f[21] = 0x10;  // fragment offset 16 * 8
  auto p = decode_ip(f);
  CHECK(p.protocol == ip_proto::kTcp);
  CHECK(p.src_port == 0);
  CHECK(p.dst_port == 0);
  CHECK(p.tcp_flags == 0);
}

TEST_CASE("UDP and ICMP") {
  auto f = fk_test::ipv4_tcp_frame(0x0a000001, 0x0a000002, 53, 5353, 0);
  f[23] = ip_proto::kUdp;
  f[16] = 0;
  f[17] = 28;
  auto udp = decode_ip(f);
  CHECK(udp.protocol == ip_proto::kUdp);
  CHECK(udp.src_port == 53);
  CHECK(udp.dst_port == 5353);
  CHECK(udp.tcp_flags == 0);

  f[23] = ip_proto::kIcmp;
  auto icmp = decode_ip(f);
  CHECK(icmp.protocol == ip_proto::kIcmp);
  CHECK(icmp.src_port == 0);
  CHECK(icmp.dst_port == 0);
}

TEST_CASE("IPv6 extension headers are walked to the transport header") {
  std::vector<std::uint8_t> udp = {0x04, 0xd2, 0x00, 0x35, 0x00, 0x08, 0x00, 0x00};
  SUBCASE("plain") {
    auto p = decode_ip(ipv6_frame(ip_proto::kUdp, udp));
    CHECK(p.ip_version == 6);
    CHECK(p.src_ip == ip("2001:db8::1"));
    CHECK(p.src_port == 1234);
    CHECK(p.dst_port == 53);
    CHECK(p.ip_payload_len == 48);
  }
  SUBCASE("hop-by-hop then destination options") {
    std::vector<std::uint8_t> rest = {60, 0, 1, 4, 0, 0, 0, 0,                  // hop-by-hop
                                      ip_proto::kUdp, 1, 1, 12, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    rest.insert(rest.end(), udp.begin(), udp.end());
    auto p = decode_ip(ipv6_frame(0, rest));
    CHECK(p.protocol == ip_proto::kUdp);
    CHECK(p.src_port == 1234);
    CHECK(p.ip_payload_len == 40 + rest.size());
  }
  SUBCASE("non-first fragment") {
    std::vector<std::uint8_t> rest = {ip_proto::kUdp, 0, 0x00, 0x08, 0, 0, 0, 1};
    rest.insert(rest.end(), udp.begin(), udp.end());
    auto p = decode_ip(ipv6_frame(44, rest));
    CHECK(p.protocol == ip_proto::kUdp);
    CHECK(p.src_port == 0);
  }
  SUBCASE("truncated extension chain") {
    auto f = ipv6_frame(0, {ip_proto::kUdp, 3, 0, 0});
    CHECK_THROWS_AS(decode_frame(RawFrame{0, f, LinkType::Ethernet}), FrameError);
  }
}

TEST_CASE("ip_payload_len equals the IPv4 total length across a corpus") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i) {
    auto f = fk_test::ipv4_tcp_frame(static_cast<std::uint32_t>(rng()), 2, 3, 4, 0);
    const std::uint16_t payload = static_cast<std::uint16_t>(rng() % 1400);
    f.resize(54 + payload, 0xab);
    const std::uint16_t total = 40 + payload;
    f[16] = static_cast<std::uint8_t>(total >> 8);
    f[17] = static_cast<std::uint8_t>(total);
    CHECK(decode_ip(f).ip_payload_len == total);
  }
}

TEST_CASE("unsupported link type") {
  RawFrame f{0, fk_test::ipv4_tcp_frame(1, 2, 3, 4, 0), static_cast<LinkType>(99)};
  try {
    decode_frame(f);
    FAIL("expected FrameError");
  } catch (const FrameError& e) {
    CHECK(e.kind() == FrameErrorKind::UnsupportedLinkType);
  }
}
