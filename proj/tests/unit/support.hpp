#pragma once

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "flowkit/flow.hpp"
#include "flowkit/packet.hpp"

namespace fk_test {

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "flowkit-test-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline flowkit::IpAddress ip(const char* text) { return *flowkit::IpAddress::parse(text); }

inline flowkit::FlowRecord flow(const char* src, const char* dst, std::uint8_t proto,
                                std::uint16_t sport, std::uint16_t dport, std::uint64_t packets,
                                std::uint64_t bytes, std::int64_t first = 1'735'732'800'000,
                                std::int64_t last = 1'735'732'801'000) {
  flowkit::FlowRecord r;
  r.key.src_ip = ip(src);
  r.key.dst_ip = ip(dst);
  r.key.ip_version = r.key.src_ip.version();
  r.key.protocol = proto;
  r.key.src_port = sport;
  r.key.dst_port = dport;
  r.packets = packets;
  r.bytes = bytes;
  r.first_seen_ms = first;
  r.last_seen_ms = last;
  return r;
}

// Arbitrary record valid for the wire and the store: ports zero unless TCP/UDP,
// flags zero unless TCP.
inline flowkit::FlowRecord random_flow(std::mt19937_64& rng) {
  flowkit::FlowRecord r;
  const bool v6 = rng() % 3 == 0;
  auto addr = [&] {
    if (!v6) return flowkit::IpAddress::v4(static_cast<std::uint32_t>(rng()));
    std::array<std::uint8_t, 16> b{};
    for (auto& x : b) x = static_cast<std::uint8_t>(rng());
    return flowkit::IpAddress::v6(b);
  };
  r.key.ip_version = v6 ? 6 : 4;
  r.key.src_ip = addr();
  r.key.dst_ip = addr();
  static constexpr std::uint8_t protos[] = {6, 17, 1, 58, 47, 50};
  r.key.protocol = protos[rng() % std::size(protos)];
  if (r.key.protocol == 6 || r.key.protocol == 17) {
    r.key.src_port = static_cast<std::uint16_t>(rng());
    r.key.dst_port = static_cast<std::uint16_t>(rng());
  }
  if (r.key.protocol == 6) r.tcp_flags = static_cast<std::uint8_t>(rng());
  r.first_seen_ms = 1'600'000'000'000 + static_cast<std::int64_t>(rng() % 400'000'000'000ULL);
  r.last_seen_ms = r.first_seen_ms + static_cast<std::int64_t>(rng() % 3'600'000);
  r.packets = 1 + rng() % 1'000'000;
  r.bytes = r.packets * 20 + rng() % 1'000'000'000;
  return r;
}

// Ethernet + IPv4 + TCP frame, padded to the 60-byte Ethernet minimum.
inline std::vector<std::uint8_t> ipv4_tcp_frame(std::uint32_t src, std::uint32_t dst,
                                                std::uint16_t sport, std::uint16_t dport,
                                                std::uint8_t flags) {
  std::vector<std::uint8_t> f = {
      0x00, 0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77, 0x88, 0x99, 0xaa, 0xbb, 0x08, 0x00,
      0x45, 0x00, 0x00, 0x28, 0x00, 0x01, 0x40, 0x00, 0x40, 0x06, 0x00, 0x00,
      static_cast<std::uint8_t>(src >> 24), static_cast<std::uint8_t>(src >> 16),
      static_cast<std::uint8_t>(src >> 8), static_cast<std::uint8_t>(src),
      static_cast<std::uint8_t>(dst >> 24), static_cast<std::uint8_t>(dst >> 16),
      static_cast<std::uint8_t>(dst >> 8), static_cast<std::uint8_t>(dst),
      static_cast<std::uint8_t>(sport >> 8), static_cast<std::uint8_t>(sport),
      static_cast<std::uint8_t>(dport >> 8), static_cast<std::uint8_t>(dport),
      0, 0, 0, 1, 0, 0, 0, 0, 0x50, flags, 0xff, 0xff, 0, 0, 0, 0};
  f.resize(60, 0);
  return f;
}

inline flowkit::ParsedPacket packet(std::int64_t ts_us, const char* src, const char* dst,
                                    std::uint8_t proto, std::uint16_t sport, std::uint16_t dport,
                                    std::uint32_t len, std::uint8_t flags = 0) {
  flowkit::ParsedPacket p;
  p.timestamp_us = ts_us;
  p.src_ip = ip(src);
  p.dst_ip = ip(dst);
  p.ip_version = p.src_ip.version();
  p.protocol = proto;
  p.src_port = sport;
  p.dst_port = dport;
  p.ip_payload_len = len;
  p.tcp_flags = flags;
  return p;
}

}  // namespace fk_test
