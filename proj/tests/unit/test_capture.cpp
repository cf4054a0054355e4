#include <bit>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "flowkit/bytes.hpp"
#include "flowkit/capture.hpp"
#include "flowkit/udp.hpp"
#include "support.hpp"

using namespace flowkit;

namespace {

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& data) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

// Big-endian nanosecond capture written by hand.
std::vector<std::uint8_t> be_nano_capture(const std::vector<std::vector<std::uint8_t>>& frames,
                                          std::uint32_t sec, std::uint32_t nsec) {
  std::vector<std::uint8_t> out;
  bytes::BeWriter w(out);
  w.u32(pcap::kMagicNano);
  w.u16(2);
  w.u16(4);
  w.u32(0);
  w.u32(0);
  w.u32(65535);
  w.u32(pcap::kLinkTypeEthernet);
  for (const auto& f : frames) {
    w.u32(sec);
    w.u32(nsec);
    w.u32(static_cast<std::uint32_t>(f.size()));
    w.u32(static_cast<std::uint32_t>(f.size()));
    w.raw(f);
  }
  return out;
}

}  // namespace

TEST_CASE("header-only capture is an empty stream") {
  fk_test::TempDir dir;
  { PcapWriter w(dir / "empty.pcap"); }
  PcapReader r(dir / "empty.pcap");
  CHECK_FALSE(r.next());
  CHECK(r.truncated_records() == 0);
}

TEST_CASE("wrong magic") {
  fk_test::TempDir dir;
  write_bytes(dir / "bad.pcap", std::vector<std::uint8_t>(24, 0x42));
  try {
    PcapReader r(dir / "bad.pcap");
    FAIL("expected CaptureError");
  } catch (const CaptureError& e) {
    CHECK(e.kind() == CaptureErrorKind::BadMagic);
  }
}

TEST_CASE("writer and reader round trip 1000 frames") {
  fk_test::TempDir dir;
  std::vector<RawFrame> frames;
  for (int i = 0; i < 1000; ++i) {
    frames.push_back(RawFrame{1'735'732'800'000'000 + i * 1'234'567LL,
                              fk_test::ipv4_tcp_frame(static_cast<std::uint32_t>(i), 2, 3, 4, 0),
                              LinkType::Ethernet});
  }
  {
    PcapWriter w(dir / "a.pcap");
    for (const auto& f : frames) w.write(f);
  }
  PcapReader r(dir / "a.pcap");
  std::size_t n = 0;
  while (auto f = r.next()) {
    REQUIRE(n < frames.size());
    CHECK(f->timestamp_us == frames[n].timestamp_us);
    CHECK(f->data == frames[n].data);
    ++n;
  }
  CHECK(n == 1000);
  CHECK_FALSE(r.nanosecond());
}

TEST_CASE("nanosecond big-endian capture truncates to microseconds") {
  fk_test::TempDir dir;
  auto frame = fk_test::ipv4_tcp_frame(1, 2, 3, 4, 0);
  write_bytes(dir / "ns.pcap", be_nano_capture({frame, frame}, 1'700'000'000, 123'456'789));
  PcapReader r(dir / "ns.pcap");
  CHECK(r.nanosecond());
  CHECK(r.swapped() == (std::endian::native == std::endian::little));
  auto f = r.next();
  REQUIRE(f);
  CHECK(f->timestamp_us == 1'700'000'000'123'456LL);
  CHECK(f->data == frame);
  CHECK(r.next());
  CHECK_FALSE(r.next());
}

TEST_CASE("mid-record EOF keeps earlier frames and counts the truncation") {
  fk_test::TempDir dir;
  auto frame = fk_test::ipv4_tcp_frame(1, 2, 3, 4, 0);
  auto data = be_nano_capture({frame, frame, frame}, 1, 0);
  data.resize(data.size() - 7);
  write_bytes(dir / "cut.pcap", data);
  PcapReader r(dir / "cut.pcap");
  int n = 0;
  while (r.next()) ++n;
  CHECK(n == 2);
  CHECK(r.truncated_records() == 1);
}

TEST_CASE("non-Ethernet captures are rejected") {
  fk_test::TempDir dir;
  auto data = be_nano_capture({}, 0, 0);
  data[23] = 101;  // raw IP
  write_bytes(dir / "raw.pcap", data);
  try {
    PcapReader r(dir / "raw.pcap");
    FAIL("expected CaptureError");
  } catch (const CaptureError& e) {
    CHECK(e.kind() == CaptureErrorKind::UnsupportedLinkType);
  }
}

TEST_CASE("live source on a missing interface") {
  try {
    LiveSource s("flowkit-nope0");
    FAIL("expected CaptureError");
  } catch (const CaptureError& e) {
    CHECK(e.kind() == CaptureErrorKind::NoSuchInterface);
  }
}

TEST_CASE("live loopback capture") {
  std::optional<LiveSource> source;
  try {
    source.emplace("lo");
  } catch (const CaptureError& e) {
    if (e.kind() == CaptureErrorKind::PermissionDenied) {
      WARN_MESSAGE(false, "no capture privilege; skipping live capture");
      return;
    }
    throw;
  }

  SUBCASE("cancel before any frame") {
    source->cancel();
    CHECK_FALSE(source->next());
  }

  SUBCASE("ten local UDP packets are observed") {
    auto receiver = UdpSocket::bind(Endpoint::parse("127.0.0.1:0"));
    const auto to = receiver.local_endpoint();
    auto sender = UdpSocket::connect(to);
    const std::vector<std::uint8_t> payload{'f', 'l', 'o', 'w', 'k', 'i', 't'};
    for (int i = 0; i < 10; ++i) CHECK(sender.send(payload) == 0);
    int seen = 0;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(3);
    while (seen < 10 && std::chrono::steady_clock::now() < deadline) {
      auto f = source->next_for(100);
      if (!f) continue;
      auto d = decode_frame(*f);
      if (const auto* p = std::get_if<ParsedPacket>(&d)) {
        if (p->protocol == ip_proto::kUdp && p->dst_port == to.port) ++seen;
      }
    }
    CHECK(seen >= 10);
  }
}
