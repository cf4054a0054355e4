#include "flowkit/capture.hpp"

#include <arpa/inet.h>
#include <linux/if_packet.h>
#include <net/ethernet.h>
#include <net/if.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <chrono>
#include <cstring>

#include "flowkit/bytes.hpp"

namespace flowkit {

PcapReader::PcapReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
  if (!in_) throw CaptureError(CaptureErrorKind::Io, "cannot open " + path.string());
  std::array<std::uint8_t, pcap::kGlobalHeaderSize> hdr{};
  in_.read(reinterpret_cast<char*>(hdr.data()), hdr.size());
  const auto got = static_cast<std::size_t>(in_.gcount());
  if (got < 4) throw CaptureError(CaptureErrorKind::BadMagic, "not a pcap file: " + path.string());

  const std::uint32_t le = bytes::load_le32(hdr.data());
  const std::uint32_t be = bytes::load_be32(hdr.data());
  if (le == pcap::kMagicMicro || le == pcap::kMagicNano) {
    swapped_ = false;
    nanosecond_ = le == pcap::kMagicNano;
  } else if (be == pcap::kMagicMicro || be == pcap::kMagicNano) {
    swapped_ = true;
    nanosecond_ = be == pcap::kMagicNano;
  } else {
    throw CaptureError(CaptureErrorKind::BadMagic, "bad pcap magic in " + path.string());
  }
  if (got < hdr.size()) {
    throw CaptureError(CaptureErrorKind::TruncatedCapture, "truncated pcap global header");
  }
  link_type_ = u32(hdr.data() + 20) & 0x0fffffff;
  if (link_type_ != pcap::kLinkTypeEthernet) {
    throw CaptureError(CaptureErrorKind::UnsupportedLinkType,
                       "unsupported pcap link type " + std::to_string(link_type_));
  }
}

// "swapped" means the file is big-endian relative to the little-endian reading.
std::uint32_t PcapReader::u32(const std::uint8_t* p) const {
  return swapped_ ? bytes::load_be32(p) : bytes::load_le32(p);
}

std::optional<RawFrame> PcapReader::next() {
  if (done_) return std::nullopt;
  std::array<std::uint8_t, pcap::kRecordHeaderSize> rec{};
  in_.read(reinterpret_cast<char*>(rec.data()), rec.size());
  const auto got = static_cast<std::size_t>(in_.gcount());
  if (got == 0) {
    done_ = true;
    return std::nullopt;
  }
  if (got < rec.size()) {
    ++truncated_;
    done_ = true;
    return std::nullopt;
  }
  const std::uint32_t ts_sec = u32(rec.data());
  const std::uint32_t ts_frac = u32(rec.data() + 4);
  const std::uint32_t incl_len = u32(rec.data() + 8);
  if (incl_len > pcap::kMaxSnaplen) {
    // A corrupt length cannot be resynchronised; treat the rest as cut off.
    ++truncated_;
    done_ = true;
    return std::nullopt;
  }

  RawFrame frame;
  frame.timestamp_us = std::int64_t{ts_sec} * 1'000'000 +
                       (nanosecond_ ? std::int64_t{ts_frac} / 1000 : std::int64_t{ts_frac});
  frame.data.resize(incl_len);
  in_.read(reinterpret_cast<char*>(frame.data.data()), incl_len);
  if (static_cast<std::uint32_t>(in_.gcount()) < incl_len) {
    ++truncated_;
    done_ = true;
    return std::nullopt;
  }
  ++frames_;
  return frame;
}

PcapWriter::PcapWriter(const std::filesystem::path& path, std::uint32_t snaplen)
    : out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw CaptureError(CaptureErrorKind::Io, "cannot create " + path.string());
  std::array<std::uint8_t, pcap::kGlobalHeaderSize> hdr{};
  bytes::store_le32(hdr.data(), pcap::kMagicMicro);
  bytes::store_le16(hdr.data() + 4, 2);
  bytes::store_le16(hdr.data() + 6, 4);
  bytes::store_le32(hdr.data() + 16, snaplen);
  bytes::store_le32(hdr.data() + 20, pcap::kLinkTypeEthernet);
  out_.write(reinterpret_cast<const char*>(hdr.data()), hdr.size());
}

void PcapWriter::write(const RawFrame& frame) {
  std::array<std::uint8_t, pcap::kRecordHeaderSize> rec{};
  bytes::store_le32(rec.data(), static_cast<std::uint32_t>(frame.timestamp_us / 1'000'000));
  bytes::store_le32(rec.data() + 4, static_cast<std::uint32_t>(frame.timestamp_us % 1'000'000));
  bytes::store_le32(rec.data() + 8, static_cast<std::uint32_t>(frame.data.size()));
  bytes::store_le32(rec.data() + 12, static_cast<std::uint32_t>(frame.data.size()));
  out_.write(reinterpret_cast<const char*>(rec.data()), rec.size());
  out_.write(reinterpret_cast<const char*>(frame.data.data()),
             static_cast<std::streamsize>(frame.data.size()));
  if (!out_) throw CaptureError(CaptureErrorKind::Io, "pcap write failed");
}

void PcapWriter::close() { out_.close(); }

LiveSource::LiveSource(const std::string& interface_name) {
  const unsigned index = if_nametoindex(interface_name.c_str());
  if (index == 0) {
    throw CaptureError(CaptureErrorKind::NoSuchInterface, "no such interface: " + interface_name);
  }
  fd_ = ::socket(AF_PACKET, SOCK_RAW | SOCK_CLOEXEC, htons(ETH_P_ALL));
  if (fd_ < 0) {
    const int err = errno;
    if (err == EPERM || err == EACCES) {
      throw CaptureError(CaptureErrorKind::PermissionDenied,
                         "capture on " + interface_name + " needs CAP_NET_RAW");
    }
    throw CaptureError(CaptureErrorKind::Io, std::string("packet socket: ") + std::strerror(err));
  }
  sockaddr_ll addr{};
  addr.sll_family = AF_PACKET;
  addr.sll_protocol = htons(ETH_P_ALL);
  addr.sll_ifindex = static_cast<int>(index);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    const int err = errno;
    ::close(fd_);
    fd_ = -1;
    throw CaptureError(CaptureErrorKind::Io, std::string("bind packet socket: ") + std::strerror(err));
  }
}

LiveSource::~LiveSource() {
  if (fd_ >= 0) ::close(fd_);
}

std::optional<RawFrame> LiveSource::next_for(int timeout_ms) {
  if (cancelled()) return std::nullopt;
  pollfd pfd{fd_, POLLIN, 0};
  const int ready = ::poll(&pfd, 1, timeout_ms);
  if (ready <= 0 || cancelled()) return std::nullopt;

  RawFrame frame;
  frame.data.resize(65536);
  sockaddr_ll from{};
  socklen_t from_len = sizeof from;
  const ssize_t n = ::recvfrom(fd_, frame.data.data(), frame.data.size(), 0,
                               reinterpret_cast<sockaddr*>(&from), &from_len);
  if (n < 0) return std::nullopt;
  // Our own transmissions are not mirror traffic.
  if (from.sll_pkttype == PACKET_OUTGOING) return std::nullopt;
  frame.data.resize(static_cast<std::size_t>(n));
  frame.timestamp_us = std::chrono::duration_cast<std::chrono::microseconds>(
                           std::chrono::system_clock::now().time_since_epoch())
                           .count();
  return frame;
}

std::optional<RawFrame> LiveSource::next() {
  while (!cancelled()) {
    if (auto frame = next_for(100)) return frame;
  }
  return std::nullopt;
}

std::uint64_t LiveSource::drops() {
  tpacket_stats stats{};
  socklen_t len = sizeof stats;
  if (::getsockopt(fd_, SOL_PACKET, PACKET_STATISTICS, &stats, &len) == 0) {
    drops_ += stats.tp_drops;  // kernel resets the counters on read
  }
  return drops_;
}

}  // namespace flowkit
