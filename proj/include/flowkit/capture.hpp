#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "flowkit/packet.hpp"

namespace flowkit {

enum class CaptureErrorKind { BadMagic, TruncatedCapture, UnsupportedLinkType, Io, NoSuchInterface, PermissionDenied };

class CaptureError : public Error {
 public:
  CaptureError(CaptureErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  CaptureErrorKind kind() const { return kind_; }

 private:
  CaptureErrorKind kind_;
};

// Source-agnostic frame stream. A source is driven by one thread; the frames
// it yields may be moved to one consumer on another thread.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  // nullopt at end of stream (or after cancellation for live sources).
  virtual std::optional<RawFrame> next() = 0;
  virtual bool is_live() const { return false; }
};

namespace pcap {
inline constexpr std::uint32_t kMagicMicro = 0xA1B2C3D4;
inline constexpr std::uint32_t kMagicNano = 0xA1B23C4D;
inline constexpr std::uint32_t kLinkTypeEthernet = 1;
inline constexpr std::size_t kGlobalHeaderSize = 24;
inline constexpr std::size_t kRecordHeaderSize = 16;
inline constexpr std::uint32_t kMaxSnaplen = 262144;
}  // namespace pcap

class PcapReader final : public FrameSource {
 public:
  explicit PcapReader(const std::filesystem::path& path);

  std::optional<RawFrame> next() override;

  bool nanosecond() const { return nanosecond_; }
  bool swapped() const { return swapped_; }
  std::uint32_t link_type() const { return link_type_; }
  // Mid-record EOFs seen; the partial record is discarded.
  std::uint64_t truncated_records() const { return truncated_; }
  std::uint64_t frames_read() const { return frames_; }

 private:
  std::uint32_t u32(const std::uint8_t* p) const;

  std::ifstream in_;
  bool nanosecond_ = false;
  bool swapped_ = false;
  std::uint32_t link_type_ = 0;
  std::uint64_t truncated_ = 0;
  std::uint64_t frames_ = 0;
  bool done_ = false;
};

// Writes little-endian microsecond pcap files with Ethernet link type.
class PcapWriter {
 public:
  explicit PcapWriter(const std::filesystem::path& path, std::uint32_t snaplen = 65535);
  void write(const RawFrame& frame);
  void close();

 private:
  std::ofstream out_;
};

// Live capture from a network interface through an AF_PACKET socket. Frames
// are stamped with wall-clock receive time.
class LiveSource final : public FrameSource {
 public:
  explicit LiveSource(const std::string& interface_name);
  ~LiveSource() override;
  LiveSource(const LiveSource&) = delete;
  LiveSource& operator=(const LiveSource&) = delete;

  std::optional<RawFrame> next() override;
  bool is_live() const override { return true; }

  // Safe to call from any thread; next() returns nullopt promptly afterwards.
  void cancel() { cancelled_.store(true, std::memory_order_relaxed); }
  // Returns nullopt on timeout, allowing the caller to run timers.
  std::optional<RawFrame> next_for(int timeout_ms);
  bool cancelled() const { return cancelled_.load(std::memory_order_relaxed); }
  std::uint64_t drops();

 private:
  int fd_ = -1;
  std::atomic<bool> cancelled_{false};
  std::uint64_t drops_ = 0;
};

}  // namespace flowkit
