#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace flowkit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// IPv4 or IPv6 address. IPv4 is held in v4-mapped form (::ffff:a.b.c.d) so
// both families share one 16-byte representation.
class IpAddress {
 public:
  IpAddress();

  static IpAddress v4(std::uint32_t host_order);
  static IpAddress v4(std::span<const std::uint8_t, 4> network_order);
  static IpAddress v6(std::span<const std::uint8_t, 16> network_order);
  static std::optional<IpAddress> parse(std::string_view text);

  std::uint8_t version() const { return version_; }
  bool is_v4() const { return version_ == 4; }
  unsigned width() const { return is_v4() ? 32 : 128; }

  std::uint32_t to_v4() const;
  const std::array<std::uint8_t, 16>& mapped() const { return bytes_; }
  // 4 bytes for IPv4, 16 for IPv6, network order.
  std::span<const std::uint8_t> octets() const;

  // Keeps the top `prefix_len` bits of the family-width address.
  IpAddress masked(unsigned prefix_len) const;

  std::string to_string() const;

  auto operator<=>(const IpAddress&) const = default;
  bool operator==(const IpAddress&) const = default;

 private:
  std::array<std::uint8_t, 16> bytes_{};
  std::uint8_t version_ = 4;
};

struct IpAddressHash {
  std::size_t operator()(const IpAddress& a) const noexcept;
};

class InvalidCidr : public Error {
 public:
  using Error::Error;
};

struct Prefix {
  IpAddress network;
  unsigned length = 0;

  // Accepts "a.b.c.d/len", "v6/len" or a bare address (full-length prefix).
  // Host bits are cleared.
  static Prefix parse(std::string_view text);

  bool contains(const IpAddress& addr) const;
  std::string to_string() const;

  auto operator<=>(const Prefix&) const = default;
  bool operator==(const Prefix&) const = default;
};

}  // namespace flowkit
