#include "flowkit/ip_address.hpp"

#include <arpa/inet.h>

#include <charconv>
#include <cstring>

namespace flowkit {

IpAddress::IpAddress() { bytes_[10] = bytes_[11] = 0xff; }

IpAddress IpAddress::v4(std::uint32_t host_order) {
  IpAddress a;
  a.bytes_[12] = static_cast<std::uint8_t>(host_order >> 24);
  a.bytes_[13] = static_cast<std::uint8_t>(host_order >> 16);
  a.bytes_[14] = static_cast<std::uint8_t>(host_order >> 8);
  a.bytes_[15] = static_cast<std::uint8_t>(host_order);
  return a;
}

IpAddress IpAddress::v4(std::span<const std::uint8_t, 4> network_order) {
  IpAddress a;
  std::memcpy(a.bytes_.data() + 12, network_order.data(), 4);
  return a;
}

IpAddress IpAddress::v6(std::span<const std::uint8_t, 16> network_order) {
  IpAddress a;
  std::memcpy(a.bytes_.data(), network_order.data(), 16);
  a.version_ = 6;
  return a;
}

std::optional<IpAddress> IpAddress::parse(std::string_view text) {
  if (text.empty() || text.size() > INET6_ADDRSTRLEN) return std::nullopt;
  std::string s(text);
  std::array<std::uint8_t, 16> buf{};
  if (s.find(':') == std::string::npos) {
    if (inet_pton(AF_INET, s.c_str(), buf.data()) != 1) return std::nullopt;
    return v4(std::span<const std::uint8_t, 4>(buf.data(), 4));
  }
  if (inet_pton(AF_INET6, s.c_str(), buf.data()) != 1) return std::nullopt;
  return v6(std::span<const std::uint8_t, 16>(buf));
}

std::uint32_t IpAddress::to_v4() const {
  return (std::uint32_t{bytes_[12]} << 24) | (std::uint32_t{bytes_[13]} << 16) |
         (std::uint32_t{bytes_[14]} << 8) | std::uint32_t{bytes_[15]};
}

std::span<const std::uint8_t> IpAddress::octets() const {
  if (is_v4()) return std::span<const std::uint8_t>(bytes_.data() + 12, 4);
  return std::span<const std::uint8_t>(bytes_);
}

IpAddress IpAddress::masked(unsigned prefix_len) const {
  IpAddress out = *this;
  const unsigned offset = is_v4() ? 12 : 0;
  const unsigned w = width();
  if (prefix_len >= w) return out;
  unsigned byte = offset + prefix_len / 8;
  if (prefix_len % 8) {
    out.bytes_[byte] &= static_cast<std::uint8_t>(0xff00u >> (prefix_len % 8));
    ++byte;
  }
  for (; byte < 16; ++byte) out.bytes_[byte] = 0;
  return out;
}

std::string IpAddress::to_string() const {
  char buf[INET6_ADDRSTRLEN];
  if (is_v4()) {
    inet_ntop(AF_INET, bytes_.data() + 12, buf, sizeof buf);
  } else {
    inet_ntop(AF_INET6, bytes_.data(), buf, sizeof buf);
  }
  return buf;
}

std::size_t IpAddressHash::operator()(const IpAddress& a) const noexcept {
  // FNV-1a over the mapped bytes and the family.
  std::uint64_t h = 1469598103934665603ull;
  for (auto b : a.mapped()) {
    h ^= b;
    h *= 1099511628211ull;
  }
  h ^= a.version();
  h *= 1099511628211ull;
  return static_cast<std::size_t>(h);
}

Prefix Prefix::parse(std::string_view text) {
  const auto slash = text.find('/');
  auto addr = IpAddress::parse(text.substr(0, slash));
  if (!addr) throw InvalidCidr("invalid address in prefix '" + std::string(text) + "'");
  unsigned len = addr->width();
  if (slash != std::string_view::npos) {
    auto digits = text.substr(slash + 1);
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), len);
    if (digits.empty() || ec != std::errc{} || ptr != digits.data() + digits.size() ||
        len > addr->width()) {
      throw InvalidCidr("invalid prefix length in '" + std::string(text) + "'");
    }
  }
  return Prefix{addr->masked(len), len};
}

bool Prefix::contains(const IpAddress& addr) const {
  if (addr.version() != network.version()) return false;
  return addr.masked(length) == network;
}

std::string Prefix::to_string() const {
  return network.to_string() + "/" + std::to_string(length);
}

}  // namespace flowkit
