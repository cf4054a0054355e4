#pragma once

#include <sys/socket.h>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "flowkit/ip_address.hpp"

namespace flowkit {

struct Endpoint {
  IpAddress address;
  std::uint16_t port = 0;

  // "host:port", "[v6]:port", or a bare address when `default_port` is given.
  // Throws std::invalid_argument.
  static Endpoint parse(std::string_view text, std::optional<std::uint16_t> default_port = {});
  static Endpoint from_sockaddr(const sockaddr_storage& sa);
  socklen_t to_sockaddr(sockaddr_storage& sa) const;
  std::string to_string() const;

  auto operator<=>(const Endpoint&) const = default;
  bool operator==(const Endpoint&) const = default;
};

class SocketError : public Error {
 public:
  SocketError(int err, const std::string& what);
  int code() const { return code_; }

 private:
  int code_;
};

// Owning UDP socket.
class UdpSocket {
 public:
  UdpSocket() = default;
  ~UdpSocket();
  UdpSocket(UdpSocket&& other) noexcept;
  UdpSocket& operator=(UdpSocket&& other) noexcept;
  UdpSocket(const UdpSocket&) = delete;
  UdpSocket& operator=(const UdpSocket&) = delete;

  static UdpSocket bind(const Endpoint& local);
  // Connected socket: send() needs no address, and ICMP errors from earlier
  // sends surface as ECONNREFUSED on later ones.
  static UdpSocket connect(const Endpoint& remote);
  // Unbound socket of the family of `remote`, for send_to().
  static UdpSocket unconnected(const Endpoint& remote);

  // 0 on success, errno otherwise.
  int send(std::span<const std::uint8_t> data);
  int send_to(std::span<const std::uint8_t> data, const Endpoint& to);
  // Waits up to `timeout_ms`; nullopt on timeout. Returns the datagram size.
  std::optional<std::size_t> receive(std::span<std::uint8_t> buffer, Endpoint& from,
                                     int timeout_ms);
  // Best effort; returns the effective size.
  int set_receive_buffer(int bytes);
  Endpoint local_endpoint() const;
  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }

 private:
  explicit UdpSocket(int fd) : fd_(fd) {}
  int fd_ = -1;
};

}  // namespace flowkit
