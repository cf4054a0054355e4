#include "flowkit/udp.hpp"

#include <netinet/in.h>
#include <poll.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>
#include <stdexcept>

namespace flowkit {

SocketError::SocketError(int err, const std::string& what)
    : Error(what + ": " + std::strerror(err)), code_(err) {}

Endpoint Endpoint::parse(std::string_view text, std::optional<std::uint16_t> default_port) {
  std::string_view host = text;
  std::string_view port_text;
  if (!text.empty() && text.front() == '[') {
    const auto close = text.find(']');
    if (close == std::string_view::npos) throw std::invalid_argument("unterminated '[' in endpoint");
    host = text.substr(1, close - 1);
    auto rest = text.substr(close + 1);
    if (!rest.empty()) {
      if (rest.front() != ':') throw std::invalid_argument("expected ':' after ']'");
      port_text = rest.substr(1);
    }
  } else if (std::count(text.begin(), text.end(), ':') == 1) {
    const auto colon = text.find(':');
    host = text.substr(0, colon);
    port_text = text.substr(colon + 1);
  }

  Endpoint ep;
  if (host == "localhost") host = "127.0.0.1";
  auto addr = IpAddress::parse(host);
  if (!addr) throw std::invalid_argument("invalid address '" + std::string(host) + "'");
  ep.address = *addr;
  if (port_text.empty()) {
    if (!default_port) throw std::invalid_argument("missing port in '" + std::string(text) + "'");
    ep.port = *default_port;
  } else {
    unsigned port = 0;
    auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
    if (ec != std::errc{} || ptr != port_text.data() + port_text.size() || port > 65535) {
      throw std::invalid_argument("invalid port '" + std::string(port_text) + "'");
    }
    ep.port = static_cast<std::uint16_t>(port);
  }
  return ep;
}

Endpoint Endpoint::from_sockaddr(const sockaddr_storage& sa) {
  Endpoint ep;
  if (sa.ss_family == AF_INET) {
    const auto& in = reinterpret_cast<const sockaddr_in&>(sa);
    ep.address = IpAddress::v4(ntohl(in.sin_addr.s_addr));
    ep.port = ntohs(in.sin_port);
  } else if (sa.ss_family == AF_INET6) {
    const auto& in6 = reinterpret_cast<const sockaddr_in6&>(sa);
    std::span<const std::uint8_t, 16> raw(in6.sin6_addr.s6_addr, 16);
    const bool mapped = std::all_of(raw.begin(), raw.begin() + 10, [](auto b) { return b == 0; }) &&
                        raw[10] == 0xff && raw[11] == 0xff;
    ep.address = mapped ? IpAddress::v4(std::span<const std::uint8_t, 4>(raw.data() + 12, 4))
                        : IpAddress::v6(raw);
    ep.port = ntohs(in6.sin6_port);
  }
  return ep;
}

socklen_t Endpoint::to_sockaddr(sockaddr_storage& sa) const {
  std::memset(&sa, 0, sizeof sa);
  if (address.is_v4()) {
    auto& in = reinterpret_cast<sockaddr_in&>(sa);
    in.sin_family = AF_INET;
    in.sin_port = htons(port);
    in.sin_addr.s_addr = htonl(address.to_v4());
    return sizeof(sockaddr_in);
  }
  auto& in6 = reinterpret_cast<sockaddr_in6&>(sa);
  in6.sin6_family = AF_INET6;
  in6.sin6_port = htons(port);
  std::memcpy(in6.sin6_addr.s6_addr, address.mapped().data(), 16);
  return sizeof(sockaddr_in6);
}

std::string Endpoint::to_string() const {
  if (address.is_v4()) return address.to_string() + ":" + std::to_string(port);
  return "[" + address.to_string() + "]:" + std::to_string(port);
}

UdpSocket::~UdpSocket() {
  if (fd_ >= 0) ::close(fd_);
}

UdpSocket::UdpSocket(UdpSocket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }

UdpSocket& UdpSocket::operator=(UdpSocket&& other) noexcept {
  if (this != &other) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = other.fd_;
    other.fd_ = -1;
  }
  return *this;
}

namespace {
int open_for(const Endpoint& ep) {
  const int fd = ::socket(ep.address.is_v4() ? AF_INET : AF_INET6, SOCK_DGRAM | SOCK_CLOEXEC, 0);
  if (fd < 0) throw SocketError(errno, "socket");
  return fd;
}
}  // namespace

UdpSocket UdpSocket::bind(const Endpoint& local) {
  UdpSocket s(open_for(local));
  sockaddr_storage sa;
  const socklen_t len = local.to_sockaddr(sa);
  if (::bind(s.fd_, reinterpret_cast<sockaddr*>(&sa), len) != 0) {
    throw SocketError(errno, "bind " + local.to_string());
  }
  return s;
}

UdpSocket UdpSocket::connect(const Endpoint& remote) {
  UdpSocket s(open_for(remote));
  sockaddr_storage sa;
  const socklen_t len = remote.to_sockaddr(sa);
  if (::connect(s.fd_, reinterpret_cast<sockaddr*>(&sa), len) != 0) {
    throw SocketError(errno, "connect " + remote.to_string());
  }
  return s;
}

UdpSocket UdpSocket::unconnected(const Endpoint& remote) { return UdpSocket(open_for(remote)); }

int UdpSocket::send(std::span<const std::uint8_t> data) {
  const ssize_t n = ::send(fd_, data.data(), data.size(), MSG_NOSIGNAL);
  return n < 0 ? errno : 0;
}

int UdpSocket::send_to(std::span<const std::uint8_t> data, const Endpoint& to) {
  sockaddr_storage sa;
  const socklen_t len = to.to_sockaddr(sa);
  const ssize_t n = ::sendto(fd_, data.data(), data.size(), MSG_NOSIGNAL,
                             reinterpret_cast<sockaddr*>(&sa), len);
  return n < 0 ? errno : 0;
}

std::optional<std::size_t> UdpSocket::receive(std::span<std::uint8_t> buffer, Endpoint& from,
                                              int timeout_ms) {
  pollfd pfd{fd_, POLLIN, 0};
  if (::poll(&pfd, 1, timeout_ms) <= 0) return std::nullopt;
  sockaddr_storage sa{};
  socklen_t len = sizeof sa;
  const ssize_t n = ::recvfrom(fd_, buffer.data(), buffer.size(), MSG_TRUNC,
                               reinterpret_cast<sockaddr*>(&sa), &len);
  if (n < 0) return std::nullopt;
  from = Endpoint::from_sockaddr(sa);
  // Oversized datagrams are reported at their true size; callers compare.
  return static_cast<std::size_t>(n);
}

int UdpSocket::set_receive_buffer(int bytes) {
  // SO_RCVBUFFORCE ignores rmem_max when privileged.
  if (::setsockopt(fd_, SOL_SOCKET, SO_RCVBUFFORCE, &bytes, sizeof bytes) != 0) {
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVBUF, &bytes, sizeof bytes);
  }
  int actual = 0;
  socklen_t len = sizeof actual;
  ::getsockopt(fd_, SOL_SOCKET, SO_RCVBUF, &actual, &len);
  return actual;
}

Endpoint UdpSocket::local_endpoint() const {
  sockaddr_storage sa{};
  socklen_t len = sizeof sa;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&sa), &len);
  return Endpoint::from_sockaddr(sa);
}

}  // namespace flowkit
