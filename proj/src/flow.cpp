#include "flowkit/flow.hpp"

namespace flowkit {

std::size_t FlowKeyHash::operator()(const FlowKey& k) const noexcept {
  IpAddressHash h;
  std::size_t seed = h(k.src_ip);
  auto mix = [&seed](std::size_t v) { seed ^= v + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2); };
  mix(h(k.dst_ip));
  mix((std::size_t{k.protocol} << 40) | (std::size_t{k.src_port} << 16) | k.dst_port);
  mix(k.ip_version);
  return seed;
}

std::string_view to_string(EndReason reason) {
  switch (reason) {
    case EndReason::Idle: return "idle";
    case EndReason::Active: return "active";
    case EndReason::Eof: return "eof";
    case EndReason::FinRst: return "fin_rst";
    case EndReason::Evicted: return "evicted";
  }
  return "unknown";
}

}  // namespace flowkit
