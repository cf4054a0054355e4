// Reference answer for generated workloads: packets grouped per key, each
// group cut wherever a timeout or a TCP FIN/RST ends the current flow.

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <tuple>

#include "flowkit/synth.hpp"

namespace flowkit::oracle {

std::vector<FlowRecord> expected_flows(const std::vector<synth::TruthPacket>& packets,
                                       const Params& params) {
  std::map<FlowKey, std::vector<const synth::TruthPacket*>> groups;
  for (const auto& p : packets) groups[p.key].push_back(&p);

  std::vector<FlowRecord> flows;
  for (const auto& [key, list] : groups) {
    std::vector<const synth::TruthPacket*> ordered = list;
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const auto* a, const auto* b) { return a->timestamp_us < b->timestamp_us; });
    bool open = false;
    FlowRecord cur;
    for (const auto* p : ordered) {
      const std::int64_t ms = p->timestamp_us / 1000;
      if (open && (ms - cur.last_seen_ms >= params.idle_ms ||
                   ms - cur.first_seen_ms >= params.active_ms)) {
        flows.push_back(cur);
        open = false;
      }
      if (!open) {
        cur = FlowRecord{};
        cur.key = key;
        cur.first_seen_ms = ms;
        open = true;
      }
      cur.last_seen_ms = ms;
      cur.packets += 1;
      cur.bytes += p->ip_length;
      cur.tcp_flags |= p->tcp_flags;
      const bool fin_or_rst = (p->tcp_flags & (tcp_flag::kFin | tcp_flag::kRst)) != 0;
      if (params.tcp_finrst_expiry && key.protocol == ip_proto::kTcp && fin_or_rst) {
        flows.push_back(cur);
        open = false;
      }
    }
    if (open) flows.push_back(cur);
  }
  sort_canonical(flows);
  return flows;
}

void sort_canonical(std::vector<FlowRecord>& flows) {
  std::sort(flows.begin(), flows.end(), [](const FlowRecord& a, const FlowRecord& b) {
    return std::tie(a.key, a.first_seen_ms, a.last_seen_ms, a.packets, a.bytes, a.tcp_flags) <
           std::tie(b.key, b.first_seen_ms, b.last_seen_ms, b.packets, b.bytes, b.tcp_flags);
  });
}

void write(std::ostream& out, const std::vector<FlowRecord>& flows, const Params& params) {
  out << "# idle_ms=" << params.idle_ms << " active_ms=" << params.active_ms
      << " tcp_finrst=" << (params.tcp_finrst_expiry ? 1 : 0) << " flows=" << flows.size() << '\n';
  out << "# ver proto src_ip src_port dst_ip dst_port packets bytes first_ms last_ms flags\n";
  for (const auto& f : flows) {
    out << int{f.key.ip_version} << ' ' << int{f.key.protocol} << ' ' << f.key.src_ip.to_string()
        << ' ' << f.key.src_port << ' ' << f.key.dst_ip.to_string() << ' ' << f.key.dst_port << ' '
        << f.packets << ' ' << f.bytes << ' ' << f.first_seen_ms << ' ' << f.last_seen_ms << ' '
        << int{f.tcp_flags} << '\n';
  }
}

std::vector<FlowRecord> read(std::istream& in) {
  std::vector<FlowRecord> flows;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    int ver = 0, proto = 0, flags = 0;
    std::string src, dst;
    FlowRecord f;
    if (!(fields >> ver >> proto >> src >> f.key.src_port >> dst >> f.key.dst_port >> f.packets >>
          f.bytes >> f.first_seen_ms >> f.last_seen_ms >> flags)) {
      throw Error("oracle line " + std::to_string(number) + ": malformed");
    }
    auto s = IpAddress::parse(src);
    auto d = IpAddress::parse(dst);
    if (!s || !d) throw Error("oracle line " + std::to_string(number) + ": bad address");
    f.key.ip_version = static_cast<std::uint8_t>(ver);
    f.key.protocol = static_cast<std::uint8_t>(proto);
    f.key.src_ip = *s;
    f.key.dst_ip = *d;
    f.tcp_flags = static_cast<std::uint8_t>(flags);
    flows.push_back(f);
  }
  return flows;
}

std::vector<FlowRecord> read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open oracle file " + path.string());
  return read(in);
}

}  // namespace flowkit::oracle
