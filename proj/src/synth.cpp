#include "flowkit/synth.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "flowkit/bytes.hpp"
#include "flowkit/capture.hpp"
#include "json.hpp"

namespace flowkit::synth {

using nlohmann::json;

namespace {

constexpr std::uint32_t kMaxPayload = 1400;
constexpr std::int64_t kStraddleMs = 2000;

// mt19937_64 is fully specified, unlike the std distributions, so the
// mapping to ranges is done here to keep output identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  std::uint64_t next() { return engine_(); }
  // Uniform in [lo, hi].
  std::uint64_t range(std::uint64_t lo, std::uint64_t hi) {
    const std::uint64_t span = hi - lo + 1;
    return span == 0 ? next() : lo + next() % span;
  }
  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  bool chance(double p) { return p > 0 && unit() < p; }

 private:
  std::mt19937_64 engine_;
};

IpAddress random_host(Rng& rng, const Prefix& p) {
  auto bytes = p.network.mapped();
  const unsigned width = p.network.width();
  const unsigned offset = p.network.is_v4() ? 96 : 0;
  for (unsigned bit = p.length; bit < width; ++bit) {
    if (rng.next() & 1) {
      const unsigned b = offset + bit;
      bytes[b / 8] |= static_cast<std::uint8_t>(0x80u >> (b % 8));
    }
  }
  if (p.network.is_v4()) {
    return IpAddress::v4(std::span<const std::uint8_t, 4>(bytes.data() + 12, 4));
  }
  return IpAddress::v6(std::span<const std::uint8_t, 16>(bytes.data(), 16));
}

std::uint16_t ip_checksum(const std::uint8_t* p, std::size_t n) {
  std::uint32_t sum = 0;
  for (std::size_t i = 0; i + 1 < n; i += 2) sum += bytes::load_be16(p + i);
  while (sum >> 16) sum = (sum & 0xffff) + (sum >> 16);
  return static_cast<std::uint16_t>(~sum);
}

struct FlowPlan {
  FlowKey key;
  std::optional<std::uint16_t> vlan;
  bool v6_extension = false;
};

// Builds one Ethernet frame and returns the IP length it carries.
std::uint32_t build_frame(const FlowPlan& plan, std::uint8_t flags, std::uint32_t payload,
                          std::uint32_t seq, std::vector<std::uint8_t>& out) {
  bytes::BeWriter w(out);
  static constexpr std::uint8_t dst_mac[6] = {0x02, 0x00, 0x00, 0x00, 0x00, 0x02};
  static constexpr std::uint8_t src_mac[6] = {0x02, 0x00, 0x00, 0x00, 0x00, 0x01};
  w.raw(dst_mac);
  w.raw(src_mac);
  if (plan.vlan) {
    w.u16(0x8100);
    w.u16(*plan.vlan);
  }
  const FlowKey& k = plan.key;
  const bool v6 = k.ip_version == 6;
  w.u16(v6 ? 0x86DD : 0x0800);

  std::uint32_t l4_len = 0;
  switch (k.protocol) {
    case ip_proto::kTcp: l4_len = 20; break;
    case ip_proto::kUdp: l4_len = 8; break;
    default: l4_len = 8; break;
  }
  const std::uint32_t ext_len = v6 && plan.v6_extension ? 8 : 0;
  const std::uint32_t ip_len = (v6 ? 40 : 20) + ext_len + l4_len + payload;

  const std::size_t ip_at = w.size();
  if (v6) {
    w.u32(0x60000000);
    w.u16(static_cast<std::uint16_t>(ip_len - 40));
    w.u8(ext_len ? 0 : k.protocol);
    w.u8(64);
    w.raw(k.src_ip.octets());
    w.raw(k.dst_ip.octets());
    if (ext_len) {
      // Hop-by-hop options header holding a single PadN option.
      w.u8(k.protocol);
      w.u8(0);
      w.u8(1);
      w.u8(4);
      w.u32(0);
    }
  } else {
    w.u8(0x45);
    w.u8(0);
    w.u16(static_cast<std::uint16_t>(ip_len));
    w.u16(static_cast<std::uint16_t>(seq));
    w.u16(0x4000);  // DF
    w.u8(64);
    w.u8(k.protocol);
    w.u16(0);
    w.raw(k.src_ip.octets());
    w.raw(k.dst_ip.octets());
    w.patch_u16(ip_at + 10, ip_checksum(out.data() + ip_at, 20));
  }

  switch (k.protocol) {
    case ip_proto::kTcp:
      w.u16(k.src_port);
      w.u16(k.dst_port);
      w.u32(seq);
      w.u32(flags & tcp_flag::kAck ? 1 : 0);
      w.u8(0x50);
      w.u8(flags);
      w.u16(65535);
      w.u16(0);
      w.u16(0);
      break;
    case ip_proto::kUdp:
      w.u16(k.src_port);
      w.u16(k.dst_port);
      w.u16(static_cast<std::uint16_t>(8 + payload));
      w.u16(0);
      break;
    default:
      // Echo request.
      w.u8(k.protocol == ip_proto::kIcmp6 ? 128 : 8);
      w.u8(0);
      w.u16(0);
      w.u16(1);
      w.u16(static_cast<std::uint16_t>(seq));
      break;
  }
  const auto at = out.size();
  out.resize(at + payload);
  for (std::uint32_t i = 0; i < payload; ++i) out[at + i] = static_cast<std::uint8_t>(seq + i);
  return ip_len;
}

std::vector<std::uint8_t> arp_request(Rng& rng) {
  std::vector<std::uint8_t> out;
  bytes::BeWriter w(out);
  for (int i = 0; i < 6; ++i) w.u8(0xff);
  w.raw(std::array<std::uint8_t, 6>{0x02, 0, 0, 0, 0, 0x03});
  w.u16(0x0806);
  w.u16(1);       // Ethernet
  w.u16(0x0800);  // IPv4
  w.u8(6);
  w.u8(4);
  w.u16(1);  // request
  w.raw(std::array<std::uint8_t, 6>{0x02, 0, 0, 0, 0, 0x03});
  w.u32(0xc0a80001);
  for (int i = 0; i < 6; ++i) w.u8(0);
  w.u32(0xc0a80000 | static_cast<std::uint32_t>(rng.range(2, 254)));
  return out;
}

std::uint16_t pick_server_port(Rng& rng) {
  static constexpr std::uint16_t common[] = {22, 25, 53, 80, 123, 443, 993, 3306, 8080, 8443};
  if (rng.chance(0.7)) return common[rng.range(0, std::size(common) - 1)];
  return static_cast<std::uint16_t>(rng.range(1, 65535));
}

}  // namespace

void SyntheticWorkloadSpec::validate() const {
  auto fail = [](const std::string& what) { throw InvalidSpec("invalid workload spec: " + what); };
  if (packets_min < 1) fail("packets_min must be at least 1");
  if (packets_min > packets_max) fail("packets_min exceeds packets_max");
  if (gap_min_ms < 0 || gap_min_ms > gap_max_ms) fail("gap range must satisfy 0 <= min <= max");
  if (span_ms < 0) fail("span_ms must not be negative");
  if (start_us < 0) fail("start_us must not be negative");
  if (payload_min > payload_max || payload_max > kMaxPayload) {
    fail("payload range must satisfy min <= max <= " + std::to_string(kMaxPayload));
  }
  if (mix.tcp < 0 || mix.udp < 0 || mix.icmp < 0 || mix.tcp + mix.udp + mix.icmp <= 0) {
    fail("protocol mix weights must be non-negative with a positive sum");
  }
  for (double f : {v6_fraction, straddle_probability, vlan_fraction, v6_extension_fraction,
                   rst_probability}) {
    if (!(f >= 0.0 && f <= 1.0)) fail("fractions and probabilities must lie in [0, 1]");
  }
  if (v6_fraction < 1.0 && flow_count > 0 && v4_pool.empty()) fail("empty IPv4 pool");
  if (v6_fraction > 0.0 && flow_count > 0 && v6_pool.empty()) fail("empty IPv6 pool");
  for (const auto& p : v4_pool) {
    if (!p.network.is_v4()) fail("IPv6 prefix in IPv4 pool: " + p.to_string());
  }
  for (const auto& p : v6_pool) {
    if (p.network.is_v4()) fail("IPv4 prefix in IPv6 pool: " + p.to_string());
  }
  if (idle_timeout_s >= active_timeout_s) fail("idle timeout must be shorter than active timeout");
  if (straddle_probability > 0 && std::int64_t{idle_timeout_s} * 1000 <= kStraddleMs) {
    fail("timeout straddling needs an idle timeout above 2 s");
  }
}

SyntheticWorkloadSpec SyntheticWorkloadSpec::from_json(std::string_view text) {
  SyntheticWorkloadSpec s;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw InvalidSpec("workload spec must be a JSON object");
    auto get = [&](const char* name, auto& field) {
      if (j.contains(name)) field = j.at(name).get<std::remove_reference_t<decltype(field)>>();
    };
    get("seed", s.seed);
    get("flow_count", s.flow_count);
    get("packets_min", s.packets_min);
    get("packets_max", s.packets_max);
    if (j.contains("mix")) {
      const auto& m = j.at("mix");
      s.mix.tcp = m.value("tcp", 0.0);
      s.mix.udp = m.value("udp", 0.0);
      s.mix.icmp = m.value("icmp", 0.0);
    }
    auto pool = [&](const char* name, std::vector<Prefix>& out) {
      if (!j.contains(name)) return;
      out.clear();
      for (const auto& p : j.at(name)) out.push_back(Prefix::parse(p.get<std::string>()));
    };
    pool("v4_pool", s.v4_pool);
    pool("v6_pool", s.v6_pool);
    get("v6_fraction", s.v6_fraction);
    get("start_us", s.start_us);
    get("span_ms", s.span_ms);
    get("gap_min_ms", s.gap_min_ms);
    get("gap_max_ms", s.gap_max_ms);
    get("straddle_probability", s.straddle_probability);
    get("payload_min", s.payload_min);
    get("payload_max", s.payload_max);
    get("vlan_fraction", s.vlan_fraction);
    get("arp_frames", s.arp_frames);
    get("v6_extension_fraction", s.v6_extension_fraction);
    get("rst_probability", s.rst_probability);
    get("idle_timeout_s", s.idle_timeout_s);
    get("active_timeout_s", s.active_timeout_s);
    get("tcp_finrst_expiry", s.tcp_finrst_expiry);
  } catch (const json::exception& e) {
    throw InvalidSpec(std::string("invalid workload spec: ") + e.what());
  } catch (const InvalidCidr& e) {
    throw InvalidSpec(std::string("invalid workload spec: ") + e.what());
  }
  s.validate();
  return s;
}

SyntheticWorkloadSpec SyntheticWorkloadSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidSpec("cannot open workload spec " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json(text);
}

std::string SyntheticWorkloadSpec::to_json() const {
  json j;
  j["seed"] = seed;
  j["flow_count"] = flow_count;
  j["packets_min"] = packets_min;
  j["packets_max"] = packets_max;
  j["mix"] = {{"tcp", mix.tcp}, {"udp", mix.udp}, {"icmp", mix.icmp}};
  auto pool = [](const std::vector<Prefix>& ps) {
    json a = json::array();
    for (const auto& p : ps) a.push_back(p.to_string());
    return a;
  };
  j["v4_pool"] = pool(v4_pool);
  j["v6_pool"] = pool(v6_pool);
  j["v6_fraction"] = v6_fraction;
  j["start_us"] = start_us;
  j["span_ms"] = span_ms;
  j["gap_min_ms"] = gap_min_ms;
  j["gap_max_ms"] = gap_max_ms;
  j["straddle_probability"] = straddle_probability;
  j["payload_min"] = payload_min;
  j["payload_max"] = payload_max;
  j["vlan_fraction"] = vlan_fraction;
  j["arp_frames"] = arp_frames;
  j["v6_extension_fraction"] = v6_extension_fraction;
  j["rst_probability"] = rst_probability;
  j["idle_timeout_s"] = idle_timeout_s;
  j["active_timeout_s"] = active_timeout_s;
  j["tcp_finrst_expiry"] = tcp_finrst_expiry;
  return j.dump(2);
}

std::uint64_t Workload::ip_bytes() const {
  return std::accumulate(truth.begin(), truth.end(), std::uint64_t{0},
                         [](std::uint64_t s, const TruthPacket& p) { return s + p.ip_length; });
}

std::uint64_t Workload::frame_bytes() const {
  return std::accumulate(frames.begin(), frames.end(), std::uint64_t{0},
                         [](std::uint64_t s, const RawFrame& f) { return s + f.data.size(); });
}

Workload generate(const SyntheticWorkloadSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  struct Item {
    RawFrame frame;
    bool ip = false;
    TruthPacket truth;
  };
  std::vector<Item> items;

  const double weight_sum = spec.mix.tcp + spec.mix.udp + spec.mix.icmp;
  std::set<FlowKey> used;
  std::uint32_t seq = 0;
  const std::int64_t idle_ms = std::int64_t{spec.idle_timeout_s} * 1000;

  for (std::size_t f = 0; f < spec.flow_count; ++f) {
    FlowPlan plan;
    const bool v6 = rng.chance(spec.v6_fraction);
    const double pick = rng.unit() * weight_sum;
    std::uint8_t proto = ip_proto::kIcmp;
    if (pick < spec.mix.tcp) {
      proto = ip_proto::kTcp;
    } else if (pick < spec.mix.tcp + spec.mix.udp) {
      proto = ip_proto::kUdp;
    }
    if (proto == ip_proto::kIcmp && v6) proto = ip_proto::kIcmp6;

    const auto& pool = v6 ? spec.v6_pool : spec.v4_pool;
    bool unique = false;
    for (int attempt = 0; attempt < 1000 && !unique; ++attempt) {
      FlowKey k;
      k.ip_version = v6 ? 6 : 4;
      k.protocol = proto;
      k.src_ip = random_host(rng, pool[rng.range(0, pool.size() - 1)]);
      k.dst_ip = random_host(rng, pool[rng.range(0, pool.size() - 1)]);
      if (proto == ip_proto::kTcp || proto == ip_proto::kUdp) {
        k.src_port = static_cast<std::uint16_t>(rng.range(1024, 65535));
        k.dst_port = pick_server_port(rng);
      }
      unique = used.insert(k).second;
      if (unique) plan.key = k;
    }
    if (!unique) throw InvalidSpec("address pools too small for " + std::to_string(spec.flow_count) + " unique flows");

    if (rng.chance(spec.vlan_fraction)) plan.vlan = static_cast<std::uint16_t>(rng.range(1, 4094));
    plan.v6_extension = v6 && rng.chance(spec.v6_extension_fraction);

    const auto count = static_cast<std::uint32_t>(rng.range(spec.packets_min, spec.packets_max));
    std::optional<std::uint32_t> rst_at;
    if (proto == ip_proto::kTcp && count > 2 && rng.chance(spec.rst_probability)) {
      rst_at = static_cast<std::uint32_t>(rng.range(1, count - 2));
    }

    std::int64_t t = spec.start_us + static_cast<std::int64_t>(rng.range(0, static_cast<std::uint64_t>(spec.span_ms) * 1000));
    for (std::uint32_t i = 0; i < count; ++i) {
      if (i > 0) {
        std::int64_t gap_ms;
        if (rng.chance(spec.straddle_probability)) {
          gap_ms = idle_ms + static_cast<std::int64_t>(rng.range(0, 2 * kStraddleMs)) - kStraddleMs;
        } else {
          gap_ms = static_cast<std::int64_t>(rng.range(static_cast<std::uint64_t>(spec.gap_min_ms),
                                                       static_cast<std::uint64_t>(spec.gap_max_ms)));
        }
        t += gap_ms * 1000 + static_cast<std::int64_t>(rng.range(0, 999));
      }
      std::uint8_t flags = 0;
      if (proto == ip_proto::kTcp) {
        flags = i == 0 ? tcp_flag::kSyn : tcp_flag::kAck;
        if (i > 0 && rng.chance(0.3)) flags |= tcp_flag::kPsh;
        if (rst_at && i == *rst_at) flags = tcp_flag::kRst | tcp_flag::kAck;
        if (i + 1 == count && count > 1) flags = tcp_flag::kFin | tcp_flag::kAck;
      }
      const auto payload = static_cast<std::uint32_t>(rng.range(spec.payload_min, spec.payload_max));
      Item item;
      item.ip = true;
      item.frame.timestamp_us = t;
      const auto ip_len = build_frame(plan, flags, payload, seq++, item.frame.data);
      item.truth = TruthPacket{t, plan.key, ip_len, flags};
      items.push_back(std::move(item));
    }
  }

  for (std::size_t i = 0; i < spec.arp_frames; ++i) {
    Item item;
    item.frame.timestamp_us =
        spec.start_us + static_cast<std::int64_t>(rng.range(0, static_cast<std::uint64_t>(spec.span_ms) * 1000));
    item.frame.data = arp_request(rng);
    items.push_back(std::move(item));
  }

  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    return a.frame.timestamp_us < b.frame.timestamp_us;
  });

  Workload w;
  w.frames.reserve(items.size());
  for (auto& item : items) {
    if (item.ip) w.truth.push_back(item.truth);
    w.frames.push_back(std::move(item.frame));
  }
  return w;
}

void generate_files(const SyntheticWorkloadSpec& spec, const std::filesystem::path& pcap_path,
                    const std::filesystem::path& oracle_path) {
  const Workload w = generate(spec);
  PcapWriter writer(pcap_path);
  for (const auto& f : w.frames) writer.write(f);
  writer.close();

  const oracle::Params params{std::int64_t{spec.idle_timeout_s} * 1000,
                              std::int64_t{spec.active_timeout_s} * 1000, spec.tcp_finrst_expiry};
  std::ofstream out(oracle_path, std::ios::trunc);
  if (!out) throw InvalidSpec("cannot write oracle file " + oracle_path.string());
  oracle::write(out, oracle::expected_flows(w.truth, params), params);
}

}  // namespace flowkit::synth
