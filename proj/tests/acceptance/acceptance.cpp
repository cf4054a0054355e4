// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.
#include <sys/wait.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "flowkit/bytes.hpp"
#include "flowkit/capture.hpp"
#include "flowkit/collector.hpp"
#include "flowkit/exporter.hpp"
#include "flowkit/ipfix.hpp"
#include "flowkit/log.hpp"
#include "flowkit/meter.hpp"
#include "flowkit/query.hpp"
#include "flowkit/store.hpp"
#include "flowkit/synth.hpp"
#include "flowkit/topology.hpp"
#include "flowkit/udp.hpp"
#include "../unit/query_gen.hpp"
#include "../unit/support.hpp"

using namespace flowkit;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 3) {
  std::ostringstream o;
  o.precision(digits);
  o << std::fixed << v;
  return o.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// Loopback port nobody listens on right now.
std::uint16_t free_port() {
  auto s = UdpSocket::bind(Endpoint{IpAddress::v4(0x7f000001), 0});
  return s.local_endpoint().port;
}

Endpoint loopback(std::uint16_t port) { return Endpoint{IpAddress::v4(0x7f000001), port}; }

bool wait_bound(const Endpoint& ep, int timeout_ms) {
  const auto t0 = Clock::now();
  while (!topology::endpoint_bound(ep)) {
    if (seconds_since(t0) * 1000 > timeout_ms) return false;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  return true;
}

// stdout of a shell command; exit status in `status`.
std::string capture(const std::string& cmd, int& status) {
  std::string out;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) {
    status = -1;
    return out;
  }
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) out.append(buf, n);
  const int raw = ::pclose(p);
  status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return out;
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

std::vector<FlowRecord> canonical(std::vector<FlowRecord> flows) {
  for (auto& f : flows) f.end_reason = EndReason::Eof;  // not carried on the wire or in the oracle
  oracle::sort_canonical(flows);
  return flows;
}

bool same_multiset(std::vector<FlowRecord> a, std::vector<FlowRecord> b) {
  a = canonical(std::move(a));
  b = canonical(std::move(b));
  return std::equal(a.begin(), a.end(), b.begin(), b.end(), same_flow_data);
}

synth::SyntheticWorkloadSpec mixed_spec(std::uint64_t seed) {
  synth::SyntheticWorkloadSpec s;
  s.seed = seed;
  s.flow_count = 300;
  s.packets_min = 1;
  s.packets_max = 60;
  s.mix = {0.5, 0.35, 0.15};
  s.v6_fraction = 0.3;
  s.vlan_fraction = 0.1;
  s.v6_extension_fraction = 0.2;
  s.rst_probability = 0.1;
  s.arp_frames = 10;
  s.straddle_probability = 0.05;
  s.gap_max_ms = 2000;
  static constexpr std::uint32_t idles[] = {5, 15, 30};
  static constexpr std::uint32_t actives[] = {40, 60, 300};
  s.idle_timeout_s = idles[seed % 3];
  s.active_timeout_s = actives[(seed / 3) % 3];
  return s;
}

// ---- 1 ----------------------------------------------------------------------

Outcome unsampled_conservation(const fs::path& work) {
  const auto t0 = Clock::now();
  synth::SyntheticWorkloadSpec spec;
  spec.seed = 101;
  spec.flow_count = 5000;
  spec.packets_min = spec.packets_max = 20;  // exactly 10^5 IP packets
  spec.v6_fraction = 0.25;
  spec.vlan_fraction = 0.2;
  spec.arp_frames = 100;
  spec.v6_extension_fraction = 0.1;
  spec.rst_probability = 0.05;
  spec.straddle_probability = 0.1;
  const auto spec_file = work / "c1-spec.json";
  write_file(spec_file, spec.to_json());
  const auto pcap = work / "c1.pcap";
  const auto store_dir = work / "c1-store";
  fs::create_directories(store_dir);

  int st = 0;
  capture(std::string(FLOWKIT_CLI_PATH) + " --log-level warn gen --spec " + quote(spec_file) + " --pcap " +
              quote(pcap) + " --oracle " + quote(work / "c1.oracle"),
          st);
  if (st != 0) return {false, "gen failed"};

  std::uint64_t ip_packets = 0, ip_bytes = 0;
  for (const auto& p : synth::generate(spec).truth) {
    ++ip_packets;
    ip_bytes += p.ip_length;
  }

  const auto ep = loopback(free_port());
  auto collector = topology::spawn("collector",
                                   {FLOWKIT_CLI_PATH, "--log-level", "warn", "collect", "--listen",
                                    ep.to_string(), "--store", store_dir.string()},
                                   work / "c1-collector.log");
  if (!wait_bound(ep, 5000)) return {false, "collector did not bind"};
  auto meter = topology::spawn("meter",
                               {FLOWKIT_CLI_PATH, "--log-level", "warn", "meter", "--input", pcap.string(),
                                "--export", ep.to_string()},
                               work / "c1-meter.log");
  const auto meter_status = meter.wait(60'000);
  std::this_thread::sleep_for(std::chrono::milliseconds(300));
  collector.terminate();
  const auto collector_status = collector.wait(10'000);
  const double elapsed = seconds_since(t0);
  if (meter_status != 0 || collector_status != 0) return {false, "meter or collector exited nonzero"};

  std::uint64_t packets = 0, bytes = 0, flows = 0;
  for (const auto& f : store::scan_all(store_dir)) {
    packets += f.packets;
    bytes += f.bytes;
    ++flows;
  }
  const bool ok = ip_packets == 100'000 && packets == ip_packets && bytes == ip_bytes && elapsed < 10.0;
  return {ok, "ip_packets=" + std::to_string(ip_packets) + " collected_packets=" + std::to_string(packets) +
                  " ip_bytes=" + std::to_string(ip_bytes) + " collected_bytes=" + std::to_string(bytes) +
                  " flows=" + std::to_string(flows) + " elapsed_s=" + fmt(elapsed)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome oracle_equivalence(const fs::path& work) {
  std::size_t flows = 0, splits = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto spec = mixed_spec(seed);
    const auto pcap = work / ("c2-" + std::to_string(seed) + ".pcap");
    const auto oracle_file = work / ("c2-" + std::to_string(seed) + ".oracle");
    synth::generate_files(spec, pcap, oracle_file);

    MeterConfig cfg;
    cfg.idle_timeout_s = spec.idle_timeout_s;
    cfg.active_timeout_s = spec.active_timeout_s;
    cfg.tcp_finrst_expiry = spec.tcp_finrst_expiry;
    Meter meter(cfg);
    std::vector<FlowRecord> got;
    PcapReader reader(pcap);
    while (auto frame = reader.next()) meter.on_frame(*frame, got);
    meter.finish(got);

    const auto expected = oracle::read_file(oracle_file);
    if (!same_multiset(got, expected)) {
      return {false, "seed " + std::to_string(seed) + ": meter " + std::to_string(got.size()) + " flows, oracle " +
                         std::to_string(expected.size())};
    }
    std::map<FlowKey, int> per_key;
    for (const auto& f : expected) ++per_key[f.key];
    for (const auto& [k, n] : per_key) splits += static_cast<std::size_t>(n - 1);
    flows += expected.size();
  }
  return {true, "seeds=1..20 flows=" + std::to_string(flows) + " split_continuations=" + std::to_string(splits)};
}

// ---- 3 ----------------------------------------------------------------------

Outcome wire_round_trip(const fs::path& work) {
  std::mt19937_64 rng(303);
  std::vector<FlowRecord> sent;
  for (int i = 0; i < 10'000; ++i) sent.push_back(fk_test::random_flow(rng));

  ipfix::TemplateCache cache;
  ipfix::HeaderSeed seed{0, 1'735'732'800, 9};
  ipfix::decode_message(ipfix::encode_template_message(ipfix::canonical_templates(), seed), cache,
                        IpAddress::v4(0x7f000001), 4739);
  std::size_t mismatches = 0, decoded = 0, messages = 0;
  for (std::size_t i = 0; i < sent.size();) {
    // Runs of one address family, capped at one message.
    const auto v = sent[i].key.ip_version;
    const auto& tmpl = ipfix::canonical_template(v);
    std::size_t j = i;
    while (j < sent.size() && sent[j].key.ip_version == v && j - i < ipfix::records_per_message(tmpl)) ++j;
    const std::span<const FlowRecord> batch(sent.data() + i, j - i);
    const auto msg = ipfix::encode_message(batch, tmpl, seed);
    seed.sequence += static_cast<std::uint32_t>(batch.size());
    const auto res = ipfix::decode_message(msg, cache, IpAddress::v4(0x7f000001), 4739);
    ++messages;
    if (res.flows.size() != batch.size()) return {false, "record count changed in message " + std::to_string(messages)};
    for (std::size_t k = 0; k < batch.size(); ++k) mismatches += same_flow_data(batch[k], res.flows[k]) ? 0 : 1;
    decoded += res.flows.size();
    i = j;
  }

  int st = 0;
  const auto dissect = capture(std::string(FLOWKIT_PYTHON) + " " + FLOWKIT_DISSECT_DIR + "/check_ipfix.py " +
                                   FLOWKIT_DUMP_PATH + " 10000 7 2>&1",
                               st);
  std::string last = dissect;
  while (!last.empty() && last.back() == '\n') last.pop_back();
  last = last.substr(last.rfind('\n') == std::string::npos ? 0 : last.rfind('\n') + 1);
  (void)work;
  return {mismatches == 0 && decoded == sent.size() && st == 0,
          "records=" + std::to_string(decoded) + " messages=" + std::to_string(messages) +
              " mismatches=" + std::to_string(mismatches) + " scapy: " + last};
}

// ---- 4 ----------------------------------------------------------------------

struct Receiver {
  UdpSocket socket = UdpSocket::bind(loopback(0));
  std::vector<std::vector<std::uint8_t>> got;
  std::thread thread;

  void start(std::size_t expected) {
    socket.set_receive_buffer(16 << 20);
    thread = std::thread([this, expected] {
      std::vector<std::uint8_t> buf(65536);
      Endpoint from;
      while (got.size() < expected) {
        const auto n = socket.receive(buf, from, 2000);
        if (!n) break;
        got.emplace_back(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(*n));
      }
    });
  }
};

std::uint64_t fnv1a(std::span<const std::uint8_t> data) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto b : data) h = (h ^ b) * 1099511628211ULL;
  return h;
}

struct TeeRun {
  std::vector<std::vector<std::vector<std::uint8_t>>> received;
  std::vector<collect::TeeStats> stats;
};

TeeRun run_tee(const std::vector<std::vector<std::uint8_t>>& datagrams, std::vector<Receiver*> live,
               const std::vector<Endpoint>& extra) {
  collect::CollectorConfig cfg;
  cfg.listen = loopback(0);
  for (auto* r : live) cfg.tee_destinations.push_back(r->socket.local_endpoint());
  for (const auto& e : extra) cfg.tee_destinations.insert(cfg.tee_destinations.begin() + 1, e);
  collect::Collector collector(cfg);
  for (auto* r : live) r->start(datagrams.size());
  std::atomic<bool> stop{false};
  std::thread loop([&] { collector.run(stop); });

  auto sender = UdpSocket::connect(collector.local_endpoint());
  for (std::size_t i = 0; i < datagrams.size(); ++i) {
    sender.send(datagrams[i]);
    if (i % 64 == 63) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  TeeRun run;
  for (auto* r : live) {
    r->thread.join();
    run.received.push_back(r->got);
  }
  stop = true;
  loop.join();
  run.stats = collector.tee_stats();
  return run;
}

Outcome tee_transparency(const fs::path&) {
  std::mt19937_64 rng(404);
  std::vector<std::vector<std::uint8_t>> datagrams;
  ExporterState exporter;
  for (int i = 0; i < 20'000 && datagrams.size() < 1500; ++i) {
    for (auto& d : exporter.submit(fk_test::random_flow(rng), 1'735'732'800'000)) datagrams.push_back(std::move(d));
  }
  for (int i = 0; i < 500; ++i) {  // payload-agnostic: arbitrary bytes too
    std::vector<std::uint8_t> junk(1 + rng() % 1400);
    for (auto& b : junk) b = static_cast<std::uint8_t>(rng());
    datagrams.push_back(std::move(junk));
  }
  std::multiset<std::uint64_t> source;
  for (const auto& d : datagrams) source.insert(fnv1a(d));

  auto digests_match = [&](const std::vector<std::vector<std::uint8_t>>& got, std::size_t& matched) {
    std::multiset<std::uint64_t> seen;
    for (const auto& d : got) seen.insert(fnv1a(d));
    matched = got.size();
    // Loopback keeps order, so compare in sequence as well.
    return seen == source && got == datagrams;
  };

  Receiver a, b, c;
  const auto three = run_tee(datagrams, {&a, &b, &c}, {});
  std::string detail = "datagrams=" + std::to_string(datagrams.size());
  bool ok = true;
  for (std::size_t i = 0; i < three.received.size(); ++i) {
    std::size_t matched = 0;
    const bool same = digests_match(three.received[i], matched);
    ok = ok && same;
    detail += " dest" + std::to_string(i + 1) + "=" + std::to_string(matched) + (same ? "/match" : "/MISMATCH");
  }

  // One healthy destination on each side of an unreachable one.
  Receiver d, e;
  const auto dead = loopback(free_port());
  const Endpoint unroutable{IpAddress::v4(0xffffffffu), 9};
  const auto isolated = run_tee(datagrams, {&d, &e}, {unroutable, dead});
  std::size_t m1 = 0, m2 = 0;
  const bool healthy = digests_match(isolated.received[0], m1) && digests_match(isolated.received[1], m2);
  std::uint64_t failed = 0;
  for (const auto& s : isolated.stats) failed += s.failed;
  ok = ok && healthy && failed > 0;
  detail += " isolation: healthy=" + std::to_string(m1) + "," + std::to_string(m2) +
            " failed_sends_counted=" + std::to_string(failed);
  return {ok, detail};
}

// ---- 5 ----------------------------------------------------------------------

Outcome late_join(const fs::path& work) {
  constexpr std::int64_t kRefreshMs = 2000;
  const auto ep = loopback(free_port());
  const auto store_dir = work / "c5-store";

  std::atomic<bool> exporting{true};
  std::vector<std::pair<std::int64_t, std::uint16_t>> sent;  // (submit time, id)
  const auto t0 = Clock::now();
  auto now_ms = [&] {
    return 1'735'732'800'000 + std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0).count();
  };
  std::thread exporter_thread([&] {
    ExporterConfig ec;
    ec.template_refresh_ms = kRefreshMs;
    ec.linger_ms = 50;
    ExporterState exporter(ec);
    auto sock = UdpSocket::unconnected(ep);
    std::uint16_t id = 0;
    while (exporting) {
      const auto now = now_ms();
      FlowRecord r = fk_test::flow("198.51.100.1", "203.0.113.9", 17, id, 4739, 1, 100, now, now);
      sent.emplace_back(now, id++);
      for (const auto& d : exporter.submit(r, now)) sock.send_to(d, ep);
      for (const auto& d : exporter.tick(now)) sock.send_to(d, ep);
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    for (const auto& d : exporter.flush(now_ms())) sock.send_to(d, ep);
  });

  std::this_thread::sleep_for(std::chrono::milliseconds(2500));  // mid-way between two refreshes
  collect::CollectorConfig cfg;
  cfg.listen = ep;
  cfg.store_dir = store_dir;
  collect::Collector collector(cfg);
  const auto joined = now_ms();
  std::atomic<bool> stop{false};
  std::thread loop([&] { collector.run(stop); });

  // Halfway to the next refresh nothing can be decoded yet.
  std::this_thread::sleep_for(std::chrono::milliseconds(900));
  std::uint64_t early_drops = 0, early_decoded = 0;
  for (const auto& [id, s] : collector.stats()) {
    early_drops += s.unknown_template_drops;
    early_decoded += s.flows_decoded;
  }
  std::this_thread::sleep_for(std::chrono::milliseconds(4000));
  exporting = false;
  exporter_thread.join();
  std::this_thread::sleep_for(std::chrono::milliseconds(200));
  stop = true;
  loop.join();

  std::set<std::uint16_t> decoded;
  for (const auto& f : store::scan_all(store_dir)) decoded.insert(f.key.src_port);
  std::size_t due = 0, missing = 0;
  std::int64_t first_decoded_ms = -1;
  for (const auto& [t, id] : sent) {
    if (decoded.contains(id) && first_decoded_ms < 0) first_decoded_ms = t;
    if (t < joined + kRefreshMs) continue;
    ++due;
    if (!decoded.contains(id)) ++missing;
  }
  std::uint64_t drops = 0;
  for (const auto& [id, s] : collector.stats()) drops += s.unknown_template_drops;
  const double recovery_s = first_decoded_ms < 0 ? -1 : static_cast<double>(first_decoded_ms - joined) / 1000.0;
  const bool ok = early_drops > 0 && early_decoded == 0 && due > 0 && missing == 0 && recovery_s >= 0 &&
                  recovery_s <= kRefreshMs / 1000.0;
  return {ok, "refresh_s=2 drops_before_recovery=" + std::to_string(early_drops) +
                  " total_drops=" + std::to_string(drops) + " recovered_after_s=" + fmt(recovery_s) +
                  " records_due=" + std::to_string(due) + " missing=" + std::to_string(missing)};
}

// ---- 6 ----------------------------------------------------------------------

Outcome storage_round_trip(const fs::path& work) {
  const auto dir = work / "c6-store";
  std::mt19937_64 rng(606);
  std::vector<FlowRecord> written;
  {
    store::StoreWriter w(dir, 300);
    std::int64_t now = 1'735'732'800'000;
    for (int i = 0; i < 100'000; ++i) {
      written.push_back(fk_test::random_flow(rng));
      w.append(written.back(), now);
      now += 12;  // 20 minutes in total: four windows
    }
    w.close();
  }
  const auto read = store::scan_all(dir);
  std::size_t mismatches = read.size() == written.size() ? 0 : 1;
  for (std::size_t i = 0; i < std::min(read.size(), written.size()); ++i) {
    mismatches += same_flow_data(read[i], written[i]) ? 0 : 1;
  }
  std::size_t files = 0, bad_sizes = 0;
  std::uint64_t counted = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!store::parse_file_name(entry.path().filename().string())) continue;
    ++files;
    std::ifstream in(entry.path(), std::ios::binary);
    std::array<std::uint8_t, store::kHeaderSize> h{};
    in.read(reinterpret_cast<char*>(h.data()), h.size());
    const auto n = bytes::load_le64(h.data() + 8);
    counted += n;
    if (n == store::kOpenSentinel || fs::file_size(entry.path()) != store::kHeaderSize + store::kRecordSize * n) {
      ++bad_sizes;
    }
  }
  return {mismatches == 0 && bad_sizes == 0 && counted == written.size(),
          "records=" + std::to_string(read.size()) + " mismatches=" + std::to_string(mismatches) +
              " files=" + std::to_string(files) + " size_mismatches=" + std::to_string(bad_sizes)};
}

// ---- 7 ----------------------------------------------------------------------

Outcome query_soundness(const fs::path& work) {
  const auto dir = work / "c7-store";
  const auto flows = fk_test::pooled_flows(10'000, 707);
  {
    store::StoreWriter w(dir, 300);
    for (const auto& f : flows) w.append(f, f.first_seen_ms);
    w.close();
  }
  const auto stored = store::scan_all(dir);
  if (stored.size() != flows.size()) return {false, "store holds " + std::to_string(stored.size()) + " flows"};

  std::mt19937_64 rng(7070);
  static const std::vector<std::vector<query::KeyField>> keys = {
      {query::KeyField::SrcIp},
      {query::KeyField::DstIp, query::KeyField::DstPort},
      {query::KeyField::Proto},
      {query::KeyField::SrcIp, query::KeyField::DstIp, query::KeyField::SrcPort, query::KeyField::DstPort,
       query::KeyField::Proto}};
  std::size_t filter_mismatches = 0, conservation_failures = 0, matched_total = 0;
  for (int i = 0; i < 100; ++i) {
    const auto g = fk_test::random_filter(rng, 3);
    std::vector<FlowRecord> expected;
    for (const auto& f : stored) {
      if (g.oracle(f)) expected.push_back(f);
    }
    matched_total += expected.size();

    query::QueryOptions o;
    o.store_dir = dir;
    o.filter = g.text;
    o.parallel = i % 2 == 0;
    o.sort_by = query::SortMetric::Bytes;
    auto listing = query::run_query(o);
    auto want = expected;
    query::sort_flows(want, query::SortMetric::Bytes);
    if (listing != query::format_flows(want, false)) ++filter_mismatches;

    const auto expr = query::parse_filter(g.text);
    const auto kept = o.parallel ? query::filter_parallel(stored, expr) : query::filter_serial(stored, expr);
    if (kept.size() != expected.size() || !std::equal(kept.begin(), kept.end(), expected.begin(), same_flow_data)) {
      ++filter_mismatches;
    }

    query::AggregationSpec spec;
    spec.key_fields = keys[static_cast<std::size_t>(i) % keys.size()];
    spec.sort_by = static_cast<query::SortMetric>(i % 3);
    const auto rows = o.parallel ? query::aggregate_parallel(kept, spec) : query::aggregate_serial(kept, spec);
    std::uint64_t fl = 0, pk = 0, by = 0, want_pk = 0, want_by = 0;
    for (const auto& r : rows) fl += r.flows, pk += r.packets, by += r.bytes;
    for (const auto& f : expected) want_pk += f.packets, want_by += f.bytes;
    if (fl != expected.size() || pk != want_pk || by != want_by) ++conservation_failures;
  }
  return {filter_mismatches == 0 && conservation_failures == 0,
          "filters=100 flows=" + std::to_string(stored.size()) + " matched_total=" + std::to_string(matched_total) +
              " filter_mismatches=" + std::to_string(filter_mismatches) +
              " conservation_failures=" + std::to_string(conservation_failures)};
}

// ---- 8 ----------------------------------------------------------------------

Outcome traffic_reduction(const fs::path&) {
  synth::SyntheticWorkloadSpec spec;
  spec.seed = 808;
  spec.flow_count = 1000;
  spec.packets_min = 100;
  spec.packets_max = 200;
  spec.payload_min = 700;
  spec.payload_max = 1400;
  spec.v6_fraction = 0.2;
  const auto w = synth::generate(spec);

  MeterConfig cfg;
  cfg.idle_timeout_s = spec.idle_timeout_s;
  cfg.active_timeout_s = spec.active_timeout_s;
  Meter meter(cfg);
  ExporterState exporter;
  std::uint64_t exported = 0;
  std::vector<FlowRecord> out;
  std::int64_t last_ms = 0;
  auto ship = [&](std::int64_t now) {
    for (const auto& f : out) {
      for (const auto& d : exporter.submit(f, now)) exported += d.size();
    }
    out.clear();
    for (const auto& d : exporter.tick(now)) exported += d.size();
  };
  for (const auto& frame : w.frames) {
    meter.on_frame(frame, out);
    last_ms = frame.timestamp_us / 1000;
    ship(last_ms);
  }
  meter.finish(out);
  ship(last_ms);
  for (const auto& d : exporter.flush(last_ms)) exported += d.size();

  const double ip_bytes = static_cast<double>(w.ip_bytes());
  const double mean_size = ip_bytes / static_cast<double>(w.truth.size());
  const double mean_flow = static_cast<double>(w.truth.size()) / static_cast<double>(spec.flow_count);
  const double ratio = static_cast<double>(exported) / ip_bytes;
  return {mean_size >= 700 && mean_flow >= 100 && ratio < 0.01,
          "mean_packet_bytes=" + fmt(mean_size, 1) + " mean_flow_packets=" + fmt(mean_flow, 1) +
              " ipfix_bytes=" + std::to_string(exported) + " ip_bytes=" + std::to_string(w.ip_bytes()) +
              " ratio=" + fmt(ratio * 100, 4) + "%"};
}

// ---- 9 ----------------------------------------------------------------------

Outcome end_to_end_topology(const fs::path& work) {
  auto spec = mixed_spec(909);
  spec.flow_count = 2000;
  spec.gap_max_ms = 100;
  spec.straddle_probability = 0.05;
  spec.idle_timeout_s = 15;
  spec.active_timeout_s = 60;
  const auto pcap = work / "c9.pcap";
  const auto oracle_file = work / "c9.oracle";
  synth::generate_files(spec, pcap, oracle_file);

  const auto s1 = work / "c9-store-1";
  const auto s2 = work / "c9-store-2";
  const auto logs = work / "c9-logs";
  std::ostringstream cfg;
  cfg << "{\"binary\": \"" << FLOWKIT_CLI_PATH << "\", \"meters\": [{\"pcap\": \"" << pcap.string()
      << "\", \"idle_s\": 15, \"active_s\": 60, \"odid\": 3}], \"tee\": \"" << loopback(free_port()).to_string()
      << "\", \"collectors\": [{\"listen\": \"" << loopback(free_port()).to_string() << "\", \"store\": \""
      << s1.string() << "\"}, {\"listen\": \"" << loopback(free_port()).to_string() << "\", \"store\": \""
      << s2.string() << "\"}], \"log_dir\": \"" << logs.string() << "\"}";
  const auto cfg_file = work / "c9-topology.json";
  write_file(cfg_file, cfg.str());

  int st = 0;
  const auto topo_log = capture(std::string(FLOWKIT_CLI_PATH) + " --log-level warn topology --config " + quote(cfg_file) + " 2>&1", st);
  if (st != 0) return {false, "topology exited " + std::to_string(st) + ": " + topo_log};

  const auto expected = oracle::read_file(oracle_file);
  const auto got1 = store::scan_all(s1);
  const auto got2 = store::scan_all(s2);
  const bool store1 = same_multiset(got1, expected);
  const bool store2 = same_multiset(got2, expected);

  const std::string q = " --log-level off query --aggregate srcip --sort bytes --top 5 --store ";
  int q1 = 0, q2 = 0;
  const auto out1 = capture(std::string(FLOWKIT_CLI_PATH) + q + quote(s1), q1);
  const auto out2 = capture(std::string(FLOWKIT_CLI_PATH) + q + quote(s2), q2);
  const bool same_query = q1 == 0 && q2 == 0 && !out1.empty() && out1 == out2;
  return {store1 && store2 && same_query,
          "oracle_flows=" + std::to_string(expected.size()) + " store1=" + std::to_string(got1.size()) +
              (store1 ? "/match" : "/MISMATCH") + " store2=" + std::to_string(got2.size()) +
              (store2 ? "/match" : "/MISMATCH") + " top5_identical=" + (same_query ? "yes" : "no") +
              " top5_bytes=" + std::to_string(out1.size())};
}

// ---- 10 ---------------------------------------------------------------------

Outcome robustness(const fs::path&) {
  std::mt19937_64 rng(1010);
  std::vector<std::vector<std::uint8_t>> seeds;
  ExporterState exporter;
  for (int i = 0; i < 400; ++i) {
    for (auto& d : exporter.submit(fk_test::random_flow(rng), 1'735'732'800'000)) seeds.push_back(std::move(d));
  }
  for (auto& d : exporter.flush(1'735'732'800'000)) seeds.push_back(std::move(d));

  struct Counting final : collect::FlowSink {
    std::uint64_t flows = 0;
    void deliver(std::span<const FlowRecord> f) override { flows += f.size(); }
    std::string name() const override { return "count"; }
  } sink;
  collect::FlowSink* sinks[] = {&sink};

  ipfix::TemplateCache cache;
  collect::ExporterStats total;
  std::uint64_t escaped = 0;
  constexpr std::uint64_t kDatagrams = 1'000'000;
  for (std::uint64_t i = 0; i < kDatagrams; ++i) {
    auto d = seeds[rng() % seeds.size()];
    switch (rng() % 4) {
      case 0:
        break;
      case 1:
        for (int k = 0; k < 4; ++k) d[rng() % d.size()] = static_cast<std::uint8_t>(rng());
        break;
      case 2:
        d.resize(rng() % d.size());
        break;
      default:
        d.resize(rng() % 200);
        for (auto& b : d) b = static_cast<std::uint8_t>(rng());
        break;
    }
    const Endpoint source{IpAddress::v4(0xc0000201u + static_cast<std::uint32_t>(rng() % 8)), 4739};
    try {
      total += collect::handle_datagram(d, source, cache, sinks, 1'735'732'800'000).delta;
    } catch (...) {
      ++escaped;
    }
  }

  std::string fuzz_line = "not built";
  bool fuzz_ok = true;
#ifdef FLOWKIT_FUZZ_PATH
  int st = 0;
  fuzz_line = capture(std::string(FLOWKIT_FUZZ_PATH) + " 1000000 1010 2>&1", st);
  while (!fuzz_line.empty() && fuzz_line.back() == '\n') fuzz_line.pop_back();
  fuzz_ok = st == 0;
#endif
  const bool ok = escaped == 0 && total.datagrams == kDatagrams && total.malformed > 0 &&
                  total.flows_decoded == sink.flows && fuzz_ok;
  return {ok, "datagrams=" + std::to_string(total.datagrams) + " malformed=" + std::to_string(total.malformed) +
                  " unknown_template_drops=" + std::to_string(total.unknown_template_drops) +
                  " flows=" + std::to_string(total.flows_decoded) + " escaped_exceptions=" + std::to_string(escaped) +
                  " sanitized_fuzz: " + fuzz_line};
}

}  // namespace

int main(int argc, char** argv) {
  log::set_level(log::Level::Error);
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));

  fk_test::TempDir work;
  const std::vector<std::pair<const char*, std::function<Outcome(const fs::path&)>>> criteria = {
      {"unsampled conservation", unsampled_conservation},
      {"oracle equivalence", oracle_equivalence},
      {"wire round trip", wire_round_trip},
      {"tee transparency", tee_transparency},
      {"late-join recovery", late_join},
      {"storage round trip", storage_round_trip},
      {"query soundness", query_soundness},
      {"traffic reduction", traffic_reduction},
      {"end-to-end topology", end_to_end_topology},
      {"robustness", robustness},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!only.empty() && !only.contains(n)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second(work.path());
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << "criterion " << n << " " << (o.pass ? "PASS" : "FAIL") << ": " << criteria[i].first << " ("
              << o.detail << ") [" << fmt(seconds_since(t0), 2) << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
