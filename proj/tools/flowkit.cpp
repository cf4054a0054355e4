#include <signal.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "flowkit/capture.hpp"
#include "flowkit/clock.hpp"
#include "flowkit/collector.hpp"
#include "flowkit/exporter.hpp"
#include "flowkit/log.hpp"
#include "flowkit/meter.hpp"
#include "flowkit/pipeline.hpp"
#include "flowkit/query.hpp"
#include "flowkit/store.hpp"
#include "flowkit/synth.hpp"
#include "flowkit/topology.hpp"
#include "flowkit/udp.hpp"
#include "flowkit/version.hpp"

using namespace flowkit;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitCountedErrors = 3;

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop.store(true); }

void install_signal_handlers() {
  struct sigaction sa {};
  sa.sa_handler = on_signal;
  sigemptyset(&sa.sa_mask);
  sigaction(SIGINT, &sa, nullptr);
  sigaction(SIGTERM, &sa, nullptr);
  signal(SIGPIPE, SIG_IGN);
}

std::string version_text() {
  return std::string("flowkit ") + kVersion + " (store format " +
         std::to_string(store::kFormatVersion) + ", IPFIX version " +
         std::to_string(ipfix::kVersion) + ")";
}

int finish_strict(bool strict, std::uint64_t errors) {
  return strict && errors > 0 ? kExitCountedErrors : 0;
}

// ---- meter ------------------------------------------------------------------

struct MeterArgs {
  std::string input;
  std::string interface;
  MeterConfig cfg;
  std::string export_to;
  std::uint32_t odid = 0;
  std::int64_t template_refresh_s = 600;
};

class FlowOutput {
 public:
  FlowOutput(const MeterArgs& a) {
    ExporterConfig ec;
    ec.observation_domain_id = a.odid;
    if (a.template_refresh_s <= 0) throw std::invalid_argument("--template-refresh must be positive");
    ec.template_refresh_ms = a.template_refresh_s * 1000;
    exporter_.emplace(ec);
    if (!a.export_to.empty()) {
      socket_ = UdpSocket::connect(Endpoint::parse(a.export_to, ipfix::kDefaultPort));
    }
  }

  void flows(const std::vector<FlowRecord>& flows, std::int64_t now_ms) {
    for (const auto& f : flows) {
      if (!socket_.valid()) {
        std::cout << pipeline::to_jsonl({f, std::nullopt, std::nullopt});
        continue;
      }
      send(exporter_->submit(f, now_ms));
    }
  }

  void tick(std::int64_t now_ms) {
    if (socket_.valid()) send(exporter_->tick(now_ms));
  }

  void finish(std::int64_t now_ms) {
    if (socket_.valid()) send(exporter_->flush(now_ms));
    std::cout.flush();
  }

  std::uint64_t send_failures() const { return failures_; }
  std::uint64_t datagrams() const { return datagrams_; }
  std::uint64_t records() const { return exporter_->records_exported(); }

 private:
  void send(const std::vector<Datagram>& out) {
    for (const auto& d : out) {
      int err = socket_.send(d);
      if (err == ECONNREFUSED) err = socket_.send(d);
      if (err != 0) {
        ++failures_;
        log::warn("meter", "export send failed", {{"error", std::strerror(err)}});
      }
      // Keeps replay bursts within the receiver's socket buffer.
      if (++datagrams_ % 32 == 0) std::this_thread::sleep_for(std::chrono::microseconds(500));
    }
  }

  std::optional<ExporterState> exporter_;
  UdpSocket socket_;
  std::uint64_t failures_ = 0;
  std::uint64_t datagrams_ = 0;
};

int run_meter(const MeterArgs& a, bool strict) {
  MeterConfig cfg = a.cfg;
  cfg.validate();
  FlowOutput output(a);
  std::vector<FlowRecord> out;
  std::uint64_t truncated = 0;
  std::uint64_t drops = 0;
  std::optional<Meter> meter;

  if (!a.input.empty()) {
    meter.emplace(cfg, true);
    PcapReader reader(a.input);
    std::int64_t now = 0;
    while (!g_stop.load()) {
      auto frame = reader.next();
      if (!frame) break;
      now = frame->timestamp_us / 1000;
      meter->on_frame(*frame, out);
      if (!out.empty()) {
        output.flows(out, now);
        out.clear();
      }
      output.tick(now);
    }
    meter->finish(out);
    output.flows(out, now);
    output.finish(now);
    truncated = reader.truncated_records();
  } else {
    meter.emplace(cfg, false);
    LiveSource source(a.interface);
    install_signal_handlers();
    log::info("meter", "capturing", {{"interface", a.interface}});
    std::int64_t next_clock = wall_clock_ms() + cfg.sweep_interval_ms;
    while (!g_stop.load()) {
      auto frame = source.next_for(200);
      if (frame) meter->on_frame(*frame, out);
      const auto now = wall_clock_ms();
      if (now >= next_clock) {
        meter->on_clock(now, out);
        next_clock = now + cfg.sweep_interval_ms;
      }
      if (!out.empty()) {
        output.flows(out, now);
        out.clear();
      }
      output.tick(now);
    }
    meter->finish(out);
    output.flows(out, wall_clock_ms());
    output.finish(wall_clock_ms());
    drops = source.drops();
  }

  const auto& s = meter->stats();
  log::info("meter", "done",
            {{"frames", std::to_string(s.frames)},
             {"ip_packets", std::to_string(s.ip_packets)},
             {"ip_bytes", std::to_string(s.ip_bytes)},
             {"non_ip", std::to_string(s.non_ip)},
             {"decode_errors", std::to_string(s.decode_errors)},
             {"truncated_records", std::to_string(truncated)},
             {"capture_drops", std::to_string(drops)},
             {"flows", std::to_string(s.flows_emitted)},
             {"datagrams", std::to_string(output.datagrams())},
             {"send_failures", std::to_string(output.send_failures())}});
  return finish_strict(strict, s.decode_errors + truncated + drops + output.send_failures());
}

// ---- collect ----------------------------------------------------------------

struct CollectArgs {
  std::string listen = "0.0.0.0:4739";
  std::vector<std::string> tees;
  std::string store;
  std::int64_t rotate_s = store::kDefaultRotationS;
  std::string jsonl;
  std::string pipeline;
  std::int64_t stats_interval_s = 0;
  std::size_t workers = 2;
};

int run_collect(const CollectArgs& a, bool strict) {
  collect::CollectorConfig cfg;
  cfg.listen = Endpoint::parse(a.listen, ipfix::kDefaultPort);
  for (const auto& t : a.tees) cfg.tee_destinations.push_back(Endpoint::parse(t, ipfix::kDefaultPort));
  if (!a.store.empty()) cfg.store_dir = a.store;
  cfg.rotation_s = a.rotate_s;
  if (!a.jsonl.empty()) cfg.jsonl = a.jsonl;
  if (!a.pipeline.empty()) cfg.pipeline_config = a.pipeline;
  cfg.stats_interval_s = a.stats_interval_s;
  cfg.workers = a.workers;
  install_signal_handlers();
  collect::Collector collector(cfg);
  collector.run(g_stop);
  collector.log_stats();
  return finish_strict(strict, collector.counted_errors());
}

// ---- query ------------------------------------------------------------------

struct QueryArgs {
  std::string store;
  std::optional<std::int64_t> from;
  std::optional<std::int64_t> to;
  std::string filter;
  std::string aggregate;
  std::string sort;
  std::optional<std::size_t> top;
  bool csv = false;
  bool serial = false;
  std::int64_t rotate_s = store::kDefaultRotationS;
};

int run_query(const QueryArgs& a) {
  query::QueryOptions o;
  o.store_dir = a.store;
  if (a.from) o.range.from_ms = *a.from;
  if (a.to) o.range.to_ms = *a.to;
  o.filter = a.filter;
  if (!a.aggregate.empty()) o.aggregate = query::parse_key_fields(a.aggregate);
  if (!a.sort.empty()) o.sort_by = query::parse_sort_metric(a.sort);
  o.top_n = a.top;
  o.csv = a.csv;
  o.parallel = !a.serial;
  o.rotation_s = a.rotate_s;
  std::cout << query::run_query(o);
  return 0;
}

// ---- pipe -------------------------------------------------------------------

struct PipeArgs {
  std::string config;
  std::string input = "-";
  std::string store;
};

int run_pipe(const PipeArgs& a, bool strict) {
  pipeline::Pipeline pipe(pipeline::PipelineConfig::load(a.config));
  std::uint64_t bad_lines = 0;
  if (!a.store.empty()) {
    auto flows = store::scan_all(a.store);
    std::stable_sort(flows.begin(), flows.end(), [](const FlowRecord& x, const FlowRecord& y) {
      return x.last_seen_ms < y.last_seen_ms;
    });
    for (const auto& f : flows) pipe.push(f);
  } else {
    std::ifstream file;
    std::istream* in = &std::cin;
    if (a.input != "-") {
      file.open(a.input);
      if (!file) throw std::invalid_argument("cannot open " + a.input);
      in = &file;
    }
    std::string line;
    std::size_t number = 0;
    while (std::getline(*in, line)) {
      ++number;
      if (line.empty()) continue;
      try {
        pipe.push(pipeline::from_jsonl(line));
      } catch (const std::invalid_argument& e) {
        ++bad_lines;
        log::warn("pipe", "skipping line", {{"line", std::to_string(number)}, {"error", e.what()}});
      }
    }
  }
  pipe.finish();
  log::info("pipe", "done", {{"flows", std::to_string(pipe.flows_in())},
                             {"late_flows", std::to_string(pipe.late_flows())},
                             {"bad_lines", std::to_string(bad_lines)}});
  return finish_strict(strict, bad_lines);
}

// ---- gen --------------------------------------------------------------------

struct GenArgs {
  std::string spec_file;
  std::string pcap;
  std::string oracle;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> flows;
  std::string packets;
  std::optional<double> v6_fraction;
  std::optional<double> straddle;
  std::optional<std::uint32_t> idle;
  std::optional<std::uint32_t> active;
  bool print_spec = false;
};

int run_gen(const GenArgs& a) {
  synth::SyntheticWorkloadSpec spec;
  if (!a.spec_file.empty()) spec = synth::SyntheticWorkloadSpec::load(a.spec_file);
  if (a.seed) spec.seed = *a.seed;
  if (a.flows) spec.flow_count = *a.flows;
  if (!a.packets.empty()) {
    const auto dots = a.packets.find("..");
    try {
      if (dots == std::string::npos) {
        spec.packets_min = spec.packets_max = static_cast<std::uint32_t>(std::stoul(a.packets));
      } else {
        spec.packets_min = static_cast<std::uint32_t>(std::stoul(a.packets.substr(0, dots)));
        spec.packets_max = static_cast<std::uint32_t>(std::stoul(a.packets.substr(dots + 2)));
      }
    } catch (const std::logic_error&) {
      throw synth::InvalidSpec("--packets expects N or A..B");
    }
  }
  if (a.v6_fraction) spec.v6_fraction = *a.v6_fraction;
  if (a.straddle) spec.straddle_probability = *a.straddle;
  if (a.idle) spec.idle_timeout_s = *a.idle;
  if (a.active) spec.active_timeout_s = *a.active;
  spec.validate();
  if (a.print_spec) std::cout << spec.to_json() << '\n';
  synth::generate_files(spec, a.pcap, a.oracle);
  log::info("gen", "wrote", {{"pcap", a.pcap}, {"oracle", a.oracle}, {"seed", std::to_string(spec.seed)}});
  return 0;
}

// ---- topology ---------------------------------------------------------------

int run_topology_cmd(const std::string& config_file) {
  auto cfg = topology::TopologyConfig::load(config_file);
  auto t = topology::run_topology(cfg);
  const bool ok = topology::finish_topology(t);
  log::info("topology", "finished", {{"ok", ok ? "true" : "false"}});
  return ok ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow metering, IPFIX export/collection, storage and analysis"};
  app.set_version_flag("--version", version_text());
  app.require_subcommand(1);
  bool strict = false;
  std::string log_level = "info";
  app.add_flag("--strict", strict, "Exit nonzero when any error was counted");
  app.add_option("--log-level", log_level, "debug|info|warn|error|off")
      ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));

  MeterArgs ma;
  auto* meter = app.add_subcommand("meter", "Meter packets into flows and export them over IPFIX");
  auto* in_opt = meter->add_option("--input", ma.input, "pcap file")->check(CLI::ExistingFile);
  auto* if_opt = meter->add_option("--interface", ma.interface, "Network interface for live capture");
  in_opt->excludes(if_opt);
  meter->add_option("--idle", ma.cfg.idle_timeout_s, "Idle timeout in seconds")->capture_default_str();
  meter->add_option("--active", ma.cfg.active_timeout_s, "Active timeout in seconds")->capture_default_str();
  meter->add_option("--max-flows", ma.cfg.max_cache_entries, "Flow cache capacity")->capture_default_str();
  meter->add_option("--sample", ma.cfg.sample_rate_n, "Count every n-th packet (1 = unsampled)")
      ->capture_default_str();
  meter->add_option("--export", ma.export_to, "IPFIX collector host:port (default: JSON lines on stdout)");
  meter->add_option("--odid", ma.odid, "Observation domain id")->capture_default_str();
  meter->add_option("--template-refresh", ma.template_refresh_s, "Seconds between template retransmissions")
      ->capture_default_str();

  CollectArgs ca;
  auto* coll = app.add_subcommand("collect", "Receive IPFIX, replicate it and deliver flows to sinks");
  coll->add_option("--listen", ca.listen, "Listen address")->capture_default_str();
  coll->add_option("--tee", ca.tees, "Replicate every datagram to host:port (repeatable)");
  coll->add_option("--store", ca.store, "Flow store directory");
  coll->add_option("--rotate", ca.rotate_s, "Store rotation interval in seconds")->capture_default_str();
  coll->add_option("--jsonl", ca.jsonl, "JSON lines output file, or - for stdout");
  coll->add_option("--pipeline", ca.pipeline, "Pipeline config file")->check(CLI::ExistingFile);
  coll->add_option("--stats-interval", ca.stats_interval_s, "Seconds between stats log lines (0 = off)")
      ->capture_default_str();
  coll->add_option("--workers", ca.workers, "Decoder threads")->capture_default_str();

  QueryArgs qa;
  auto* qry = app.add_subcommand("query", "Filter and aggregate stored flows");
  qry->add_option("--store", qa.store, "Flow store directory")->required()->check(CLI::ExistingDirectory);
  qry->add_option("--from", qa.from, "Window start, epoch ms");
  qry->add_option("--to", qa.to, "Window end, epoch ms (inclusive)");
  qry->add_option("--filter", qa.filter, "Filter expression");
  qry->add_option("--aggregate", qa.aggregate, "Group by srcip,dstip,srcport,dstport,proto");
  qry->add_option("--sort", qa.sort, "bytes|packets|flows")->check(CLI::IsMember({"bytes", "packets", "flows"}));
  qry->add_option("--top", qa.top, "Keep the first n rows");
  qry->add_flag("--csv", qa.csv, "CSV output");
  qry->add_flag("--serial", qa.serial, "Use the single-threaded kernels");
  qry->add_option("--rotate", qa.rotate_s, "Rotation interval the store was written with")->capture_default_str();

  PipeArgs pa;
  auto* pipe = app.add_subcommand("pipe", "Run a flow pipeline over JSON lines or a store");
  pipe->add_option("--config", pa.config, "Pipeline config file")->required()->check(CLI::ExistingFile);
  auto* pin = pipe->add_option("--input", pa.input, "JSON lines file or - for stdin")->capture_default_str();
  pipe->add_option("--store", pa.store, "Replay a flow store instead")->check(CLI::ExistingDirectory)->excludes(pin);

  GenArgs ga;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic pcap and its oracle flow list");
  gen->add_option("--spec", ga.spec_file, "Workload spec (JSON)")->check(CLI::ExistingFile);
  gen->add_option("--pcap", ga.pcap, "Output pcap")->required();
  gen->add_option("--oracle", ga.oracle, "Output oracle file")->required();
  gen->add_option("--seed", ga.seed, "Random seed");
  gen->add_option("--flows", ga.flows, "Number of flows");
  gen->add_option("--packets", ga.packets, "Packets per flow: N or A..B");
  gen->add_option("--v6-fraction", ga.v6_fraction, "Share of IPv6 flows");
  gen->add_option("--straddle", ga.straddle, "Chance of a gap near the idle timeout");
  gen->add_option("--idle", ga.idle, "Idle timeout the oracle assumes");
  gen->add_option("--active", ga.active, "Active timeout the oracle assumes");
  gen->add_flag("--print-spec", ga.print_spec, "Print the effective spec");

  std::string topo_config;
  auto* topo = app.add_subcommand("topology", "Run meters, a tee and collectors on this host");
  topo->add_option("--config", topo_config, "Topology config (JSON)")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  if (log_level == "debug") log::set_level(log::Level::Debug);
  if (log_level == "warn") log::set_level(log::Level::Warn);
  if (log_level == "error") log::set_level(log::Level::Error);
  if (log_level == "off") log::set_level(log::Level::Off);

  try {
    if (*meter) {
      if (ma.input.empty() && ma.interface.empty()) throw std::invalid_argument("meter needs --input or --interface");
      return run_meter(ma, strict);
    }
    if (*coll) return run_collect(ca, strict);
    if (*qry) return run_query(qa);
    if (*pipe) return run_pipe(pa, strict);
    if (*gen) return run_gen(ga);
    if (*topo) return run_topology_cmd(topo_config);
  } catch (const query::ParseError& e) {
    log::error("query", "filter rejected", {{"error", e.what()}, {"offset", std::to_string(e.offset())}});
    return 2;
  } catch (const std::exception& e) {
    log::error(app.get_subcommands().front()->get_name(), "failed", {{"error", e.what()}});
    return kExitFailure;
  }
  return 0;
}
