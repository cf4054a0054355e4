#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowkit/flow.hpp"
#include "flowkit/ipfix.hpp"
#include "flowkit/store.hpp"
#include "flowkit/udp.hpp"

namespace flowkit::collect {

// ---- tee --------------------------------------------------------------------

struct TeeDestination {
  Endpoint endpoint;
  UdpSocket socket;
  // False when connect() was refused at startup; sends then go through
  // send_to() and keep failing (and counting) until the route exists.
  bool connected = true;
  std::uint64_t sent = 0;
  std::uint64_t failed = 0;

  static TeeDestination open(const Endpoint& endpoint);
};

// Forwards `data` unchanged to every destination. Returns 0 or the errno of
// each destination's send, in destination order; failures are counted on the
// destination and never stop the remaining sends.
std::vector<int> replicate_datagram(std::span<const std::uint8_t> data,
                                    std::span<TeeDestination> destinations);

// ---- sinks ------------------------------------------------------------------

class FlowSink {
 public:
  virtual ~FlowSink() = default;
  virtual void deliver(std::span<const FlowRecord> flows) = 0;
  // Periodic clock for sinks with time-driven output.
  virtual void tick(std::int64_t /*now_ms*/) {}
  virtual void close() {}
  virtual std::string name() const = 0;
};

class StoreSink final : public FlowSink {
 public:
  explicit StoreSink(const std::filesystem::path& dir,
                     std::int64_t rotation_s = store::kDefaultRotationS);
  void deliver(std::span<const FlowRecord> flows) override;
  void tick(std::int64_t now_ms) override;
  void close() override;
  std::string name() const override { return "store"; }

 private:
  store::StoreWriter writer_;
};

// JSON lines to a file, or to standard output for "-".
class JsonlSink final : public FlowSink {
 public:
  explicit JsonlSink(const std::string& target);
  ~JsonlSink() override;
  void deliver(std::span<const FlowRecord> flows) override;
  void close() override;
  std::string name() const override { return "jsonl"; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

class PipelineSink final : public FlowSink {
 public:
  explicit PipelineSink(const std::filesystem::path& config_file);
  ~PipelineSink() override;
  void deliver(std::span<const FlowRecord> flows) override;
  void tick(std::int64_t now_ms) override;
  void close() override;
  std::string name() const override { return "pipeline"; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Runs the wrapped sink on its own thread behind a bounded queue. deliver()
// never blocks: records that do not fit are dropped and counted.
class QueuedSink final : public FlowSink {
 public:
  QueuedSink(std::unique_ptr<FlowSink> inner, std::size_t capacity);
  ~QueuedSink() override;

  void deliver(std::span<const FlowRecord> flows) override;
  // Drains the queue, then closes the wrapped sink.
  void close() override;
  std::string name() const override;

  std::uint64_t delivered() const;
  std::uint64_t overflow() const;
  // Blocks until everything queued so far has been handed to the sink.
  void drain();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// ---- per-datagram handling --------------------------------------------------

struct ExporterStats {
  std::uint64_t datagrams = 0;
  std::uint64_t malformed = 0;
  std::uint64_t flows_decoded = 0;
  std::uint64_t unknown_template_drops = 0;
  std::uint64_t sequence_gaps = 0;  // messages whose sequence number skipped

  ExporterStats& operator+=(const ExporterStats& o);
  bool operator==(const ExporterStats&) const = default;
};

struct ExporterId {
  IpAddress address;
  std::uint32_t observation_domain_id = 0;

  auto operator<=>(const ExporterId&) const = default;
  bool operator==(const ExporterId&) const = default;
};

struct HandleResult {
  ExporterId exporter;
  ExporterStats delta;
};

// Decodes one datagram and hands its flows to every sink in order.
HandleResult handle_datagram(std::span<const std::uint8_t> data, const Endpoint& source,
                             ipfix::TemplateCache& cache, std::span<FlowSink* const> sinks,
                             std::int64_t now_ms);

// ---- runtime ----------------------------------------------------------------

struct CollectorConfig {
  Endpoint listen{IpAddress::v4(0), ipfix::kDefaultPort};
  std::vector<Endpoint> tee_destinations;
  std::optional<std::filesystem::path> store_dir;
  std::int64_t rotation_s = store::kDefaultRotationS;
  std::optional<std::string> jsonl;  // path or "-"
  std::optional<std::filesystem::path> pipeline_config;
  bool per_exporter_stats = true;
  std::int64_t stats_interval_s = 0;  // 0 disables periodic stats lines
  std::size_t workers = 2;
  std::size_t sink_queue_capacity = 1 << 20;  // records
  std::size_t worker_queue_capacity = 1 << 16;  // datagrams
  int receive_buffer_bytes = 8 << 20;

  // Throws std::invalid_argument when neither a sink nor a tee is configured.
  void validate() const;
};

struct SinkStats {
  std::string name;
  std::uint64_t delivered = 0;
  std::uint64_t overflow = 0;
};

struct TeeStats {
  Endpoint endpoint;
  std::uint64_t sent = 0;
  std::uint64_t failed = 0;
};

// Receive loop on one socket. Replication happens inline before decoding;
// decoding and sink delivery run on workers chosen by exporter address and
// port, which keeps each exporter's datagrams in order.
class Collector {
 public:
  explicit Collector(CollectorConfig cfg);
  ~Collector();
  Collector(const Collector&) = delete;
  Collector& operator=(const Collector&) = delete;

  Endpoint local_endpoint() const;

  // Receives until `stop` becomes true, then drains workers and closes sinks.
  void run(const std::atomic<bool>& stop);

  std::map<ExporterId, ExporterStats> stats() const;
  std::vector<TeeStats> tee_stats() const;
  std::vector<SinkStats> sink_stats() const;
  std::uint64_t worker_overflow() const;
  // Sum of every counted error: malformed datagrams, unknown-template drops,
  // sequence gaps, sink and worker overflow, tee send failures.
  std::uint64_t counted_errors() const;
  void log_stats() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace flowkit::collect
