#include "flowkit/collector.hpp"

#include <cerrno>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "flowkit/bytes.hpp"
#include "flowkit/clock.hpp"
#include "flowkit/log.hpp"
#include "flowkit/pipeline.hpp"

namespace flowkit::collect {

// ---- tee --------------------------------------------------------------------

TeeDestination TeeDestination::open(const Endpoint& endpoint) {
  TeeDestination d;
  d.endpoint = endpoint;
  try {
    d.socket = UdpSocket::connect(endpoint);
  } catch (const SocketError& e) {
    log::warn("collect", "tee destination not connectable", {{"dest", endpoint.to_string()}, {"error", e.what()}});
    d.socket = UdpSocket::unconnected(endpoint);
    d.connected = false;
  }
  return d;
}

std::vector<int> replicate_datagram(std::span<const std::uint8_t> data,
                                    std::span<TeeDestination> destinations) {
  std::vector<int> outcomes;
  outcomes.reserve(destinations.size());
  for (auto& d : destinations) {
    if (!d.connected) {
      const int err = d.socket.send_to(data, d.endpoint);
      ++(err == 0 ? d.sent : d.failed);
      outcomes.push_back(err);
      continue;
    }
    int err = d.socket.send(data);
    // A refused earlier send is reported on this one; the datagram itself
    // was not sent, so try once more.
    if (err == ECONNREFUSED) err = d.socket.send(data);
    if (err == 0) {
      ++d.sent;
    } else {
      ++d.failed;
    }
    outcomes.push_back(err);
  }
  return outcomes;
}

// ---- sinks ------------------------------------------------------------------

StoreSink::StoreSink(const std::filesystem::path& dir, std::int64_t rotation_s)
    : writer_(dir, rotation_s) {}

void StoreSink::deliver(std::span<const FlowRecord> flows) {
  const auto now = wall_clock_ms();
  for (const auto& f : flows) writer_.append(f, now);
}

void StoreSink::tick(std::int64_t) { writer_.flush(); }

void StoreSink::close() { writer_.close(); }

struct JsonlSink::Impl {
  std::unique_ptr<std::ofstream> file;
  std::ostream* out = nullptr;
};

JsonlSink::JsonlSink(const std::string& target) : impl_(std::make_unique<Impl>()) {
  if (target == "-") {
    impl_->out = &std::cout;
  } else {
    impl_->file = std::make_unique<std::ofstream>(target, std::ios::app);
    if (!*impl_->file) throw std::invalid_argument("cannot open " + target);
    impl_->out = impl_->file.get();
  }
}

JsonlSink::~JsonlSink() = default;

void JsonlSink::deliver(std::span<const FlowRecord> flows) {
  for (const auto& f : flows) *impl_->out << pipeline::to_jsonl({f, std::nullopt, std::nullopt});
}

void JsonlSink::close() { impl_->out->flush(); }

struct PipelineSink::Impl {
  pipeline::Pipeline pipe;
};

PipelineSink::PipelineSink(const std::filesystem::path& config_file)
    : impl_(std::make_unique<Impl>(Impl{pipeline::Pipeline(pipeline::PipelineConfig::load(config_file))})) {}

PipelineSink::~PipelineSink() = default;

void PipelineSink::deliver(std::span<const FlowRecord> flows) {
  for (const auto& f : flows) impl_->pipe.push(f);
}

void PipelineSink::tick(std::int64_t now_ms) { impl_->pipe.advance(now_ms); }

void PipelineSink::close() { impl_->pipe.finish(); }

struct QueuedSink::Impl {
  std::unique_ptr<FlowSink> inner;
  std::size_t capacity;
  std::mutex mutex;
  std::condition_variable wake;
  std::condition_variable idle;
  std::deque<FlowRecord> queue;
  bool busy = false;
  bool stopping = false;
  bool closed = false;
  std::uint64_t delivered = 0;
  std::uint64_t overflow = 0;
  std::thread thread;

  void loop() {
    std::vector<FlowRecord> batch;
    std::unique_lock lock(mutex);
    while (true) {
      wake.wait_for(lock, std::chrono::seconds(1), [&] { return stopping || !queue.empty(); });
      if (queue.empty()) {
        if (stopping) break;
        lock.unlock();
        inner->tick(wall_clock_ms());
        lock.lock();
        continue;
      }
      batch.assign(queue.begin(), queue.end());
      queue.clear();
      busy = true;
      lock.unlock();
      try {
        inner->deliver(batch);
      } catch (const std::exception& e) {
        log::error("collect", "sink failed", {{"sink", inner->name()}, {"error", e.what()}});
      }
      lock.lock();
      busy = false;
      delivered += batch.size();
      idle.notify_all();
    }
  }
};

QueuedSink::QueuedSink(std::unique_ptr<FlowSink> inner, std::size_t capacity)
    : impl_(std::make_unique<Impl>()) {
  impl_->inner = std::move(inner);
  impl_->capacity = capacity;
  impl_->thread = std::thread([this] { impl_->loop(); });
}

QueuedSink::~QueuedSink() { close(); }

void QueuedSink::deliver(std::span<const FlowRecord> flows) {
  {
    std::lock_guard lock(impl_->mutex);
    const std::size_t room =
        impl_->capacity > impl_->queue.size() ? impl_->capacity - impl_->queue.size() : 0;
    const std::size_t take = std::min(room, flows.size());
    impl_->queue.insert(impl_->queue.end(), flows.begin(), flows.begin() + static_cast<std::ptrdiff_t>(take));
    impl_->overflow += flows.size() - take;
  }
  impl_->wake.notify_one();
}

void QueuedSink::drain() {
  std::unique_lock lock(impl_->mutex);
  impl_->idle.wait(lock, [&] { return impl_->queue.empty() && !impl_->busy; });
}

void QueuedSink::close() {
  {
    std::lock_guard lock(impl_->mutex);
    if (impl_->closed) return;
    impl_->closed = true;
    impl_->stopping = true;
  }
  impl_->wake.notify_one();
  if (impl_->thread.joinable()) impl_->thread.join();
  try {
    impl_->inner->close();
  } catch (const std::exception& e) {
    log::error("collect", "sink close failed", {{"sink", impl_->inner->name()}, {"error", e.what()}});
  }
}

std::string QueuedSink::name() const { return impl_->inner->name(); }

std::uint64_t QueuedSink::delivered() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->delivered;
}

std::uint64_t QueuedSink::overflow() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->overflow;
}

// ---- per-datagram handling --------------------------------------------------

ExporterStats& ExporterStats::operator+=(const ExporterStats& o) {
  datagrams += o.datagrams;
  malformed += o.malformed;
  flows_decoded += o.flows_decoded;
  unknown_template_drops += o.unknown_template_drops;
  sequence_gaps += o.sequence_gaps;
  return *this;
}

HandleResult handle_datagram(std::span<const std::uint8_t> data, const Endpoint& source,
                             ipfix::TemplateCache& cache, std::span<FlowSink* const> sinks,
                             std::int64_t now_ms) {
  HandleResult r;
  r.exporter.address = source.address;
  r.delta.datagrams = 1;
  if (data.size() >= ipfix::kHeaderSize) {
    r.exporter.observation_domain_id = bytes::load_be32(data.data() + 12);
  }
  ipfix::DecodeResult decoded;
  try {
    decoded = ipfix::decode_message(data, cache, source.address, source.port, now_ms);
  } catch (const ipfix::CodecError&) {
    r.delta.malformed = 1;
    return r;
  }
  r.delta.flows_decoded = decoded.flows.size();
  r.delta.unknown_template_drops = decoded.unknown_template_records;
  r.delta.sequence_gaps = decoded.sequence_gap != 0 ? 1 : 0;
  if (!decoded.flows.empty()) {
    for (auto* sink : sinks) sink->deliver(decoded.flows);
  }
  return r;
}

// ---- runtime ----------------------------------------------------------------

void CollectorConfig::validate() const {
  if (tee_destinations.empty() && !store_dir && !jsonl && !pipeline_config) {
    throw std::invalid_argument("collector needs at least one sink or tee destination");
  }
  if (workers == 0) throw std::invalid_argument("collector needs at least one worker");
  if (stats_interval_s < 0) throw std::invalid_argument("stats interval must not be negative");
}

namespace {

struct Work {
  std::vector<std::uint8_t> data;
  Endpoint source;
};

class Worker {
 public:
  Worker(std::size_t capacity, std::function<void(Work&)> handler)
      : capacity_(capacity), handler_(std::move(handler)), thread_([this] { loop(); }) {}

  ~Worker() { stop(); }

  bool push(Work&& w) {
    {
      std::lock_guard lock(mutex_);
      if (queue_.size() >= capacity_) return false;
      queue_.push_back(std::move(w));
    }
    wake_.notify_one();
    return true;
  }

  void stop() {
    {
      std::lock_guard lock(mutex_);
      stopping_ = true;
    }
    wake_.notify_one();
    if (thread_.joinable()) thread_.join();
  }

 private:
  void loop() {
    std::unique_lock lock(mutex_);
    while (true) {
      wake_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) break;
      Work w = std::move(queue_.front());
      queue_.pop_front();
      lock.unlock();
      handler_(w);
      lock.lock();
    }
  }

  std::size_t capacity_;
  std::function<void(Work&)> handler_;
  std::mutex mutex_;
  std::condition_variable wake_;
  std::deque<Work> queue_;
  bool stopping_ = false;
  std::thread thread_;
};

}  // namespace

struct Collector::Impl {
  CollectorConfig cfg;
  UdpSocket socket;
  ipfix::TemplateCache cache;
  std::vector<TeeDestination> tees;
  std::vector<std::unique_ptr<QueuedSink>> sinks;
  std::vector<FlowSink*> sink_ptrs;
  std::vector<std::unique_ptr<Worker>> workers;

  mutable std::mutex stats_mutex;
  std::map<ExporterId, ExporterStats> stats;
  std::uint64_t worker_overflow = 0;
  bool finished = false;

  void handle(Work& w) {
    auto r = handle_datagram(w.data, w.source, cache, sink_ptrs, wall_clock_ms());
    std::lock_guard lock(stats_mutex);
    stats[r.exporter] += r.delta;
  }

  void shutdown() {
    if (finished) return;
    finished = true;
    for (auto& w : workers) w->stop();
    for (auto& s : sinks) s->close();
  }
};

Collector::Collector(CollectorConfig cfg) : impl_(std::make_unique<Impl>()) {
  cfg.validate();
  impl_->cfg = std::move(cfg);
  auto& c = impl_->cfg;
  impl_->socket = UdpSocket::bind(c.listen);
  impl_->socket.set_receive_buffer(c.receive_buffer_bytes);
  for (const auto& t : c.tee_destinations) impl_->tees.push_back(TeeDestination::open(t));

  std::vector<std::unique_ptr<FlowSink>> inner;
  if (c.store_dir) inner.push_back(std::make_unique<StoreSink>(*c.store_dir, c.rotation_s));
  if (c.jsonl) inner.push_back(std::make_unique<JsonlSink>(*c.jsonl));
  if (c.pipeline_config) inner.push_back(std::make_unique<PipelineSink>(*c.pipeline_config));
  for (auto& s : inner) {
    impl_->sinks.push_back(std::make_unique<QueuedSink>(std::move(s), c.sink_queue_capacity));
    impl_->sink_ptrs.push_back(impl_->sinks.back().get());
  }
  if (!impl_->sinks.empty()) {
    for (std::size_t i = 0; i < c.workers; ++i) {
      impl_->workers.push_back(std::make_unique<Worker>(
          c.worker_queue_capacity, [impl = impl_.get()](Work& w) { impl->handle(w); }));
    }
  }
}

Collector::~Collector() { impl_->shutdown(); }

Endpoint Collector::local_endpoint() const { return impl_->socket.local_endpoint(); }

void Collector::run(const std::atomic<bool>& stop) {
  auto& c = impl_->cfg;
  std::vector<std::uint8_t> buffer(65536);
  std::int64_t next_stats = c.stats_interval_s > 0 ? wall_clock_ms() + c.stats_interval_s * 1000 : -1;
  std::int64_t next_expire = wall_clock_ms() + 60'000;
  log::info("collect", "listening", {{"listen", local_endpoint().to_string()},
                                      {"tees", std::to_string(impl_->tees.size())},
                                      {"sinks", std::to_string(impl_->sinks.size())}});
  while (!stop.load(std::memory_order_relaxed)) {
    Endpoint from;
    auto n = impl_->socket.receive(buffer, from, 200);
    const auto now = wall_clock_ms();
    if (n) {
      const std::size_t size = std::min(*n, buffer.size());
      std::span<const std::uint8_t> data(buffer.data(), size);
      if (!impl_->tees.empty()) {
        std::lock_guard lock(impl_->stats_mutex);
        replicate_datagram(data, impl_->tees);
      }
      if (impl_->workers.empty()) {
        // Tee-only node: still account for what passed through.
        auto r = handle_datagram(data, from, impl_->cache, {}, now);
        std::lock_guard lock(impl_->stats_mutex);
        impl_->stats[r.exporter] += r.delta;
      } else {
        const std::size_t slot =
            (IpAddressHash{}(from.address) ^ from.port) % impl_->workers.size();
        if (!impl_->workers[slot]->push(Work{{data.begin(), data.end()}, from})) {
          std::lock_guard lock(impl_->stats_mutex);
          ++impl_->worker_overflow;
        }
      }
    }
    if (next_stats >= 0 && now >= next_stats) {
      log_stats();
      next_stats = now + c.stats_interval_s * 1000;
    }
    if (now >= next_expire) {
      impl_->cache.expire(now);
      next_expire = now + 60'000;
    }
  }
  impl_->shutdown();
}

std::map<ExporterId, ExporterStats> Collector::stats() const {
  std::lock_guard lock(impl_->stats_mutex);
  return impl_->stats;
}

std::vector<TeeStats> Collector::tee_stats() const {
  std::lock_guard lock(impl_->stats_mutex);
  std::vector<TeeStats> out;
  for (const auto& t : impl_->tees) out.push_back({t.endpoint, t.sent, t.failed});
  return out;
}

std::vector<SinkStats> Collector::sink_stats() const {
  std::vector<SinkStats> out;
  for (const auto& s : impl_->sinks) out.push_back({s->name(), s->delivered(), s->overflow()});
  return out;
}

std::uint64_t Collector::worker_overflow() const {
  std::lock_guard lock(impl_->stats_mutex);
  return impl_->worker_overflow;
}

std::uint64_t Collector::counted_errors() const {
  std::uint64_t n = worker_overflow();
  for (const auto& [id, s] : stats()) n += s.malformed + s.unknown_template_drops + s.sequence_gaps;
  for (const auto& t : tee_stats()) n += t.failed;
  for (const auto& s : sink_stats()) n += s.overflow;
  return n;
}

void Collector::log_stats() const {
  if (impl_->cfg.per_exporter_stats) {
    for (const auto& [id, s] : stats()) {
      log::info("collect", "exporter stats",
                {{"exporter", id.address.to_string()},
                 {"odid", std::to_string(id.observation_domain_id)},
                 {"datagrams", std::to_string(s.datagrams)},
                 {"malformed", std::to_string(s.malformed)},
                 {"flows_decoded", std::to_string(s.flows_decoded)},
                 {"unknown_template_drops", std::to_string(s.unknown_template_drops)},
                 {"sequence_gaps", std::to_string(s.sequence_gaps)}});
    }
  }
  for (const auto& t : tee_stats()) {
    log::info("collect", "tee stats",
              {{"destination", t.endpoint.to_string()},
               {"sent", std::to_string(t.sent)},
               {"failed", std::to_string(t.failed)}});
  }
  for (const auto& s : sink_stats()) {
    log::info("collect", "sink stats",
              {{"sink", s.name}, {"delivered", std::to_string(s.delivered)},
               {"overflow", std::to_string(s.overflow)}});
  }
}

}  // namespace flowkit::collect
