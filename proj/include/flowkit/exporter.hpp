#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "flowkit/flow.hpp"
#include "flowkit/ipfix.hpp"

namespace flowkit {

using Datagram = std::vector<std::uint8_t>;

struct ExporterConfig {
  std::uint32_t observation_domain_id = 0;
  std::int64_t template_refresh_ms = 600'000;
  std::uint32_t template_refresh_records = 4096;
  std::int64_t linger_ms = 1000;
  std::size_t max_message_size = ipfix::kMaxMessageSize;
};

// Batches records per template into datagrams and interleaves template
// messages: before the first data message, then whenever the refresh
// interval or the refresh record count has been reached.
class ExporterState {
 public:
  explicit ExporterState(ExporterConfig cfg = {});

  // Datagrams that became ready: a batch that reached the size budget, with a
  // template message ahead of it when one is due.
  std::vector<Datagram> submit(const FlowRecord& record, std::int64_t now_ms);
  // Flushes batches older than the linger time and emits a periodic template
  // message when the refresh interval has elapsed.
  std::vector<Datagram> tick(std::int64_t now_ms);
  // Flushes every pending batch regardless of linger.
  std::vector<Datagram> flush(std::int64_t now_ms);

  std::uint32_t sequence() const { return sequence_; }
  std::uint64_t records_exported() const { return records_exported_; }
  std::uint64_t template_messages() const { return template_messages_; }
  std::size_t pending() const;
  const ExporterConfig& config() const { return cfg_; }

 private:
  struct Batch {
    std::vector<FlowRecord> records;
    std::int64_t opened_ms = 0;
  };

  Batch& batch_for(std::uint8_t ip_version) { return batches_[ip_version == 6 ? 1 : 0]; }
  void emit_batch(Batch& batch, std::uint8_t ip_version, std::int64_t now_ms,
                  std::vector<Datagram>& out);
  void emit_templates(std::int64_t now_ms, std::vector<Datagram>& out);
  bool template_due(std::int64_t now_ms) const;

  ExporterConfig cfg_;
  Batch batches_[2];
  std::size_t capacity_[2];
  std::uint32_t sequence_ = 0;
  std::optional<std::int64_t> last_template_ms_;
  std::uint64_t records_since_template_ = 0;
  std::uint64_t records_exported_ = 0;
  std::uint64_t template_messages_ = 0;
};

}  // namespace flowkit
