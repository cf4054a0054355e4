#include "flowkit/exporter.hpp"

#include <stdexcept>

namespace flowkit {

ExporterState::ExporterState(ExporterConfig cfg) : cfg_(cfg) {
  for (std::uint8_t v : {4, 6}) {
    const auto n = ipfix::records_per_message(ipfix::canonical_template(v), cfg_.max_message_size);
    if (n == 0) throw std::invalid_argument("message budget too small for one record");
    capacity_[v == 6 ? 1 : 0] = n;
  }
}

std::size_t ExporterState::pending() const {
  return batches_[0].records.size() + batches_[1].records.size();
}

bool ExporterState::template_due(std::int64_t now_ms) const {
  return !last_template_ms_ || now_ms - *last_template_ms_ >= cfg_.template_refresh_ms ||
         records_since_template_ >= cfg_.template_refresh_records;
}

void ExporterState::emit_templates(std::int64_t now_ms, std::vector<Datagram>& out) {
  const ipfix::HeaderSeed seed{sequence_, static_cast<std::uint32_t>(now_ms / 1000),
                               cfg_.observation_domain_id};
  out.push_back(ipfix::encode_template_message(ipfix::canonical_templates(), seed,
                                               cfg_.max_message_size));
  last_template_ms_ = now_ms;
  records_since_template_ = 0;
  ++template_messages_;
}

void ExporterState::emit_batch(Batch& batch, std::uint8_t ip_version, std::int64_t now_ms,
                               std::vector<Datagram>& out) {
  if (batch.records.empty()) return;
  if (template_due(now_ms)) emit_templates(now_ms, out);
  const ipfix::HeaderSeed seed{sequence_, static_cast<std::uint32_t>(now_ms / 1000),
                               cfg_.observation_domain_id};
  out.push_back(ipfix::encode_message(batch.records, ipfix::canonical_template(ip_version), seed,
                                      cfg_.max_message_size));
  const auto n = static_cast<std::uint32_t>(batch.records.size());
  sequence_ += n;  // wraps modulo 2^32
  records_since_template_ += n;
  records_exported_ += n;
  batch.records.clear();
}

std::vector<Datagram> ExporterState::submit(const FlowRecord& record, std::int64_t now_ms) {
  std::vector<Datagram> out;
  const std::uint8_t v = record.key.ip_version == 6 ? 6 : 4;
  Batch& batch = batch_for(v);
  if (batch.records.empty()) batch.opened_ms = now_ms;
  batch.records.push_back(record);
  if (batch.records.size() >= capacity_[v == 6 ? 1 : 0]) emit_batch(batch, v, now_ms, out);
  return out;
}

std::vector<Datagram> ExporterState::tick(std::int64_t now_ms) {
  std::vector<Datagram> out;
  for (std::uint8_t v : {4, 6}) {
    Batch& batch = batch_for(v);
    if (!batch.records.empty() && now_ms - batch.opened_ms >= cfg_.linger_ms) {
      emit_batch(batch, v, now_ms, out);
    }
  }
  if (last_template_ms_ && now_ms - *last_template_ms_ >= cfg_.template_refresh_ms) {
    emit_templates(now_ms, out);
  }
  return out;
}

std::vector<Datagram> ExporterState::flush(std::int64_t now_ms) {
  std::vector<Datagram> out;
  for (std::uint8_t v : {4, 6}) emit_batch(batch_for(v), v, now_ms, out);
  return out;
}

}  // namespace flowkit
