#include <omp.h>

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "flowkit/query.hpp"

namespace flowkit::query {

std::string_view to_string(KeyField field) {
  switch (field) {
    case KeyField::SrcIp: return "srcip";
    case KeyField::DstIp: return "dstip";
    case KeyField::SrcPort: return "srcport";
    case KeyField::DstPort: return "dstport";
    case KeyField::Proto: return "proto";
  }
  return "?";
}

std::string_view to_string(SortMetric metric) {
  switch (metric) {
    case SortMetric::Flows: return "flows";
    case SortMetric::Packets: return "packets";
    case SortMetric::Bytes: return "bytes";
  }
  return "?";
}

std::vector<KeyField> parse_key_fields(std::string_view csv) {
  std::vector<KeyField> fields;
  while (!csv.empty()) {
    const auto comma = csv.find(',');
    const auto name = csv.substr(0, comma);
    KeyField f;
    if (name == "srcip") f = KeyField::SrcIp;
    else if (name == "dstip") f = KeyField::DstIp;
    else if (name == "srcport") f = KeyField::SrcPort;
    else if (name == "dstport") f = KeyField::DstPort;
    else if (name == "proto") f = KeyField::Proto;
    else throw std::invalid_argument("unknown aggregation field '" + std::string(name) + "'");
    if (std::find(fields.begin(), fields.end(), f) != fields.end()) {
      throw std::invalid_argument("duplicate aggregation field '" + std::string(name) + "'");
    }
    fields.push_back(f);
    if (comma == std::string_view::npos) break;
    csv.remove_prefix(comma + 1);
  }
  if (fields.empty()) throw std::invalid_argument("aggregation needs at least one key field");
  return fields;
}

SortMetric parse_sort_metric(std::string_view text) {
  if (text == "flows") return SortMetric::Flows;
  if (text == "packets") return SortMetric::Packets;
  if (text == "bytes") return SortMetric::Bytes;
  throw std::invalid_argument("unknown sort metric '" + std::string(text) + "'");
}

std::size_t GroupKeyHash::operator()(const GroupKey& k) const noexcept {
  IpAddressHash h;
  std::size_t seed = h(k.src_ip) * 31 + h(k.dst_ip);
  return seed ^ ((std::size_t{k.protocol} << 32) | (std::size_t{k.src_port} << 16) | k.dst_port);
}

GroupKey group_key_of(const FlowRecord& flow, std::span<const KeyField> fields) {
  GroupKey k;
  for (auto f : fields) {
    switch (f) {
      case KeyField::SrcIp: k.src_ip = flow.key.src_ip; break;
      case KeyField::DstIp: k.dst_ip = flow.key.dst_ip; break;
      case KeyField::SrcPort: k.src_port = flow.key.src_port; break;
      case KeyField::DstPort: k.dst_port = flow.key.dst_port; break;
      case KeyField::Proto: k.protocol = flow.key.protocol; break;
    }
  }
  return k;
}

bool key_less(const GroupKey& a, const GroupKey& b, std::span<const KeyField> fields) {
  for (auto f : fields) {
    switch (f) {
      case KeyField::SrcIp:
        if (a.src_ip != b.src_ip) return a.src_ip < b.src_ip;
        break;
      case KeyField::DstIp:
        if (a.dst_ip != b.dst_ip) return a.dst_ip < b.dst_ip;
        break;
      case KeyField::SrcPort:
        if (a.src_port != b.src_port) return a.src_port < b.src_port;
        break;
      case KeyField::DstPort:
        if (a.dst_port != b.dst_port) return a.dst_port < b.dst_port;
        break;
      case KeyField::Proto:
        if (a.protocol != b.protocol) return a.protocol < b.protocol;
        break;
    }
  }
  return false;
}

namespace {

std::uint64_t metric_of(const AggregateRow& r, SortMetric m) {
  switch (m) {
    case SortMetric::Flows: return r.flows;
    case SortMetric::Packets: return r.packets;
    case SortMetric::Bytes: return r.bytes;
  }
  return 0;
}

std::uint64_t metric_of(const FlowRecord& f, SortMetric m) {
  switch (m) {
    case SortMetric::Flows: return 1;
    case SortMetric::Packets: return f.packets;
    case SortMetric::Bytes: return f.bytes;
  }
  return 0;
}

}  // namespace

void sort_rows(std::vector<AggregateRow>& rows, const AggregationSpec& spec) {
  std::sort(rows.begin(), rows.end(), [&](const AggregateRow& a, const AggregateRow& b) {
    const auto ma = metric_of(a, spec.sort_by);
    const auto mb = metric_of(b, spec.sort_by);
    if (ma != mb) return ma > mb;
    return key_less(a.key, b.key, spec.key_fields);
  });
  if (spec.top_n && rows.size() > *spec.top_n) rows.resize(*spec.top_n);
}

Aggregator::Aggregator(AggregationSpec spec) : spec_(std::move(spec)) {
  if (spec_.key_fields.empty()) throw std::invalid_argument("aggregation needs at least one key field");
}

void Aggregator::add(const FlowRecord& flow) {
  const GroupKey key = group_key_of(flow, spec_.key_fields);
  auto [it, inserted] = index_.try_emplace(key, rows_.size());
  if (inserted) rows_.push_back(AggregateRow{key, 0, 0, 0});
  AggregateRow& row = rows_[it->second];
  row.flows += 1;
  row.packets += flow.packets;
  row.bytes += flow.bytes;
}

void Aggregator::merge(const Aggregator& other) {
  for (const auto& r : other.rows_) {
    auto [it, inserted] = index_.try_emplace(r.key, rows_.size());
    if (inserted) {
      rows_.push_back(r);
    } else {
      AggregateRow& row = rows_[it->second];
      row.flows += r.flows;
      row.packets += r.packets;
      row.bytes += r.bytes;
    }
  }
}

std::vector<AggregateRow> Aggregator::finish() const {
  auto rows = rows_;
  sort_rows(rows, spec_);
  return rows;
}

std::vector<FlowRecord> filter_serial(std::span<const FlowRecord> flows, const FilterExpr& expr) {
  std::vector<FlowRecord> out;
  for (const auto& f : flows) {
    if (evaluate(expr, f)) out.push_back(f);
  }
  return out;
}

std::vector<FlowRecord> filter_parallel(std::span<const FlowRecord> flows, const FilterExpr& expr) {
  const auto n = static_cast<std::int64_t>(flows.size());
  std::vector<std::uint8_t> keep(flows.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    keep[static_cast<std::size_t>(i)] = evaluate(expr, flows[static_cast<std::size_t>(i)]) ? 1 : 0;
  }
  std::vector<FlowRecord> out;
  out.reserve(static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1)));
  for (std::size_t i = 0; i < flows.size(); ++i) {
    if (keep[i]) out.push_back(flows[i]);
  }
  return out;
}

std::vector<AggregateRow> aggregate_serial(std::span<const FlowRecord> flows,
                                           const AggregationSpec& spec) {
  Aggregator agg(spec);
  for (const auto& f : flows) agg.add(f);
  return agg.finish();
}

std::vector<AggregateRow> aggregate_parallel(std::span<const FlowRecord> flows,
                                             const AggregationSpec& spec) {
  const int threads = std::max(1, omp_get_max_threads());
  std::vector<Aggregator> partial(static_cast<std::size_t>(threads), Aggregator(spec));
  const auto n = static_cast<std::int64_t>(flows.size());
#pragma omp parallel num_threads(threads)
  {
    Aggregator& mine = partial[static_cast<std::size_t>(omp_get_thread_num())];
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) mine.add(flows[static_cast<std::size_t>(i)]);
  }
  // Sums commute and finish() imposes a total order, so the merge order does
  // not affect the result.
  Aggregator total(spec);
  for (const auto& p : partial) total.merge(p);
  return total.finish();
}

void sort_flows(std::vector<FlowRecord>& flows, SortMetric metric) {
  std::sort(flows.begin(), flows.end(), [&](const FlowRecord& a, const FlowRecord& b) {
    const auto ma = metric_of(a, metric);
    const auto mb = metric_of(b, metric);
    if (ma != mb) return ma > mb;
    if (a.first_seen_ms != b.first_seen_ms) return a.first_seen_ms < b.first_seen_ms;
    if (a.key != b.key) return a.key < b.key;
    return a.last_seen_ms < b.last_seen_ms;
  });
}

namespace {

std::string render(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows,
                   bool csv) {
  std::ostringstream out;
  if (csv) {
    for (const auto& row : rows) {
      for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
      out << '\n';
    }
    return out.str();
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out << "  ";
      out << std::setw(static_cast<int>(width[i])) << cells[i];
    }
    out << '\n';
  };
  line(header);
  for (const auto& row : rows) line(row);
  return out.str();
}

std::string key_cell(const GroupKey& k, KeyField f) {
  switch (f) {
    case KeyField::SrcIp: return k.src_ip.to_string();
    case KeyField::DstIp: return k.dst_ip.to_string();
    case KeyField::SrcPort: return std::to_string(k.src_port);
    case KeyField::DstPort: return std::to_string(k.dst_port);
    case KeyField::Proto: return std::to_string(k.protocol);
  }
  return {};
}

}  // namespace

std::string format_rows(const std::vector<AggregateRow>& rows, const AggregationSpec& spec, bool csv) {
  std::vector<std::string> header;
  for (auto f : spec.key_fields) header.emplace_back(to_string(f));
  header.insert(header.end(), {"flows", "packets", "bytes"});
  std::vector<std::vector<std::string>> cells;
  cells.reserve(rows.size());
  for (const auto& r : rows) {
    std::vector<std::string> row;
    for (auto f : spec.key_fields) row.push_back(key_cell(r.key, f));
    row.push_back(std::to_string(r.flows));
    row.push_back(std::to_string(r.packets));
    row.push_back(std::to_string(r.bytes));
    cells.push_back(std::move(row));
  }
  return render(header, cells, csv);
}

std::string format_flows(const std::vector<FlowRecord>& flows, bool csv) {
  const std::vector<std::string> header{"first_ms", "last_ms", "proto", "src_ip", "src_port",
                                        "dst_ip", "dst_port", "flags", "packets", "bytes"};
  std::vector<std::vector<std::string>> cells;
  cells.reserve(flows.size());
  for (const auto& f : flows) {
    cells.push_back({std::to_string(f.first_seen_ms), std::to_string(f.last_seen_ms),
                     std::to_string(f.key.protocol), f.key.src_ip.to_string(),
                     std::to_string(f.key.src_port), f.key.dst_ip.to_string(),
                     std::to_string(f.key.dst_port), std::to_string(f.tcp_flags),
                     std::to_string(f.packets), std::to_string(f.bytes)});
  }
  return render(header, cells, csv);
}

std::string run_query(const QueryOptions& o) {
  const FilterExpr expr = parse_filter(o.filter);
  const auto flows = store::scan_all(o.store_dir, o.range, o.rotation_s);
  auto matched = o.parallel ? filter_parallel(flows, expr) : filter_serial(flows, expr);

  if (o.aggregate) {
    AggregationSpec spec{*o.aggregate, o.sort_by.value_or(SortMetric::Bytes), o.top_n};
    const auto rows = o.parallel ? aggregate_parallel(matched, spec) : aggregate_serial(matched, spec);
    return format_rows(rows, spec, o.csv);
  }
  if (o.sort_by) sort_flows(matched, *o.sort_by);
  if (o.top_n && matched.size() > *o.top_n) matched.resize(*o.top_n);
  return format_flows(matched, o.csv);
}

}  // namespace flowkit::query
