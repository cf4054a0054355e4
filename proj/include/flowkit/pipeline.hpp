#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "flowkit/flow.hpp"
#include "flowkit/query.hpp"

namespace flowkit::pipeline {

struct EnrichedFlow {
  FlowRecord flow;
  std::optional<std::string> src_label;
  std::optional<std::string> dst_label;

  bool operator==(const EnrichedFlow&) const = default;
};

// One JSON object per line with a fixed key order:
//   type, time_first_ms, time_last_ms, src_ip, dst_ip, src_port, dst_port,
//   proto, tcp_flags, packets, bytes, [src_label], [dst_label]
// Absent labels are omitted. Ends with exactly one '\n'.
std::string to_jsonl(const EnrichedFlow& flow);
// Inverse of to_jsonl; throws std::invalid_argument on malformed lines.
EnrichedFlow from_jsonl(std::string_view line);

class InvalidMaskLength : public Error {
 public:
  using Error::Error;
};

// Prefix truncation: keeps the top v4_bits / v6_bits of both addresses.
FlowRecord anonymize(const FlowRecord& flow, unsigned v4_bits = 24, unsigned v6_bits = 48);

class TableParseError : public Error {
 public:
  TableParseError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// CIDR -> label table with longest-prefix-match lookup. One hash table per
// prefix length, probed from the longest populated length down.
class CidrTable {
 public:
  // Format: one "CIDR<TAB>label" per line; '#' starts a comment.
  static CidrTable parse(std::istream& in);
  static CidrTable parse(std::string_view text);
  static CidrTable load(const std::filesystem::path& path);

  // Throws TableParseError (line 0) for an exact duplicate CIDR.
  void insert(const Prefix& prefix, std::string label);
  const std::string* lookup(const IpAddress& address) const;
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }

 private:
  using Level = std::unordered_map<IpAddress, std::string, IpAddressHash>;
  // index 0..32 for IPv4, 0..128 for IPv6
  std::vector<Level> v4_ = std::vector<Level>(33);
  std::vector<Level> v6_ = std::vector<Level>(129);
  std::size_t size_ = 0;
};

EnrichedFlow enrich(EnrichedFlow flow, const CidrTable& table);

struct MetricsConfig {
  std::int64_t window_s = 60;
  std::vector<query::KeyField> key_fields;
};

// Tumbling windows aligned to multiples of window_s, using flow last_seen as
// event time. A flow older than the open window is a late flow: it is counted
// in the open window and in late_flows().
class MetricsState {
 public:
  explicit MetricsState(MetricsConfig cfg);

  // Returns the exposition text of a window closed by this step, if any.
  // `now_ms` is the stream watermark; a window closes once it passes the end.
  std::optional<std::string> step(const FlowRecord& flow, std::int64_t now_ms);
  // Closes the window if `now_ms` has passed its end.
  std::optional<std::string> advance(std::int64_t now_ms);
  // Emits the open window unconditionally (end of stream).
  std::optional<std::string> finish();

  std::uint64_t late_flows() const { return late_flows_; }
  std::optional<std::int64_t> open_window_start() const { return window_start_; }

 private:
  struct Sums {
    std::uint64_t flows = 0;
    std::uint64_t packets = 0;
    std::uint64_t bytes = 0;
  };

  std::int64_t align(std::int64_t t) const;
  std::optional<std::string> close();
  std::string labels_of(const FlowRecord& flow) const;

  MetricsConfig cfg_;
  std::int64_t window_ms_;
  std::optional<std::int64_t> window_start_;
  std::map<std::string, Sums> groups_;  // keyed by rendered label set
  std::uint64_t late_flows_ = 0;
};

// ---- configured stage chain -----------------------------------------------

struct SerializeStage {
  std::string output = "-";  // path or "-" for standard output
};
struct EnrichStage {
  std::string cidr_file;
};
struct AnonymizeStage {
  unsigned v4_bits = 24;
  unsigned v6_bits = 48;
};
struct MetricsStage {
  std::int64_t window_s = 60;
  std::vector<query::KeyField> key_fields;
  std::string output = "-";
};

using Stage = std::variant<SerializeStage, EnrichStage, AnonymizeStage, MetricsStage>;

struct PipelineConfig {
  std::vector<Stage> stages;

  // JSON document {"stages": [{"type": "enrich", "cidr_file": "..."}, ...]}.
  // Throws std::invalid_argument on schema violations.
  static PipelineConfig parse(std::string_view json_text);
  static PipelineConfig load(const std::filesystem::path& path);
};

// Single-threaded stage chain over one ordered flow stream.
class Pipeline {
 public:
  // Stages whose output is "-" write to `stdout_stream`.
  explicit Pipeline(const PipelineConfig& config, std::ostream* stdout_stream = nullptr);
  ~Pipeline();
  Pipeline(Pipeline&&) noexcept;
  Pipeline& operator=(Pipeline&&) noexcept;

  void push(const FlowRecord& flow);
  void push(EnrichedFlow flow);
  // Closes metric windows whose end `now_ms` has passed.
  void advance(std::int64_t now_ms);
  // Flushes open metric windows and outputs.
  void finish();

  std::uint64_t flows_in() const;
  std::uint64_t late_flows() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace flowkit::pipeline
