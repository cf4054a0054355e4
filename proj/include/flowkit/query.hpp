#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "flowkit/flow.hpp"
#include "flowkit/store.hpp"

namespace flowkit::query {

// ---- filter language -------------------------------------------------------
//
//   expr    := or
//   or      := and ("or" and)*
//   and     := unary ("and" unary)*
//   unary   := "not" unary | "(" expr ")" | predicate
//   predicate := "any"
//              | "proto" (tcp|udp|icmp|icmp6|<0-255>)
//              | [src|dst] host <ip> | [src|dst] net <cidr> | [src|dst] port <0-65535>
//              | (bytes|packets|duration) (<|<=|>|>=|=) <uint>
//
// "&&", "||" and "!" are accepted as aliases. The empty string matches all.

enum class Direction : std::uint8_t { Src, Dst, Either };
enum class CompareOp : std::uint8_t { Lt, Le, Gt, Ge, Eq };
enum class Counter : std::uint8_t { Bytes, Packets, Duration };

struct MatchAll {
  bool operator==(const MatchAll&) const = default;
};
struct ProtoPredicate {
  std::uint8_t protocol = 0;
  bool operator==(const ProtoPredicate&) const = default;
};
struct HostPredicate {
  Direction direction = Direction::Either;
  IpAddress address;
  bool operator==(const HostPredicate&) const = default;
};
struct NetPredicate {
  Direction direction = Direction::Either;
  Prefix prefix;
  bool operator==(const NetPredicate&) const = default;
};
struct PortPredicate {
  Direction direction = Direction::Either;
  std::uint16_t port = 0;
  bool operator==(const PortPredicate&) const = default;
};
struct CounterPredicate {
  Counter counter = Counter::Bytes;
  CompareOp op = CompareOp::Eq;
  std::uint64_t value = 0;
  bool operator==(const CounterPredicate&) const = default;
};

using Predicate =
    std::variant<MatchAll, ProtoPredicate, HostPredicate, NetPredicate, PortPredicate, CounterPredicate>;

struct FilterExpr {
  enum class Kind : std::uint8_t { Leaf, Not, And, Or };

  Kind kind = Kind::Leaf;
  Predicate predicate = MatchAll{};
  std::vector<FilterExpr> children;  // one for Not, two or more for And/Or

  static FilterExpr leaf(Predicate p);
  static FilterExpr negate(FilterExpr e);
  static FilterExpr all_of(std::vector<FilterExpr> children);
  static FilterExpr any_of(std::vector<FilterExpr> children);

  friend bool operator==(const FilterExpr& a, const FilterExpr& b);
};

enum class ParseErrorKind { SyntaxError, InvalidCidr, InvalidPortRange };

class ParseError : public Error {
 public:
  ParseError(ParseErrorKind kind, std::size_t offset, const std::string& what);
  ParseErrorKind kind() const { return kind_; }
  std::size_t offset() const { return offset_; }

 private:
  ParseErrorKind kind_;
  std::size_t offset_;
};

FilterExpr parse_filter(std::string_view text);
// Canonical text form; parse_filter(print(e)) == e for parser-shaped trees.
std::string print(const FilterExpr& expr);
bool evaluate(const FilterExpr& expr, const FlowRecord& flow);

// ---- aggregation -----------------------------------------------------------

enum class KeyField : std::uint8_t { SrcIp, DstIp, SrcPort, DstPort, Proto };
enum class SortMetric : std::uint8_t { Flows, Packets, Bytes };

std::string_view to_string(KeyField field);
std::string_view to_string(SortMetric metric);
// "srcip,dstip,..." -> fields; throws std::invalid_argument.
std::vector<KeyField> parse_key_fields(std::string_view csv);
SortMetric parse_sort_metric(std::string_view text);

struct AggregationSpec {
  std::vector<KeyField> key_fields;
  SortMetric sort_by = SortMetric::Bytes;
  std::optional<std::size_t> top_n;
};

// Flow fields selected by the spec; unselected fields stay zero.
struct GroupKey {
  IpAddress src_ip;
  IpAddress dst_ip;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint8_t protocol = 0;
  bool operator==(const GroupKey&) const = default;
};

struct GroupKeyHash {
  std::size_t operator()(const GroupKey& k) const noexcept;
};

GroupKey group_key_of(const FlowRecord& flow, std::span<const KeyField> fields);
// Lexicographic over `fields` in their listed order.
bool key_less(const GroupKey& a, const GroupKey& b, std::span<const KeyField> fields);

struct AggregateRow {
  GroupKey key;
  std::uint64_t flows = 0;
  std::uint64_t packets = 0;
  std::uint64_t bytes = 0;
  bool operator==(const AggregateRow&) const = default;
};

// Streaming aggregation. finish() sorts descending by the spec's metric with
// the key tuple as tie-break, then truncates to top_n.
class Aggregator {
 public:
  explicit Aggregator(AggregationSpec spec);
  void add(const FlowRecord& flow);
  void merge(const Aggregator& other);
  std::vector<AggregateRow> finish() const;
  const AggregationSpec& spec() const { return spec_; }

 private:
  AggregationSpec spec_;
  std::vector<AggregateRow> rows_;
  std::unordered_map<GroupKey, std::size_t, GroupKeyHash> index_;
};

void sort_rows(std::vector<AggregateRow>& rows, const AggregationSpec& spec);

// Serial reference kernels and their OpenMP counterparts. Both produce
// identical output for identical input.
std::vector<FlowRecord> filter_serial(std::span<const FlowRecord> flows, const FilterExpr& expr);
std::vector<FlowRecord> filter_parallel(std::span<const FlowRecord> flows, const FilterExpr& expr);
std::vector<AggregateRow> aggregate_serial(std::span<const FlowRecord> flows,
                                           const AggregationSpec& spec);
std::vector<AggregateRow> aggregate_parallel(std::span<const FlowRecord> flows,
                                             const AggregationSpec& spec);

// Descending by metric; ties broken by first_seen, key, then last_seen.
void sort_flows(std::vector<FlowRecord>& flows, SortMetric metric);

// ---- output ----------------------------------------------------------------

std::string format_rows(const std::vector<AggregateRow>& rows, const AggregationSpec& spec, bool csv);
std::string format_flows(const std::vector<FlowRecord>& flows, bool csv);

struct QueryOptions {
  std::filesystem::path store_dir;
  store::TimeRange range;
  std::string filter;
  std::optional<std::vector<KeyField>> aggregate;
  std::optional<SortMetric> sort_by;
  std::optional<std::size_t> top_n;
  bool csv = false;
  bool parallel = true;
  std::int64_t rotation_s = store::kDefaultRotationS;
};

std::string run_query(const QueryOptions& options);

}  // namespace flowkit::query
