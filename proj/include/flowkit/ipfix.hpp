#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <vector>

#include "flowkit/flow.hpp"

namespace flowkit::ipfix {

inline constexpr std::uint16_t kVersion = 10;
inline constexpr std::uint16_t kTemplateSetId = 2;
inline constexpr std::uint16_t kOptionsTemplateSetId = 3;
inline constexpr std::uint16_t kMinDataSetId = 256;
inline constexpr std::size_t kHeaderSize = 16;
inline constexpr std::size_t kSetHeaderSize = 4;
// Fits a UDP datagram into a 1500-byte Ethernet MTU without fragmentation.
inline constexpr std::size_t kMaxMessageSize = 1464;
inline constexpr std::uint16_t kTemplateIdV4 = 256;
inline constexpr std::uint16_t kTemplateIdV6 = 257;
inline constexpr std::uint16_t kDefaultPort = 4739;
inline constexpr std::uint16_t kVariableLength = 0xffff;

// IANA information element identifiers used by the canonical templates.
namespace ie {
inline constexpr std::uint16_t kOctetDeltaCount = 1;
inline constexpr std::uint16_t kPacketDeltaCount = 2;
inline constexpr std::uint16_t kProtocolIdentifier = 4;
inline constexpr std::uint16_t kTcpControlBits = 6;
inline constexpr std::uint16_t kSourceTransportPort = 7;
inline constexpr std::uint16_t kSourceIpv4Address = 8;
inline constexpr std::uint16_t kDestinationTransportPort = 11;
inline constexpr std::uint16_t kDestinationIpv4Address = 12;
inline constexpr std::uint16_t kSourceIpv6Address = 27;
inline constexpr std::uint16_t kDestinationIpv6Address = 28;
inline constexpr std::uint16_t kFlowStartSeconds = 150;
inline constexpr std::uint16_t kFlowEndSeconds = 151;
inline constexpr std::uint16_t kFlowStartMilliseconds = 152;
inline constexpr std::uint16_t kFlowEndMilliseconds = 153;
}  // namespace ie

struct FieldSpec {
  std::uint16_t element_id = 0;
  std::uint16_t length = 0;  // kVariableLength for variable-length elements
  std::optional<std::uint32_t> enterprise_number;

  bool operator==(const FieldSpec&) const = default;
};

struct TemplateRecord {
  std::uint16_t template_id = 0;
  std::vector<FieldSpec> fields;
  // Nonzero for options templates, which are learned only so that their
  // data sets can be skipped.
  std::uint16_t scope_field_count = 0;

  bool is_options() const { return scope_field_count != 0; }
  // Size of one data record; variable-length fields count their 1-byte prefix.
  std::size_t min_record_length() const;
  bool has_variable_length() const;
  bool operator==(const TemplateRecord&) const = default;
};

const TemplateRecord& canonical_template(std::uint8_t ip_version);
std::span<const TemplateRecord> canonical_templates();

struct HeaderSeed {
  std::uint32_t sequence = 0;
  std::uint32_t export_time = 0;
  std::uint32_t observation_domain_id = 0;
};

struct MessageHeader {
  std::uint16_t version = 0;
  std::uint16_t length = 0;
  std::uint32_t export_time = 0;
  std::uint32_t sequence = 0;
  std::uint32_t observation_domain_id = 0;
};

enum class CodecErrorKind { EmptyBatch, RecordTemplateMismatch, MessageTooLarge, MalformedMessage };

class CodecError : public Error {
 public:
  CodecError(CodecErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  CodecErrorKind kind() const { return kind_; }

 private:
  CodecErrorKind kind_;
};

// Bytes one data record occupies under `tmpl`; throws RecordTemplateMismatch
// for templates the encoder cannot fill.
std::size_t encoded_record_size(const TemplateRecord& tmpl);
// How many records of `tmpl` fit one message within `budget` bytes.
std::size_t records_per_message(const TemplateRecord& tmpl, std::size_t budget = kMaxMessageSize);

std::vector<std::uint8_t> encode_message(std::span<const FlowRecord> records,
                                         const TemplateRecord& tmpl, const HeaderSeed& seed,
                                         std::size_t budget = kMaxMessageSize);
std::vector<std::uint8_t> encode_template_message(std::span<const TemplateRecord> templates,
                                                  const HeaderSeed& seed,
                                                  std::size_t budget = kMaxMessageSize);

// Throws MalformedMessage for a short buffer or a version other than 10.
MessageHeader parse_header(std::span<const std::uint8_t> data);

// Transport session of an exporter: (source address, source port, odid).
struct StreamKey {
  IpAddress address;
  std::uint16_t port = 0;
  std::uint32_t observation_domain_id = 0;

  auto operator<=>(const StreamKey&) const = default;
  bool operator==(const StreamKey&) const = default;
};

// Templates per (exporter, observation domain, template id), plus the
// expected next sequence number of each stream. Readers share, writers
// serialize; template swaps are whole-pointer replacements.
class TemplateCache {
 public:
  static constexpr std::int64_t kDefaultLifetimeMs = 30 * 60 * 1000;

  explicit TemplateCache(std::int64_t lifetime_ms = kDefaultLifetimeMs) : lifetime_ms_(lifetime_ms) {}

  std::shared_ptr<const TemplateRecord> lookup(const StreamKey& stream, std::uint16_t template_id,
                                               std::int64_t now_ms) const;
  void store(const StreamKey& stream, TemplateRecord tmpl, std::int64_t now_ms);
  void withdraw(const StreamKey& stream, std::uint16_t template_id);
  void withdraw_all(const StreamKey& stream);
  // Drops templates not refreshed within the lifetime. Returns the count removed.
  std::size_t expire(std::int64_t now_ms);
  std::size_t size() const;

  // Records the header sequence of a message carrying `data_records` and
  // returns header.sequence - expected (0 for the first message of a stream).
  std::int64_t observe_sequence(const StreamKey& stream, std::uint32_t sequence,
                                std::uint32_t data_records);
  void forget_sequence(const StreamKey& stream);

 private:
  struct Slot {
    std::shared_ptr<const TemplateRecord> tmpl;
    std::int64_t last_refresh_ms = 0;
  };
  using Key = std::pair<StreamKey, std::uint16_t>;

  std::int64_t lifetime_ms_;
  mutable std::shared_mutex mutex_;
  std::map<Key, Slot> templates_;
  std::map<StreamKey, std::uint32_t> expected_sequence_;
};

struct DecodeResult {
  MessageHeader header;
  std::size_t templates_learned = 0;
  std::size_t templates_withdrawn = 0;
  std::size_t options_templates_skipped = 0;
  std::vector<FlowRecord> flows;
  // Data sets that arrived without a cached template (counted per set).
  std::size_t unknown_template_records = 0;
  // Data records in sets whose template lacks the canonical flow fields.
  std::size_t undecodable_records = 0;
  std::int64_t sequence_gap = 0;
};

// Decodes one message. Malformed input throws MalformedMessage and leaves the
// cache unchanged; template updates take effect only after the whole message
// has been validated.
DecodeResult decode_message(std::span<const std::uint8_t> data, TemplateCache& cache,
                            const IpAddress& exporter, std::uint16_t exporter_port,
                            std::int64_t now_ms);
DecodeResult decode_message(std::span<const std::uint8_t> data, TemplateCache& cache,
                            const IpAddress& exporter, std::uint16_t exporter_port = 0);

}  // namespace flowkit::ipfix
