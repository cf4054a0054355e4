#include "flowkit/ipfix.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <mutex>

#include "flowkit/bytes.hpp"
#include "flowkit/clock.hpp"

namespace flowkit::ipfix {
namespace {

TemplateRecord make_canonical(std::uint16_t id, std::uint16_t src_ie, std::uint16_t dst_ie,
                              std::uint16_t addr_len) {
  return TemplateRecord{id,
                        {
                            {ie::kOctetDeltaCount, 8, {}},
                            {ie::kPacketDeltaCount, 8, {}},
                            {ie::kProtocolIdentifier, 1, {}},
                            {ie::kTcpControlBits, 1, {}},
                            {ie::kSourceTransportPort, 2, {}},
                            {src_ie, addr_len, {}},
                            {ie::kDestinationTransportPort, 2, {}},
                            {dst_ie, addr_len, {}},
                            {ie::kFlowStartMilliseconds, 8, {}},
                            {ie::kFlowEndMilliseconds, 8, {}},
                        },
                        0};
}

const std::array<TemplateRecord, 2>& canonical_pair() {
  static const std::array<TemplateRecord, 2> templates{
      make_canonical(kTemplateIdV4, ie::kSourceIpv4Address, ie::kDestinationIpv4Address, 4),
      make_canonical(kTemplateIdV6, ie::kSourceIpv6Address, ie::kDestinationIpv6Address, 16),
  };
  return templates;
}

[[noreturn]] void malformed(const std::string& what) {
  throw CodecError(CodecErrorKind::MalformedMessage, "malformed IPFIX message: " + what);
}

[[noreturn]] void mismatch(const std::string& what) {
  throw CodecError(CodecErrorKind::RecordTemplateMismatch, what);
}

// Standard length the encoder writes for each supported element.
std::optional<std::uint16_t> encodable_length(std::uint16_t element_id) {
  switch (element_id) {
    case ie::kOctetDeltaCount:
    case ie::kPacketDeltaCount:
    case ie::kFlowStartMilliseconds:
    case ie::kFlowEndMilliseconds:
      return 8;
    case ie::kProtocolIdentifier:
    case ie::kTcpControlBits:
      return 1;
    case ie::kSourceTransportPort:
    case ie::kDestinationTransportPort:
      return 2;
    case ie::kSourceIpv4Address:
    case ie::kDestinationIpv4Address:
    case ie::kFlowStartSeconds:
    case ie::kFlowEndSeconds:
      return 4;
    case ie::kSourceIpv6Address:
    case ie::kDestinationIpv6Address:
      return 16;
    default:
      return std::nullopt;
  }
}

std::optional<std::uint8_t> template_ip_version(const TemplateRecord& tmpl) {
  for (const auto& f : tmpl.fields) {
    if (f.enterprise_number) continue;
    if (f.element_id == ie::kSourceIpv4Address || f.element_id == ie::kDestinationIpv4Address) {
      return 4;
    }
    if (f.element_id == ie::kSourceIpv6Address || f.element_id == ie::kDestinationIpv6Address) {
      return 6;
    }
  }
  return std::nullopt;
}

void encode_record(bytes::BeWriter& w, const FlowRecord& r, const TemplateRecord& tmpl) {
  for (const auto& f : tmpl.fields) {
    switch (f.element_id) {
      case ie::kOctetDeltaCount: w.u64(r.bytes); break;
      case ie::kPacketDeltaCount: w.u64(r.packets); break;
      case ie::kProtocolIdentifier: w.u8(r.key.protocol); break;
      case ie::kTcpControlBits: w.u8(r.tcp_flags); break;
      case ie::kSourceTransportPort: w.u16(r.key.src_port); break;
      case ie::kDestinationTransportPort: w.u16(r.key.dst_port); break;
      case ie::kSourceIpv4Address:
      case ie::kSourceIpv6Address: w.raw(r.key.src_ip.octets()); break;
      case ie::kDestinationIpv4Address:
      case ie::kDestinationIpv6Address: w.raw(r.key.dst_ip.octets()); break;
      case ie::kFlowStartMilliseconds: w.u64(static_cast<std::uint64_t>(r.first_seen_ms)); break;
      case ie::kFlowEndMilliseconds: w.u64(static_cast<std::uint64_t>(r.last_seen_ms)); break;
      case ie::kFlowStartSeconds: w.u32(static_cast<std::uint32_t>(r.first_seen_ms / 1000)); break;
      case ie::kFlowEndSeconds: w.u32(static_cast<std::uint32_t>(r.last_seen_ms / 1000)); break;
      default: break;  // rejected by encoded_record_size
    }
  }
}

// Bounds-checked cursor over one set body.
class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> data) : data_(data) {}
  std::size_t remaining() const { return data_.size() - pos_; }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (remaining() < n) malformed(what);
    const std::uint8_t* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint16_t u16(const char* what) { return bytes::load_be16(take(2, what)); }
  std::uint32_t u32(const char* what) { return bytes::load_be32(take(4, what)); }
  bool rest_is_zero() const {
    return std::all_of(data_.begin() + static_cast<std::ptrdiff_t>(pos_), data_.end(),
                       [](std::uint8_t b) { return b == 0; });
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<FieldSpec> parse_fields(Cursor& c, std::uint16_t count) {
  std::vector<FieldSpec> fields;
  fields.reserve(count);
  for (std::uint16_t i = 0; i < count; ++i) {
    FieldSpec f;
    const std::uint16_t raw_id = c.u16("template field overruns set");
    f.length = c.u16("template field overruns set");
    f.element_id = raw_id & 0x7fff;
    if (raw_id & 0x8000) f.enterprise_number = c.u32("enterprise number overruns set");
    if (f.length == 0) malformed("zero-length template field");
    fields.push_back(f);
  }
  return fields;
}

// Staged template changes for one message.
struct TemplateChange {
  std::uint16_t template_id;
  std::shared_ptr<const TemplateRecord> tmpl;  // null = withdrawn
};

struct FlowFieldMask {
  bool src_addr = false;
  bool dst_addr = false;
};

// Decodes one data record. Returns false when the template carries no flow
// addresses (record is skipped but still consumed).
// Out-of-range second counts saturate rather than overflow.
std::int64_t seconds_to_ms(std::uint64_t s) {
  constexpr std::uint64_t kMax = std::numeric_limits<std::int64_t>::max() / 1000;
  return static_cast<std::int64_t>(std::min(s, kMax)) * 1000;
}

bool decode_record(Cursor& c, const TemplateRecord& tmpl, FlowRecord& out) {
  FlowFieldMask seen;
  out = FlowRecord{};
  out.end_reason = EndReason::Eof;
  for (const auto& f : tmpl.fields) {
    std::size_t len = f.length;
    if (len == kVariableLength) {
      len = *c.take(1, "variable-length prefix overruns set");
      if (len == 255) len = c.u16("variable-length prefix overruns set");
    }
    const std::uint8_t* p = c.take(len, "data record overruns set");
    if (f.enterprise_number) continue;
    const bool small_uint = len >= 1 && len <= 8;
    switch (f.element_id) {
      case ie::kOctetDeltaCount:
        if (small_uint) out.bytes = bytes::load_be_n(p, len);
        break;
      case ie::kPacketDeltaCount:
        if (small_uint) out.packets = bytes::load_be_n(p, len);
        break;
      case ie::kProtocolIdentifier:
        if (small_uint) out.key.protocol = static_cast<std::uint8_t>(bytes::load_be_n(p, len));
        break;
      case ie::kTcpControlBits:
        if (small_uint) out.tcp_flags = static_cast<std::uint8_t>(bytes::load_be_n(p, len));
        break;
      case ie::kSourceTransportPort:
        if (small_uint) out.key.src_port = static_cast<std::uint16_t>(bytes::load_be_n(p, len));
        break;
      case ie::kDestinationTransportPort:
        if (small_uint) out.key.dst_port = static_cast<std::uint16_t>(bytes::load_be_n(p, len));
        break;
      case ie::kSourceIpv4Address:
        if (len == 4) {
          out.key.src_ip = IpAddress::v4(std::span<const std::uint8_t, 4>(p, 4));
          out.key.ip_version = 4;
          seen.src_addr = true;
        }
        break;
      case ie::kDestinationIpv4Address:
        if (len == 4) {
          out.key.dst_ip = IpAddress::v4(std::span<const std::uint8_t, 4>(p, 4));
          out.key.ip_version = 4;
          seen.dst_addr = true;
        }
        break;
      case ie::kSourceIpv6Address:
        if (len == 16) {
          out.key.src_ip = IpAddress::v6(std::span<const std::uint8_t, 16>(p, 16));
          out.key.ip_version = 6;
          seen.src_addr = true;
        }
        break;
      case ie::kDestinationIpv6Address:
        if (len == 16) {
          out.key.dst_ip = IpAddress::v6(std::span<const std::uint8_t, 16>(p, 16));
          out.key.ip_version = 6;
          seen.dst_addr = true;
        }
        break;
      case ie::kFlowStartSeconds:
        if (small_uint) out.first_seen_ms = seconds_to_ms(bytes::load_be_n(p, len));
        break;
      case ie::kFlowEndSeconds:
        if (small_uint) out.last_seen_ms = seconds_to_ms(bytes::load_be_n(p, len));
        break;
      case ie::kFlowStartMilliseconds:
        if (small_uint) out.first_seen_ms = static_cast<std::int64_t>(bytes::load_be_n(p, len));
        break;
      case ie::kFlowEndMilliseconds:
        if (small_uint) out.last_seen_ms = static_cast<std::int64_t>(bytes::load_be_n(p, len));
        break;
      default:
        break;
    }
  }
  return seen.src_addr && seen.dst_addr && out.key.src_ip.version() == out.key.dst_ip.version();
}

}  // namespace

std::size_t TemplateRecord::min_record_length() const {
  std::size_t n = 0;
  for (const auto& f : fields) n += f.length == kVariableLength ? 1 : f.length;
  return n;
}

bool TemplateRecord::has_variable_length() const {
  return std::any_of(fields.begin(), fields.end(),
                     [](const FieldSpec& f) { return f.length == kVariableLength; });
}

const TemplateRecord& canonical_template(std::uint8_t ip_version) {
  return canonical_pair()[ip_version == 6 ? 1 : 0];
}

std::span<const TemplateRecord> canonical_templates() { return canonical_pair(); }

std::size_t encoded_record_size(const TemplateRecord& tmpl) {
  if (tmpl.template_id < kMinDataSetId) mismatch("template id below 256");
  if (tmpl.fields.empty()) mismatch("template without fields");
  std::size_t n = 0;
  for (const auto& f : tmpl.fields) {
    const auto len = encodable_length(f.element_id);
    if (f.enterprise_number || !len || *len != f.length) {
      mismatch("encoder cannot fill element " + std::to_string(f.element_id) + " length " +
               std::to_string(f.length));
    }
    n += f.length;
  }
  return n;
}

std::size_t records_per_message(const TemplateRecord& tmpl, std::size_t budget) {
  const std::size_t overhead = kHeaderSize + kSetHeaderSize;
  if (budget <= overhead) return 0;
  return (budget - overhead) / encoded_record_size(tmpl);
}

std::vector<std::uint8_t> encode_message(std::span<const FlowRecord> records,
                                         const TemplateRecord& tmpl, const HeaderSeed& seed,
                                         std::size_t budget) {
  if (records.empty()) throw CodecError(CodecErrorKind::EmptyBatch, "empty record batch");
  const std::size_t record_size = encoded_record_size(tmpl);
  const auto version = template_ip_version(tmpl);
  for (const auto& r : records) {
    if (version && (r.key.ip_version != *version || r.key.src_ip.version() != *version ||
                    r.key.dst_ip.version() != *version)) {
      mismatch("record IP version does not match template " + std::to_string(tmpl.template_id));
    }
  }
  const std::size_t total = kHeaderSize + kSetHeaderSize + records.size() * record_size;
  if (total > budget || total > 0xffff) {
    throw CodecError(CodecErrorKind::MessageTooLarge,
                     "message of " + std::to_string(total) + " bytes exceeds budget");
  }

  std::vector<std::uint8_t> out;
  out.reserve(total);
  bytes::BeWriter w(out);
  w.u16(kVersion);
  w.u16(static_cast<std::uint16_t>(total));
  w.u32(seed.export_time);
  w.u32(seed.sequence);
  w.u32(seed.observation_domain_id);
  w.u16(tmpl.template_id);
  w.u16(static_cast<std::uint16_t>(total - kHeaderSize));
  for (const auto& r : records) encode_record(w, r, tmpl);
  return out;
}

std::vector<std::uint8_t> encode_template_message(std::span<const TemplateRecord> templates,
                                                  const HeaderSeed& seed, std::size_t budget) {
  if (templates.empty()) throw CodecError(CodecErrorKind::EmptyBatch, "no templates to encode");
  std::vector<std::uint8_t> out;
  bytes::BeWriter w(out);
  w.u16(kVersion);
  w.u16(0);  // patched below
  w.u32(seed.export_time);
  w.u32(seed.sequence);
  w.u32(seed.observation_domain_id);
  const std::size_t set_start = w.size();
  w.u16(kTemplateSetId);
  w.u16(0);
  for (const auto& t : templates) {
    if (t.template_id < kMinDataSetId || t.fields.empty() || t.is_options()) {
      mismatch("cannot encode template " + std::to_string(t.template_id));
    }
    w.u16(t.template_id);
    w.u16(static_cast<std::uint16_t>(t.fields.size()));
    for (const auto& f : t.fields) {
      w.u16(static_cast<std::uint16_t>(f.element_id | (f.enterprise_number ? 0x8000 : 0)));
      w.u16(f.length);
      if (f.enterprise_number) w.u32(*f.enterprise_number);
    }
  }
  if (out.size() > budget || out.size() > 0xffff) {
    throw CodecError(CodecErrorKind::MessageTooLarge, "template message exceeds budget");
  }
  w.patch_u16(2, static_cast<std::uint16_t>(out.size()));
  w.patch_u16(set_start + 2, static_cast<std::uint16_t>(out.size() - set_start));
  return out;
}

MessageHeader parse_header(std::span<const std::uint8_t> data) {
  if (data.size() < kHeaderSize) malformed("shorter than message header");
  MessageHeader h;
  h.version = bytes::load_be16(data.data());
  h.length = bytes::load_be16(data.data() + 2);
  h.export_time = bytes::load_be32(data.data() + 4);
  h.sequence = bytes::load_be32(data.data() + 8);
  h.observation_domain_id = bytes::load_be32(data.data() + 12);
  if (h.version != kVersion) malformed("version " + std::to_string(h.version));
  return h;
}

std::shared_ptr<const TemplateRecord> TemplateCache::lookup(const StreamKey& stream,
                                                            std::uint16_t template_id,
                                                            std::int64_t now_ms) const {
  std::shared_lock lock(mutex_);
  auto it = templates_.find({stream, template_id});
  if (it == templates_.end()) return nullptr;
  if (now_ms - it->second.last_refresh_ms >= lifetime_ms_) return nullptr;
  return it->second.tmpl;
}

void TemplateCache::store(const StreamKey& stream, TemplateRecord tmpl, std::int64_t now_ms) {
  const auto id = tmpl.template_id;
  auto ptr = std::make_shared<const TemplateRecord>(std::move(tmpl));
  std::unique_lock lock(mutex_);
  templates_[{stream, id}] = Slot{std::move(ptr), now_ms};
}

void TemplateCache::withdraw(const StreamKey& stream, std::uint16_t template_id) {
  std::unique_lock lock(mutex_);
  templates_.erase({stream, template_id});
}

void TemplateCache::withdraw_all(const StreamKey& stream) {
  std::unique_lock lock(mutex_);
  auto it = templates_.lower_bound({stream, 0});
  while (it != templates_.end() && it->first.first == stream) it = templates_.erase(it);
}

std::size_t TemplateCache::expire(std::int64_t now_ms) {
  std::unique_lock lock(mutex_);
  return std::erase_if(templates_, [&](const auto& kv) {
    return now_ms - kv.second.last_refresh_ms >= lifetime_ms_;
  });
}

std::size_t TemplateCache::size() const {
  std::shared_lock lock(mutex_);
  return templates_.size();
}

std::int64_t TemplateCache::observe_sequence(const StreamKey& stream, std::uint32_t sequence,
                                             std::uint32_t data_records) {
  std::unique_lock lock(mutex_);
  auto [it, inserted] = expected_sequence_.try_emplace(stream, sequence);
  // Signed modular difference so a wrapped counter is not a huge gap.
  const auto gap = static_cast<std::int32_t>(sequence - it->second);
  it->second = sequence + data_records;
  return inserted ? 0 : gap;
}

void TemplateCache::forget_sequence(const StreamKey& stream) {
  std::unique_lock lock(mutex_);
  expected_sequence_.erase(stream);
}

DecodeResult decode_message(std::span<const std::uint8_t> data, TemplateCache& cache,
                            const IpAddress& exporter, std::uint16_t exporter_port,
                            std::int64_t now_ms) {
  DecodeResult result;
  result.header = parse_header(data);
  if (result.header.length != data.size()) {
    malformed("header length " + std::to_string(result.header.length) + " != datagram size " +
              std::to_string(data.size()));
  }
  const StreamKey stream{exporter, exporter_port, result.header.observation_domain_id};

  std::vector<TemplateChange> staged;
  bool staged_withdraw_all = false;
  auto find_template = [&](std::uint16_t id) -> std::shared_ptr<const TemplateRecord> {
    for (auto it = staged.rbegin(); it != staged.rend(); ++it) {
      if (it->template_id == id) return it->tmpl;
    }
    if (staged_withdraw_all) return nullptr;
    return cache.lookup(stream, id, now_ms);
  };

  std::uint32_t data_records = 0;
  std::size_t offset = kHeaderSize;
  while (offset < data.size()) {
    if (data.size() - offset < kSetHeaderSize) malformed("trailing bytes shorter than a set header");
    const std::uint16_t set_id = bytes::load_be16(data.data() + offset);
    const std::uint16_t set_len = bytes::load_be16(data.data() + offset + 2);
    if (set_len < kSetHeaderSize) malformed("set length below 4");
    if (set_len > data.size() - offset) malformed("set overruns message");
    Cursor c(data.subspan(offset + kSetHeaderSize, set_len - kSetHeaderSize));
    offset += set_len;

    if (set_id == kTemplateSetId || set_id == kOptionsTemplateSetId) {
      const bool options = set_id == kOptionsTemplateSetId;
      while (c.remaining() >= 4) {
        if (c.rest_is_zero()) break;  // padding
        const std::uint16_t id = c.u16("template header");
        const std::uint16_t count = c.u16("template header");
        if (count == 0) {
          if (id == kTemplateSetId || id == kOptionsTemplateSetId) {
            staged.clear();
            staged_withdraw_all = true;
          } else if (id >= kMinDataSetId) {
            staged.push_back({id, nullptr});
          } else {
            malformed("withdrawal of reserved template id");
          }
          ++result.templates_withdrawn;
          continue;
        }
        if (id < kMinDataSetId) malformed("template id below 256");
        TemplateRecord t;
        t.template_id = id;
        if (options) {
          t.scope_field_count = c.u16("options template scope count");
          if (t.scope_field_count == 0 || t.scope_field_count > count) {
            malformed("options template scope count out of range");
          }
        }
        t.fields = parse_fields(c, count);
        staged.push_back({id, std::make_shared<const TemplateRecord>(std::move(t))});
        if (options) {
          ++result.options_templates_skipped;
        } else {
          ++result.templates_learned;
        }
      }
      if (c.remaining() > 0 && !c.rest_is_zero()) malformed("template set trailing bytes");
    } else if (set_id >= kMinDataSetId) {
      auto tmpl = find_template(set_id);
      if (!tmpl) {
        ++result.unknown_template_records;
        continue;
      }
      const std::size_t min_len = std::max<std::size_t>(1, tmpl->min_record_length());
      while (c.remaining() >= min_len) {
        FlowRecord r;
        const bool is_flow = decode_record(c, *tmpl, r);
        ++data_records;
        if (tmpl->is_options()) continue;
        if (is_flow) {
          result.flows.push_back(r);
        } else {
          ++result.undecodable_records;
        }
      }
    }
    // Set ids 0, 1 and 4..255 are reserved; their content is skipped.
  }

  if (staged_withdraw_all) cache.withdraw_all(stream);
  for (auto& change : staged) {
    if (change.tmpl) {
      cache.store(stream, *change.tmpl, now_ms);
    } else {
      cache.withdraw(stream, change.template_id);
    }
  }
  result.sequence_gap = cache.observe_sequence(stream, result.header.sequence, data_records);
  // Records in sets without a template cannot be counted, so the next
  // message re-seeds the expected sequence instead of reporting a gap.
  if (result.unknown_template_records > 0) cache.forget_sequence(stream);
  return result;
}

DecodeResult decode_message(std::span<const std::uint8_t> data, TemplateCache& cache,
                            const IpAddress& exporter, std::uint16_t exporter_port) {
  return decode_message(data, cache, exporter, exporter_port, wall_clock_ms());
}

}  // namespace flowkit::ipfix
