#include "flowkit/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"

namespace flowkit::pipeline {

using nlohmann::json;

namespace {

std::string json_string(const std::string& s) {
  return json(s).dump(-1, ' ', false, json::error_handler_t::replace);
}

IpAddress parse_ip_field(const json& j, const char* key) {
  const auto text = j.at(key).get<std::string>();
  auto addr = IpAddress::parse(text);
  if (!addr) throw std::invalid_argument(std::string("invalid ") + key + " '" + text + "'");
  return *addr;
}

}  // namespace

std::string to_jsonl(const EnrichedFlow& e) {
  const FlowRecord& f = e.flow;
  std::string out;
  out.reserve(256);
  out += "{\"type\":\"flow\",\"time_first_ms\":";
  out += std::to_string(f.first_seen_ms);
  out += ",\"time_last_ms\":";
  out += std::to_string(f.last_seen_ms);
  out += ",\"src_ip\":\"";
  out += f.key.src_ip.to_string();
  out += "\",\"dst_ip\":\"";
  out += f.key.dst_ip.to_string();
  out += "\",\"src_port\":";
  out += std::to_string(f.key.src_port);
  out += ",\"dst_port\":";
  out += std::to_string(f.key.dst_port);
  out += ",\"proto\":";
  out += std::to_string(f.key.protocol);
  out += ",\"tcp_flags\":";
  out += std::to_string(f.tcp_flags);
  out += ",\"packets\":";
  out += std::to_string(f.packets);
  out += ",\"bytes\":";
  out += std::to_string(f.bytes);
  if (e.src_label) {
    out += ",\"src_label\":";
    out += json_string(*e.src_label);
  }
  if (e.dst_label) {
    out += ",\"dst_label\":";
    out += json_string(*e.dst_label);
  }
  out += "}\n";
  return out;
}

EnrichedFlow from_jsonl(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("invalid JSON flow line: ") + e.what());
  }
  try {
    if (!j.is_object() || j.value("type", "") != "flow") {
      throw std::invalid_argument("JSON line is not a flow record");
    }
    EnrichedFlow e;
    FlowRecord& f = e.flow;
    f.first_seen_ms = j.at("time_first_ms").get<std::int64_t>();
    f.last_seen_ms = j.at("time_last_ms").get<std::int64_t>();
    f.key.src_ip = parse_ip_field(j, "src_ip");
    f.key.dst_ip = parse_ip_field(j, "dst_ip");
    if (f.key.src_ip.version() != f.key.dst_ip.version()) {
      throw std::invalid_argument("mixed address families in flow line");
    }
    f.key.ip_version = f.key.src_ip.version();
    f.key.src_port = j.at("src_port").get<std::uint16_t>();
    f.key.dst_port = j.at("dst_port").get<std::uint16_t>();
    f.key.protocol = j.at("proto").get<std::uint8_t>();
    f.tcp_flags = j.at("tcp_flags").get<std::uint8_t>();
    f.packets = j.at("packets").get<std::uint64_t>();
    f.bytes = j.at("bytes").get<std::uint64_t>();
    if (j.contains("src_label")) e.src_label = j["src_label"].get<std::string>();
    if (j.contains("dst_label")) e.dst_label = j["dst_label"].get<std::string>();
    return e;
  } catch (const json::exception& ex) {
    throw std::invalid_argument(std::string("invalid flow line: ") + ex.what());
  }
}

FlowRecord anonymize(const FlowRecord& flow, unsigned v4_bits, unsigned v6_bits) {
  if (v4_bits > 32) throw InvalidMaskLength("IPv4 mask length " + std::to_string(v4_bits) + " > 32");
  if (v6_bits > 128) throw InvalidMaskLength("IPv6 mask length " + std::to_string(v6_bits) + " > 128");
  FlowRecord out = flow;
  auto mask = [&](const IpAddress& a) { return a.masked(a.is_v4() ? v4_bits : v6_bits); };
  out.key.src_ip = mask(flow.key.src_ip);
  out.key.dst_ip = mask(flow.key.dst_ip);
  return out;
}

TableParseError::TableParseError(std::size_t line, const std::string& what)
    : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

void CidrTable::insert(const Prefix& prefix, std::string label) {
  auto& levels = prefix.network.is_v4() ? v4_ : v6_;
  auto [it, inserted] = levels[prefix.length].try_emplace(prefix.network, std::move(label));
  if (!inserted) throw TableParseError(0, "duplicate prefix " + prefix.to_string());
  ++size_;
}

const std::string* CidrTable::lookup(const IpAddress& address) const {
  const auto& levels = address.is_v4() ? v4_ : v6_;
  for (int len = static_cast<int>(levels.size()) - 1; len >= 0; --len) {
    const auto& level = levels[static_cast<std::size_t>(len)];
    if (level.empty()) continue;
    auto it = level.find(address.masked(static_cast<unsigned>(len)));
    if (it != level.end()) return &it->second;
  }
  return nullptr;
}

CidrTable CidrTable::parse(std::istream& in) {
  CidrTable table;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto tab = line.find('\t', first);
    if (tab == std::string::npos) throw TableParseError(number, "expected CIDR<TAB>label");
    const auto cidr = std::string_view(line).substr(first, tab - first);
    std::string label = line.substr(tab + 1);
    if (label.empty()) throw TableParseError(number, "empty label");
    Prefix prefix;
    try {
      prefix = Prefix::parse(cidr);
    } catch (const InvalidCidr& e) {
      throw TableParseError(number, e.what());
    }
    try {
      table.insert(prefix, std::move(label));
    } catch (const TableParseError& e) {
      throw TableParseError(number, e.what());
    }
  }
  return table;
}

CidrTable CidrTable::parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse(in);
}

CidrTable CidrTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TableParseError(0, "cannot open " + path.string());
  return parse(in);
}

EnrichedFlow enrich(EnrichedFlow flow, const CidrTable& table) {
  if (const auto* s = table.lookup(flow.flow.key.src_ip)) {
    flow.src_label = *s;
  } else {
    flow.src_label.reset();
  }
  if (const auto* d = table.lookup(flow.flow.key.dst_ip)) {
    flow.dst_label = *d;
  } else {
    flow.dst_label.reset();
  }
  return flow;
}

MetricsState::MetricsState(MetricsConfig cfg) : cfg_(std::move(cfg)), window_ms_(cfg_.window_s * 1000) {
  if (cfg_.window_s <= 0) throw std::invalid_argument("metrics window must be positive");
  std::sort(cfg_.key_fields.begin(), cfg_.key_fields.end(),
            [](auto a, auto b) { return query::to_string(a) < query::to_string(b); });
}

std::int64_t MetricsState::align(std::int64_t t) const {
  std::int64_t start = t / window_ms_ * window_ms_;
  if (t < 0 && t % window_ms_ != 0) start -= window_ms_;
  return start;
}

std::string MetricsState::labels_of(const FlowRecord& flow) const {
  const auto key = query::group_key_of(flow, cfg_.key_fields);
  std::string out;
  for (auto f : cfg_.key_fields) {
    if (!out.empty()) out += ',';
    out += query::to_string(f);
    out += "=\"";
    switch (f) {
      case query::KeyField::SrcIp: out += key.src_ip.to_string(); break;
      case query::KeyField::DstIp: out += key.dst_ip.to_string(); break;
      case query::KeyField::SrcPort: out += std::to_string(key.src_port); break;
      case query::KeyField::DstPort: out += std::to_string(key.dst_port); break;
      case query::KeyField::Proto: out += std::to_string(key.protocol); break;
    }
    out += '"';
  }
  return out;
}

std::optional<std::string> MetricsState::close() {
  if (!window_start_ || groups_.empty()) {
    groups_.clear();
    return std::nullopt;
  }
  const std::string ts = std::to_string(*window_start_);
  std::string out;
  auto family = [&](const char* name, auto value_of) {
    for (const auto& [labels, sums] : groups_) {
      out += name;
      out += '{';
      out += labels;
      out += "} ";
      out += std::to_string(value_of(sums));
      out += ' ';
      out += ts;
      out += '\n';
    }
  };
  family("flows_total", [](const Sums& s) { return s.flows; });
  family("packets_total", [](const Sums& s) { return s.packets; });
  family("bytes_total", [](const Sums& s) { return s.bytes; });
  groups_.clear();
  return out;
}

std::optional<std::string> MetricsState::step(const FlowRecord& flow, std::int64_t now_ms) {
  const std::int64_t event = flow.last_seen_ms;
  const std::int64_t watermark = std::max(now_ms, event);
  std::optional<std::string> emitted;
  if (!window_start_) {
    window_start_ = align(watermark);
  } else if (watermark >= *window_start_ + window_ms_) {
    emitted = close();
    window_start_ = align(watermark);
  }
  if (event < *window_start_) ++late_flows_;
  Sums& s = groups_[labels_of(flow)];
  s.flows += 1;
  s.packets += flow.packets;
  s.bytes += flow.bytes;
  return emitted;
}

std::optional<std::string> MetricsState::advance(std::int64_t now_ms) {
  if (!window_start_ || now_ms < *window_start_ + window_ms_) return std::nullopt;
  auto emitted = close();
  window_start_ = align(now_ms);
  return emitted;
}

std::optional<std::string> MetricsState::finish() {
  auto emitted = close();
  window_start_.reset();
  return emitted;
}

// ---- config ---------------------------------------------------------------

namespace {

std::vector<query::KeyField> key_fields_from(const json& j) {
  if (j.is_null()) return {};
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    return s.empty() ? std::vector<query::KeyField>{} : query::parse_key_fields(s);
  }
  std::string joined;
  for (const auto& item : j) {
    if (!joined.empty()) joined += ',';
    joined += item.get<std::string>();
  }
  return joined.empty() ? std::vector<query::KeyField>{} : query::parse_key_fields(joined);
}

PipelineConfig parse_config(const json& doc, const std::filesystem::path& base_dir) {
  if (!doc.is_object() || !doc.contains("stages") || !doc["stages"].is_array()) {
    throw std::invalid_argument("pipeline config needs a \"stages\" array");
  }
  PipelineConfig cfg;
  for (const auto& s : doc["stages"]) {
    const auto type = s.at("type").get<std::string>();
    if (type == "serialize") {
      cfg.stages.push_back(SerializeStage{s.value("output", std::string("-"))});
    } else if (type == "enrich") {
      std::filesystem::path file = s.at("cidr_file").get<std::string>();
      if (file.is_relative() && !base_dir.empty()) file = base_dir / file;
      cfg.stages.push_back(EnrichStage{file.string()});
    } else if (type == "anonymize") {
      const auto v4 = s.value("v4_bits", 24);
      const auto v6 = s.value("v6_bits", 48);
      if (v4 < 0 || v4 > 32 || v6 < 0 || v6 > 128) {
        throw InvalidMaskLength("anonymize stage mask length out of range");
      }
      cfg.stages.push_back(AnonymizeStage{static_cast<unsigned>(v4), static_cast<unsigned>(v6)});
    } else if (type == "metrics") {
      MetricsStage m;
      m.window_s = s.value("window_s", std::int64_t{60});
      if (m.window_s <= 0) throw std::invalid_argument("metrics window_s must be positive");
      m.key_fields = key_fields_from(s.contains("key_fields") ? s["key_fields"] : json());
      m.output = s.value("output", std::string("-"));
      cfg.stages.push_back(std::move(m));
    } else {
      throw std::invalid_argument("unknown pipeline stage type '" + type + "'");
    }
  }
  const auto serializers = std::count_if(cfg.stages.begin(), cfg.stages.end(), [](const Stage& s) {
    return std::holds_alternative<SerializeStage>(s);
  });
  if (serializers > 1) throw std::invalid_argument("at most one serialize stage is allowed");
  if (serializers == 1 && !std::holds_alternative<SerializeStage>(cfg.stages.back())) {
    throw std::invalid_argument("serialize must be the last stage");
  }
  return cfg;
}

}  // namespace

PipelineConfig PipelineConfig::parse(std::string_view json_text) {
  try {
    return parse_config(json::parse(json_text), {});
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("pipeline config: ") + e.what());
  }
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open pipeline config " + path.string());
  try {
    return parse_config(json::parse(in), path.parent_path());
  } catch (const json::exception& e) {
    throw std::invalid_argument("pipeline config " + path.string() + ": " + e.what());
  }
}

// ---- runtime ----------------------------------------------------------------

struct Pipeline::Impl {
  struct Output {
    std::unique_ptr<std::ofstream> file;
    std::ostream* stream = nullptr;
  };
  struct Runtime {
    Stage stage;
    std::optional<CidrTable> table;
    std::optional<MetricsState> metrics;
    Output output;
  };

  std::vector<Runtime> stages;
  std::ostream* stdout_stream;
  std::uint64_t flows_in = 0;

  Output open_output(const std::string& target) {
    Output o;
    if (target == "-") {
      o.stream = stdout_stream;
    } else {
      o.file = std::make_unique<std::ofstream>(target, std::ios::trunc);
      if (!*o.file) throw std::invalid_argument("cannot open pipeline output " + target);
      o.stream = o.file.get();
    }
    return o;
  }
};

Pipeline::Pipeline(const PipelineConfig& config, std::ostream* stdout_stream)
    : impl_(std::make_unique<Impl>()) {
  impl_->stdout_stream = stdout_stream ? stdout_stream : &std::cout;
  for (const auto& stage : config.stages) {
    Impl::Runtime rt{stage, std::nullopt, std::nullopt, {}};
    if (const auto* e = std::get_if<EnrichStage>(&stage)) {
      rt.table = CidrTable::load(e->cidr_file);
    } else if (const auto* m = std::get_if<MetricsStage>(&stage)) {
      rt.metrics.emplace(MetricsConfig{m->window_s, m->key_fields});
      rt.output = impl_->open_output(m->output);
    } else if (const auto* s = std::get_if<SerializeStage>(&stage)) {
      rt.output = impl_->open_output(s->output);
    } else if (const auto* a = std::get_if<AnonymizeStage>(&stage)) {
      if (a->v4_bits > 32 || a->v6_bits > 128) throw InvalidMaskLength("anonymize mask length out of range");
    }
    impl_->stages.push_back(std::move(rt));
  }
}

Pipeline::~Pipeline() {
  if (impl_) finish();
}
Pipeline::Pipeline(Pipeline&&) noexcept = default;
Pipeline& Pipeline::operator=(Pipeline&&) noexcept = default;

void Pipeline::push(const FlowRecord& flow) { push(EnrichedFlow{flow, std::nullopt, std::nullopt}); }

void Pipeline::push(EnrichedFlow flow) {
  ++impl_->flows_in;
  for (auto& rt : impl_->stages) {
    if (rt.table) {
      flow = enrich(std::move(flow), *rt.table);
    } else if (const auto* a = std::get_if<AnonymizeStage>(&rt.stage)) {
      flow.flow = anonymize(flow.flow, a->v4_bits, a->v6_bits);
    } else if (rt.metrics) {
      if (auto text = rt.metrics->step(flow.flow, flow.flow.last_seen_ms)) *rt.output.stream << *text;
    } else if (rt.output.stream) {
      *rt.output.stream << to_jsonl(flow);
    }
  }
}

void Pipeline::advance(std::int64_t now_ms) {
  for (auto& rt : impl_->stages) {
    if (!rt.metrics) continue;
    if (auto text = rt.metrics->advance(now_ms)) {
      *rt.output.stream << *text;
      rt.output.stream->flush();
    }
  }
}

void Pipeline::finish() {
  for (auto& rt : impl_->stages) {
    if (rt.metrics) {
      if (auto text = rt.metrics->finish()) *rt.output.stream << *text;
    }
    if (rt.output.stream) rt.output.stream->flush();
  }
}

std::uint64_t Pipeline::flows_in() const { return impl_->flows_in; }

std::uint64_t Pipeline::late_flows() const {
  std::uint64_t n = 0;
  for (const auto& rt : impl_->stages) {
    if (rt.metrics) n += rt.metrics->late_flows();
  }
  return n;
}

}  // namespace flowkit::pipeline
