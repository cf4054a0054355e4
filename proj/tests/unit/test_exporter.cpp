#include <random>

#include "doctest.h"
#include "flowkit/bytes.hpp"
#include "flowkit/exporter.hpp"
#include "support.hpp"

using namespace flowkit;

namespace {

constexpr std::int64_t kT0 = 1'735'732'800'000;

bool is_template_message(const Datagram& d) { return bytes::load_be16(&d[16]) == ipfix::kTemplateSetId; }
std::uint32_t sequence_of(const Datagram& d) { return bytes::load_be32(&d[8]); }

FlowRecord v4_flow(std::uint16_t port) {
  return fk_test::flow("10.0.0.1", "10.0.0.2", 17, port, 53, 1, 60);
}

}  // namespace

TEST_CASE("the first export is preceded by the templates") {
  ExporterState ex;
  CHECK(ex.submit(v4_flow(1), kT0).empty());
  auto out = ex.flush(kT0);
  REQUIRE(out.size() == 2);
  CHECK(is_template_message(out[0]));
  CHECK_FALSE(is_template_message(out[1]));
  CHECK(sequence_of(out[0]) == 0);
  CHECK(sequence_of(out[1]) == 0);
  CHECK(ex.sequence() == 1);
  CHECK(ex.template_messages() == 1);
  CHECK(ex.flush(kT0).empty());
}

TEST_CASE("batches respect the size budget and keep order") {
  ExporterState ex;
  std::vector<FlowRecord> sent;
  std::vector<Datagram> out;
  for (int i = 0; i < 200; ++i) {
    sent.push_back(v4_flow(static_cast<std::uint16_t>(i)));
    auto d = ex.submit(sent.back(), kT0);
    out.insert(out.end(), d.begin(), d.end());
  }
  auto rest = ex.flush(kT0);
  out.insert(out.end(), rest.begin(), rest.end());

  ipfix::TemplateCache cache;
  std::vector<FlowRecord> received;
  std::uint32_t expected_seq = 0;
  for (const auto& d : out) {
    CHECK(d.size() <= ipfix::kMaxMessageSize);
    auto r = ipfix::decode_message(d, cache, fk_test::ip("127.0.0.1"), 1, kT0);
    CHECK(r.sequence_gap == 0);
    if (!is_template_message(d)) {
      CHECK(sequence_of(d) == expected_seq);
      expected_seq += static_cast<std::uint32_t>(r.flows.size());
    }
    received.insert(received.end(), r.flows.begin(), r.flows.end());
  }
  REQUIRE(received.size() == 200);
  for (std::size_t i = 0; i < 200; ++i) CHECK(same_flow_data(received[i], sent[i]));
  CHECK(ex.sequence() == 200);
  CHECK(ex.records_exported() == 200);
  // 200 = 6 * 31 + 14
  CHECK(out.size() == 1 + 7);
}

TEST_CASE("IPv4 and IPv6 are batched separately") {
  ExporterState ex;
  ex.submit(v4_flow(1), kT0);
  ex.submit(fk_test::flow("2001:db8::1", "2001:db8::2", 6, 1, 2, 1, 60), kT0);
  auto out = ex.flush(kT0);
  REQUIRE(out.size() == 3);
  CHECK(bytes::load_be16(&out[1][16]) == ipfix::kTemplateIdV4);
  CHECK(bytes::load_be16(&out[2][16]) == ipfix::kTemplateIdV6);
  CHECK(sequence_of(out[2]) == 1);
}

TEST_CASE("linger flushes partial batches") {
  ExporterState ex;
  ex.submit(v4_flow(1), kT0);
  CHECK(ex.tick(kT0 + 999).empty());
  auto out = ex.tick(kT0 + 1000);
  REQUIRE(out.size() == 2);
  CHECK(ex.pending() == 0);
  CHECK(ex.tick(kT0 + 5000).empty());
}

TEST_CASE("templates are refreshed on time") {
  ExporterState ex;
  ex.submit(v4_flow(1), kT0);
  ex.flush(kT0);
  CHECK(ex.tick(kT0 + 599'999).empty());
  auto out = ex.tick(kT0 + 600'000);
  REQUIRE(out.size() == 1);
  CHECK(is_template_message(out[0]));
  CHECK(sequence_of(out[0]) == 1);
  CHECK(ex.sequence() == 1);  // template messages carry no data records
}

TEST_CASE("templates are refreshed by record count") {
  ExporterConfig cfg;
  cfg.template_refresh_ms = 1'000'000'000;
  ExporterState ex(cfg);
  std::size_t templates_seen = 0;
  std::uint64_t records_before_second_template = 0;
  std::uint64_t data_records = 0;
  for (int i = 0; i < 5000; ++i) {
    for (const auto& d : ex.submit(v4_flow(static_cast<std::uint16_t>(i)), kT0 + i)) {
      if (is_template_message(d)) {
        if (++templates_seen == 2) records_before_second_template = data_records;
      } else {
        data_records += (d.size() - 20) / 46;
      }
    }
  }
  CHECK(templates_seen == 2);
  CHECK(records_before_second_template >= 4096);
  CHECK(records_before_second_template < 4096 + 31);
}

TEST_CASE("configured observation domain is stamped on every message") {
  ExporterConfig cfg;
  cfg.observation_domain_id = 77;
  ExporterState ex(cfg);
  ex.submit(v4_flow(1), kT0);
  for (const auto& d : ex.flush(kT0)) CHECK(bytes::load_be32(&d[12]) == 77u);
}

TEST_CASE("a budget too small for one record is rejected") {
  ExporterConfig cfg;
  cfg.max_message_size = 60;
  CHECK_THROWS_AS(ExporterState{cfg}, std::invalid_argument);
}
