// Serial reference kernels against their OpenMP counterparts.
//   flowkit_bench [--benchmark_filter=...]
#include <benchmark/benchmark.h>

#include <random>

#include "flowkit/query.hpp"

using namespace flowkit;
using namespace flowkit::query;

namespace {

const std::vector<FlowRecord>& flows() {
  static const std::vector<FlowRecord> data = [] {
    std::mt19937_64 rng(5);
    std::vector<FlowRecord> out(2'000'000);
    for (auto& f : out) {
      f.key.ip_version = 4;
      f.key.src_ip = IpAddress::v4(0x0a000000u | static_cast<std::uint32_t>(rng() % 65536));
      f.key.dst_ip = IpAddress::v4(0xc0a80000u | static_cast<std::uint32_t>(rng() % 4096));
      f.key.protocol = rng() % 4 == 0 ? 17 : 6;
      f.key.src_port = static_cast<std::uint16_t>(1024 + rng() % 60000);
      f.key.dst_port = rng() % 2 ? 443 : static_cast<std::uint16_t>(rng() % 1024);
      f.packets = 1 + rng() % 1000;
      f.bytes = f.packets * (40 + rng() % 1400);
      f.first_seen_ms = 1'735'732'800'000 + static_cast<std::int64_t>(rng() % 3'600'000);
      f.last_seen_ms = f.first_seen_ms + static_cast<std::int64_t>(rng() % 120'000);
    }
    return out;
  }();
  return data;
}

const FilterExpr& filter() {
  static const FilterExpr e =
      parse_filter("src net 10.0.0.0/12 and (dst port 443 or proto udp) and not bytes < 10000");
  return e;
}

AggregationSpec spec() { return {{KeyField::SrcIp, KeyField::DstPort}, SortMetric::Bytes, std::nullopt}; }

void BM_FilterSerial(benchmark::State& s) {
  const auto& data = flows();
  for (auto _ : s) benchmark::DoNotOptimize(filter_serial(data, filter()));
  s.SetItemsProcessed(static_cast<std::int64_t>(s.iterations() * flows().size()));
}

void BM_FilterParallel(benchmark::State& s) {
  const auto& data = flows();
  for (auto _ : s) benchmark::DoNotOptimize(filter_parallel(data, filter()));
  s.SetItemsProcessed(static_cast<std::int64_t>(s.iterations() * flows().size()));
}

void BM_AggregateSerial(benchmark::State& s) {
  const auto& data = flows();
  for (auto _ : s) benchmark::DoNotOptimize(aggregate_serial(data, spec()));
  s.SetItemsProcessed(static_cast<std::int64_t>(s.iterations() * flows().size()));
}

void BM_AggregateParallel(benchmark::State& s) {
  const auto& data = flows();
  for (auto _ : s) benchmark::DoNotOptimize(aggregate_parallel(data, spec()));
  s.SetItemsProcessed(static_cast<std::int64_t>(s.iterations() * flows().size()));
}

}  // namespace

BENCHMARK(BM_FilterSerial)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_FilterParallel)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_AggregateSerial)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_AggregateParallel)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
