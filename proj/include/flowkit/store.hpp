#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowkit/flow.hpp"

namespace flowkit::store {

// File layout (little-endian):
//   header  magic "FSTR" | u16 format_version | u16 record_size | u64 record_count
//   body    record_count fixed-size records
inline constexpr std::array<char, 4> kMagic{'F', 'S', 'T', 'R'};
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderSize = 16;
inline constexpr std::size_t kRecordSize = 72;
// record_count while the writer still has the file open.
inline constexpr std::uint64_t kOpenSentinel = std::numeric_limits<std::uint64_t>::max();
inline constexpr std::int64_t kDefaultRotationS = 300;
inline constexpr const char* kLockFileName = ".lock";

using RecordBytes = std::array<std::uint8_t, kRecordSize>;

RecordBytes encode_record(const FlowRecord& record);
// end_reason is not persisted and decodes as Eof.
FlowRecord decode_record(std::span<const std::uint8_t, kRecordSize> bytes);

std::string file_name_for(std::int64_t window_start_ms);
// Window start (epoch ms) from a `flows.YYYYMMDDhhmm` name.
std::optional<std::int64_t> parse_file_name(std::string_view name);

enum class StoreErrorKind { IoFailure, Locked };

class StoreError : public Error {
 public:
  StoreError(StoreErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  StoreErrorKind kind() const { return kind_; }

 private:
  StoreErrorKind kind_;
};

// Single writer per directory, enforced through an flock()ed lock file.
// Files rotate at wall-clock multiples of the rotation interval.
class StoreWriter {
 public:
  explicit StoreWriter(std::filesystem::path dir, std::int64_t rotation_s = kDefaultRotationS);
  ~StoreWriter();
  StoreWriter(const StoreWriter&) = delete;
  StoreWriter& operator=(const StoreWriter&) = delete;

  void append(const FlowRecord& record, std::int64_t now_ms);
  // Writes buffered whole records to the file.
  void flush();
  // Finalizes the open file's record_count.
  void close();

  std::optional<std::filesystem::path> current_file() const;
  std::uint64_t records_written() const { return total_records_; }

 private:
  void open_window(std::int64_t window_start_ms);
  void finalize_current();

  std::filesystem::path dir_;
  std::int64_t rotation_ms_;
  int lock_fd_ = -1;
  int fd_ = -1;
  std::optional<std::int64_t> window_start_ms_;
  std::filesystem::path path_;
  std::uint64_t file_records_ = 0;
  std::uint64_t total_records_ = 0;
  std::vector<std::uint8_t> buffer_;
};

struct TimeRange {
  std::int64_t from_ms = std::numeric_limits<std::int64_t>::min();
  std::int64_t to_ms = std::numeric_limits<std::int64_t>::max();  // inclusive
};

struct ScanStats {
  std::size_t files_read = 0;
  std::size_t files_skipped = 0;     // bad magic / unreadable
  std::size_t truncated_records = 0; // trailing partial records dropped
  std::size_t count_mismatches = 0;  // finalized count disagreeing with body
  std::vector<std::string> warnings;
};

// Store files in `dir` whose window [start, start + rotation) intersects
// `range`, ordered by window start.
std::vector<std::filesystem::path> select_files(const std::filesystem::path& dir,
                                                const TimeRange& range,
                                                std::int64_t rotation_s = kDefaultRotationS);

// Reads one store file; records are passed to `sink` in file order.
void read_file(const std::filesystem::path& file, const std::function<void(const FlowRecord&)>& sink,
               ScanStats& stats);

ScanStats scan(const std::filesystem::path& dir, const TimeRange& range,
               const std::function<void(const FlowRecord&)>& sink,
               std::int64_t rotation_s = kDefaultRotationS);
std::vector<FlowRecord> scan_all(const std::filesystem::path& dir, const TimeRange& range = {},
                                 std::int64_t rotation_s = kDefaultRotationS,
                                 ScanStats* stats = nullptr);

}  // namespace flowkit::store
