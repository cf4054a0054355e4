#include "flowkit/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <ctime>
#include <fstream>

#include "flowkit/bytes.hpp"
#include "flowkit/log.hpp"

namespace flowkit::store {
namespace {

constexpr std::size_t kFlushThresholdRecords = 256;
constexpr std::string_view kFilePrefix = "flows.";

[[noreturn]] void io_failure(const std::string& what) {
  throw StoreError(StoreErrorKind::IoFailure, what + ": " + std::strerror(errno));
}

void write_all(int fd, const std::uint8_t* data, std::size_t size, const std::string& path) {
  while (size > 0) {
    const ssize_t n = ::write(fd, data, size);
    if (n < 0) {
      if (errno == EINTR) continue;
      io_failure("write " + path);
    }
    data += n;
    size -= static_cast<std::size_t>(n);
  }
}

std::array<std::uint8_t, kHeaderSize> make_header(std::uint64_t count) {
  std::array<std::uint8_t, kHeaderSize> h{};
  std::memcpy(h.data(), kMagic.data(), 4);
  bytes::store_le16(h.data() + 4, kFormatVersion);
  bytes::store_le16(h.data() + 6, static_cast<std::uint16_t>(kRecordSize));
  bytes::store_le64(h.data() + 8, count);
  return h;
}

bool header_valid(std::span<const std::uint8_t> h) {
  return h.size() >= kHeaderSize && std::memcmp(h.data(), kMagic.data(), 4) == 0 &&
         bytes::load_le16(h.data() + 4) == kFormatVersion &&
         bytes::load_le16(h.data() + 6) == kRecordSize;
}

}  // namespace

RecordBytes encode_record(const FlowRecord& r) {
  RecordBytes b{};
  bytes::store_le64(b.data(), static_cast<std::uint64_t>(r.first_seen_ms));
  bytes::store_le64(b.data() + 8, static_cast<std::uint64_t>(r.last_seen_ms));
  std::memcpy(b.data() + 16, r.key.src_ip.mapped().data(), 16);
  std::memcpy(b.data() + 32, r.key.dst_ip.mapped().data(), 16);
  bytes::store_le16(b.data() + 48, r.key.src_port);
  bytes::store_le16(b.data() + 50, r.key.dst_port);
  b[52] = r.key.protocol;
  b[53] = r.tcp_flags;
  b[54] = r.key.ip_version;
  b[55] = 0;
  bytes::store_le64(b.data() + 56, r.packets);
  bytes::store_le64(b.data() + 64, r.bytes);
  return b;
}

FlowRecord decode_record(std::span<const std::uint8_t, kRecordSize> b) {
  FlowRecord r;
  r.first_seen_ms = static_cast<std::int64_t>(bytes::load_le64(b.data()));
  r.last_seen_ms = static_cast<std::int64_t>(bytes::load_le64(b.data() + 8));
  r.key.ip_version = b[54] == 6 ? 6 : 4;
  auto addr = [&](std::size_t off) {
    if (r.key.ip_version == 4) {
      return IpAddress::v4(std::span<const std::uint8_t, 4>(b.data() + off + 12, 4));
    }
    return IpAddress::v6(std::span<const std::uint8_t, 16>(b.data() + off, 16));
  };
  r.key.src_ip = addr(16);
  r.key.dst_ip = addr(32);
  r.key.src_port = bytes::load_le16(b.data() + 48);
  r.key.dst_port = bytes::load_le16(b.data() + 50);
  r.key.protocol = b[52];
  r.tcp_flags = b[53];
  r.packets = bytes::load_le64(b.data() + 56);
  r.bytes = bytes::load_le64(b.data() + 64);
  r.end_reason = EndReason::Eof;
  return r;
}

std::string file_name_for(std::int64_t window_start_ms) {
  const std::time_t t = static_cast<std::time_t>(window_start_ms / 1000);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "flows.%Y%m%d%H%M", &tm);
  return buf;
}

std::optional<std::int64_t> parse_file_name(std::string_view name) {
  if (name.size() != kFilePrefix.size() + 12 || !name.starts_with(kFilePrefix)) return std::nullopt;
  auto digits = name.substr(kFilePrefix.size());
  if (!std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return std::nullopt;
  }
  auto num = [&](std::size_t pos, std::size_t len) {
    int v = 0;
    for (std::size_t i = pos; i < pos + len; ++i) v = v * 10 + (digits[i] - '0');
    return v;
  };
  std::tm tm{};
  tm.tm_year = num(0, 4) - 1900;
  tm.tm_mon = num(4, 2) - 1;
  tm.tm_mday = num(6, 2);
  tm.tm_hour = num(8, 2);
  tm.tm_min = num(10, 2);
  if (tm.tm_mon < 0 || tm.tm_mon > 11 || tm.tm_mday < 1 || tm.tm_mday > 31 || tm.tm_hour > 23 ||
      tm.tm_min > 59) {
    return std::nullopt;
  }
  return static_cast<std::int64_t>(timegm(&tm)) * 1000;
}

StoreWriter::StoreWriter(std::filesystem::path dir, std::int64_t rotation_s)
    : dir_(std::move(dir)), rotation_ms_(rotation_s * 1000) {
  if (rotation_s <= 0) throw std::invalid_argument("rotation interval must be positive");
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw StoreError(StoreErrorKind::IoFailure, "create " + dir_.string() + ": " + ec.message());
  const auto lock_path = dir_ / kLockFileName;
  lock_fd_ = ::open(lock_path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (lock_fd_ < 0) io_failure("open " + lock_path.string());
  if (::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw StoreError(StoreErrorKind::Locked, dir_.string() + " already has a writer");
  }
  buffer_.reserve(kFlushThresholdRecords * kRecordSize);
}

StoreWriter::~StoreWriter() {
  try {
    close();
  } catch (const std::exception& e) {
    log::error("store", "finalize failed", {{"error", e.what()}});
  }
  if (lock_fd_ >= 0) ::close(lock_fd_);
}

std::optional<std::filesystem::path> StoreWriter::current_file() const {
  if (fd_ < 0) return std::nullopt;
  return path_;
}

void StoreWriter::open_window(std::int64_t window_start_ms) {
  path_ = dir_ / file_name_for(window_start_ms);
  fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) io_failure("open " + path_.string());
  struct stat st {};
  ::fstat(fd_, &st);
  file_records_ = 0;

  std::array<std::uint8_t, kHeaderSize> existing{};
  const bool reopen = st.st_size >= static_cast<off_t>(kHeaderSize) &&
                      ::pread(fd_, existing.data(), kHeaderSize, 0) == static_cast<ssize_t>(kHeaderSize) &&
                      header_valid(existing);
  if (reopen) {
    // Same window after a restart: continue the file, dropping a torn tail.
    file_records_ = (static_cast<std::uint64_t>(st.st_size) - kHeaderSize) / kRecordSize;
    const off_t end = static_cast<off_t>(kHeaderSize + file_records_ * kRecordSize);
    if (::ftruncate(fd_, end) != 0) io_failure("truncate " + path_.string());
  } else if (::ftruncate(fd_, 0) != 0) {
    io_failure("truncate " + path_.string());
  }
  const auto header = make_header(kOpenSentinel);
  if (::pwrite(fd_, header.data(), header.size(), 0) != static_cast<ssize_t>(header.size())) {
    io_failure("write header " + path_.string());
  }
  if (::lseek(fd_, 0, SEEK_END) < 0) io_failure("seek " + path_.string());
  window_start_ms_ = window_start_ms;
}

void StoreWriter::flush() {
  if (fd_ < 0 || buffer_.empty()) return;
  write_all(fd_, buffer_.data(), buffer_.size(), path_.string());
  buffer_.clear();
}

void StoreWriter::finalize_current() {
  if (fd_ < 0) return;
  flush();
  std::array<std::uint8_t, 8> count{};
  bytes::store_le64(count.data(), file_records_);
  if (::pwrite(fd_, count.data(), count.size(), 8) != static_cast<ssize_t>(count.size())) {
    io_failure("finalize " + path_.string());
  }
  ::fdatasync(fd_);
  ::close(fd_);
  fd_ = -1;
  window_start_ms_.reset();
}

void StoreWriter::close() { finalize_current(); }

void StoreWriter::append(const FlowRecord& record, std::int64_t now_ms) {
  std::int64_t window = now_ms / rotation_ms_ * rotation_ms_;
  if (now_ms < 0 && now_ms % rotation_ms_ != 0) window -= rotation_ms_;
  if (!window_start_ms_ || *window_start_ms_ != window) {
    finalize_current();
    open_window(window);
  }
  const auto bytes = encode_record(record);
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
  ++file_records_;
  ++total_records_;
  if (buffer_.size() >= kFlushThresholdRecords * kRecordSize) flush();
}

std::vector<std::filesystem::path> select_files(const std::filesystem::path& dir,
                                                const TimeRange& range, std::int64_t rotation_s) {
  std::vector<std::pair<std::int64_t, std::filesystem::path>> found;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
    if (!entry.is_regular_file()) continue;
    const auto start = parse_file_name(entry.path().filename().string());
    if (!start) continue;
    const std::int64_t end = *start + rotation_s * 1000;  // exclusive
    if (*start <= range.to_ms && end > range.from_ms) found.emplace_back(*start, entry.path());
  }
  std::sort(found.begin(), found.end());
  std::vector<std::filesystem::path> files;
  files.reserve(found.size());
  for (auto& [start, path] : found) files.push_back(std::move(path));
  return files;
}

void read_file(const std::filesystem::path& file, const std::function<void(const FlowRecord&)>& sink,
               ScanStats& stats) {
  std::ifstream in(file, std::ios::binary);
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof()) {
    ++stats.files_skipped;
    stats.warnings.push_back("unreadable store file " + file.string());
    return;
  }
  if (!header_valid(data)) {
    ++stats.files_skipped;
    stats.warnings.push_back("bad magic or header in " + file.string());
    return;
  }
  ++stats.files_read;
  const std::size_t body = data.size() - kHeaderSize;
  std::uint64_t records = body / kRecordSize;
  if (body % kRecordSize != 0) {
    ++stats.truncated_records;
    stats.warnings.push_back("trailing partial record truncated in " + file.string());
  }
  const std::uint64_t declared = bytes::load_le64(data.data() + 8);
  if (declared != kOpenSentinel && declared != records) {
    ++stats.count_mismatches;
    stats.warnings.push_back("record_count " + std::to_string(declared) + " disagrees with body of " +
                             std::to_string(records) + " records in " + file.string());
    records = std::min(records, declared);
  }
  for (std::uint64_t i = 0; i < records; ++i) {
    sink(decode_record(std::span<const std::uint8_t, kRecordSize>(
        data.data() + kHeaderSize + i * kRecordSize, kRecordSize)));
  }
}

ScanStats scan(const std::filesystem::path& dir, const TimeRange& range,
               const std::function<void(const FlowRecord&)>& sink, std::int64_t rotation_s) {
  ScanStats stats;
  for (const auto& file : select_files(dir, range, rotation_s)) read_file(file, sink, stats);
  for (const auto& w : stats.warnings) log::warn("store", w);
  return stats;
}

std::vector<FlowRecord> scan_all(const std::filesystem::path& dir, const TimeRange& range,
                                 std::int64_t rotation_s, ScanStats* stats) {
  std::vector<FlowRecord> out;
  auto s = scan(dir, range, [&](const FlowRecord& r) { out.push_back(r); }, rotation_s);
  if (stats) *stats = std::move(s);
  return out;
}

}  // namespace flowkit::store
