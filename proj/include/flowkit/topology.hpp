#pragma once

#include <sys/types.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flowkit/udp.hpp"

namespace flowkit::topology {

class SpawnFailure : public Error {
 public:
  using Error::Error;
};

class PortInUse : public Error {
 public:
  using Error::Error;
};

// Child process handle. Destroying a running handle kills the child.
class Process {
 public:
  Process() = default;
  Process(std::string name, pid_t pid) : name_(std::move(name)), pid_(pid) {}
  ~Process();
  Process(Process&& other) noexcept;
  Process& operator=(Process&& other) noexcept;
  Process(const Process&) = delete;
  Process& operator=(const Process&) = delete;

  // Exit status (128 + signal for signalled children), or nullopt if still
  // running after `timeout_ms`. A negative timeout waits indefinitely.
  std::optional<int> wait(int timeout_ms = -1);
  bool running();
  void terminate();  // SIGTERM
  void kill();       // SIGKILL
  pid_t pid() const { return pid_; }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  pid_t pid_ = -1;
  std::optional<int> status_;
};

// Starts argv[0] with the given arguments. stdout and stderr go to
// `log_file` when set.
Process spawn(const std::string& name, const std::vector<std::string>& argv,
              const std::optional<std::filesystem::path>& log_file = {});

struct MeterNode {
  std::filesystem::path pcap;
  std::uint32_t idle_s = 15;
  std::uint32_t active_s = 300;
  std::uint32_t odid = 0;
};

struct CollectorNode {
  Endpoint listen;
  std::filesystem::path store;
};

// meters -> tee -> collectors, all on the local host.
struct TopologyConfig {
  std::filesystem::path binary;
  std::vector<MeterNode> meters;
  Endpoint tee_listen;
  std::vector<CollectorNode> collectors;
  std::int64_t rotation_s = 300;
  std::optional<std::filesystem::path> log_dir;

  // {"binary": ..., "meters": [{"pcap": ..., "idle_s": 15, "active_s": 300,
  //  "odid": 1}], "tee": "127.0.0.1:4739", "collectors": [{"listen": ...,
  //  "store": ...}], "rotation_s": 300, "log_dir": ...}
  static TopologyConfig parse(std::string_view json_text);
  static TopologyConfig load(const std::filesystem::path& path);
  // Throws PortInUse for duplicate or already bound listen endpoints.
  void validate() const;
};

struct Topology {
  std::vector<Process> collectors;
  Process tee;
  std::vector<Process> meters;
};

// Launches collectors, then the tee, then the meters. Each listener is
// running and bound before the next role starts.
Topology run_topology(const TopologyConfig& config);

// Waits for the meters to exit, lets in-flight datagrams settle, then stops
// the tee and the collectors. Returns true when every role exited with 0.
bool finish_topology(Topology& topology, int settle_ms = 500);

// True once `endpoint` cannot be bound, i.e. some process listens on it.
bool endpoint_bound(const Endpoint& endpoint);

}  // namespace flowkit::topology
