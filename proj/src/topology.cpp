#include "flowkit/topology.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <set>
#include <thread>

#include "flowkit/log.hpp"
#include "json.hpp"

namespace flowkit::topology {

using nlohmann::json;

Process::~Process() {
  if (pid_ > 0 && !status_) {
    kill();
    wait();
  }
}

Process::Process(Process&& other) noexcept
    : name_(std::move(other.name_)), pid_(other.pid_), status_(other.status_) {
  other.pid_ = -1;
}

Process& Process::operator=(Process&& other) noexcept {
  if (this != &other) {
    if (pid_ > 0 && !status_) {
      kill();
      wait();
    }
    name_ = std::move(other.name_);
    pid_ = other.pid_;
    status_ = other.status_;
    other.pid_ = -1;
  }
  return *this;
}

std::optional<int> Process::wait(int timeout_ms) {
  if (status_ || pid_ <= 0) return status_;
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  while (true) {
    int st = 0;
    const pid_t r = ::waitpid(pid_, &st, timeout_ms < 0 ? 0 : WNOHANG);
    if (r == pid_) {
      status_ = WIFEXITED(st) ? WEXITSTATUS(st) : 128 + WTERMSIG(st);
      return status_;
    }
    if (r < 0 && errno != EINTR) {
      status_ = -1;
      return status_;
    }
    if (timeout_ms >= 0 && std::chrono::steady_clock::now() >= deadline) return std::nullopt;
    if (timeout_ms >= 0) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
}

bool Process::running() { return pid_ > 0 && !wait(0); }

void Process::terminate() {
  if (running()) ::kill(pid_, SIGTERM);
}

void Process::kill() {
  if (pid_ > 0 && !status_) ::kill(pid_, SIGKILL);
}

Process spawn(const std::string& name, const std::vector<std::string>& argv,
              const std::optional<std::filesystem::path>& log_file) {
  if (argv.empty()) throw SpawnFailure(name + ": empty command line");
  int log_fd = -1;
  if (log_file) {
    log_fd = ::open(log_file->c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (log_fd < 0) throw SpawnFailure(name + ": cannot open log " + log_file->string());
  }
  // Reports exec failure from the child through a close-on-exec pipe.
  int status_pipe[2];
  if (::pipe2(status_pipe, O_CLOEXEC) != 0) {
    if (log_fd >= 0) ::close(log_fd);
    throw SpawnFailure(name + ": pipe: " + std::strerror(errno));
  }
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);

  const pid_t pid = ::fork();
  if (pid < 0) {
    ::close(status_pipe[0]);
    ::close(status_pipe[1]);
    if (log_fd >= 0) ::close(log_fd);
    throw SpawnFailure(name + ": fork: " + std::strerror(errno));
  }
  if (pid == 0) {
    ::close(status_pipe[0]);
    if (log_fd >= 0) {
      ::dup2(log_fd, STDOUT_FILENO);
      ::dup2(log_fd, STDERR_FILENO);
    }
    ::execv(args[0], args.data());
    const int err = errno;
    [[maybe_unused]] auto n = ::write(status_pipe[1], &err, sizeof err);
    ::_exit(127);
  }
  ::close(status_pipe[1]);
  if (log_fd >= 0) ::close(log_fd);
  int child_errno = 0;
  ssize_t n;
  do {
    n = ::read(status_pipe[0], &child_errno, sizeof child_errno);
  } while (n < 0 && errno == EINTR);
  ::close(status_pipe[0]);
  Process p(name, pid);
  if (n > 0) {
    p.wait();
    throw SpawnFailure(name + ": exec " + argv[0] + ": " + std::strerror(child_errno));
  }
  log::info("topology", "spawned", {{"role", name}, {"pid", std::to_string(pid)}});
  return p;
}

bool endpoint_bound(const Endpoint& endpoint) {
  try {
    UdpSocket probe = UdpSocket::bind(endpoint);
    return false;
  } catch (const SocketError& e) {
    return e.code() == EADDRINUSE;
  }
}

namespace {

Endpoint endpoint_field(const json& j, const char* key) {
  return Endpoint::parse(j.at(key).get<std::string>());
}

void wait_listening(Process& p, const Endpoint& endpoint) {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(10);
  while (!endpoint_bound(endpoint)) {
    if (auto status = p.wait(0)) {
      throw SpawnFailure(p.name() + " exited with status " + std::to_string(*status) +
                         " before listening on " + endpoint.to_string());
    }
    if (std::chrono::steady_clock::now() >= deadline) {
      throw SpawnFailure(p.name() + " did not bind " + endpoint.to_string());
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

std::optional<std::filesystem::path> log_for(const TopologyConfig& cfg, const std::string& role) {
  if (!cfg.log_dir) return std::nullopt;
  return *cfg.log_dir / (role + ".log");
}

}  // namespace

TopologyConfig TopologyConfig::parse(std::string_view json_text) {
  TopologyConfig cfg;
  try {
    const json j = json::parse(json_text);
    cfg.binary = j.at("binary").get<std::string>();
    for (const auto& m : j.at("meters")) {
      MeterNode node;
      node.pcap = m.at("pcap").get<std::string>();
      node.idle_s = m.value("idle_s", node.idle_s);
      node.active_s = m.value("active_s", node.active_s);
      node.odid = m.value("odid", node.odid);
      cfg.meters.push_back(node);
    }
    cfg.tee_listen = endpoint_field(j, "tee");
    for (const auto& c : j.at("collectors")) {
      cfg.collectors.push_back({endpoint_field(c, "listen"), c.at("store").get<std::string>()});
    }
    cfg.rotation_s = j.value("rotation_s", cfg.rotation_s);
    if (j.contains("log_dir")) cfg.log_dir = j.at("log_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("topology config: ") + e.what());
  }
  return cfg;
}

TopologyConfig TopologyConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open topology config " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse(text);
}

void TopologyConfig::validate() const {
  if (meters.empty()) throw std::invalid_argument("topology needs at least one meter");
  if (collectors.empty()) throw std::invalid_argument("topology needs at least one collector");
  std::set<std::uint16_t> ports{tee_listen.port};
  for (const auto& c : collectors) {
    if (!ports.insert(c.listen.port).second) {
      throw PortInUse("listen port " + std::to_string(c.listen.port) + " configured twice");
    }
  }
  if (endpoint_bound(tee_listen)) throw PortInUse(tee_listen.to_string() + " already in use");
  for (const auto& c : collectors) {
    if (endpoint_bound(c.listen)) throw PortInUse(c.listen.to_string() + " already in use");
  }
}

Topology run_topology(const TopologyConfig& cfg) {
  cfg.validate();
  const std::string bin = std::filesystem::absolute(cfg.binary).string();
  if (cfg.log_dir) std::filesystem::create_directories(*cfg.log_dir);
  Topology t;
  for (std::size_t i = 0; i < cfg.collectors.size(); ++i) {
    const auto& c = cfg.collectors[i];
    const std::string role = "collector" + std::to_string(i + 1);
    t.collectors.push_back(spawn(role,
                                 {bin, "collect", "--listen", c.listen.to_string(), "--store",
                                  c.store.string(), "--rotate", std::to_string(cfg.rotation_s)},
                                 log_for(cfg, role)));
    wait_listening(t.collectors.back(), c.listen);
  }
  std::vector<std::string> tee_args{bin, "collect", "--listen", cfg.tee_listen.to_string()};
  for (const auto& c : cfg.collectors) {
    tee_args.push_back("--tee");
    tee_args.push_back(c.listen.to_string());
  }
  t.tee = spawn("tee", tee_args, log_for(cfg, "tee"));
  wait_listening(t.tee, cfg.tee_listen);
  for (std::size_t i = 0; i < cfg.meters.size(); ++i) {
    const auto& m = cfg.meters[i];
    const std::string role = "meter" + std::to_string(i + 1);
    t.meters.push_back(spawn(role,
                             {bin, "meter", "--input", m.pcap.string(), "--idle",
                              std::to_string(m.idle_s), "--active", std::to_string(m.active_s),
                              "--odid", std::to_string(m.odid), "--export",
                              cfg.tee_listen.to_string()},
                             log_for(cfg, role)));
  }
  return t;
}

bool finish_topology(Topology& t, int settle_ms) {
  bool ok = true;
  for (auto& m : t.meters) ok = m.wait() == 0 && ok;
  std::this_thread::sleep_for(std::chrono::milliseconds(settle_ms));
  t.tee.terminate();
  ok = t.tee.wait() == 0 && ok;
  std::this_thread::sleep_for(std::chrono::milliseconds(settle_ms));
  for (auto& c : t.collectors) c.terminate();
  for (auto& c : t.collectors) ok = c.wait() == 0 && ok;
  return ok;
}

}  // namespace flowkit::topology
