// Multi-process mode: every role (source O, randomizers A/B, stations X/Y,
// collector, referee) runs as its own process and the socket topology
// physically realizes the one-way information flow: stations share no
// channel, and each connection carries data in exactly one direction
// after the opening HELLO.
#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "eprsim/core.hpp"
#include "eprsim/io.hpp"
#include "eprsim/protocol.hpp"

namespace eprsim::net {

class ProtocolViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class NetRole : std::uint8_t {
  Source,
  RandA,
  RandB,
  StationX,
  StationY,
  Collector,
  Referee,
};

inline constexpr std::array<NetRole, 7> kAllRoles = {
    NetRole::Source,   NetRole::RandA,     NetRole::RandB,  NetRole::StationX,
    NetRole::StationY, NetRole::Collector, NetRole::Referee};

inline std::string_view role_name(NetRole role) {
  switch (role) {
    case NetRole::Source:    return "source";
    case NetRole::RandA:     return "rand_a";
    case NetRole::RandB:     return "rand_b";
    case NetRole::StationX:  return "station_x";
    case NetRole::StationY:  return "station_y";
    case NetRole::Collector: return "collector";
    case NetRole::Referee:   return "referee";
  }
  return "?";
}

inline std::optional<NetRole> parse_role(std::string_view text) {
  for (const NetRole role : kAllRoles) {
    if (text == role_name(role)) return role;
  }
  return std::nullopt;
}

/// The full directed edge set. There is no edge between the stations in
/// either direction, and no edge from any analysis-side role back into
/// the trial loop.
struct Edge {
  NetRole from;
  NetRole to;
};

inline constexpr std::array<Edge, 9> kTopology = {{
    {NetRole::Source, NetRole::StationX},
    {NetRole::Source, NetRole::StationY},
    {NetRole::RandA, NetRole::StationX},
    {NetRole::RandB, NetRole::StationY},
    {NetRole::StationX, NetRole::Collector},
    {NetRole::StationY, NetRole::Collector},
    {NetRole::RandA, NetRole::Referee},
    {NetRole::RandB, NetRole::Referee},
    {NetRole::Collector, NetRole::Referee},
}};

inline bool edge_allowed(NetRole from, NetRole to) {
  for (const Edge& edge : kTopology) {
    if (edge.from == from && edge.to == to) return true;
  }
  return false;
}

inline std::vector<NetRole> outbound_peers(NetRole role) {
  std::vector<NetRole> peers;
  for (const Edge& edge : kTopology) {
    if (edge.from == role) peers.push_back(edge.to);
  }
  return peers;
}

inline std::vector<NetRole> inbound_peers(NetRole role) {
  std::vector<NetRole> peers;
  for (const Edge& edge : kTopology) {
    if (edge.to == role) peers.push_back(edge.from);
  }
  return peers;
}

enum class MsgType : std::uint8_t {
  Hello,
  SourcePulse,
  Setting,
  Outcome,
  LabelDisclosure,
  Report,
  End,
};

inline std::string_view msg_type_name(MsgType type) {
  switch (type) {
    case MsgType::Hello:           return "HELLO";
    case MsgType::SourcePulse:     return "SOURCE_PULSE";
    case MsgType::Setting:         return "SETTING";
    case MsgType::Outcome:         return "OUTCOME";
    case MsgType::LabelDisclosure: return "LABEL_DISCLOSURE";
    case MsgType::Report:          return "REPORT";
    case MsgType::End:             return "END";
  }
  return "?";
}

inline std::optional<MsgType> parse_msg_type(std::string_view text) {
  for (const MsgType type :
       {MsgType::Hello, MsgType::SourcePulse, MsgType::Setting,
        MsgType::Outcome, MsgType::LabelDisclosure, MsgType::Report,
        MsgType::End}) {
    if (text == msg_type_name(type)) return type;
  }
  return std::nullopt;
}

/// One message per line on the wire, same k=v field encoding as the log
/// files. Payload fields are type-specific and flat.
struct WireMessage {
  MsgType type = MsgType::End;
  std::vector<std::pair<std::string, std::string>> fields;

  WireMessage() = default;
  explicit WireMessage(MsgType t) : type(t) {}

  WireMessage& set(std::string_view key, std::string value) {
    fields.emplace_back(std::string(key), std::move(value));
    return *this;
  }

  [[nodiscard]] std::optional<std::string_view> find(
      std::string_view key) const {
    for (const auto& [k, v] : fields) {
      if (k == key) return std::string_view(v);
    }
    return std::nullopt;
  }

  [[nodiscard]] std::string_view get(std::string_view key) const {
    const auto value = find(key);
    if (!value) {
      throw ProtocolViolation("wire message missing field '" +
                              std::string(key) + "'");
    }
    return *value;
  }

  [[nodiscard]] std::uint64_t get_u64(std::string_view key) const {
    const std::string_view text = get(key);
    std::uint64_t value = 0;
    const auto result =
        std::from_chars(text.data(), text.data() + text.size(), value);
    if (result.ec != std::errc{} || result.ptr != text.data() + text.size()) {
      throw ProtocolViolation("wire field '" + std::string(key) +
                              "' is not an unsigned integer");
    }
    return value;
  }

  [[nodiscard]] double get_f64(std::string_view key) const {
    const std::string_view text = get(key);
    double value = 0.0;
    const auto result =
        std::from_chars(text.data(), text.data() + text.size(), value);
    if (result.ec != std::errc{} || result.ptr != text.data() + text.size()) {
      throw ProtocolViolation("wire field '" + std::string(key) +
                              "' is not a number");
    }
    return value;
  }
};

inline std::string encode_message(const WireMessage& message) {
  std::string line(msg_type_name(message.type));
  line.insert(0, "type=");
  for (const auto& [key, value] : message.fields) {
    line += ' ';
    line += key;
    line += '=';
    line += value;
  }
  line += '\n';
  return line;
}

inline WireMessage parse_message(std::string_view line) {
  std::vector<io::detail::Field> fields;
  try {
    fields = io::detail::split_fields(line, 0);
  } catch (const io::ParseError& error) {
    throw ProtocolViolation(std::string("malformed wire line: ") +
                            error.what());
  }
  if (fields.empty() || fields.front().key != "type") {
    throw ProtocolViolation("wire line must start with type=");
  }
  const auto type = parse_msg_type(fields.front().value);
  if (!type) {
    throw ProtocolViolation("unknown wire message type '" +
                            std::string(fields.front().value) + "'");
  }
  WireMessage message(*type);
  for (std::size_t i = 1; i < fields.size(); ++i) {
    message.set(fields[i].key, std::string(fields[i].value));
  }
  return message;
}

// ---------------------------------------------------------------------
// Socket plumbing (loopback TCP, blocking with poll timeouts).

namespace detail {

using Clock = std::chrono::steady_clock;

inline void throw_errno(const std::string& what) {
  throw std::runtime_error(what + ": " + std::strerror(errno));
}

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
  Socket& operator=(Socket&& other) noexcept {
    if (this != &other) {
      close_fd();
      fd_ = std::exchange(other.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close_fd(); }

  [[nodiscard]] int fd() const { return fd_; }
  [[nodiscard]] bool valid() const { return fd_ >= 0; }
  void close_now() { close_fd(); }

 private:
  void close_fd() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }
  int fd_ = -1;
};

inline sockaddr_in loopback_addr(std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  return addr;
}

struct HostPort {
  std::string host;
  std::uint16_t port = 0;
};

inline HostPort parse_host_port(std::string_view text) {
  const std::size_t colon = text.rfind(':');
  HostPort result;
  std::string_view port_text = text;
  if (colon != std::string_view::npos) {
    result.host = std::string(text.substr(0, colon));
    port_text = text.substr(colon + 1);
  } else {
    result.host = "127.0.0.1";
  }
  std::uint32_t port = 0;
  const auto parsed = std::from_chars(
      port_text.data(), port_text.data() + port_text.size(), port);
  if (parsed.ec != std::errc{} ||
      parsed.ptr != port_text.data() + port_text.size() || port == 0 ||
      port > 65535) {
    throw std::invalid_argument("bad endpoint '" + std::string(text) +
                                "', expected [host:]port");
  }
  result.port = static_cast<std::uint16_t>(port);
  return result;
}

inline sockaddr_in resolve(const HostPort& hp) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(hp.port);
  if (::inet_pton(AF_INET, hp.host.c_str(), &addr.sin_addr) != 1) {
    // Only dotted-quad and "localhost" are supported; the roles all run
    // on one machine or behind explicit numeric endpoints.
    if (hp.host == "localhost") {
      ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    } else {
      throw std::invalid_argument("cannot resolve host '" + hp.host + "'");
    }
  }
  return addr;
}

inline Socket listen_on(std::uint16_t port) {
  Socket sock(::socket(AF_INET, SOCK_STREAM, 0));
  if (!sock.valid()) throw_errno("socket");
  const int one = 1;
  ::setsockopt(sock.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr = loopback_addr(port);
  if (::bind(sock.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) !=
      0) {
    throw_errno("bind to port " + std::to_string(port));
  }
  if (::listen(sock.fd(), 16) != 0) throw_errno("listen");
  return sock;
}

inline Socket connect_with_retry(const HostPort& hp, Clock::time_point
                                                         deadline) {
  const sockaddr_in addr = resolve(hp);
  while (true) {
    Socket sock(::socket(AF_INET, SOCK_STREAM, 0));
    if (!sock.valid()) throw_errno("socket");
    if (::connect(sock.fd(), reinterpret_cast<const sockaddr*>(&addr),
                  sizeof addr) == 0) {
      const int one = 1;
      ::setsockopt(sock.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return sock;
    }
    if (Clock::now() >= deadline) {
      throw std::runtime_error("connect to " + hp.host + ":" +
                               std::to_string(hp.port) + " timed out");
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
  }
}

inline void wait_readable(int fd, Clock::time_point deadline,
                          const std::string& what) {
  while (true) {
    const auto remaining = std::chrono::duration_cast<std::chrono::milliseconds>(
        deadline - Clock::now());
    if (remaining.count() <= 0) {
      throw ProtocolViolation("timeout waiting for " + what);
    }
    pollfd pfd{fd, POLLIN, 0};
    const int rc = ::poll(&pfd, 1, static_cast<int>(remaining.count()));
    if (rc > 0) return;
    if (rc < 0 && errno != EINTR) throw_errno("poll");
  }
}

/// Write-only connection: after HELLO the initiator only sends. Any byte
/// arriving inbound is a one-way violation and aborts.
class WriteConn {
 public:
  WriteConn() = default;
  WriteConn(Socket sock, std::string peer_label)
      : sock_(std::move(sock)), peer_(std::move(peer_label)) {}

  void send_line(std::string_view line) {
    check_inbound_silence();
    std::size_t sent = 0;
    while (sent < line.size()) {
      const ssize_t n =
          ::send(sock_.fd(), line.data() + sent, line.size() - sent,
                 MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw ProtocolViolation("send to " + peer_ + " failed: " +
                                std::strerror(errno));
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  void send(const WireMessage& message) { send_line(encode_message(message)); }

  void close_now() { sock_.close_now(); }

 private:
  void check_inbound_silence() {
    char byte = 0;
    const ssize_t n =
        ::recv(sock_.fd(), &byte, 1, MSG_PEEK | MSG_DONTWAIT);
    if (n > 0) {
      throw ProtocolViolation("one-way violation: inbound data from " + peer_ +
                              " on a write-only connection");
    }
    if (n == 0) {
      throw ProtocolViolation("peer " + peer_ + " closed the connection early");
    }
  }

  Socket sock_;
  std::string peer_;
};

/// Read side of a connection: buffered newline-delimited messages.
class ReadConn {
 public:
  ReadConn() = default;
  ReadConn(Socket sock, NetRole peer) : sock_(std::move(sock)), peer_(peer) {}

  [[nodiscard]] int fd() const { return sock_.fd(); }
  [[nodiscard]] NetRole peer() const { return peer_; }
  [[nodiscard]] bool finished() const { return saw_end_; }

  /// Reads more bytes if available; returns false on orderly close.
  bool fill(Clock::time_point deadline, const std::string& what) {
    wait_readable(sock_.fd(), deadline, what);
    char chunk[4096];
    const ssize_t n = ::recv(sock_.fd(), chunk, sizeof chunk, 0);
    if (n < 0) {
      if (errno == EINTR) return true;
      throw_errno("recv");
    }
    if (n == 0) {
      closed_ = true;
      return false;
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
    return true;
  }

  [[nodiscard]] bool closed() const { return closed_; }

  std::optional<std::string> next_line() {
    const std::size_t pos = buffer_.find('\n');
    if (pos == std::string::npos) return std::nullopt;
    std::string line = buffer_.substr(0, pos);
    buffer_.erase(0, pos + 1);
    return line;
  }

  void mark_end() { saw_end_ = true; }

  /// Bytes that arrived in the same segment as the HELLO line.
  void inject(std::string_view bytes) { buffer_.append(bytes); }

  /// Leftover bytes after a final newline indicate a truncated line.
  [[nodiscard]] bool has_partial_line() const { return !buffer_.empty(); }

 private:
  Socket sock_;
  NetRole peer_ = NetRole::Source;
  std::string buffer_;
  bool closed_ = false;
  bool saw_end_ = false;
};

}  // namespace detail

// ---------------------------------------------------------------------

struct Endpoints {
  std::optional<std::uint16_t> listen_port;
  std::map<NetRole, std::string> peers;  // outbound role -> "host:port"
};

struct ServeOptions {
  std::chrono::milliseconds timeout{30000};
  std::filesystem::path collector_out;  // collector: log destination (optional)
  std::ostream* report_out = nullptr;   // referee: REPORT destination
};

namespace detail {

inline void validate_endpoints(NetRole role, const Endpoints& endpoints) {
  const auto expected = outbound_peers(role);
  for (const auto& [peer, addr] : endpoints.peers) {
    if (!edge_allowed(role, peer)) {
      throw std::invalid_argument(
          std::string("topology forbids an edge ") +
          std::string(role_name(role)) + " -> " + std::string(role_name(peer)));
    }
    (void)addr;
  }
  for (const NetRole peer : expected) {
    if (endpoints.peers.find(peer) == endpoints.peers.end()) {
      throw std::invalid_argument(std::string("missing --peer ") +
                                  std::string(role_name(peer)) + " for role " +
                                  std::string(role_name(role)));
    }
  }
  const bool needs_listener = !inbound_peers(role).empty();
  if (needs_listener && !endpoints.listen_port) {
    throw std::invalid_argument(std::string("role ") +
                                std::string(role_name(role)) +
                                " requires --listen");
  }
  if (!needs_listener && endpoints.listen_port) {
    throw std::invalid_argument(std::string("role ") +
                                std::string(role_name(role)) +
                                " accepts no inbound connections");
  }
}

inline WireMessage hello_message(NetRole self, const ExperimentConfig& config) {
  WireMessage hello(MsgType::Hello);
  hello.set("role", std::string(role_name(self)));
  hello.set("version", std::string(io::kFormatVersion));
  hello.set("digest", io::detail::hex16(io::config_digest(config)));
  return hello;
}

inline WriteConn open_outbound(NetRole self, NetRole peer,
                               const Endpoints& endpoints,
                               const ExperimentConfig& config,
                               Clock::time_point deadline) {
  const HostPort hp = parse_host_port(endpoints.peers.at(peer));
  Socket sock = connect_with_retry(hp, deadline);
  WriteConn conn(std::move(sock), std::string(role_name(peer)));
  conn.send(hello_message(self, config));
  return conn;
}

/// Accepts until every expected inbound peer has said HELLO with the
/// matching config digest. Connections from roles outside the topology
/// (or with a foreign digest, or duplicates) are refused: closed and
/// noted on stderr, while the session keeps waiting for the real peers.
inline std::map<NetRole, ReadConn> accept_inbound(
    NetRole self, std::uint16_t port, const ExperimentConfig& config,
    Clock::time_point deadline) {
  const std::vector<NetRole> expected = inbound_peers(self);
  Socket listener = listen_on(port);
  std::map<NetRole, ReadConn> accepted;

  const std::string expected_digest =
      io::detail::hex16(io::config_digest(config));

  while (accepted.size() < expected.size()) {
    wait_readable(listener.fd(), deadline, "inbound connections");
    Socket sock(::accept(listener.fd(), nullptr, nullptr));
    if (!sock.valid()) continue;

    // Read the HELLO line. A connection that stalls without completing
    // its HELLO is dropped without ending the session.
    const auto hello_deadline =
        std::min(deadline, Clock::now() + std::chrono::seconds(2));
    std::string buffer;
    bool ok = false;
    try {
      while (Clock::now() < hello_deadline) {
        wait_readable(sock.fd(), hello_deadline, "HELLO");
        char chunk[512];
        const ssize_t n = ::recv(sock.fd(), chunk, sizeof chunk, 0);
        if (n <= 0) break;
        buffer.append(chunk, static_cast<std::size_t>(n));
        if (buffer.find('\n') != std::string::npos) {
          ok = true;
          break;
        }
      }
    } catch (const ProtocolViolation&) {
      ok = false;
    }
    if (!ok) {
      std::fprintf(stderr, "[%s] refused connection: no HELLO\n",
                   std::string(role_name(self)).c_str());
      continue;
    }

    const std::string line = buffer.substr(0, buffer.find('\n'));
    std::string rest = buffer.substr(buffer.find('\n') + 1);
    WireMessage hello;
    try {
      hello = parse_message(line);
    } catch (const ProtocolViolation&) {
      std::fprintf(stderr, "[%s] refused connection: malformed HELLO\n",
                   std::string(role_name(self)).c_str());
      continue;
    }
    if (hello.type != MsgType::Hello) {
      std::fprintf(stderr, "[%s] refused connection: expected HELLO\n",
                   std::string(role_name(self)).c_str());
      continue;
    }
    const auto claimed = parse_role(hello.get("role"));
    if (!claimed || !edge_allowed(*claimed, self)) {
      std::fprintf(stderr, "[%s] refused connection from '%s': no such edge\n",
                   std::string(role_name(self)).c_str(),
                   std::string(hello.get("role")).c_str());
      continue;
    }
    if (accepted.find(*claimed) != accepted.end()) {
      std::fprintf(stderr, "[%s] refused duplicate connection from %s\n",
                   std::string(role_name(self)).c_str(),
                   std::string(role_name(*claimed)).c_str());
      continue;
    }
    if (hello.get("digest") != expected_digest) {
      std::fprintf(stderr,
                   "[%s] refused connection from %s: config digest mismatch\n",
                   std::string(role_name(self)).c_str(),
                   std::string(role_name(*claimed)).c_str());
      continue;
    }
    ReadConn conn(std::move(sock), *claimed);
    if (!rest.empty()) conn.inject(rest);  // bytes that followed HELLO
    accepted.emplace(*claimed, std::move(conn));
  }
  return accepted;
}

/// Pulls the next complete line from `conn`, reading more as needed.
/// Returns nullopt on orderly close after the last full line.
inline std::optional<WireMessage> next_message(ReadConn& conn,
                                               Clock::time_point deadline,
                                               const std::string& what) {
  while (true) {
    if (auto line = conn.next_line()) {
      WireMessage message = parse_message(*line);
      if (message.type == MsgType::Hello) {
        throw ProtocolViolation("unexpected second HELLO from " +
                                std::string(role_name(conn.peer())));
      }
      return message;
    }
    if (conn.closed()) {
      if (conn.has_partial_line()) {
        throw ProtocolViolation("connection from " +
                                std::string(role_name(conn.peer())) +
                                " closed mid-line");
      }
      return std::nullopt;
    }
    conn.fill(deadline, what);
  }
}

/// Enforces per-connection trial ordering and END bookkeeping; returns
/// nullopt once END has been consumed.
class TrialStream {
 public:
  explicit TrialStream(ReadConn conn) : conn_(std::move(conn)) {}

  [[nodiscard]] NetRole peer() const { return conn_.peer(); }
  [[nodiscard]] bool done() const { return done_; }

  std::optional<WireMessage> next(Clock::time_point deadline) {
    if (done_) return std::nullopt;
    auto message = next_message(
        conn_, deadline,
        "data from " + std::string(role_name(conn_.peer())));
    if (!message) {
      throw ProtocolViolation("stream from " +
                              std::string(role_name(conn_.peer())) +
                              " ended without END");
    }
    if (message->type == MsgType::End) {
      done_ = true;
      return std::nullopt;
    }
    const std::uint64_t trial = message->get_u64("trial");
    if (next_expected_ && trial < *next_expected_) {
      throw ProtocolViolation(
          "trial index went backwards on the connection from " +
          std::string(role_name(conn_.peer())));
    }
    next_expected_ = trial + 1;
    return message;
  }

 private:
  ReadConn conn_;
  std::optional<std::uint64_t> next_expected_;
  bool done_ = false;
};

// ---------------------------------------------------------------------
// Role loops.

inline int run_source(const ExperimentConfig& config,
                      const Endpoints& endpoints, Clock::time_point deadline) {
  WriteConn to_x = open_outbound(NetRole::Source, NetRole::StationX, endpoints,
                                 config, deadline);
  WriteConn to_y = open_outbound(NetRole::Source, NetRole::StationY, endpoints,
                                 config, deadline);
  RandomStream stream(config.master_seed, StreamRole::Source);
  for (std::uint64_t trial = 0; trial < config.trials; ++trial) {
    const protocol::SourceEmission emission =
        protocol::source_step(stream, trial);
    WireMessage pulse_x(MsgType::SourcePulse);
    pulse_x.set("trial", std::to_string(trial));
    pulse_x.set("axis", io::format_double(emission.to_x.pulse_axis.radians()));
    to_x.send(pulse_x);
    WireMessage pulse_y(MsgType::SourcePulse);
    pulse_y.set("trial", std::to_string(trial));
    pulse_y.set("axis", io::format_double(emission.to_y.pulse_axis.radians()));
    to_y.send(pulse_y);
  }
  WireMessage end(MsgType::End);
  end.set("trials", std::to_string(config.trials));
  to_x.send(end);
  to_y.send(end);
  return 0;
}

inline int run_randomizer(NetRole self, const ExperimentConfig& config,
                          const Endpoints& endpoints,
                          Clock::time_point deadline) {
  const NetRole station =
      self == NetRole::RandA ? NetRole::StationX : NetRole::StationY;
  const StreamRole stream_role =
      self == NetRole::RandA ? StreamRole::RandA : StreamRole::RandB;
  WriteConn to_station =
      open_outbound(self, station, endpoints, config, deadline);
  WriteConn to_referee =
      open_outbound(self, NetRole::Referee, endpoints, config, deadline);

  protocol::Randomizer randomizer(
      RandomStream(config.master_seed, stream_role));
  for (std::uint64_t trial = 0; trial < config.trials; ++trial) {
    const protocol::SettingMsg setting = randomizer.step(trial);
    WireMessage message(MsgType::Setting);
    message.set("trial", std::to_string(trial));
    message.set("label", std::to_string(label_index(setting.label) + 1));
    to_station.send(message);
  }
  WireMessage end(MsgType::End);
  end.set("trials", std::to_string(config.trials));
  to_station.send(end);

  // Disclosures go out only after the trial loop has finished.
  const auto& labels = randomizer.disclosed_labels();
  for (std::uint64_t trial = 0; trial < labels.size(); ++trial) {
    WireMessage message(MsgType::LabelDisclosure);
    message.set("trial", std::to_string(trial));
    message.set("label", std::to_string(label_index(labels[trial]) + 1));
    to_referee.send(message);
  }
  to_referee.send(end);
  return 0;
}

inline int run_station(NetRole self, const ExperimentConfig& config,
                       const Endpoints& endpoints,
                       Clock::time_point deadline) {
  const bool is_x = self == NetRole::StationX;
  auto inbound = accept_inbound(self, *endpoints.listen_port, config, deadline);
  WriteConn to_collector =
      open_outbound(self, NetRole::Collector, endpoints, config, deadline);

  TrialStream pulses(std::move(inbound.at(NetRole::Source)));
  TrialStream settings(
      std::move(inbound.at(is_x ? NetRole::RandA : NetRole::RandB)));

  const std::array<Angle, 2> angles =
      is_x ? config.left_angles : config.right_angles;
  const protocol::StationStrategy strategy =
      protocol::malus_poisson_strategy(config.detector_rule);
  RandomStream stream(config.master_seed,
                      is_x ? StreamRole::StationX : StreamRole::StationY);

  std::map<std::uint64_t, double> pending_pulses;      // trial -> axis
  std::map<std::uint64_t, SettingLabel> pending_labels;

  // Stations tolerate arbitrary interleaving of their two inbound
  // streams but consume their noise stream strictly in trial order.
  std::uint64_t next_trial = 0;
  while (next_trial < config.trials) {
    const bool need_pulse =
        pending_pulses.find(next_trial) == pending_pulses.end();
    const bool need_label =
        pending_labels.find(next_trial) == pending_labels.end();
    if (!need_pulse && !need_label) {
      const Angle axis(pending_pulses.at(next_trial));
      const SettingLabel label = pending_labels.at(next_trial);
      pending_pulses.erase(next_trial);
      pending_labels.erase(next_trial);
      const bool detected = protocol::station_step(
          strategy, angles[label_index(label)], axis, stream);
      WireMessage outcome(MsgType::Outcome);
      outcome.set("trial", std::to_string(next_trial));
      outcome.set("label", std::to_string(label_index(label) + 1));
      outcome.set("axis", io::format_double(axis.radians()));
      outcome.set("detected", detected ? "1" : "0");
      to_collector.send(outcome);
      ++next_trial;
      continue;
    }

    TrialStream& wanted = need_pulse ? pulses : settings;
    auto message = wanted.next(deadline);
    if (!message) {
      // next() yields nullopt only at END, and this stream still owes us
      // data for next_trial.
      throw ProtocolViolation("inbound stream from " +
                              std::string(role_name(wanted.peer())) +
                              " ended before all trials");
    }
    if (message->type == MsgType::SourcePulse) {
      pending_pulses.emplace(message->get_u64("trial"),
                             message->get_f64("axis"));
    } else if (message->type == MsgType::Setting) {
      const std::uint64_t label = message->get_u64("label");
      if (label != 1 && label != 2) {
        throw ProtocolViolation("setting label must be 1 or 2");
      }
      pending_labels.emplace(message->get_u64("trial"),
                             label_from_index(label - 1));
    } else {
      throw ProtocolViolation(
          "unexpected message type at a station: " +
          std::string(msg_type_name(message->type)));
    }
  }

  WireMessage end(MsgType::End);
  end.set("trials", std::to_string(config.trials));
  to_collector.send(end);
  return 0;
}

struct CollectorResult {
  std::vector<TrialRecord> records;
};

inline int run_collector(const ExperimentConfig& config,
                         const Endpoints& endpoints,
                         const ServeOptions& options,
                         Clock::time_point deadline) {
  auto inbound =
      accept_inbound(NetRole::Collector, *endpoints.listen_port, config,
                     deadline);
  WriteConn to_referee = open_outbound(NetRole::Collector, NetRole::Referee,
                                       endpoints, config, deadline);

  TrialStream from_x(std::move(inbound.at(NetRole::StationX)));
  TrialStream from_y(std::move(inbound.at(NetRole::StationY)));

  struct SideOutcome {
    SettingLabel label;
    double axis;
    bool detected;
  };
  std::map<std::uint64_t, SideOutcome> pending_x;
  std::map<std::uint64_t, SideOutcome> pending_y;
  std::vector<TrialRecord> records;
  records.reserve(config.trials);

  auto consume = [&](TrialStream& stream,
                     std::map<std::uint64_t, SideOutcome>& pending) {
    auto message = stream.next(deadline);
    if (!message) return;
    if (message->type != MsgType::Outcome) {
      throw ProtocolViolation("collector expects OUTCOME messages, got " +
                              std::string(msg_type_name(message->type)));
    }
    const std::uint64_t label = message->get_u64("label");
    if (label != 1 && label != 2) {
      throw ProtocolViolation("outcome label must be 1 or 2");
    }
    pending.emplace(message->get_u64("trial"),
                    SideOutcome{label_from_index(label - 1),
                                message->get_f64("axis"),
                                message->get_u64("detected") != 0});
  };

  std::uint64_t next_trial = 0;
  while (next_trial < config.trials) {
    const auto x_it = pending_x.find(next_trial);
    const auto y_it = pending_y.find(next_trial);
    if (x_it != pending_x.end() && y_it != pending_y.end()) {
      const SideOutcome x = x_it->second;
      const SideOutcome y = y_it->second;
      pending_x.erase(x_it);
      pending_y.erase(y_it);

      // The mode is determined by the left pulse axis; the right axis must
      // be the orthogonal partner or the session is inconsistent.
      const SourceMode mode =
          x.axis == 0.0 ? SourceMode::VH : SourceMode::HV;
      if (x.axis != left_pulse_axis(mode).radians() ||
          y.axis != right_pulse_axis(mode).radians()) {
        throw ProtocolViolation("station pulse axes are not orthogonal at trial " +
                                std::to_string(next_trial));
      }

      TrialRecord record;
      record.index = next_trial;
      record.mode = mode;
      record.a_label = x.label;
      record.b_label = y.label;
      record.x_detected = x.detected;
      record.y_detected = y.detected;
      records.push_back(record);

      WireMessage disclosure(MsgType::LabelDisclosure);
      disclosure.set("trial", std::to_string(record.index));
      disclosure.set("mode", std::string(io::mode_name(record.mode)));
      disclosure.set("a", std::to_string(label_index(record.a_label) + 1));
      disclosure.set("b", std::to_string(label_index(record.b_label) + 1));
      disclosure.set("x", record.x_detected ? "1" : "0");
      disclosure.set("y", record.y_detected ? "1" : "0");
      to_referee.send(disclosure);
      ++next_trial;
      continue;
    }
    if (x_it == pending_x.end() && !from_x.done()) {
      consume(from_x, pending_x);
    } else if (!from_y.done()) {
      consume(from_y, pending_y);
    } else {
      throw ProtocolViolation("station streams ended before all trials");
    }
  }

  WireMessage end(MsgType::End);
  end.set("trials", std::to_string(config.trials));
  to_referee.send(end);

  if (!options.collector_out.empty()) {
    io::write_log_file(options.collector_out, config, records);
  }
  return 0;
}

inline protocol::RefereeReport referee_service_impl(
    TrialStream& from_a, TrialStream& from_b, TrialStream& from_collector,
    Clock::time_point deadline, bool& truncated) {
  std::vector<SettingLabel> disclosed_a;
  std::vector<SettingLabel> disclosed_b;
  std::vector<TrialRecord> log;

  auto parse_label = [](const WireMessage& message, std::string_view key) {
    const std::uint64_t label = message.get_u64(key);
    if (label != 1 && label != 2) {
      throw ProtocolViolation("label must be 1 or 2");
    }
    return label_from_index(label - 1);
  };

  auto drain = [&](TrialStream& stream, auto&& handler) {
    try {
      while (!stream.done()) {
        auto message = stream.next(deadline);
        if (!message) break;
        if (message->type != MsgType::LabelDisclosure) {
          throw ProtocolViolation("referee expects LABEL_DISCLOSURE, got " +
                                  std::string(msg_type_name(message->type)));
        }
        handler(*message);
      }
    } catch (const ProtocolViolation& violation) {
      std::fprintf(stderr, "[referee] %s\n", violation.what());
      truncated = true;
    }
  };

  drain(from_a, [&](const WireMessage& m) {
    disclosed_a.push_back(parse_label(m, "label"));
  });
  drain(from_b, [&](const WireMessage& m) {
    disclosed_b.push_back(parse_label(m, "label"));
  });
  drain(from_collector, [&](const WireMessage& m) {
    TrialRecord record;
    record.index = m.get_u64("trial");
    const auto mode = io::parse_mode(m.get("mode"));
    if (!mode) throw ProtocolViolation("mode must be VH or HV");
    record.mode = *mode;
    record.a_label = parse_label(m, "a");
    record.b_label = parse_label(m, "b");
    record.x_detected = m.get_u64("x") != 0;
    record.y_detected = m.get_u64("y") != 0;
    log.push_back(record);
  });

  protocol::RefereeReport report =
      protocol::referee_verify(disclosed_a, disclosed_b, log);
  if (truncated) report.verdict = protocol::Verdict::Fail;
  return report;
}

inline int run_referee(const ExperimentConfig& config,
                       const Endpoints& endpoints, const ServeOptions& options,
                       Clock::time_point deadline) {
  auto inbound = accept_inbound(NetRole::Referee, *endpoints.listen_port,
                                config, deadline);
  TrialStream from_a(std::move(inbound.at(NetRole::RandA)));
  TrialStream from_b(std::move(inbound.at(NetRole::RandB)));
  TrialStream from_collector(std::move(inbound.at(NetRole::Collector)));

  bool truncated = false;
  const protocol::RefereeReport report = referee_service_impl(
      from_a, from_b, from_collector, deadline, truncated);

  WireMessage out(MsgType::Report);
  out.set("trials_checked", std::to_string(report.trials_checked));
  out.set("mismatches", std::to_string(report.mismatches));
  out.set("verdict",
          report.verdict == protocol::Verdict::Pass ? "PASS" : "FAIL");
  std::ostream* sink = options.report_out;
  if (sink) {
    *sink << encode_message(out);
    sink->flush();
  }
  return report.verdict == protocol::Verdict::Pass ? 0 : 3;
}

}  // namespace detail

/// Runs one role to completion. Returns the process exit status: 0 for
/// success (and referee PASS), 3 for a referee FAIL verdict. Protocol
/// violations and endpoint/topology errors throw.
inline int serve_role(NetRole role, const ExperimentConfig& config,
                      const Endpoints& endpoints,
                      const ServeOptions& options = {}) {
  validate_config(config);
  detail::validate_endpoints(role, endpoints);
  const auto deadline = detail::Clock::now() + options.timeout;
  switch (role) {
    case NetRole::Source:
      return detail::run_source(config, endpoints, deadline);
    case NetRole::RandA:
    case NetRole::RandB:
      return detail::run_randomizer(role, config, endpoints, deadline);
    case NetRole::StationX:
    case NetRole::StationY:
      return detail::run_station(role, config, endpoints, deadline);
    case NetRole::Collector:
      return detail::run_collector(config, endpoints, options, deadline);
    case NetRole::Referee:
      return detail::run_referee(config, endpoints, options, deadline);
  }
  throw std::invalid_argument("unknown role");
}

}  // namespace eprsim::net
