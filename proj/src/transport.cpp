#include "qasf/transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "qasf/errors.hpp"

namespace qasf::split {

namespace {

constexpr std::uint64_t kMaxPayload = std::uint64_t{1} << 32;

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

// Returns bytes read before EOF.
std::size_t read_fully(int fd, char* buf, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::recv(fd, buf + got, n - got, 0);
    if (r == 0) break;
    if (r < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("recv failed: ") + std::strerror(errno));
    }
    got += static_cast<std::size_t>(r);
  }
  return got;
}

BoundaryMessage check_reply(BoundaryMessage reply) {
  if (reply.kind == MessageKind::control) read_control(reply);  // throws on error replies
  return reply;
}

}  // namespace

void write_frame(int fd, const std::string& frame) {
  std::size_t sent = 0;
  while (sent < frame.size()) {
    const ssize_t r = ::send(fd, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("send failed: ") + std::strerror(errno));
    }
    sent += static_cast<std::size_t>(r);
  }
}

bool read_frame(int fd, std::string& frame) {
  frame.assign(kWireHeaderSize, '\0');
  const std::size_t got = read_fully(fd, frame.data(), kWireHeaderSize);
  if (got == 0) return false;
  if (got < kWireHeaderSize) throw ProtocolError("connection closed inside a frame header");
  const std::uint64_t len = payload_length(frame);
  if (len > kMaxPayload) throw ProtocolError("frame payload too large");
  frame.resize(kWireHeaderSize + len);
  if (read_fully(fd, frame.data() + kWireHeaderSize, len) != len) {
    throw ProtocolError("connection closed inside a frame payload");
  }
  return true;
}

BoundaryMessage InProcessTransport::exchange(const BoundaryMessage& request) {
  if (tap_) tap_(request);
  BoundaryMessage reply = server_.handle(request);
  if (tap_) tap_(reply);
  return reply;
}

TcpTrunkService::TcpTrunkService(TrunkServer& server, std::uint16_t port) : server_(server) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw ConfigError(std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(listen_fd_, 4) != 0) {
    const std::string err = std::strerror(errno);
    ::close(listen_fd_);
    throw ConfigError("cannot listen on 127.0.0.1:" + std::to_string(port) + ": " + err);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  thread_ = std::thread([this] { serve(); });
}

TcpTrunkService::~TcpTrunkService() { stop(); }

void TcpTrunkService::stop() {
  if (stopping_.exchange(true)) return;
  ::shutdown(listen_fd_, SHUT_RDWR);
  if (const int fd = connection_fd_.load(); fd >= 0) ::shutdown(fd, SHUT_RDWR);
  if (thread_.joinable()) thread_.join();
  ::close(listen_fd_);
}

void TcpTrunkService::serve() {
  while (!stopping_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      break;
    }
    set_nodelay(fd);
    connection_fd_ = fd;
    if (stopping_) ::shutdown(fd, SHUT_RDWR);
    try {
      serve_connection(fd);
    } catch (const ProtocolError&) {
      // Broken connection; wait for the next one.
    }
    connection_fd_ = -1;
    ::close(fd);
  }
}

void TcpTrunkService::serve_connection(int fd) {
  std::string frame;
  while (read_frame(fd, frame)) {
    BoundaryMessage reply;
    Round round;
    try {
      BoundaryMessage request = decode(frame);
      round = request.round;
      std::lock_guard lock(mutex_);
      reply = server_.handle(request);
    } catch (const std::exception& e) {
      reply = make_error(round, e.what());
    }
    write_frame(fd, encode(reply));
  }
}

TcpTransport::TcpTransport(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  const std::string ip = host == "localhost" ? "127.0.0.1" : host;
  if (::inet_pton(AF_INET, ip.c_str(), &addr.sin_addr) != 1) {
    throw ConfigError("not an IPv4 address: " + host);
  }
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw ConfigError(std::string("socket: ") + std::strerror(errno));
  if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    const std::string err = std::strerror(errno);
    ::close(fd_);
    throw ConfigError("cannot connect to " + ip + ":" + std::to_string(port) + ": " + err);
  }
  set_nodelay(fd_);
}

TcpTransport::~TcpTransport() {
  if (fd_ >= 0) ::close(fd_);
}

BoundaryMessage TcpTransport::exchange(const BoundaryMessage& request) {
  write_frame(fd_, encode(request));
  std::string frame;
  if (!read_frame(fd_, frame)) throw ProtocolError("server closed the connection");
  return check_reply(decode(frame));
}

}  // namespace qasf::split
