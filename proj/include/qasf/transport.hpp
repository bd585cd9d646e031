#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <mutex>
#include <string>
#include <thread>

#include "qasf/boundary.hpp"
#include "qasf/trunk_server.hpp"

namespace qasf::split {

class Transport {
 public:
  virtual ~Transport() = default;
  // Sends one request and returns the server's reply. Error replies are
  // rethrown as ProtocolError.
  virtual BoundaryMessage exchange(const BoundaryMessage& request) = 0;
};

class InProcessTransport final : public Transport {
 public:
  using Tap = std::function<void(const BoundaryMessage&)>;

  explicit InProcessTransport(TrunkServer& server) : server_(server) {}

  // Observes every request and reply.
  void set_tap(Tap tap) { tap_ = std::move(tap); }

  BoundaryMessage exchange(const BoundaryMessage& request) override;

 private:
  TrunkServer& server_;
  Tap tap_;
};

/// Serves a TrunkServer over TCP on 127.0.0.1 using the boundary wire
/// encoding, one frame in, one frame out. Connections are served one after
/// another; stop() also closes a connection still in progress.
class TcpTrunkService {
 public:
  explicit TcpTrunkService(TrunkServer& server, std::uint16_t port = 0);
  ~TcpTrunkService();

  TcpTrunkService(const TcpTrunkService&) = delete;
  TcpTrunkService& operator=(const TcpTrunkService&) = delete;

  std::uint16_t port() const { return port_; }
  void stop();

 private:
  void serve();
  void serve_connection(int fd);

  TrunkServer& server_;
  int listen_fd_ = -1;
  std::atomic<int> connection_fd_{-1};
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::mutex mutex_;
  std::thread thread_;
};

class TcpTransport final : public Transport {
 public:
  TcpTransport(const std::string& host, std::uint16_t port);
  ~TcpTransport() override;

  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;

  BoundaryMessage exchange(const BoundaryMessage& request) override;

 private:
  int fd_ = -1;
};

// Frame I/O over a connected socket; throw ProtocolError on short reads.
void write_frame(int fd, const std::string& frame);
// Returns false on a clean EOF before any byte of the frame.
bool read_frame(int fd, std::string& frame);

}  // namespace qasf::split
