#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

// Thin RAII wrappers over POSIX TCP sockets; splitdecode ships tensors over
// plain ordered streams, one connection per attention worker.

namespace splitdecode {

class TcpStream {
 public:
  TcpStream() = default;
  explicit TcpStream(int fd) : fd_(fd) {}
  TcpStream(TcpStream&& other) noexcept;
  TcpStream& operator=(TcpStream&& other) noexcept;
  TcpStream(const TcpStream&) = delete;
  TcpStream& operator=(const TcpStream&) = delete;
  ~TcpStream();

  static TcpStream connect_to(const std::string& host, int port);

  bool valid() const { return fd_ >= 0; }
  void send_all(std::span<const std::uint8_t> bytes);

  /// Reads at least one byte into `out`, up to its size. Returns the byte
  /// count, 0 on orderly shutdown. Throws ProtocolError on timeout or error.
  std::size_t recv_some(std::span<std::uint8_t> out, double timeout_seconds);

  void close();

 private:
  int fd_ = -1;
};

class TcpListener {
 public:
  /// addr is "host:port"; port 0 picks an ephemeral port.
  explicit TcpListener(const std::string& addr);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  int port() const { return port_; }
  TcpStream accept_one();

 private:
  int fd_ = -1;
  int port_ = 0;
};

/// Splits "host:port"; throws ConfigError on malformed input.
std::pair<std::string, int> parse_host_port(const std::string& addr);

}  // namespace splitdecode
