#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cstring>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mim/repcenter.hpp"
#include "mim/tensor.hpp"
#include "mim/wire.hpp"

namespace mim {

namespace detail {

inline void write_all(int fd, const std::vector<uint8_t>& buf) {
  std::size_t off = 0;
  while (off < buf.size()) {
    ssize_t n = ::send(fd, buf.data() + off, buf.size() - off, MSG_NOSIGNAL);
    if (n <= 0) throw std::runtime_error("socket write failed");
    off += std::size_t(n);
  }
}

inline bool read_exact(int fd, uint8_t* dst, std::size_t len) {
  std::size_t off = 0;
  while (off < len) {
    ssize_t n = ::recv(fd, dst + off, len - off, 0);
    if (n == 0) return false;  // peer closed
    if (n < 0) throw std::runtime_error("socket read failed");
    off += std::size_t(n);
  }
  return true;
}

// Reads one frame; returns false on clean close, throws kErrBadMagic
// indirectly via the out flag when the header is corrupt.
inline bool read_frame(int fd, wire::Frame& frame, bool& bad_magic) {
  uint8_t header[7];
  if (!read_exact(fd, header, 7)) return false;
  bad_magic = !(header[0] == wire::kMagic0 && header[1] == wire::kMagic1);
  frame.opcode = header[2];
  uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= uint32_t(header[3 + i]) << (8 * i);
  frame.payload.resize(len);
  if (len > 0 && !read_exact(fd, frame.payload.data(), len)) return false;
  return true;
}

}  // namespace detail

// Parameter machine: answers GET from the store, routes PUT through the
// RIM window, serves STATS. One thread per connection; per-connection
// request order is preserved by the blocking loop.
class ParameterServer {
 public:
  ParameterServer(EmbeddingStore& store, WindowBuffer& window)
      : store_(store), window_(window) {}

  ~ParameterServer() { stop(); }

  // Binds host:port (port 0 picks an ephemeral port) and starts serving.
  void start(const std::string& host, uint16_t port) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw std::runtime_error("socket() failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
      throw std::runtime_error("bad bind address: " + host);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
      throw std::runtime_error("bind failed on " + host + ":" + std::to_string(port));
    if (::listen(listen_fd_, 64) != 0) throw std::runtime_error("listen failed");
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
    flusher_thread_ = std::thread([this] { flusher_loop(); });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    {
      // unblock connection threads parked in recv()
      std::lock_guard lock(conn_mu_);
      for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
    }
    if (accept_thread_.joinable()) accept_thread_.join();
    if (flusher_thread_.joinable()) flusher_thread_.join();
    for (auto& t : conn_threads_)
      if (t.joinable()) t.join();
  }

  uint16_t port() const { return port_; }

 private:
  void accept_loop() {
    while (running_) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (!running_) break;
        continue;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      {
        std::lock_guard lock(conn_mu_);
        conn_fds_.push_back(fd);
        conn_threads_.emplace_back([this, fd] { serve_connection(fd); });
      }
    }
  }

  void flusher_loop() {
    while (running_) {
      window_.flush_if_stale(store_);
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
  }

  void serve_connection(int fd) {
    try {
      wire::Frame frame;
      bool bad_magic = false;
      while (running_ && detail::read_frame(fd, frame, bad_magic)) {
        wire::Frame resp;
        if (bad_magic) {
          resp = wire::make_err(wire::kErrBadMagic);
          detail::write_all(fd, wire::encode_frame(resp));
          break;  // stream framing is lost, drop the connection
        }
        try {
          switch (frame.opcode) {
            case wire::kGet: {
              auto keys = wire::parse_get(frame.payload);
              auto result = store_.lookup(keys);
              std::vector<wire::GetRespEntry> entries;
              entries.reserve(result.entries.size());
              for (auto& e : result.entries) {
                wire::GetRespEntry ge;
                ge.hit = !e.miss;
                ge.values.resize(e.vector.size());
                for (std::size_t i = 0; i < ge.values.size(); ++i)
                  ge.values[i] = float(e.vector[i]);
                entries.push_back(std::move(ge));
              }
              resp = wire::make_get_resp(result.version, entries);
              break;
            }
            case wire::kPut: {
              auto put = wire::parse_put(frame.payload);
              Tensor t = Tensor::zeros({put.values.size()});
              for (std::size_t i = 0; i < put.values.size(); ++i)
                t[i] = double(put.values[i]);
              window_.submit(put.key, t, store_);
              resp = {wire::kPutAck, {}};
              break;
            }
            case wire::kStats: {
              resp = wire::make_stats_resp(
                  {store_.size(), store_.version(), window_.pending_count()});
              break;
            }
            default:
              resp = wire::make_err(wire::kErrUnknownOpcode);
          }
        } catch (const std::invalid_argument&) {
          resp = wire::make_err(wire::kErrPayloadMismatch);
        } catch (const std::out_of_range&) {
          resp = wire::make_err(wire::kErrPayloadMismatch);
        }
        detail::write_all(fd, wire::encode_frame(resp));
      }
    } catch (const std::exception&) {
      // connection torn down; nothing to recover server-side
    }
    {
      std::lock_guard lock(conn_mu_);
      conn_fds_.erase(std::remove(conn_fds_.begin(), conn_fds_.end(), fd), conn_fds_.end());
    }
    ::close(fd);
  }

  EmbeddingStore& store_;
  WindowBuffer& window_;
  int listen_fd_ = -1;
  uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::thread flusher_thread_;
  std::mutex conn_mu_;
  std::vector<int> conn_fds_;
  std::vector<std::thread> conn_threads_;
};

// Computation-machine side: blocking client, one in-flight request at
// a time. Connection loss surfaces as an exception; retry is the
// caller's decision.
class ParameterClient {
 public:
  ParameterClient(const std::string& host, uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw std::runtime_error("socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
      throw std::runtime_error("bad address: " + host);
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
      throw std::runtime_error("connect failed to " + host + ":" + std::to_string(port));
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }

  ~ParameterClient() {
    if (fd_ >= 0) ::close(fd_);
  }

  ParameterClient(const ParameterClient&) = delete;
  ParameterClient& operator=(const ParameterClient&) = delete;

  struct RemoteEntry {
    Tensor vector;
    bool miss;
  };

  struct RemoteLookup {
    std::vector<RemoteEntry> entries;
    uint64_t version;
  };

  RemoteLookup remote_lookup(const std::vector<uint64_t>& keys) {
    wire::Frame resp = round_trip(wire::make_get(keys));
    if (resp.opcode != wire::kGetResp) raise_err(resp);
    wire::GetResp parsed = wire::parse_get_resp(resp.payload);
    RemoteLookup out;
    out.version = parsed.version;
    for (auto& e : parsed.entries) {
      Tensor t = Tensor::zeros({e.values.size()});
      for (std::size_t i = 0; i < e.values.size(); ++i) t[i] = double(e.values[i]);
      out.entries.push_back({std::move(t), !e.hit});
    }
    return out;
  }

  MmView lookup_one(uint64_t key) {
    RemoteLookup r = remote_lookup({key});
    return {std::move(r.entries[0].vector), r.entries[0].miss};
  }

  void remote_put(uint64_t key, const Tensor& value) {
    std::vector<float> f(value.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = float(value[i]);
    wire::Frame resp = round_trip(wire::make_put(key, f));
    if (resp.opcode != wire::kPutAck) raise_err(resp);
  }

  wire::StatsResp stats() {
    wire::Frame resp = round_trip({wire::kStats, {}});
    if (resp.opcode != wire::kStats) raise_err(resp);
    return wire::parse_stats_resp(resp.payload);
  }

  // Raw frame exchange, for protocol-level tests.
  wire::Frame round_trip(const wire::Frame& req) {
    detail::write_all(fd_, wire::encode_frame(req));
    wire::Frame resp;
    bool bad_magic = false;
    if (!detail::read_frame(fd_, resp, bad_magic))
      throw std::runtime_error("connection closed by server");
    if (bad_magic) throw std::runtime_error("corrupt response header");
    return resp;
  }

  void send_raw(const std::vector<uint8_t>& bytes) { detail::write_all(fd_, bytes); }

  wire::Frame recv_frame() {
    wire::Frame resp;
    bool bad_magic = false;
    if (!detail::read_frame(fd_, resp, bad_magic))
      throw std::runtime_error("connection closed by server");
    return resp;
  }

 private:
  [[noreturn]] static void raise_err(const wire::Frame& resp) {
    if (resp.opcode == wire::kErr && resp.payload.size() >= 4) {
      wire::Reader r(resp.payload);
      throw std::runtime_error("server error code " + std::to_string(r.u32()));
    }
    throw std::runtime_error("unexpected opcode " + std::to_string(resp.opcode));
  }

  int fd_ = -1;
};

}  // namespace mim
