#pragma once

#include <cstdint>
#include <cstring>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mim::wire {

// Framed binary protocol between computation and parameter machines.
//   magic 0x4D 0x4D | opcode u8 | payload length u32 LE | payload
// Keys are u64 LE; vectors are u16 LE dim followed by f32 LE values.

constexpr uint8_t kMagic0 = 0x4D;
constexpr uint8_t kMagic1 = 0x4D;

enum Opcode : uint8_t {
  kGet = 0x01,
  kPut = 0x02,
  kStats = 0x03,
  kGetResp = 0x81,
  kPutAck = 0x82,
  kErr = 0xFF,
};

enum ErrCode : uint32_t {
  kErrPayloadMismatch = 1,
  kErrBadMagic = 2,
  kErrUnknownOpcode = 3,
};

struct Frame {
  uint8_t opcode;
  std::vector<uint8_t> payload;
};

class Writer {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) {
    buf_.push_back(uint8_t(v));
    buf_.push_back(uint8_t(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(uint8_t(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(uint8_t(v >> (8 * i)));
  }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  std::vector<uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(const std::vector<uint8_t>& buf) : buf_(buf) {}

  bool done() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }

  uint8_t u8() { return need(1), buf_[pos_++]; }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(buf_[pos_]) | uint16_t(buf_[pos_ + 1]) << 8;
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(buf_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(buf_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw std::out_of_range("wire: truncated payload");
  }
  const std::vector<uint8_t>& buf_;
  std::size_t pos_ = 0;
};

inline std::vector<uint8_t> encode_frame(const Frame& f) {
  std::vector<uint8_t> out;
  out.reserve(7 + f.payload.size());
  out.push_back(kMagic0);
  out.push_back(kMagic1);
  out.push_back(f.opcode);
  uint32_t len = uint32_t(f.payload.size());
  for (int i = 0; i < 4; ++i) out.push_back(uint8_t(len >> (8 * i)));
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

// --- payload schemas -------------------------------------------------

inline Frame make_get(const std::vector<uint64_t>& keys) {
  Writer w;
  for (uint64_t k : keys) w.u64(k);
  return {kGet, w.take()};
}

inline std::vector<uint64_t> parse_get(const std::vector<uint8_t>& payload) {
  if (payload.size() % 8 != 0) throw std::invalid_argument("GET payload length mismatch");
  Reader r(payload);
  std::vector<uint64_t> keys;
  while (!r.done()) keys.push_back(r.u64());
  return keys;
}

struct GetRespEntry {
  bool hit;
  std::vector<float> values;
};

inline Frame make_get_resp(uint64_t version, const std::vector<GetRespEntry>& entries) {
  Writer w;
  w.u64(version);
  for (const auto& e : entries) {
    w.u8(e.hit ? 1 : 0);
    w.u16(uint16_t(e.values.size()));
    for (float v : e.values) w.f32(v);
  }
  return {kGetResp, w.take()};
}

struct GetResp {
  uint64_t version;
  std::vector<GetRespEntry> entries;
};

inline GetResp parse_get_resp(const std::vector<uint8_t>& payload) {
  Reader r(payload);
  GetResp resp;
  resp.version = r.u64();
  while (!r.done()) {
    GetRespEntry e;
    e.hit = r.u8() != 0;
    uint16_t dim = r.u16();
    e.values.resize(dim);
    for (uint16_t i = 0; i < dim; ++i) e.values[i] = r.f32();
    resp.entries.push_back(std::move(e));
  }
  return resp;
}

inline Frame make_put(uint64_t key, const std::vector<float>& values) {
  Writer w;
  w.u64(key);
  w.u16(uint16_t(values.size()));
  for (float v : values) w.f32(v);
  return {kPut, w.take()};
}

struct PutReq {
  uint64_t key;
  std::vector<float> values;
};

inline PutReq parse_put(const std::vector<uint8_t>& payload) {
  Reader r(payload);
  PutReq p;
  p.key = r.u64();
  uint16_t dim = r.u16();
  p.values.resize(dim);
  for (uint16_t i = 0; i < dim; ++i) p.values[i] = r.f32();
  if (!r.done()) throw std::invalid_argument("PUT payload length mismatch");
  return p;
}

struct StatsResp {
  uint64_t count;
  uint64_t version;
  uint64_t window_pending;
};

inline Frame make_stats_resp(const StatsResp& s) {
  Writer w;
  w.u64(s.count);
  w.u64(s.version);
  w.u64(s.window_pending);
  return {kStats, w.take()};  // echoed opcode with payload filled
}

inline StatsResp parse_stats_resp(const std::vector<uint8_t>& payload) {
  Reader r(payload);
  StatsResp s;
  s.count = r.u64();
  s.version = r.u64();
  s.window_pending = r.u64();
  return s;
}

inline Frame make_err(uint32_t code) {
  Writer w;
  w.u32(code);
  return {kErr, w.take()};
}

}  // namespace mim::wire
