#include "splitdecode/transport.hpp"

#include "splitdecode/attention.hpp"

#include <cstring>
#include <numeric>

namespace splitdecode {

namespace {

class ByteWriter {
 public:
  explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    out_.push_back(static_cast<std::uint8_t>(v));
    out_.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void vec(const VectorXf& v, WirePrecision precision) {
    if (precision == WirePrecision::kSingle) {
      for (Eigen::Index i = 0; i < v.size(); ++i) f32(v[i]);
    } else {
      for (Eigen::Index i = 0; i < v.size(); ++i) u16(float_to_half_bits(v[i]));
    }
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_]) |
                      static_cast<std::uint16_t>(bytes_[pos_ + 1]) << 8;
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  void vec(VectorXf& out, int width, WirePrecision precision) {
    out.resize(width);
    if (precision == WirePrecision::kSingle) {
      for (int i = 0; i < width; ++i) out[i] = f32();
    } else {
      for (int i = 0; i < width; ++i) out[i] = half_bits_to_float(u16());
    }
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw ProtocolError("payload truncated");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::size_t element_bytes(WirePrecision precision) {
  return precision == WirePrecision::kSingle ? 4 : 2;
}

}  // namespace

std::vector<std::uint8_t> encode_frame(const WireMessage& msg) {
  if (msg.payload.size() > kMaxPayloadBytes) {
    throw ProtocolError("payload exceeds the frame size limit");
  }
  std::vector<std::uint8_t> out;
  out.reserve(kFrameHeaderBytes + msg.payload.size());
  out.insert(out.end(), std::begin(kWireMagic), std::end(kWireMagic));
  ByteWriter w(out);
  w.u8(msg.version);
  w.u8(msg.type);
  w.u32(static_cast<std::uint32_t>(msg.payload.size()));
  out.insert(out.end(), msg.payload.begin(), msg.payload.end());
  return out;
}

void FrameDecoder::feed(std::span<const std::uint8_t> bytes) {
  if (consumed_ > 0 && consumed_ == buffer_.size()) {
    buffer_.clear();
    consumed_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

DecodeStatus FrameDecoder::poll(WireMessage& out) {
  if (fatal_) return DecodeStatus::kFatal;
  const std::size_t available = buffer_.size() - consumed_;
  if (available < kFrameHeaderBytes) return DecodeStatus::kNeedMore;
  const std::uint8_t* p = buffer_.data() + consumed_;
  if (std::memcmp(p, kWireMagic, 4) != 0) {
    fatal_ = true;
    error_ = "bad magic";
    return DecodeStatus::kFatal;
  }
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(p[6 + i]) << (8 * i);
  if (len > kMaxPayloadBytes) {
    fatal_ = true;
    error_ = "frame length " + std::to_string(len) + " exceeds the limit";
    return DecodeStatus::kFatal;
  }
  if (available < kFrameHeaderBytes + len) return DecodeStatus::kNeedMore;
  out.version = p[4];
  out.type = p[5];
  out.payload.assign(p + kFrameHeaderBytes, p + kFrameHeaderBytes + len);
  consumed_ += kFrameHeaderBytes + len;
  return DecodeStatus::kFrame;
}

const char* to_string(WirePrecision p) {
  return p == WirePrecision::kSingle ? "single" : "half";
}

WirePrecision wire_precision_from_string(const std::string& name) {
  if (name == "single") return WirePrecision::kSingle;
  if (name == "half") return WirePrecision::kHalf;
  throw ConfigError("unknown wire precision: " + name);
}

std::vector<std::uint8_t> encode_qkv_payload(const QkvBatchPayload& payload,
                                             WirePrecision precision) {
  std::vector<std::uint8_t> out;
  ByteWriter w(out);
  w.u16(payload.layer);
  w.u32(payload.step);
  w.u32(static_cast<std::uint32_t>(payload.records.size()));
  w.u16(payload.head_start);
  w.u16(payload.head_count);
  for (const QkvRecord& rec : payload.records) {
    w.u64(rec.seq);
    w.u32(rec.position);
    w.vec(rec.q, precision);
    w.vec(rec.k, precision);
    w.vec(rec.v, precision);
  }
  return out;
}

QkvBatchPayload decode_qkv_payload(std::span<const std::uint8_t> bytes,
                                   int head_dim, WirePrecision precision) {
  ByteReader r(bytes);
  QkvBatchPayload payload;
  payload.layer = r.u16();
  payload.step = r.u32();
  const std::uint32_t count = r.u32();
  payload.head_start = r.u16();
  payload.head_count = r.u16();
  if (payload.head_count == 0) throw ProtocolError("qkv batch: zero head range");
  const int width = payload.head_count * head_dim;
  const std::size_t record_bytes = 12 + 3u * width * element_bytes(precision);
  if (r.remaining() != count * record_bytes) {
    throw ProtocolError("qkv batch: payload size does not match count");
  }
  payload.records.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    QkvRecord& rec = payload.records[i];
    rec.seq = r.u64();
    rec.position = r.u32();
    r.vec(rec.q, width, precision);
    r.vec(rec.k, width, precision);
    r.vec(rec.v, width, precision);
  }
  return payload;
}

std::vector<std::uint8_t> encode_o_payload(const OBatchPayload& payload,
                                           WirePrecision precision) {
  std::vector<std::uint8_t> out;
  ByteWriter w(out);
  w.u16(payload.layer);
  w.u32(payload.step);
  w.u32(static_cast<std::uint32_t>(payload.records.size()));
  w.u16(payload.head_start);
  w.u16(payload.head_count);
  for (const ORecord& rec : payload.records) {
    w.u64(rec.seq);
    w.vec(rec.o, precision);
  }
  return out;
}

OBatchPayload decode_o_payload(std::span<const std::uint8_t> bytes,
                               int head_dim, WirePrecision precision) {
  ByteReader r(bytes);
  OBatchPayload payload;
  payload.layer = r.u16();
  payload.step = r.u32();
  const std::uint32_t count = r.u32();
  payload.head_start = r.u16();
  payload.head_count = r.u16();
  if (payload.head_count == 0) throw ProtocolError("o batch: zero head range");
  const int width = payload.head_count * head_dim;
  const std::size_t record_bytes = 8 + static_cast<std::size_t>(width) * element_bytes(precision);
  if (r.remaining() != count * record_bytes) {
    throw ProtocolError("o batch: payload size does not match count");
  }
  payload.records.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ORecord& rec = payload.records[i];
    rec.seq = r.u64();
    r.vec(rec.o, width, precision);
  }
  return payload;
}

std::vector<std::uint8_t> encode_drop_payload(const DropSeqPayload& payload) {
  std::vector<std::uint8_t> out;
  ByteWriter w(out);
  w.u32(static_cast<std::uint32_t>(payload.seqs.size()));
  for (SequenceId seq : payload.seqs) w.u64(seq);
  return out;
}

DropSeqPayload decode_drop_payload(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  DropSeqPayload payload;
  const std::uint32_t count = r.u32();
  if (r.remaining() != count * 8u) {
    throw ProtocolError("drop: payload size does not match count");
  }
  payload.seqs.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) payload.seqs[i] = r.u64();
  return payload;
}

std::vector<std::uint8_t> encode_error_payload(const ErrorPayload& payload) {
  std::vector<std::uint8_t> out;
  ByteWriter w(out);
  w.u16(payload.code);
  w.u32(static_cast<std::uint32_t>(payload.message.size()));
  out.insert(out.end(), payload.message.begin(), payload.message.end());
  return out;
}

ErrorPayload decode_error_payload(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  ErrorPayload payload;
  payload.code = r.u16();
  const std::uint32_t len = r.u32();
  if (r.remaining() != len) throw ProtocolError("error payload truncated");
  payload.message.resize(len);
  for (std::uint32_t i = 0; i < len; ++i) {
    payload.message[i] = static_cast<char>(r.u8());
  }
  return payload;
}

WireMessage make_message(MsgType type, std::vector<std::uint8_t> payload) {
  WireMessage msg;
  msg.type = static_cast<std::uint8_t>(type);
  msg.payload = std::move(payload);
  return msg;
}

WireMessage make_error(std::uint16_t code, const std::string& message) {
  return make_message(MsgType::kError,
                      encode_error_payload(ErrorPayload{code, message}));
}

const char* to_string(ShardMode mode) {
  switch (mode) {
    case ShardMode::kBySequence: return "by-sequence";
    case ShardMode::kByHead: return "by-head";
    case ShardMode::kHybrid: return "hybrid";
  }
  return "unknown";
}

ShardMode shard_mode_from_string(const std::string& name) {
  if (name == "by-sequence") return ShardMode::kBySequence;
  if (name == "by-head") return ShardMode::kByHead;
  if (name == "hybrid") return ShardMode::kHybrid;
  throw ConfigError("unknown shard mode: " + name);
}

ShardMap::ShardMap(ShardMode mode, int num_heads, int workers)
    : mode_(mode), num_heads_(num_heads), workers_(workers) {
  if (workers < 1) throw ConfigError("shard map needs at least one worker");
  if (num_heads < 1) throw ConfigError("shard map needs at least one head");
  if (mode == ShardMode::kByHead && workers > num_heads) {
    throw ConfigError("by-head sharding cannot use more workers than heads");
  }
  head_groups_ = mode == ShardMode::kHybrid ? std::gcd(workers, num_heads) : 1;
}

namespace {

// contiguous ranges with sizes differing by at most one
std::pair<int, int> range_of(int index, int groups, int total) {
  const int base = total / groups;
  const int rem = total % groups;
  const int start = index * base + std::min(index, rem);
  return {start, base + (index < rem ? 1 : 0)};
}

int group_of_head(int head, int groups, int total) {
  for (int g = 0; g < groups; ++g) {
    const auto [start, count] = range_of(g, groups, total);
    if (head >= start && head < start + count) return g;
  }
  throw ConfigError("head index out of range");
}

}  // namespace

int ShardMap::worker_for(SequenceId seq, int head) const {
  if (head < 0 || head >= num_heads_) throw ConfigError("head index out of range");
  switch (mode_) {
    case ShardMode::kBySequence:
      return static_cast<int>(mix64(seq) % static_cast<std::uint64_t>(workers_));
    case ShardMode::kByHead:
      return group_of_head(head, workers_, num_heads_);
    case ShardMode::kHybrid: {
      const int seq_groups = workers_ / head_groups_;
      const int hg = group_of_head(head, head_groups_, num_heads_);
      const int sg = static_cast<int>(
          mix64(seq) % static_cast<std::uint64_t>(seq_groups));
      return hg * seq_groups + sg;
    }
  }
  throw ConfigError("invalid shard mode");
}

std::pair<int, int> ShardMap::head_range(int worker) const {
  if (worker < 0 || worker >= workers_) throw ConfigError("worker index out of range");
  switch (mode_) {
    case ShardMode::kBySequence:
      return {0, num_heads_};
    case ShardMode::kByHead:
      return range_of(worker, workers_, num_heads_);
    case ShardMode::kHybrid: {
      const int seq_groups = workers_ / head_groups_;
      return range_of(worker / seq_groups, head_groups_, num_heads_);
    }
  }
  throw ConfigError("invalid shard mode");
}

std::size_t estimate_wire_bytes(const ModelSpec& spec, long batch,
                                WirePrecision precision) {
  return static_cast<std::size_t>(batch) * 4u *
         static_cast<std::size_t>(spec.model_dim) * element_bytes(precision);
}

}  // namespace splitdecode
