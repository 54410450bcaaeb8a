#pragma once

#include "splitdecode/core.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

// Binary wire protocol between the dense worker and the attention workers.
// Only per-token intermediate vectors travel: Q/K/V out, O back. Frames are
// little-endian throughout:
//
//   magic "SDWP" | version u8 | msg_type u8 | payload_len u32 | payload
//
// A bad magic is fatal for the connection; an unsupported version or an
// unknown message type gets an ERROR reply and the connection survives.

namespace splitdecode {

inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::uint8_t kWireMagic[4] = {'S', 'D', 'W', 'P'};
inline constexpr std::size_t kFrameHeaderBytes = 10;
inline constexpr std::size_t kMaxPayloadBytes = 64u << 20;

enum class MsgType : std::uint8_t {
  kHello = 1,
  kConfig = 2,
  kQkvBatch = 3,
  kOBatch = 4,
  kDropSeq = 5,
  kShutdown = 6,
  kError = 7,
};

// error payload codes
inline constexpr std::uint16_t kErrBadVersion = 1;
inline constexpr std::uint16_t kErrUnknownType = 2;
inline constexpr std::uint16_t kErrMalformedPayload = 3;
inline constexpr std::uint16_t kErrCapacity = 4;
inline constexpr std::uint16_t kErrUnknownSequence = 5;
inline constexpr std::uint16_t kErrInternal = 6;

struct WireMessage {
  std::uint8_t version = kWireVersion;
  std::uint8_t type = 0;  // MsgType, kept raw so unknown values round-trip
  std::vector<std::uint8_t> payload;

  MsgType msg_type() const { return static_cast<MsgType>(type); }
};

std::vector<std::uint8_t> encode_frame(const WireMessage& msg);

enum class DecodeStatus { kFrame, kNeedMore, kFatal };

/// Incremental frame extraction from a byte stream. Every prefix of any
/// stream yields a sequence of complete frames followed by either a
/// needs-more state or exactly one fatal error; there is no silent misparse.
class FrameDecoder {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  DecodeStatus poll(WireMessage& out);
  const std::string& error() const { return error_; }
  std::size_t buffered() const { return buffer_.size() - consumed_; }

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t consumed_ = 0;
  bool fatal_ = false;
  std::string error_;
};

enum class WirePrecision : std::uint8_t { kSingle = 0, kHalf = 1 };

const char* to_string(WirePrecision p);
WirePrecision wire_precision_from_string(const std::string& name);

struct QkvRecord {
  SequenceId seq = 0;
  std::uint32_t position = 0;
  VectorXf q, k, v;  // head_count * head_dim each
};

struct QkvBatchPayload {
  std::uint16_t layer = 0;
  std::uint32_t step = 0;
  std::uint16_t head_start = 0;
  std::uint16_t head_count = 0;
  std::vector<QkvRecord> records;
};

struct ORecord {
  SequenceId seq = 0;
  VectorXf o;
};

struct OBatchPayload {
  std::uint16_t layer = 0;
  std::uint32_t step = 0;
  std::uint16_t head_start = 0;
  std::uint16_t head_count = 0;
  std::vector<ORecord> records;
};

struct DropSeqPayload {
  std::vector<SequenceId> seqs;
};

struct ErrorPayload {
  std::uint16_t code = 0;
  std::string message;
};

// fixed prefix of QKV_BATCH / O_BATCH payloads:
// layer u16 | step u32 | count u32 | head_start u16 | head_count u16
inline constexpr std::size_t kBatchPayloadPrefixBytes = 14;

std::vector<std::uint8_t> encode_qkv_payload(const QkvBatchPayload& payload,
                                             WirePrecision precision);
QkvBatchPayload decode_qkv_payload(std::span<const std::uint8_t> bytes,
                                   int head_dim, WirePrecision precision);

std::vector<std::uint8_t> encode_o_payload(const OBatchPayload& payload,
                                           WirePrecision precision);
OBatchPayload decode_o_payload(std::span<const std::uint8_t> bytes,
                               int head_dim, WirePrecision precision);

std::vector<std::uint8_t> encode_drop_payload(const DropSeqPayload& payload);
DropSeqPayload decode_drop_payload(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_error_payload(const ErrorPayload& payload);
ErrorPayload decode_error_payload(std::span<const std::uint8_t> bytes);

WireMessage make_message(MsgType type, std::vector<std::uint8_t> payload = {});
WireMessage make_error(std::uint16_t code, const std::string& message);

/// Worker assignment for (sequence, head) pairs. by-sequence hashes the id
/// and keeps all heads together; by-head gives each worker a contiguous
/// head range (sizes differing by at most one); hybrid splits heads across
/// gcd(workers, heads) groups and hashes sequences within each group.
enum class ShardMode { kBySequence, kByHead, kHybrid };

const char* to_string(ShardMode mode);
ShardMode shard_mode_from_string(const std::string& name);

class ShardMap {
 public:
  ShardMap(ShardMode mode, int num_heads, int workers);

  ShardMode mode() const { return mode_; }
  int workers() const { return workers_; }
  int num_heads() const { return num_heads_; }

  int worker_for(SequenceId seq, int head) const;
  /// Contiguous (first head, head count) held by a worker.
  std::pair<int, int> head_range(int worker) const;

 private:
  ShardMode mode_;
  int num_heads_;
  int workers_;
  int head_groups_;  // hybrid factorization
};

/// Bytes per step per layer moved for a batch: Q,K,V out plus O back,
/// B * 4 * model_dim elements.
std::size_t estimate_wire_bytes(const ModelSpec& spec, long batch,
                                WirePrecision precision);

}  // namespace splitdecode
