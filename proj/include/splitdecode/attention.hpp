#pragma once

#include "splitdecode/core.hpp"

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

// The attention side of the split: per-sequence KV storage with pluggable
// storage formats and the attention computation itself. Scores are scaled
// dot products over every stored position of the sequence, including the
// current token; all arithmetic is single precision no matter how the cache
// is stored, and reductions run in ascending position order with a single
// accumulator so results do not depend on sharding or batch composition.

namespace splitdecode {

class UnknownSequenceError : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

enum class KvFormat : std::uint8_t { kSingle, kHalf, kInt8 };

const char* to_string(KvFormat fmt);
KvFormat kv_format_from_string(const std::string& name);

/// Symmetric per-vector int8 quantization: scale = max|x|/127, values rounded
/// to nearest (ties to even). An all-zero vector gets scale 0 and decodes to
/// zeros.
struct QuantizedVec {
  std::vector<std::int8_t> data;
  float scale = 0.0f;
};

QuantizedVec quantize_int8(std::span<const float> values);
void dequantize_int8(const QuantizedVec& q, std::span<float> out);

/// IEEE round-to-nearest-even float -> half -> float storage conversion.
std::uint16_t float_to_half_bits(float value);
float half_bits_to_float(std::uint16_t bits);

struct AttentionItem {
  SequenceId seq = 0;
  std::uint32_t position = 0;  // stored length before this token is appended
  VectorXf q, k, v;            // width = heads_in_range * head_dim
};

struct AttentionRequest {
  int layer = 0;
  std::vector<AttentionItem> items;
};

struct AttentionOutput {
  SequenceId seq = 0;
  VectorXf o;
};

struct AttentionResponse {
  int layer = 0;
  std::vector<AttentionOutput> outputs;  // same order as the request items
};

/// Per-worker store of K/V vectors keyed by (sequence, layer), covering a
/// contiguous head range. Grows by one position per append; capacity is
/// counted in tokens (a token occupies one position in every layer).
class KvShard {
 public:
  KvShard(const ModelSpec& spec, int head_start, int head_count,
          long capacity_tokens, KvFormat format = KvFormat::kSingle);

  int head_start() const { return head_start_; }
  int head_count() const { return head_count_; }
  int width() const { return head_count_ * spec_.head_dim; }
  KvFormat format() const { return format_; }
  long capacity() const { return capacity_tokens_; }

  /// Total stored tokens across sequences (positions summed over layers,
  /// divided by the layer count).
  long token_count() const { return total_positions_ / spec_.num_layers; }

  bool has_sequence(SequenceId seq) const;
  /// Stored positions for (seq, layer); 0 when absent.
  int stored_length(SequenceId seq, int layer) const;

  /// Appends one K/V pair for (seq, layer). Converts from single precision
  /// into the shard's storage format on write. Throws CapacityError when the
  /// token accounting would exceed capacity, ProtocolError on width mismatch
  /// or position mismatch (position must equal the current stored length).
  void append(SequenceId seq, int layer, std::uint32_t position,
              std::span<const float> k, std::span<const float> v);

  /// Appends every item of the request, all or nothing: capacity and
  /// positions are validated for the whole batch before any write.
  void append_request(const AttentionRequest& request);

  /// Scaled-dot-product attention for each request item over all stored
  /// positions of its sequence (the item's own K/V must already be
  /// appended). Unknown sequence -> ProtocolError; empty cache ->
  /// std::logic_error (precondition breach).
  AttentionResponse attend(const AttentionRequest& request) const;

  /// Removes every layer's entries for the sequence. Unknown id is a
  /// counted no-op.
  void drop_sequence(SequenceId seq);

  int warning_count() const { return warning_count_; }

  /// Bytes of K/V payload held for one stored token in this shard's format.
  std::size_t bytes_per_token() const;

 private:
  struct LaneData {
    // exactly one of these is populated, per the shard format
    std::vector<float> f32;
    std::vector<std::uint16_t> f16;
    std::vector<std::int8_t> i8;
    std::vector<float> i8_scales;  // one per (position, head)
    int positions = 0;
  };
  struct SeqLayer {
    LaneData k, v;
  };

  const SeqLayer* find(SequenceId seq, int layer) const;
  void append_lane(LaneData& lane, std::span<const float> values);
  // decodes one head's slice of one stored position into out[0..head_dim)
  void decode_position_head(const LaneData& lane, int position, int head,
                            float* out) const;

  ModelSpec spec_;
  int head_start_;
  int head_count_;
  long capacity_tokens_;
  KvFormat format_;
  long total_positions_ = 0;
  int warning_count_ = 0;
  std::unordered_map<SequenceId, std::vector<SeqLayer>> entries_;
};

/// Median seconds one worker spends per (token-position x layer) of attend.
/// Runs `attend` over `batch` sequences of `seq_len` stored tokens,
/// deterministic inputs, `repetitions` samples. Throws ConfigError when
/// repetitions < 1.
double bench_attention_per_token(const ModelSpec& spec, int batch, int seq_len,
                                 int repetitions);

}  // namespace splitdecode
