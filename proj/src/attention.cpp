#include "splitdecode/attention.hpp"

#include <Eigen/Core>

#include <chrono>
#include <cmath>
#include <cstring>
#include <algorithm>

namespace splitdecode {

const char* to_string(KvFormat fmt) {
  switch (fmt) {
    case KvFormat::kSingle: return "single";
    case KvFormat::kHalf: return "half";
    case KvFormat::kInt8: return "int8";
  }
  return "unknown";
}

KvFormat kv_format_from_string(const std::string& name) {
  if (name == "single") return KvFormat::kSingle;
  if (name == "half") return KvFormat::kHalf;
  if (name == "int8") return KvFormat::kInt8;
  throw ConfigError("unknown kv storage format: " + name);
}

QuantizedVec quantize_int8(std::span<const float> values) {
  QuantizedVec q;
  q.data.resize(values.size());
  float max_abs = 0.0f;
  for (float v : values) max_abs = std::max(max_abs, std::fabs(v));
  if (max_abs == 0.0f) {
    q.scale = 0.0f;
    return q;
  }
  q.scale = max_abs / 127.0f;
  const double inv = 1.0 / static_cast<double>(q.scale);
  for (std::size_t i = 0; i < values.size(); ++i) {
    // nearbyint under the default rounding mode is round-to-nearest-even
    double r = std::nearbyint(static_cast<double>(values[i]) * inv);
    r = std::clamp(r, -127.0, 127.0);
    q.data[i] = static_cast<std::int8_t>(r);
  }
  return q;
}

void dequantize_int8(const QuantizedVec& q, std::span<float> out) {
  for (std::size_t i = 0; i < q.data.size(); ++i) {
    out[i] = static_cast<float>(q.data[i]) * q.scale;
  }
}

std::uint16_t float_to_half_bits(float value) {
  return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(value));
}

float half_bits_to_float(std::uint16_t bits) {
  return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

KvShard::KvShard(const ModelSpec& spec, int head_start, int head_count,
                 long capacity_tokens, KvFormat format)
    : spec_(spec),
      head_start_(head_start),
      head_count_(head_count),
      capacity_tokens_(capacity_tokens),
      format_(format) {
  if (head_start < 0 || head_count < 1 ||
      head_start + head_count > spec.num_heads) {
    throw ConfigError("shard head range outside the model's heads");
  }
  if (capacity_tokens < 1) throw ConfigError("shard capacity must be >= 1");
}

bool KvShard::has_sequence(SequenceId seq) const {
  return entries_.find(seq) != entries_.end();
}

int KvShard::stored_length(SequenceId seq, int layer) const {
  const SeqLayer* sl = find(seq, layer);
  return sl ? sl->k.positions : 0;
}

const KvShard::SeqLayer* KvShard::find(SequenceId seq, int layer) const {
  auto it = entries_.find(seq);
  if (it == entries_.end()) return nullptr;
  return &it->second[static_cast<std::size_t>(layer)];
}

void KvShard::append_lane(LaneData& lane, std::span<const float> values) {
  switch (format_) {
    case KvFormat::kSingle:
      lane.f32.insert(lane.f32.end(), values.begin(), values.end());
      break;
    case KvFormat::kHalf:
      for (float v : values) lane.f16.push_back(float_to_half_bits(v));
      break;
    case KvFormat::kInt8: {
      // one scale per head so quantization error stays per-vector
      const int hd = spec_.head_dim;
      for (int h = 0; h < head_count_; ++h) {
        QuantizedVec q = quantize_int8(values.subspan(
            static_cast<std::size_t>(h) * hd, static_cast<std::size_t>(hd)));
        lane.i8.insert(lane.i8.end(), q.data.begin(), q.data.end());
        lane.i8_scales.push_back(q.scale);
      }
      break;
    }
  }
  lane.positions += 1;
}

void KvShard::decode_position_head(const LaneData& lane, int position,
                                   int head, float* out) const {
  const int hd = spec_.head_dim;
  const std::size_t off = static_cast<std::size_t>(position) * width() +
                          static_cast<std::size_t>(head) * hd;
  switch (format_) {
    case KvFormat::kSingle:
      std::memcpy(out, lane.f32.data() + off, sizeof(float) * hd);
      break;
    case KvFormat::kHalf:
      for (int i = 0; i < hd; ++i) {
        out[i] = half_bits_to_float(lane.f16[off + i]);
      }
      break;
    case KvFormat::kInt8: {
      const float scale =
          lane.i8_scales[static_cast<std::size_t>(position) * head_count_ + head];
      for (int i = 0; i < hd; ++i) {
        out[i] = static_cast<float>(lane.i8[off + i]) * scale;
      }
      break;
    }
  }
}

void KvShard::append(SequenceId seq, int layer, std::uint32_t position,
                     std::span<const float> k, std::span<const float> v) {
  if (layer < 0 || layer >= spec_.num_layers) {
    throw ProtocolError("append: layer index out of range");
  }
  if (static_cast<int>(k.size()) != width() ||
      static_cast<int>(v.size()) != width()) {
    throw ProtocolError("append: K/V width does not match the shard's head range");
  }
  if (total_positions_ + 1 > capacity_tokens_ * spec_.num_layers) {
    throw CapacityError("capacity exceeded: shard holds " +
                        std::to_string(token_count()) + " of " +
                        std::to_string(capacity_tokens_) + " tokens");
  }
  auto it = entries_.find(seq);
  if (it == entries_.end()) {
    if (position != 0) {
      throw UnknownSequenceError("unknown sequence " + std::to_string(seq) +
                          " (non-zero position without prior tokens)");
    }
    it = entries_.emplace(seq, std::vector<SeqLayer>(spec_.num_layers)).first;
  }
  SeqLayer& sl = it->second[static_cast<std::size_t>(layer)];
  if (static_cast<std::uint32_t>(sl.k.positions) != position) {
    throw ProtocolError("append: position " + std::to_string(position) +
                        " does not match stored length " +
                        std::to_string(sl.k.positions));
  }
  append_lane(sl.k, k);
  append_lane(sl.v, v);
  total_positions_ += 1;
}

void KvShard::append_request(const AttentionRequest& request) {
  // all-or-nothing: validate every item before touching storage
  if (total_positions_ + static_cast<long>(request.items.size()) >
      capacity_tokens_ * spec_.num_layers) {
    throw CapacityError("capacity exceeded: batch of " +
                        std::to_string(request.items.size()) +
                        " does not fit (shard at " +
                        std::to_string(token_count()) + "/" +
                        std::to_string(capacity_tokens_) + " tokens)");
  }
  for (const AttentionItem& item : request.items) {
    if (static_cast<int>(item.k.size()) != width() ||
        static_cast<int>(item.v.size()) != width()) {
      throw ProtocolError("append: K/V width does not match the shard's head range");
    }
    const SeqLayer* sl = find(item.seq, request.layer);
    const std::uint32_t stored = sl ? static_cast<std::uint32_t>(sl->k.positions) : 0;
    if (!sl && item.position != 0) {
      throw UnknownSequenceError("unknown sequence " + std::to_string(item.seq));
    }
    if (item.position != stored) {
      throw ProtocolError("append: position mismatch for sequence " +
                          std::to_string(item.seq));
    }
  }
  for (const AttentionItem& item : request.items) {
    append(item.seq, request.layer, item.position,
           std::span<const float>(item.k.data(), item.k.size()),
           std::span<const float>(item.v.data(), item.v.size()));
  }
}

AttentionResponse KvShard::attend(const AttentionRequest& request) const {
  AttentionResponse response;
  response.layer = request.layer;
  response.outputs.reserve(request.items.size());

  const int hd = spec_.head_dim;
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<float> row(static_cast<std::size_t>(hd));
  std::vector<float> scores;

  // the position scan is the bandwidth-bound core of this worker: scores
  // use a vectorized dot per stored row, the value reduction keeps one
  // accumulator per output element with positions ascending
  for (const AttentionItem& item : request.items) {
    const SeqLayer* sl = find(item.seq, request.layer);
    if (sl == nullptr) {
      throw UnknownSequenceError("attend: unknown sequence " + std::to_string(item.seq));
    }
    const int len = sl->k.positions;
    if (len < 1) {
      throw std::logic_error("attend: sequence has an empty cache");
    }
    if (static_cast<int>(item.q.size()) != width()) {
      throw ProtocolError("attend: Q width does not match the shard's head range");
    }

    AttentionOutput out;
    out.seq = item.seq;
    out.o = VectorXf::Zero(width());
    scores.resize(static_cast<std::size_t>(len));

    for (int h = 0; h < head_count_; ++h) {
      Eigen::Map<const VectorXf> qh(item.q.data() + h * hd, hd);

      if (format_ == KvFormat::kSingle) {
        const float* base = sl->k.f32.data() + static_cast<std::size_t>(h) * hd;
        for (int j = 0; j < len; ++j) {
          Eigen::Map<const VectorXf> kj(
              base + static_cast<std::size_t>(j) * width(), hd);
          scores[static_cast<std::size_t>(j)] = qh.dot(kj) * inv_sqrt_d;
        }
      } else {
        for (int j = 0; j < len; ++j) {
          decode_position_head(sl->k, j, h, row.data());
          Eigen::Map<const VectorXf> kj(row.data(), hd);
          scores[static_cast<std::size_t>(j)] = qh.dot(kj) * inv_sqrt_d;
        }
      }

      float max_score = scores[0];
      for (int j = 1; j < len; ++j) max_score = std::max(max_score, scores[j]);
      float denom = 0.0f;
      for (int j = 0; j < len; ++j) {
        scores[static_cast<std::size_t>(j)] =
            std::exp(scores[static_cast<std::size_t>(j)] - max_score);
        denom += scores[static_cast<std::size_t>(j)];
      }
      const float inv_denom = 1.0f / denom;

      Eigen::Map<VectorXf> oh(out.o.data() + h * hd, hd);
      if (format_ == KvFormat::kSingle) {
        const float* base = sl->v.f32.data() + static_cast<std::size_t>(h) * hd;
        for (int j = 0; j < len; ++j) {
          Eigen::Map<const VectorXf> vj(
              base + static_cast<std::size_t>(j) * width(), hd);
          oh += (scores[static_cast<std::size_t>(j)] * inv_denom) * vj;
        }
      } else {
        for (int j = 0; j < len; ++j) {
          decode_position_head(sl->v, j, h, row.data());
          Eigen::Map<const VectorXf> vj(row.data(), hd);
          oh += (scores[static_cast<std::size_t>(j)] * inv_denom) * vj;
        }
      }
    }
    response.outputs.push_back(std::move(out));
  }
  return response;
}

void KvShard::drop_sequence(SequenceId seq) {
  auto it = entries_.find(seq);
  if (it == entries_.end()) {
    warning_count_ += 1;
    return;
  }
  long removed = 0;
  for (const SeqLayer& sl : it->second) removed += sl.k.positions;
  total_positions_ -= removed;
  entries_.erase(it);
}

std::size_t KvShard::bytes_per_token() const {
  const std::size_t w = static_cast<std::size_t>(width());
  switch (format_) {
    case KvFormat::kSingle: return 2 * w * sizeof(float);
    case KvFormat::kHalf: return 2 * w * sizeof(std::uint16_t);
    case KvFormat::kInt8:
      return 2 * (w + static_cast<std::size_t>(head_count_) * sizeof(float));
  }
  return 0;
}

double bench_attention_per_token(const ModelSpec& spec, int batch, int seq_len,
                                 int repetitions) {
  if (repetitions < 1) {
    throw ConfigError("need at least one repetition");
  }
  KvShard shard(spec, 0, spec.num_heads,
                static_cast<long>(batch) * seq_len + batch, KvFormat::kSingle);

  const int w = spec.num_heads * spec.head_dim;
  AttentionRequest request;
  request.layer = 0;
  std::uint64_t state = 42;
  auto next = [&state]() {
    state = mix64(state);
    return 2.0f * (static_cast<float>(state >> 40) * 0x1p-24f) - 1.0f;
  };
  for (int b = 0; b < batch; ++b) {
    AttentionItem item;
    item.seq = static_cast<SequenceId>(b + 1);
    item.q.resize(w);
    item.k.resize(w);
    item.v.resize(w);
    for (int i = 0; i < w; ++i) item.q[i] = next();
    for (int pos = 0; pos < seq_len; ++pos) {
      for (int i = 0; i < w; ++i) item.k[i] = next();
      for (int i = 0; i < w; ++i) item.v[i] = next();
      shard.append(item.seq, 0, static_cast<std::uint32_t>(pos),
                   std::span<const float>(item.k.data(), item.k.size()),
                   std::span<const float>(item.v.data(), item.v.size()));
    }
    request.items.push_back(std::move(item));
  }

  using clock = std::chrono::steady_clock;
  std::vector<double> samples;
  samples.reserve(static_cast<std::size_t>(repetitions));
  volatile float sink = 0.0f;
  for (int rep = 0; rep < repetitions; ++rep) {
    const auto t0 = clock::now();
    AttentionResponse resp = shard.attend(request);
    const auto t1 = clock::now();
    sink = sink + resp.outputs.front().o[0];
    samples.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(samples.begin(), samples.end());
  const double median = samples[samples.size() / 2];
  return median / (static_cast<double>(batch) * seq_len);
}

}  // namespace splitdecode
