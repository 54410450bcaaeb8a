#include <doctest.h>

#include <array>
#include <cstring>
#include <map>
#include <set>
#include <vector>

#include "splitdecode/attention.hpp"
#include "splitdecode/core.hpp"
#include "splitdecode/transport.hpp"

using namespace splitdecode;

namespace {

std::uint64_t g_state = 12345;

std::uint64_t rnd() { return g_state = mix64(g_state); }

float rnd_float() {
  return 2.0f * (static_cast<float>(rnd() >> 40) * 0x1p-24f) - 1.0f;
}

VectorXf rnd_vec(int n) {
  VectorXf v(n);
  for (int i = 0; i < n; ++i) v[i] = rnd_float();
  return v;
}

QkvBatchPayload random_qkv(int count, int head_count, int head_dim) {
  QkvBatchPayload p;
  p.layer = static_cast<std::uint16_t>(rnd() % 64);
  p.step = static_cast<std::uint32_t>(rnd() % 100000);
  p.head_start = 0;
  p.head_count = static_cast<std::uint16_t>(head_count);
  for (int i = 0; i < count; ++i) {
    QkvRecord rec;
    rec.seq = rnd();
    rec.position = static_cast<std::uint32_t>(rnd() % 4096);
    rec.q = rnd_vec(head_count * head_dim);
    rec.k = rnd_vec(head_count * head_dim);
    rec.v = rnd_vec(head_count * head_dim);
    p.records.push_back(std::move(rec));
  }
  return p;
}

std::vector<std::uint8_t> concat(const std::vector<std::vector<std::uint8_t>>& parts) {
  std::vector<std::uint8_t> all;
  for (const auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  return all;
}

}  // namespace

TEST_CASE("frame encoding has the fixed 10-byte header layout") {
  WireMessage msg = make_message(MsgType::kHello, {0xAA, 0xBB});
  const auto bytes = encode_frame(msg);
  REQUIRE(bytes.size() == 12);
  CHECK(bytes[0] == 'S');
  CHECK(bytes[1] == 'D');
  CHECK(bytes[2] == 'W');
  CHECK(bytes[3] == 'P');
  CHECK(bytes[4] == kWireVersion);
  CHECK(bytes[5] == static_cast<std::uint8_t>(MsgType::kHello));
  CHECK(bytes[6] == 2);  // payload_len little-endian
  CHECK(bytes[7] == 0);
  CHECK(bytes[8] == 0);
  CHECK(bytes[9] == 0);
  CHECK(bytes[10] == 0xAA);
  CHECK(bytes[11] == 0xBB);
}

TEST_CASE("hand-built golden frame for one QKV record") {
  // head_dim 2, one head: width 2. Values chosen with exact float encodings.
  QkvBatchPayload p;
  p.layer = 3;
  p.step = 7;
  p.head_start = 1;
  p.head_count = 1;
  QkvRecord rec;
  rec.seq = 0x0102030405060708ull;
  rec.position = 9;
  rec.q = VectorXf(2);
  rec.q << 1.0f, -2.0f;
  rec.k = VectorXf(2);
  rec.k << 0.5f, 4.0f;
  rec.v = VectorXf(2);
  rec.v << -0.25f, 8.0f;
  p.records.push_back(rec);

  std::vector<std::uint8_t> expected = {
      3, 0,                     // layer u16
      7, 0, 0, 0,               // step u32
      1, 0, 0, 0,               // count u32
      1, 0,                     // head_start u16
      1, 0,                     // head_count u16
      8, 7, 6, 5, 4, 3, 2, 1,   // seq u64 little-endian
      9, 0, 0, 0,               // position u32
  };
  auto push_f32 = [&expected](float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) {
      expected.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
  };
  push_f32(1.0f);
  push_f32(-2.0f);
  push_f32(0.5f);
  push_f32(4.0f);
  push_f32(-0.25f);
  push_f32(8.0f);

  const auto encoded = encode_qkv_payload(p, WirePrecision::kSingle);
  CHECK(encoded == expected);
  CHECK(expected.size() == kBatchPayloadPrefixBytes + 12 + 3 * 2 * 4);
}

TEST_CASE("empty QKV batch is legal with the 14-byte fixed prefix") {
  QkvBatchPayload p;
  p.layer = 0;
  p.step = 0;
  p.head_start = 0;
  p.head_count = 2;
  const auto bytes = encode_qkv_payload(p, WirePrecision::kSingle);
  CHECK(bytes.size() == kBatchPayloadPrefixBytes);
  const QkvBatchPayload back = decode_qkv_payload(bytes, 8, WirePrecision::kSingle);
  CHECK(back.records.empty());
  CHECK(back.head_count == 2);
}

TEST_CASE("payload round-trips for every message type") {
  for (int trial = 0; trial < 1000; ++trial) {
    const int head_count = 1 + static_cast<int>(rnd() % 4);
    const int head_dim = 2 + static_cast<int>(rnd() % 6);

    const QkvBatchPayload q = random_qkv(static_cast<int>(rnd() % 5),
                                         head_count, head_dim);
    const QkvBatchPayload q2 = decode_qkv_payload(
        encode_qkv_payload(q, WirePrecision::kSingle), head_dim,
        WirePrecision::kSingle);
    REQUIRE(q2.records.size() == q.records.size());
    REQUIRE(q2.layer == q.layer);
    REQUIRE(q2.step == q.step);
    for (std::size_t i = 0; i < q.records.size(); ++i) {
      REQUIRE(q2.records[i].seq == q.records[i].seq);
      REQUIRE(q2.records[i].position == q.records[i].position);
      REQUIRE(q2.records[i].q == q.records[i].q);
      REQUIRE(q2.records[i].k == q.records[i].k);
      REQUIRE(q2.records[i].v == q.records[i].v);
    }

    OBatchPayload o;
    o.layer = q.layer;
    o.step = q.step;
    o.head_start = q.head_start;
    o.head_count = q.head_count;
    for (const QkvRecord& rec : q.records) {
      o.records.push_back(ORecord{rec.seq, rec.q});
    }
    const OBatchPayload o2 = decode_o_payload(
        encode_o_payload(o, WirePrecision::kSingle), head_dim,
        WirePrecision::kSingle);
    REQUIRE(o2.records.size() == o.records.size());
    for (std::size_t i = 0; i < o.records.size(); ++i) {
      REQUIRE(o2.records[i].seq == o.records[i].seq);
      REQUIRE(o2.records[i].o == o.records[i].o);
    }

    DropSeqPayload d;
    for (int i = static_cast<int>(rnd() % 6); i > 0; --i) d.seqs.push_back(rnd());
    const DropSeqPayload d2 = decode_drop_payload(encode_drop_payload(d));
    REQUIRE(d2.seqs == d.seqs);

    ErrorPayload e{static_cast<std::uint16_t>(rnd() % 7), "problem"};
    const ErrorPayload e2 = decode_error_payload(encode_error_payload(e));
    REQUIRE(e2.code == e.code);
    REQUIRE(e2.message == e.message);
  }
}

TEST_CASE("half-precision wire round-trip is exact for half-representable values") {
  QkvBatchPayload p = random_qkv(3, 2, 4);
  // snap values onto the half grid first
  for (QkvRecord& rec : p.records) {
    for (VectorXf* v : {&rec.q, &rec.k, &rec.v}) {
      for (int i = 0; i < v->size(); ++i) {
        (*v)[i] = half_bits_to_float(float_to_half_bits((*v)[i]));
      }
    }
  }
  const QkvBatchPayload back = decode_qkv_payload(
      encode_qkv_payload(p, WirePrecision::kHalf), 4, WirePrecision::kHalf);
  for (std::size_t i = 0; i < p.records.size(); ++i) {
    CHECK(back.records[i].q == p.records[i].q);
    CHECK(back.records[i].k == p.records[i].k);
    CHECK(back.records[i].v == p.records[i].v);
  }
}

TEST_CASE("frame decoder reassembles split frames") {
  std::vector<std::vector<std::uint8_t>> frames;
  frames.push_back(encode_frame(make_message(MsgType::kHello)));
  frames.push_back(encode_frame(
      make_message(MsgType::kQkvBatch,
                   encode_qkv_payload(random_qkv(2, 2, 4), WirePrecision::kSingle))));
  frames.push_back(encode_frame(make_error(kErrCapacity, "full")));
  const auto all = concat(frames);

  for (std::size_t chunk : {1ul, 3ul, 7ul, all.size()}) {
    FrameDecoder decoder;
    std::vector<WireMessage> out;
    WireMessage msg;
    for (std::size_t pos = 0; pos < all.size(); pos += chunk) {
      const std::size_t n = std::min(chunk, all.size() - pos);
      decoder.feed(std::span<const std::uint8_t>(all.data() + pos, n));
      while (decoder.poll(msg) == DecodeStatus::kFrame) out.push_back(msg);
    }
    REQUIRE(out.size() == 3);
    CHECK(out[0].msg_type() == MsgType::kHello);
    CHECK(out[1].msg_type() == MsgType::kQkvBatch);
    CHECK(out[2].msg_type() == MsgType::kError);
  }
}

TEST_CASE("bad magic is fatal; bad version and unknown types pass through") {
  auto frame = encode_frame(make_message(MsgType::kHello));
  frame[0] = 'X';
  FrameDecoder decoder;
  decoder.feed(frame);
  WireMessage msg;
  CHECK(decoder.poll(msg) == DecodeStatus::kFatal);
  CHECK(decoder.error() == "bad magic");
  // a fatal decoder stays fatal
  decoder.feed(encode_frame(make_message(MsgType::kHello)));
  CHECK(decoder.poll(msg) == DecodeStatus::kFatal);

  WireMessage versioned = make_message(MsgType::kHello);
  versioned.version = 9;
  FrameDecoder fresh;
  fresh.feed(encode_frame(versioned));
  REQUIRE(fresh.poll(msg) == DecodeStatus::kFrame);
  CHECK(msg.version == 9);  // session layer replies ERROR, framing survives

  WireMessage unknown;
  unknown.type = 200;
  FrameDecoder fresh2;
  fresh2.feed(encode_frame(unknown));
  REQUIRE(fresh2.poll(msg) == DecodeStatus::kFrame);
  CHECK(msg.type == 200);
}

TEST_CASE("oversized frame length is fatal") {
  auto frame = encode_frame(make_message(MsgType::kHello));
  frame[9] = 0xFF;  // payload_len high byte: > 64 MB
  FrameDecoder decoder;
  decoder.feed(frame);
  WireMessage msg;
  CHECK(decoder.poll(msg) == DecodeStatus::kFatal);
}

TEST_CASE("fuzzed mutations never misparse silently") {
  // every prefix of any stream must end in complete frames + needs-more,
  // or exactly one fatal error; payload parsers must reject cleanly
  std::vector<std::vector<std::uint8_t>> frames;
  frames.push_back(encode_frame(make_message(MsgType::kHello)));
  frames.push_back(encode_frame(make_message(
      MsgType::kQkvBatch,
      encode_qkv_payload(random_qkv(2, 2, 4), WirePrecision::kSingle))));
  frames.push_back(encode_frame(make_message(
      MsgType::kDropSeq, encode_drop_payload(DropSeqPayload{{1, 2, 3}}))));
  const auto pristine = concat(frames);

  int fatal = 0, parsed = 0, rejected = 0, incomplete = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    auto bytes = pristine;
    // 1-3 random single-byte mutations, sometimes a truncation
    const int mutations = 1 + static_cast<int>(rnd() % 3);
    for (int m = 0; m < mutations; ++m) {
      bytes[rnd() % bytes.size()] = static_cast<std::uint8_t>(rnd());
    }
    if (rnd() % 4 == 0) bytes.resize(rnd() % (bytes.size() + 1));

    FrameDecoder decoder;
    decoder.feed(bytes);
    WireMessage msg;
    bool saw_fatal = false;
    for (;;) {
      const DecodeStatus status = decoder.poll(msg);
      if (status == DecodeStatus::kNeedMore) {
        ++incomplete;
        break;
      }
      if (status == DecodeStatus::kFatal) {
        REQUIRE_FALSE(saw_fatal);  // exactly one fatal per stream
        saw_fatal = true;
        ++fatal;
        break;
      }
      // complete frame: typed parsing either succeeds or throws ProtocolError
      try {
        switch (msg.msg_type()) {
          case MsgType::kQkvBatch:
            decode_qkv_payload(msg.payload, 4, WirePrecision::kSingle);
            break;
          case MsgType::kOBatch:
            decode_o_payload(msg.payload, 4, WirePrecision::kSingle);
            break;
          case MsgType::kDropSeq:
            decode_drop_payload(msg.payload);
            break;
          case MsgType::kError:
            decode_error_payload(msg.payload);
            break;
          default:
            break;  // header-only or unknown types: nothing to parse
        }
        ++parsed;
      } catch (const ProtocolError&) {
        ++rejected;
      }
    }
  }
  INFO("fatal=", fatal, " parsed=", parsed, " rejected=", rejected,
       " incomplete=", incomplete);
  CHECK(fatal > 0);
  CHECK(parsed > 0);
  CHECK(rejected > 0);
}

TEST_CASE("shard map: single worker takes everything") {
  const ShardMap map(ShardMode::kBySequence, 8, 1);
  for (SequenceId seq = 0; seq < 50; ++seq) {
    for (int head = 0; head < 8; ++head) {
      CHECK(map.worker_for(seq, head) == 0);
    }
  }
  CHECK(map.head_range(0) == std::pair<int, int>{0, 8});
}

TEST_CASE("by-head ranges are contiguous and near-equal") {
  const ShardMap map(ShardMode::kByHead, 8, 2);
  CHECK(map.head_range(0) == std::pair<int, int>{0, 4});
  CHECK(map.head_range(1) == std::pair<int, int>{4, 4});
  for (int head = 0; head < 8; ++head) {
    CHECK(map.worker_for(1, head) == (head < 4 ? 0 : 1));
  }

  const ShardMap uneven(ShardMode::kByHead, 7, 3);
  std::vector<int> counts(3, 0);
  for (int w = 0; w < 3; ++w) counts[w] = uneven.head_range(w).second;
  CHECK(counts == std::vector<int>{3, 2, 2});
}

TEST_CASE("by-sequence hashing balances a thousand sequences over four workers") {
  const ShardMap map(ShardMode::kBySequence, 8, 4);
  std::vector<int> counts(4, 0);
  for (SequenceId seq = 1; seq <= 1000; ++seq) {
    counts[static_cast<std::size_t>(map.worker_for(seq, 0))] += 1;
  }
  for (int c : counts) {
    CHECK(c >= 230);
    CHECK(c <= 270);
  }
}

TEST_CASE("assignments cover every (sequence, head) pair exactly once") {
  for (const ShardMode mode :
       {ShardMode::kBySequence, ShardMode::kByHead, ShardMode::kHybrid}) {
    for (int workers : {1, 2, 4}) {
      const ShardMap map(mode, 8, workers);
      for (SequenceId seq = 1; seq <= 64; ++seq) {
        for (int head = 0; head < 8; ++head) {
          const int w = map.worker_for(seq, head);
          REQUIRE(w >= 0);
          REQUIRE(w < workers);
          // the owning worker's head range must contain the head
          const auto [h0, hc] = map.head_range(w);
          REQUIRE(head >= h0);
          REQUIRE(head < h0 + hc);
        }
      }
    }
  }
}

TEST_CASE("wire byte estimate at the 7b-class geometry") {
  const ModelSpec spec = make_model_spec(32, 4096, 32, 11008, 32000);
  // batch 1024, half precision: 1024 * 4 * 4096 * 2 bytes = 32 MiB per layer
  CHECK(estimate_wire_bytes(spec, 1024, WirePrecision::kHalf) == 33554432u);
  CHECK(estimate_wire_bytes(spec, 1, WirePrecision::kHalf) == 32768u);
  CHECK(estimate_wire_bytes(spec, 1024, WirePrecision::kSingle) ==
        2u * 33554432u);
}
