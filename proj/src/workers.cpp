#include "splitdecode/workers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>
#include <unordered_map>

namespace splitdecode {

using clock_type = std::chrono::steady_clock;

namespace {

double seconds_since(clock_type::time_point start) {
  return std::chrono::duration<double>(clock_type::now() - start).count();
}

}  // namespace

nlohmann::json to_json(const WorkerStats& stats) {
  return nlohmann::json{{"busy_seconds", stats.busy_seconds},
                        {"idle_seconds", stats.idle_seconds},
                        {"tokens_processed", stats.tokens_processed},
                        {"drop_warnings", stats.drop_warnings}};
}

AttentionWorkerSession::AttentionWorkerSession(
    const AttentionWorkerConfig& config)
    : config_(config) {}

WorkerStats AttentionWorkerSession::stats() const {
  WorkerStats s;
  s.busy_seconds = busy_seconds_;
  s.idle_seconds = idle_seconds_;
  s.tokens_processed = tokens_processed_;
  s.drop_warnings = shard_ ? shard_->warning_count() : 0;
  return s;
}

std::vector<WireMessage> AttentionWorkerSession::handle(const WireMessage& msg) {
  const auto start = clock_type::now();
  std::vector<WireMessage> replies = handle_inner(msg);
  busy_seconds_ += seconds_since(start);
  return replies;
}

std::vector<WireMessage> AttentionWorkerSession::handle_inner(
    const WireMessage& msg) {
  if (msg.version != kWireVersion) {
    return {make_error(kErrBadVersion,
                       "unsupported version " + std::to_string(msg.version) +
                           "; this worker speaks version " +
                           std::to_string(kWireVersion))};
  }

  switch (msg.msg_type()) {
    case MsgType::kHello:
      return {make_message(MsgType::kHello)};

    case MsgType::kConfig: {
      try {
        const auto j = nlohmann::json::parse(msg.payload.begin(), msg.payload.end());
        model_ = j.at("model").get<ModelSpec>();
        const int head_start = j.at("head_start").get<int>();
        const int head_count = j.at("head_count").get<int>();
        wire_precision_ =
            wire_precision_from_string(j.value("wire_precision", "single"));
        shard_.emplace(model_, head_start, head_count, config_.capacity_tokens,
                       config_.storage);
        nlohmann::json ack{{"ok", true},
                           {"capacity_tokens", config_.capacity_tokens},
                           {"storage_format", to_string(config_.storage)},
                           {"width", shard_->width()}};
        const std::string text = ack.dump();
        return {make_message(MsgType::kConfig,
                             std::vector<std::uint8_t>(text.begin(), text.end()))};
      } catch (const std::exception& e) {
        return {make_error(kErrMalformedPayload,
                           std::string("bad config: ") + e.what())};
      }
    }

    case MsgType::kQkvBatch: {
      if (!shard_) {
        return {make_error(kErrMalformedPayload, "QKV before CONFIG")};
      }
      try {
        QkvBatchPayload payload =
            decode_qkv_payload(msg.payload, model_.head_dim, wire_precision_);
        if (payload.head_start != shard_->head_start() ||
            payload.head_count != shard_->head_count()) {
          return {make_error(kErrMalformedPayload,
                             "head range does not match this shard")};
        }
        AttentionRequest request;
        request.layer = payload.layer;
        request.items.reserve(payload.records.size());
        for (QkvRecord& rec : payload.records) {
          AttentionItem item;
          item.seq = rec.seq;
          item.position = rec.position;
          item.q = std::move(rec.q);
          item.k = std::move(rec.k);
          item.v = std::move(rec.v);
          request.items.push_back(std::move(item));
        }
        shard_->append_request(request);
        AttentionResponse response = shard_->attend(request);
        tokens_processed_ += static_cast<long>(request.items.size());

        OBatchPayload reply;
        reply.layer = payload.layer;
        reply.step = payload.step;
        reply.head_start = payload.head_start;
        reply.head_count = payload.head_count;
        reply.records.reserve(response.outputs.size());
        for (AttentionOutput& out : response.outputs) {
          reply.records.push_back(ORecord{out.seq, std::move(out.o)});
        }
        return {make_message(MsgType::kOBatch,
                             encode_o_payload(reply, wire_precision_))};
      } catch (const CapacityError& e) {
        return {make_error(kErrCapacity, e.what())};
      } catch (const UnknownSequenceError& e) {
        return {make_error(kErrUnknownSequence, e.what())};
      } catch (const ProtocolError& e) {
        return {make_error(kErrMalformedPayload, e.what())};
      }
    }

    case MsgType::kDropSeq: {
      if (!shard_) return {};
      try {
        const DropSeqPayload payload = decode_drop_payload(msg.payload);
        for (SequenceId seq : payload.seqs) shard_->drop_sequence(seq);
      } catch (const ProtocolError& e) {
        return {make_error(kErrMalformedPayload, e.what())};
      }
      return {};  // fire-and-forget
    }

    case MsgType::kShutdown: {
      shutdown_ = true;
      const std::string text = to_json(stats()).dump();
      return {make_message(MsgType::kShutdown,
                           std::vector<std::uint8_t>(text.begin(), text.end()))};
    }

    case MsgType::kError:
      return {};  // peer-reported problem; nothing to reply

    case MsgType::kOBatch:
      return {make_error(kErrUnknownType, "unexpected O_BATCH at the worker")};
  }
  return {make_error(kErrUnknownType,
                     "unknown message type " + std::to_string(msg.type))};
}

int serve_attention_worker(const ServeOptions& options) {
  TcpListener listener(options.listen_addr);
  if (!options.port_file.empty()) {
    std::ofstream f(options.port_file);
    f << listener.port() << "\n";
  }
  std::fprintf(stderr, "attention worker listening on port %d (capacity %ld, %s)\n",
               listener.port(), options.worker.capacity_tokens,
               to_string(options.worker.storage));

  for (;;) {
    TcpStream stream = listener.accept_one();
    AttentionWorkerSession session(options.worker);
    FrameDecoder decoder;
    std::vector<std::uint8_t> buffer(1 << 16);
    bool session_over = false;

    while (!session_over) {
      const auto idle_start = clock_type::now();
      std::size_t n = 0;
      try {
        n = stream.recv_some(buffer, options.recv_timeout_seconds);
      } catch (const ProtocolError& e) {
        std::fprintf(stderr, "worker: %s\n", e.what());
        break;
      }
      session.note_idle(seconds_since(idle_start));
      if (n == 0) break;  // peer closed
      decoder.feed(std::span<const std::uint8_t>(buffer.data(), n));

      WireMessage msg;
      for (;;) {
        const DecodeStatus status = decoder.poll(msg);
        if (status == DecodeStatus::kNeedMore) break;
        if (status == DecodeStatus::kFatal) {
          std::fprintf(stderr, "worker: fatal protocol error: %s\n",
                       decoder.error().c_str());
          session_over = true;
          break;
        }
        for (const WireMessage& reply : session.handle(msg)) {
          const auto bytes = encode_frame(reply);
          stream.send_all(bytes);
        }
        if (session.shutdown_requested()) {
          session_over = true;
          break;
        }
      }
    }
    if (options.once) return 0;
  }
}

LoopbackLink::LoopbackLink(const AttentionWorkerConfig& config,
                           double injected_delay_seconds)
    : session_(config), injected_delay_seconds_(injected_delay_seconds) {}

void LoopbackLink::send(const WireMessage& msg) {
  auto replies = session_.handle(msg);
  pending_.insert(pending_.end(), std::make_move_iterator(replies.begin()),
                  std::make_move_iterator(replies.end()));
}

WireMessage LoopbackLink::receive() {
  if (pending_.empty()) {
    throw ProtocolError("loopback: no pending reply");
  }
  if (injected_delay_seconds_ > 0) {
    std::this_thread::sleep_for(
        std::chrono::duration<double>(injected_delay_seconds_));
  }
  WireMessage msg = std::move(pending_.front());
  pending_.erase(pending_.begin());
  return msg;
}

TcpWorkerLink::TcpWorkerLink(TcpStream stream, double reply_timeout_seconds)
    : stream_(std::move(stream)), timeout_seconds_(reply_timeout_seconds) {}

void TcpWorkerLink::send(const WireMessage& msg) {
  stream_.send_all(encode_frame(msg));
}

WireMessage TcpWorkerLink::receive() {
  std::vector<std::uint8_t> buffer(1 << 16);
  WireMessage msg;
  for (;;) {
    const DecodeStatus status = decoder_.poll(msg);
    if (status == DecodeStatus::kFrame) return msg;
    if (status == DecodeStatus::kFatal) {
      throw ProtocolError("fatal protocol error: " + decoder_.error());
    }
    const std::size_t n = stream_.recv_some(buffer, timeout_seconds_);
    if (n == 0) throw ProtocolError("connection closed by worker");
    decoder_.feed(std::span<const std::uint8_t>(buffer.data(), n));
  }
}

// ---------------------------------------------------------------------------
// dense-side driver

struct DistributedComputation::GroupState {
  std::vector<int> rows;  // indices into the step batch
  std::vector<SequenceId> seqs;
  std::vector<std::uint32_t> positions;
  std::unordered_map<SequenceId, int> row_of;  // within the group
  MatrixXf x;
  QkvProjection proj;
  MatrixXf o;
  std::vector<int> links_used;
};

DistributedComputation::DistributedComputation(
    const WeightSet& weights, std::vector<std::unique_ptr<WorkerLink>> links,
    const GenerationConfig& config)
    : weights_(weights),
      links_(std::move(links)),
      shard_map_(config.shard_mode, weights.spec.num_heads,
                 static_cast<int>(links_.size())),
      precision_(config.wire_precision),
      pipelined_(config.pipelined) {
  if (links_.empty()) throw ConfigError("distributed run needs at least one worker");
}

void DistributedComputation::configure() {
  for (int w = 0; w < static_cast<int>(links_.size()); ++w) {
    links_[w]->send(make_message(MsgType::kHello));
    WireMessage hello = links_[w]->receive();
    if (hello.msg_type() != MsgType::kHello) {
      throw ProtocolError("worker did not answer HELLO");
    }
    const auto [h0, hc] = shard_map_.head_range(w);
    nlohmann::json j{{"model", weights_.spec},
                     {"head_start", h0},
                     {"head_count", hc},
                     {"wire_precision", to_string(precision_)}};
    const std::string text = j.dump();
    links_[w]->send(make_message(
        MsgType::kConfig, std::vector<std::uint8_t>(text.begin(), text.end())));
    WireMessage ack = links_[w]->receive();
    if (ack.msg_type() != MsgType::kConfig) {
      if (ack.msg_type() == MsgType::kError) {
        const ErrorPayload err = decode_error_payload(ack.payload);
        throw ProtocolError("worker rejected CONFIG: " + err.message);
      }
      throw ProtocolError("worker did not acknowledge CONFIG");
    }
    const auto reply = nlohmann::json::parse(ack.payload.begin(), ack.payload.end());
    if (!reply.value("ok", false)) {
      throw ProtocolError("worker CONFIG ack is not ok");
    }
  }
}

void DistributedComputation::dense_layer_in(GroupState& group, int layer) {
  const auto start = clock_type::now();
  TokenBatch gb{group.seqs, group.x};
  group.proj = project_qkv(weights_, layer, gb);
  dense_seconds_ += seconds_since(start);
}

void DistributedComputation::send_layer(GroupState& group, int layer,
                                        long step) {
  const int hd = weights_.spec.head_dim;
  group.links_used.clear();
  for (int w = 0; w < static_cast<int>(links_.size()); ++w) {
    const auto [h0, hc] = shard_map_.head_range(w);
    QkvBatchPayload payload;
    payload.layer = static_cast<std::uint16_t>(layer);
    payload.step = static_cast<std::uint32_t>(step);
    payload.head_start = static_cast<std::uint16_t>(h0);
    payload.head_count = static_cast<std::uint16_t>(hc);

    for (std::size_t i = 0; i < group.seqs.size(); ++i) {
      const SequenceId seq = group.seqs[i];
      if (shard_map_.mode() != ShardMode::kByHead &&
          shard_map_.worker_for(seq, h0) != w) {
        continue;
      }
      QkvRecord rec;
      rec.seq = seq;
      rec.position = group.positions[i];
      const int offset = h0 * hd;
      const int width = hc * hd;
      rec.q = group.proj.q.row(static_cast<int>(i)).segment(offset, width);
      rec.k = group.proj.k.row(static_cast<int>(i)).segment(offset, width);
      rec.v = group.proj.v.row(static_cast<int>(i)).segment(offset, width);
      payload.records.push_back(std::move(rec));
    }
    if (payload.records.empty()) continue;
    links_[w]->send(make_message(MsgType::kQkvBatch,
                                 encode_qkv_payload(payload, precision_)));
    group.links_used.push_back(w);
  }
}

void DistributedComputation::receive_layer(GroupState& group, int layer) {
  const int hd = weights_.spec.head_dim;
  group.o.setZero(static_cast<Eigen::Index>(group.seqs.size()),
                  weights_.spec.model_dim);
  for (int w : group.links_used) {
    const auto wait_start = clock_type::now();
    WireMessage msg = links_[w]->receive();
    wait_seconds_ += seconds_since(wait_start);

    if (msg.msg_type() == MsgType::kError) {
      const ErrorPayload err = decode_error_payload(msg.payload);
      throw ProtocolError("worker " + std::to_string(w) + " error " +
                          std::to_string(err.code) + ": " + err.message);
    }
    if (msg.msg_type() != MsgType::kOBatch) {
      throw ProtocolError("expected O_BATCH, got type " +
                          std::to_string(msg.type));
    }
    const OBatchPayload payload =
        decode_o_payload(msg.payload, hd, precision_);
    if (payload.layer != layer) {
      throw ProtocolError("layer mismatch in O_BATCH");
    }
    const int offset = payload.head_start * hd;
    for (const ORecord& rec : payload.records) {
      const auto it = group.row_of.find(rec.seq);
      if (it == group.row_of.end()) {
        throw ProtocolError("O_BATCH for a sequence not in this mini-batch");
      }
      group.o.row(it->second).segment(offset, rec.o.size()) = rec.o;
    }
  }
}

void DistributedComputation::dense_layer_out(GroupState& group, int layer) {
  const auto start = clock_type::now();
  group.x = finish_block(weights_, layer, group.o, group.x);
  dense_seconds_ += seconds_since(start);
}

DecodeStepResult DistributedComputation::compute(const TokenBatch& batch,
                                                 long step) {
  const auto step_start = clock_type::now();
  dense_seconds_ = 0;
  wait_seconds_ = 0;

  // two interleaved mini-batches; sequences alternate by id so membership
  // is stable across the sequence's lifetime
  std::vector<GroupState> groups;
  if (pipelined_) {
    groups.resize(2);
    for (int b = 0; b < batch.size(); ++b) {
      groups[batch.seq_ids[static_cast<std::size_t>(b)] % 2].rows.push_back(b);
    }
    if (groups[0].rows.empty() || groups[1].rows.empty()) {
      GroupState merged;
      for (const GroupState& g : groups) {
        merged.rows.insert(merged.rows.end(), g.rows.begin(), g.rows.end());
      }
      std::sort(merged.rows.begin(), merged.rows.end());
      groups.assign(1, std::move(merged));
    }
  } else {
    groups.resize(1);
    for (int b = 0; b < batch.size(); ++b) groups[0].rows.push_back(b);
  }

  for (GroupState& g : groups) {
    g.x.resize(static_cast<Eigen::Index>(g.rows.size()), weights_.spec.model_dim);
    for (std::size_t i = 0; i < g.rows.size(); ++i) {
      const int row = g.rows[i];
      const SequenceId seq = batch.seq_ids[static_cast<std::size_t>(row)];
      g.seqs.push_back(seq);
      g.row_of[seq] = static_cast<int>(i);
      g.positions.push_back(next_position_[seq]);
      g.x.row(static_cast<Eigen::Index>(i)) = batch.features.row(row);
    }
  }

  for (GroupState& g : groups) {
    dense_layer_in(g, 0);
    send_layer(g, 0, step);
  }
  const int layers = weights_.spec.num_layers;
  for (int layer = 0; layer < layers; ++layer) {
    for (GroupState& g : groups) {
      receive_layer(g, layer);
      dense_layer_out(g, layer);
      if (layer + 1 < layers) {
        dense_layer_in(g, layer + 1);
        send_layer(g, layer + 1, step);
      }
    }
  }

  DecodeStepResult result;
  result.next_tokens.assign(static_cast<std::size_t>(batch.size()), 0);
  result.final_activations.resize(batch.size(), weights_.spec.model_dim);
  const auto head_start = clock_type::now();
  for (GroupState& g : groups) {
    MatrixXf logits = output_logits(weights_, g.x);
    for (std::size_t i = 0; i < g.rows.size(); ++i) {
      result.next_tokens[static_cast<std::size_t>(g.rows[i])] =
          argmax_token(logits.row(static_cast<Eigen::Index>(i)));
      result.final_activations.row(g.rows[i]) =
          g.x.row(static_cast<Eigen::Index>(i));
    }
  }
  dense_seconds_ += seconds_since(head_start);

  for (SequenceId seq : batch.seq_ids) next_position_[seq] += 1;

  StepTrace trace;
  trace.step = step;
  trace.batch_size = batch.size();
  trace.s_latency = dense_seconds_;
  trace.r_latency = wait_seconds_;
  trace.overall_latency = seconds_since(step_start);
  trace.s_idle = wait_seconds_;  // dense side blocked on replies
  traces_.push_back(trace);
  return result;
}

void DistributedComputation::retire(const std::vector<SequenceId>& seqs) {
  if (seqs.empty()) return;
  std::vector<DropSeqPayload> per_link(links_.size());
  for (SequenceId seq : seqs) {
    next_position_.erase(seq);
    if (shard_map_.mode() == ShardMode::kBySequence) {
      per_link[static_cast<std::size_t>(shard_map_.worker_for(seq, 0))]
          .seqs.push_back(seq);
    } else {
      for (std::size_t w = 0; w < links_.size(); ++w) {
        per_link[w].seqs.push_back(seq);
      }
    }
  }
  for (std::size_t w = 0; w < links_.size(); ++w) {
    if (per_link[w].seqs.empty()) continue;
    links_[w]->send(
        make_message(MsgType::kDropSeq, encode_drop_payload(per_link[w])));
  }
}

std::vector<nlohmann::json> DistributedComputation::shutdown() {
  std::vector<nlohmann::json> stats;
  for (auto& link : links_) {
    link->send(make_message(MsgType::kShutdown));
    WireMessage reply = link->receive();
    if (reply.msg_type() == MsgType::kShutdown) {
      stats.push_back(
          nlohmann::json::parse(reply.payload.begin(), reply.payload.end()));
    } else {
      stats.push_back(nlohmann::json{{"error", "no shutdown ack"}});
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------

MonolithicComputation::MonolithicComputation(const WeightSet& weights,
                                             long capacity_tokens,
                                             KvFormat format)
    : weights_(weights),
      shard_(weights.spec, 0, weights.spec.num_heads, capacity_tokens, format) {}

DecodeStepResult MonolithicComputation::compute(const TokenBatch& batch, long) {
  return decode_step_monolithic(weights_, shard_, batch);
}

void MonolithicComputation::retire(const std::vector<SequenceId>& seqs) {
  for (SequenceId seq : seqs) shard_.drop_sequence(seq);
}

namespace {

long default_load_limit(const GenerationConfig& config) {
  if (config.load_limit > 0) return config.load_limit;
  const long b = config.batch;
  const long s = config.target_len;
  const long f = config.interval;
  if (s % f == 0 && (b * f) % s == 0) return b * (s + f) / 2;
  return b * s + b * f;  // generous: fractional micro-batches overshoot a little
}

}  // namespace

DriveResult drive_schedule(const GenerationConfig& config,
                           const WeightSet& weights,
                           StepComputation& computation) {
  if (config.batch < 1 || config.target_len < 1 || config.interval < 1) {
    throw ConfigError("generation config: batch, target_len, interval must be >= 1");
  }
  const auto wall_start = clock_type::now();

  const bool run_to_completion = config.steps <= 0;
  long admission_horizon;
  if (run_to_completion) {
    // one batch-worth of sequences, started micro-batch by micro-batch
    const int m = micro_batch_size(config.batch, config.interval, config.target_len);
    const long waves = std::max<long>(1, (config.batch + m - 1) / m);
    admission_horizon = (waves - 1) * config.interval;
  } else {
    admission_horizon = config.steps;
  }

  std::vector<Admission> admissions =
      cold_start_schedule(config.batch, config.target_len, config.interval,
                          config.cold_start, admission_horizon);
  if (run_to_completion) {
    // trim to exactly `batch` sequences
    long total = 0;
    std::vector<Admission> trimmed;
    for (Admission a : admissions) {
      if (total >= config.batch) break;
      a.size = static_cast<int>(
          std::min<long>(a.size, config.batch - total));
      total += a.size;
      trimmed.push_back(a);
    }
    admissions = std::move(trimmed);
  }

  const long horizon = run_to_completion
                           ? (admissions.empty()
                                  ? 0
                                  : admissions.back().step + config.target_len)
                           : config.steps;

  LoadTracker tracker(default_load_limit(config));
  std::unordered_map<int, std::vector<SequenceId>> batch_seqs;  // per batch id
  std::unordered_map<SequenceId, SequenceState> states;
  std::unordered_map<SequenceId, int> last_token;
  SequenceId next_id = 1;
  long admitted_count = 0;
  std::size_t next_admission = 0;

  auto admit_due = [&](long step) {
    while (next_admission < admissions.size() &&
           admissions[next_admission].step == step) {
      const Admission& a = admissions[next_admission];
      const int id = tracker.add_micro_batch(a.step, a.size, a.target_length);
      auto& seqs = batch_seqs[id];
      for (int i = 0; i < a.size; ++i) {
        const SequenceId seq = next_id++;
        seqs.push_back(seq);
        states[seq] = SequenceState{seq, 0, a.target_length, id};
        const int prompt =
            admitted_count < static_cast<long>(config.prompt_tokens.size())
                ? config.prompt_tokens[static_cast<std::size_t>(admitted_count)]
                : prompt_token(config.seed, seq, config.model.vocab_size);
        if (prompt < 0 || prompt >= config.model.vocab_size) {
          throw ConfigError("prompt token out of the vocabulary");
        }
        last_token[seq] = prompt;
        admitted_count += 1;
      }
      next_admission += 1;
    }
  };

  DriveResult result;
  admit_due(0);

  for (long u = 1; u <= horizon; ++u) {
    StepPlan plan = tracker.step();
    if (plan.active.empty() && next_admission >= admissions.size()) break;

    if (!plan.active.empty()) {
      TokenBatch batch;
      for (const ActiveBatch& ab : plan.active) {
        for (SequenceId seq : batch_seqs[ab.id]) batch.seq_ids.push_back(seq);
      }
      batch.features.resize(static_cast<Eigen::Index>(batch.seq_ids.size()),
                            config.model.model_dim);
      for (std::size_t i = 0; i < batch.seq_ids.size(); ++i) {
        batch.features.row(static_cast<Eigen::Index>(i)) =
            weights.embedding.col(last_token.at(batch.seq_ids[i]));
      }

      DecodeStepResult step_result = computation.compute(batch, u);

      for (std::size_t i = 0; i < batch.seq_ids.size(); ++i) {
        const SequenceId seq = batch.seq_ids[i];
        const int token = step_result.next_tokens[i];
        result.transcript.push_back({u, seq, token});
        last_token[seq] = token;
        SequenceState& state = states.at(seq);
        state.current_length += 1;
        if (state.current_length > state.target_length) {
          throw std::logic_error("sequence ran past its target length");
        }
        if (config.record_activations) {
          result.activations.push_back(
              {u, seq, step_result.final_activations.row(
                           static_cast<Eigen::Index>(i))});
        }
      }
    }

    if (!plan.ending.empty()) {
      std::vector<SequenceId> retiring;
      for (int id : plan.ending) {
        auto it = batch_seqs.find(id);
        if (it == batch_seqs.end()) continue;
        for (SequenceId seq : it->second) {
          // a batch retires exactly when its sequences hit the target
          if (states.at(seq).current_length != states.at(seq).target_length) {
            throw std::logic_error("retiring a sequence short of its target");
          }
          retiring.push_back(seq);
          last_token.erase(seq);
          states.erase(seq);
        }
        batch_seqs.erase(it);
      }
      computation.retire(retiring);
    }

    admit_due(u);
  }

  result.wall_seconds = seconds_since(wall_start);
  return result;
}

DriveResult run_generation(const GenerationConfig& config,
                           std::vector<std::unique_ptr<WorkerLink>> links) {
  WeightSet weights = seed_random_weights(config.model, config.seed);
  DistributedComputation computation(weights, std::move(links), config);
  computation.configure();
  DriveResult result = drive_schedule(config, weights, computation);
  result.traces = computation.traces();
  result.worker_stats = computation.shutdown();
  return result;
}

DriveResult run_monolithic(const GenerationConfig& config,
                           const WeightSet& weights, long capacity_tokens) {
  MonolithicComputation computation(weights, capacity_tokens);
  return drive_schedule(config, weights, computation);
}

namespace {

double percentile(std::vector<double> sorted, double p) {
  if (sorted.empty()) return 0;
  const double idx = p * static_cast<double>(sorted.size() - 1);
  return sorted[static_cast<std::size_t>(std::lround(idx))];
}

}  // namespace

BenchmarkReport summarize_run(const DriveResult& result) {
  BenchmarkReport report;
  report.total_tokens = static_cast<long>(result.transcript.size());
  report.wall_seconds = result.wall_seconds;
  report.tokens_per_second =
      result.wall_seconds > 0 ? report.total_tokens / result.wall_seconds : 0;
  std::vector<double> lat;
  lat.reserve(result.traces.size());
  for (const StepTrace& t : result.traces) lat.push_back(t.overall_latency);
  if (!lat.empty()) {
    double sum = 0;
    for (double v : lat) sum += v;
    report.mean_step_seconds = sum / static_cast<double>(lat.size());
    std::sort(lat.begin(), lat.end());
    report.p01_step_seconds = percentile(lat, 0.01);
    report.p50_step_seconds = percentile(lat, 0.50);
    report.p99_step_seconds = percentile(lat, 0.99);
  }
  report.worker_stats = result.worker_stats;
  return report;
}

nlohmann::json to_json(const BenchmarkReport& report) {
  return nlohmann::json{{"total_tokens", report.total_tokens},
                        {"wall_seconds", report.wall_seconds},
                        {"tokens_per_second", report.tokens_per_second},
                        {"mean_step_seconds", report.mean_step_seconds},
                        {"p01_step_seconds", report.p01_step_seconds},
                        {"p50_step_seconds", report.p50_step_seconds},
                        {"p99_step_seconds", report.p99_step_seconds},
                        {"worker_stats", report.worker_stats}};
}

std::string transcript_csv(const std::vector<GenerationRecord>& transcript) {
  std::string csv = "step,seq_id,token_id\n";
  char line[96];
  for (const GenerationRecord& rec : transcript) {
    std::snprintf(line, sizeof line, "%ld,%llu,%d\n", rec.step,
                  static_cast<unsigned long long>(rec.seq), rec.token);
    csv += line;
  }
  return csv;
}

}  // namespace splitdecode
