#pragma once

#include "splitdecode/attention.hpp"
#include "splitdecode/core.hpp"
#include "splitdecode/dense.hpp"
#include "splitdecode/net.hpp"
#include "splitdecode/pipesim.hpp"
#include "splitdecode/scheduler.hpp"
#include "splitdecode/transport.hpp"

#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

// Executable worker runtimes. The attention worker is a small service that
// appends K/V, attends, and returns O; the dense worker drives generation,
// interleaving two mini-batches so the attention side is busy while the
// dense side computes (and vice versa). A strict reply barrier per layer
// keeps the math identical to the single-process decoder.

namespace splitdecode {

struct AttentionWorkerConfig {
  long capacity_tokens = 1 << 20;
  KvFormat storage = KvFormat::kSingle;
};

struct WorkerStats {
  double busy_seconds = 0;
  double idle_seconds = 0;
  long tokens_processed = 0;
  int drop_warnings = 0;
};

nlohmann::json to_json(const WorkerStats& stats);

/// Protocol logic of one attention worker, transport-independent. handle()
/// consumes one message and returns the replies to send, in order.
class AttentionWorkerSession {
 public:
  explicit AttentionWorkerSession(const AttentionWorkerConfig& config);

  std::vector<WireMessage> handle(const WireMessage& msg);

  bool shutdown_requested() const { return shutdown_; }
  bool configured() const { return shard_.has_value(); }
  const KvShard& shard() const { return *shard_; }
  WorkerStats stats() const;
  void note_idle(double seconds) { idle_seconds_ += seconds; }

 private:
  std::vector<WireMessage> handle_inner(const WireMessage& msg);

  AttentionWorkerConfig config_;
  ModelSpec model_;
  WirePrecision wire_precision_ = WirePrecision::kSingle;
  std::optional<KvShard> shard_;
  bool shutdown_ = false;
  double busy_seconds_ = 0;
  double idle_seconds_ = 0;
  long tokens_processed_ = 0;
};

struct ServeOptions {
  std::string listen_addr = "127.0.0.1:0";
  AttentionWorkerConfig worker;
  std::string port_file;          // written with the bound port when set
  bool once = false;              // exit after the first session ends
  double recv_timeout_seconds = 0;  // 0 = block forever
};

/// Blocking service loop; returns after a session ends when `once` is set.
int serve_attention_worker(const ServeOptions& options);

/// One attention-worker connection as seen from the dense side.
class WorkerLink {
 public:
  virtual ~WorkerLink() = default;
  virtual void send(const WireMessage& msg) = 0;
  virtual WireMessage receive() = 0;
};

/// In-process link: messages are handled synchronously by a local session.
/// Deterministic and socket-free; used by tests and the local drive mode.
class LoopbackLink : public WorkerLink {
 public:
  explicit LoopbackLink(const AttentionWorkerConfig& config,
                        double injected_delay_seconds = 0);
  void send(const WireMessage& msg) override;
  WireMessage receive() override;
  AttentionWorkerSession& session() { return session_; }

 private:
  AttentionWorkerSession session_;
  std::vector<WireMessage> pending_;
  double injected_delay_seconds_;
};

class TcpWorkerLink : public WorkerLink {
 public:
  TcpWorkerLink(TcpStream stream, double reply_timeout_seconds);
  void send(const WireMessage& msg) override;
  WireMessage receive() override;

 private:
  TcpStream stream_;
  FrameDecoder decoder_;
  double timeout_seconds_;
};

struct GenerationConfig {
  ModelSpec model;
  std::uint64_t seed = 0;
  int batch = 0;
  int target_len = 0;
  int interval = 0;  // F; use target_len for the single-large-batch schedule
  ColdStartMode cold_start = ColdStartMode::kFixedInterval;
  long steps = 0;  // horizon; 0 = run until every admitted sequence finishes
  long load_limit = 0;  // 0 = B(S+F)/2
  bool pipelined = true;
  ShardMode shard_mode = ShardMode::kBySequence;
  WirePrecision wire_precision = WirePrecision::kSingle;
  bool record_activations = false;
  std::vector<int> prompt_tokens;  // per admission order; seeded when empty
};

struct GenerationRecord {
  long step = 0;
  SequenceId seq = 0;
  int token = 0;
};

struct ActivationRecord {
  long step = 0;
  SequenceId seq = 0;
  VectorXf values;
};

struct DriveResult {
  std::vector<GenerationRecord> transcript;
  std::vector<StepTrace> traces;  // measured per-step stage timings
  std::vector<ActivationRecord> activations;
  std::vector<nlohmann::json> worker_stats;  // one per link, from SHUTDOWN
  double wall_seconds = 0;
};

/// Per-step computation hook: the monolithic oracle and the distributed
/// runtime implement the same interface so generation sequencing is shared.
class StepComputation {
 public:
  virtual ~StepComputation() = default;
  virtual DecodeStepResult compute(const TokenBatch& batch, long step) = 0;
  virtual void retire(const std::vector<SequenceId>& seqs) = 0;
};

/// Runs the admission schedule for `steps` decode steps (or to completion)
/// against a computation hook. Sequence ids, prompt tokens and batch order
/// are fully deterministic given the config; the weights supply the token
/// embedding.
DriveResult drive_schedule(const GenerationConfig& config,
                           const WeightSet& weights,
                           StepComputation& computation);

class MonolithicComputation : public StepComputation {
 public:
  MonolithicComputation(const WeightSet& weights, long capacity_tokens,
                        KvFormat format = KvFormat::kSingle);
  DecodeStepResult compute(const TokenBatch& batch, long step) override;
  void retire(const std::vector<SequenceId>& seqs) override;
  const KvShard& shard() const { return shard_; }

 private:
  const WeightSet& weights_;
  KvShard shard_;
};

class DistributedComputation : public StepComputation {
 public:
  DistributedComputation(const WeightSet& weights,
                         std::vector<std::unique_ptr<WorkerLink>> links,
                         const GenerationConfig& config);

  /// CONFIG handshake with every worker; throws on rejection.
  void configure();

  DecodeStepResult compute(const TokenBatch& batch, long step) override;
  void retire(const std::vector<SequenceId>& seqs) override;

  /// SHUTDOWN each worker and collect its stats JSON.
  std::vector<nlohmann::json> shutdown();

  const std::vector<StepTrace>& traces() const { return traces_; }

 private:
  struct GroupState;  // one mini-batch in flight

  void send_layer(GroupState& group, int layer, long step);
  void receive_layer(GroupState& group, int layer);
  void dense_layer_in(GroupState& group, int layer);
  void dense_layer_out(GroupState& group, int layer);

  const WeightSet& weights_;
  std::vector<std::unique_ptr<WorkerLink>> links_;
  ShardMap shard_map_;
  WirePrecision precision_;
  bool pipelined_;
  std::unordered_map<SequenceId, std::uint32_t> next_position_;
  std::vector<StepTrace> traces_;
  double dense_seconds_ = 0;  // accumulators for the current step
  double wait_seconds_ = 0;
};

/// Full distributed generation: handshake, drive, shutdown, stats.
DriveResult run_generation(const GenerationConfig& config,
                           std::vector<std::unique_ptr<WorkerLink>> links);

/// Monolithic reference generation with the same sequencing.
DriveResult run_monolithic(const GenerationConfig& config,
                           const WeightSet& weights, long capacity_tokens);

struct BenchmarkReport {
  long total_tokens = 0;
  double wall_seconds = 0;
  double tokens_per_second = 0;
  double mean_step_seconds = 0;
  double p01_step_seconds = 0;
  double p50_step_seconds = 0;
  double p99_step_seconds = 0;
  std::vector<nlohmann::json> worker_stats;
};

BenchmarkReport summarize_run(const DriveResult& result);
nlohmann::json to_json(const BenchmarkReport& report);

/// CSV with columns step,seq_id,token_id.
std::string transcript_csv(const std::vector<GenerationRecord>& transcript);

}  // namespace splitdecode
