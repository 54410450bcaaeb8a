#pragma once

#include "splitdecode/core.hpp"

#include <string>
#include <vector>

// Sequence admission control. Micro-batches of size M = B*F/S started every
// F steps keep the total sequence length near B(S+F)/2 instead of letting it
// ramp to B*S, and the load-control functions generalize that to arbitrary
// admission requests against a configurable load limit.
//
// Load is counted in token-positions: a micro-batch admitted at step t
// contributes (u - t) * size at step u, for t < u <= t + S. Its end step
// E = t + S is the last step it is active; retirement happens at the start
// of the following step.

namespace splitdecode {

class AdmissionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// M = B*F/S, rounded down, never below 1. Throws AdmissionError when
/// B*F < S (interval too short for the target batch).
int micro_batch_size(int batch, int interval, int target_len);

struct PeakLoad {
  long stabilized = 0;   // B(S+F)/2, the fixed-interval steady-state peak
  long large_batch = 0;  // B*S, the single-batch peak
};

/// Closed-form peaks; throws AdmissionError unless S is divisible by F.
PeakLoad peak_load_fixed_interval(int batch, int target_len, int interval);

struct MicroBatch {
  int id = 0;
  int size = 0;          // m
  long start_step = 0;   // t
  long end_step = 0;     // E = t + S
  int target_length = 0; // S
};

struct ActiveBatch {
  int id = 0;
  int size = 0;
  long current_length = 0;  // step - start_step, shared by the batch
};

struct StepPlan {
  long step = 0;
  std::vector<ActiveBatch> active;
  long total_load = 0;
  std::vector<int> ending;  // batches whose final step this is
};

/// Bookkeeping of the load-control algorithm: one workload entry per live
/// micro-batch holding the total load at that batch's end step.
class LoadTracker {
 public:
  explicit LoadTracker(long load_limit);

  long load_limit() const { return load_limit_; }
  void set_load_limit(long limit);
  long current_step() const { return current_step_; }
  const std::vector<MicroBatch>& batches() const { return batches_; }
  const std::vector<long>& workloads() const { return workloads_; }

  /// Smallest step r >= current_step at which (r, size, target_len) can be
  /// admitted without pushing any tracked end-step workload past the limit.
  /// Throws AdmissionError when size * target_len > load limit (the batch
  /// could never be admitted).
  long earliest_start(int size, int target_len) const;

  /// Admits a micro-batch; every live batch i with E[i] > t gains
  /// (E[i] - t) * size workload. Rejection (any entry would exceed the
  /// limit, or t < current_step) leaves the tracker untouched.
  /// Returns the new batch id.
  int add_micro_batch(long start_step, int size, int target_len);

  /// Advances one step, emits the plan for the new step, then retires
  /// batches whose end step has been reached.
  StepPlan step();

  /// Load at `step` recomputed from the full admission log, independent of
  /// the incremental bookkeeping.
  long recomputed_load(long step) const;

 private:
  long load_limit_;
  long current_step_ = 0;
  int next_id_ = 0;
  std::vector<MicroBatch> batches_;
  std::vector<long> workloads_;
  std::vector<MicroBatch> admission_log_;
};

enum class ColdStartMode { kFixedInterval, kRampedLimit };

ColdStartMode cold_start_mode_from_string(const std::string& name);

struct Admission {
  long step = 0;
  int size = 0;
  int target_length = 0;
};

/// Admission plan for continuous serving of batch-B workloads of length S.
///
/// kFixedInterval starts a micro-batch every F steps; sizes follow the exact
/// long-run average B*F/S even when it is fractional (an occasional batch is
/// one sequence larger).
///
/// kRampedLimit grows the load limit from M*S to B(S+F)/2 over the first S
/// steps along the load profile the fixed-interval schedule itself would
/// produce, admitting greedily via earliest_start. With integral M the two
/// modes coincide; the ramp exists for admission streams that are not
/// uniform.
std::vector<Admission> cold_start_schedule(int batch, int target_len,
                                           int interval, ColdStartMode mode,
                                           long horizon);

/// Replays admissions through a LoadTracker for `horizon` steps.
std::vector<StepPlan> run_schedule(const std::vector<Admission>& admissions,
                                   long load_limit, long horizon);

/// CSV with columns step,active_batches,total_load,admissions.
std::string schedule_csv(const std::vector<StepPlan>& plans,
                         const std::vector<Admission>& admissions);

}  // namespace splitdecode
