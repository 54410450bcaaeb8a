#pragma once

#include "splitdecode/core.hpp"

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

// Capacity planning from measured numbers: given the dense-stage latency
// table T(B), the per-token attention cost R and the per-worker token
// capacity C, pick the batch size and the number of attention workers that
// keep both sides of the pipeline busy.

namespace splitdecode {

class InfeasiblePlanError : public std::runtime_error {
 public:
  InfeasiblePlanError(const std::string& what, int tightest_batch)
      : std::runtime_error(what), tightest_batch(tightest_batch) {}
  int tightest_batch;  // candidate with the smallest latency product
};

struct PerfProfile {
  // measured seconds per transformer block at each batch size, ascending B
  std::vector<std::pair<int, double>> t_table;
  double r_per_token = 0;  // seconds per token-position per layer per worker
  long capacity_c = 0;     // tokens of KV storage per worker
  std::string machine_tag;
};

void to_json(nlohmann::json& j, const PerfProfile& profile);
void from_json(const nlohmann::json& j, PerfProfile& profile);
void validate(const PerfProfile& profile);

/// T(B), linearly interpolated between measured points. Extrapolation is
/// refused (ConfigError outside the table range).
double block_seconds(const PerfProfile& profile, int batch);

/// E(B) = B / T(B), the dense-stage throughput proxy.
double batch_efficiency(const PerfProfile& profile, int batch);

struct PlanRequest {
  int num_layers = 0;
  int target_len = 0;                   // S
  std::optional<double> latency_budget; // L, seconds per full sequence
  std::vector<int> candidate_batches;   // defaults to the profile's table
  double knee_threshold = 0.10;         // gain per doubling considered marginal
  double balance_tolerance = 0.15;      // accepted pipeline imbalance
};

enum class PlanConstraint { kLatency, kEfficiencyKnee, kMemory };
const char* to_string(PlanConstraint c);

struct HardwarePlan {
  int batch_size = 0;
  int worker_count = 0;
  double worker_estimate = 0;       // Eq.-level value before the ceiling
  double predicted_seq_seconds = 0; // 2 * N * S * T(B)
  double efficiency = 0;            // E(B)
  double balance_residual = 0;      // |B*S*R/(2P) - T(B)| / T(B)
  bool balanced = false;            // residual within tolerance
  PlanConstraint binding_constraint = PlanConstraint::kEfficiencyKnee;
};

void to_json(nlohmann::json& j, const HardwarePlan& plan);

/// Largest candidate B with 2*N*S*T(B) <= L when a budget is present;
/// otherwise the smallest candidate where throughput gain per doubling
/// falls below the knee threshold. Throws InfeasiblePlanError when no
/// candidate fits the budget.
int plan_batch_size(const PerfProfile& profile, const PlanRequest& request);

struct WorkerCount {
  int workers = 0;
  double estimate = 0;
};

/// P = ceil(B*S*R / (2*T(B))), at least 1.
WorkerCount plan_worker_count(const PerfProfile& profile, int batch,
                              int target_len);

struct MemoryCheck {
  bool feasible = false;
  int min_workers = 0;  // smallest P restoring B*S/2 <= C*P
};

MemoryCheck check_memory(long batch, long target_len, long capacity,
                         long workers);

struct BalanceCheck {
  double attention_stage_seconds = 0;  // B*S*R / (2P)
  double residual = 0;                 // |attention - T(B)| / T(B)
  bool accepted = false;
};

/// Pipeline balance of a given operating point (B, S, P) against T(B).
BalanceCheck check_balance(const PerfProfile& profile, int batch,
                           int target_len, int workers,
                           double tolerance = 0.15);

/// Full composition: batch size, worker count, memory fixup, predicted
/// latency and the pipeline balance residual.
HardwarePlan plan(const PerfProfile& profile, const PlanRequest& request);

/// Human-readable table for the CLI.
std::string plan_table(const PerfProfile& profile, const PlanRequest& request,
                       const HardwarePlan& plan);

}  // namespace splitdecode
