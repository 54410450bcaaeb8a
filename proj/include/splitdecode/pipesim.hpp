#pragma once

#include "splitdecode/core.hpp"
#include "splitdecode/scheduler.hpp"

#include <functional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

// Discrete-step simulator of the two-stage token pipeline: the dense stage
// works on one mini-batch while the attention stage works on the other, so a
// steady step costs max(s, r) plus whatever overhead is not overlapped.
// Time advances in whole decode-step ticks; transmission and startup costs
// are folded into per-step latencies.

namespace splitdecode {

struct LatencyModel {
  std::function<double(int)> dense_seconds;        // batch -> seconds per step
  std::function<double(double, int)> attention_seconds;  // (load, workers)
  std::function<double(int)> transmit_seconds;     // batch -> seconds per step
  double startup_overhead = 0.0;
  int workers = 1;
  double exposed_transmit_fraction = 0.5;  // rest overlaps with compute
  double skew = 1.0;                       // worker load-imbalance factor
};

/// Constant dense stage, attention cost linear in load, affine transmit.
LatencyModel make_linear_model(double dense_per_step, double r_per_position,
                               int workers, double transmit_base = 0.0,
                               double transmit_per_seq = 0.0,
                               double startup_overhead = 0.0);

/// JSON-configurable model; either a constant dense latency or an
/// interpolated T(B) table times the layer count.
struct LatencyModelConfig {
  double dense_seconds_per_step = -1;              // < 0 when using the table
  std::vector<std::pair<int, double>> t_table;
  int num_layers = 1;
  double r_seconds_per_position = 0;
  int workers = 1;
  double transmit_base = 0;
  double transmit_per_seq = 0;
  double exposed_transmit_fraction = 0.5;
  double startup_overhead = 0;
  double skew = 1.0;
};

void from_json(const nlohmann::json& j, LatencyModelConfig& config);
LatencyModel build_latency_model(const LatencyModelConfig& config);

struct StepTrace {
  long step = 0;
  double s_latency = 0;
  double r_latency = 0;
  double overall_latency = 0;
  double s_idle = 0;
  double r_idle = 0;
  long active_load = 0;
  int batch_size = 0;
};

struct SimOptions {
  bool pipelined = true;
  long warmup_steps = 0;  // triggers the warning when the horizon is shorter
};

struct SimResult {
  std::vector<StepTrace> steps;
  bool horizon_warning = false;
};

SimResult simulate(const LatencyModel& model,
                   const std::vector<StepPlan>& schedule,
                   const SimOptions& options);

struct SavingsRatios {
  double total_latency_ratio = 1.0;  // stabilized / large-batch total time
  double peak_latency_ratio = 1.0;
};

/// Closed-form steady-state ratios for a constant dense stage and an
/// attention stage linear in load, evaluated at the crossing ratio
/// c = r(B*S) / s. Refuses (ConfigError) when the model is not of that
/// shape. The canonical crossing-at-midpoint configuration (c = 2) yields
/// (0.80, 0.50).
SavingsRatios ideal_savings(const LatencyModel& model, int batch,
                            int target_len);

struct ScheduleComparison {
  SavingsRatios measured;
  double plateau_latency = 0;  // median steady-state stabilized step latency
  double stab_s_idle_fraction = 0, stab_r_idle_fraction = 0;
  double large_s_idle_fraction = 0, large_r_idle_fraction = 0;
  long stab_window_load = 0, large_window_load = 0;  // must match: same work
  std::vector<StepTrace> stabilized;
  std::vector<StepTrace> large_batch;
};

/// Simulates the load-stabilized schedule against the single-large-batch
/// schedule with identical total work and reports steady-state ratios
/// measured over one aligned generation window.
ScheduleComparison compare_schedules(const LatencyModel& model, int batch,
                                     int target_len, int interval);

/// CSV with the fixed column order
/// step,s_latency,r_latency,overall_latency,total_load,batch_size,s_idle,r_idle.
std::string trace_csv(const std::vector<StepTrace>& traces);

}  // namespace splitdecode
