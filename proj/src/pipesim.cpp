#include "splitdecode/pipesim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "splitdecode/planner.hpp"

namespace splitdecode {

LatencyModel make_linear_model(double dense_per_step, double r_per_position,
                               int workers, double transmit_base,
                               double transmit_per_seq,
                               double startup_overhead) {
  LatencyModel model;
  model.dense_seconds = [dense_per_step](int) { return dense_per_step; };
  model.attention_seconds = [r_per_position](double load, int p) {
    return load * r_per_position / p;
  };
  model.transmit_seconds = [transmit_base, transmit_per_seq](int batch) {
    return batch > 0 ? transmit_base + transmit_per_seq * batch : 0.0;
  };
  model.workers = workers;
  model.startup_overhead = startup_overhead;
  return model;
}

void from_json(const nlohmann::json& j, LatencyModelConfig& config) {
  config.dense_seconds_per_step = j.value("dense_seconds_per_step", -1.0);
  config.t_table.clear();
  if (j.contains("t_table")) {
    for (const auto& row : j.at("t_table")) {
      config.t_table.emplace_back(row.at(0).get<int>(), row.at(1).get<double>());
    }
  }
  config.num_layers = j.value("num_layers", 1);
  config.r_seconds_per_position = j.at("r_seconds_per_position").get<double>();
  config.workers = j.value("workers", 1);
  config.transmit_base = j.value("transmit_base", 0.0);
  config.transmit_per_seq = j.value("transmit_per_seq", 0.0);
  config.exposed_transmit_fraction = j.value("exposed_transmit_fraction", 0.5);
  config.startup_overhead = j.value("startup_overhead", 0.0);
  config.skew = j.value("skew", 1.0);
}

LatencyModel build_latency_model(const LatencyModelConfig& config) {
  LatencyModel model;
  if (config.dense_seconds_per_step >= 0) {
    const double s = config.dense_seconds_per_step;
    model.dense_seconds = [s](int) { return s; };
  } else if (!config.t_table.empty()) {
    PerfProfile profile;
    profile.t_table = config.t_table;
    profile.r_per_token = 1;  // unused here
    profile.capacity_c = 1;
    const int layers = config.num_layers;
    model.dense_seconds = [profile, layers](int batch) {
      return layers * block_seconds(profile, batch);
    };
  } else {
    throw ConfigError(
        "latency model needs dense_seconds_per_step or a t_table");
  }
  const double r = config.r_seconds_per_position;
  model.attention_seconds = [r](double load, int p) { return load * r / p; };
  const double base = config.transmit_base;
  const double per_seq = config.transmit_per_seq;
  model.transmit_seconds = [base, per_seq](int batch) {
    return batch > 0 ? base + per_seq * batch : 0.0;
  };
  model.workers = config.workers;
  model.exposed_transmit_fraction = config.exposed_transmit_fraction;
  model.startup_overhead = config.startup_overhead;
  model.skew = config.skew;
  return model;
}

SimResult simulate(const LatencyModel& model,
                   const std::vector<StepPlan>& schedule,
                   const SimOptions& options) {
  SimResult result;
  result.horizon_warning =
      static_cast<long>(schedule.size()) < options.warmup_steps;
  result.steps.reserve(schedule.size());

  bool first_busy_step = true;
  for (const StepPlan& plan : schedule) {
    StepTrace trace;
    trace.step = plan.step;
    trace.active_load = plan.total_load;
    for (const ActiveBatch& ab : plan.active) trace.batch_size += ab.size;
    if (trace.batch_size == 0) {
      result.steps.push_back(trace);
      continue;
    }

    const double s = model.dense_seconds(trace.batch_size);
    const double r =
        model.attention_seconds(static_cast<double>(trace.active_load),
                                model.workers) *
        model.skew;
    const double tx = model.transmit_seconds(trace.batch_size);
    trace.s_latency = s;
    trace.r_latency = r;

    if (options.pipelined) {
      const double exposed = model.exposed_transmit_fraction * tx;
      if (first_busy_step) {
        // pipeline not yet filled: the stages run back to back once
        trace.overall_latency = s + r + exposed + model.startup_overhead;
        trace.s_idle = r;
        trace.r_idle = s;
      } else {
        trace.overall_latency = std::max(s, r) + exposed;
        trace.s_idle = std::max(0.0, r - s);
        trace.r_idle = std::max(0.0, s - r);
      }
    } else {
      trace.overall_latency =
          s + r + tx + (first_busy_step ? model.startup_overhead : 0.0);
      trace.s_idle = r;
      trace.r_idle = s;
    }
    first_busy_step = false;
    result.steps.push_back(trace);
  }
  return result;
}

namespace {

double probe_dense(const LatencyModel& model, int batch) {
  return model.dense_seconds(std::max(1, batch));
}

}  // namespace

SavingsRatios ideal_savings(const LatencyModel& model, int batch,
                            int target_len) {
  const double s = probe_dense(model, 1);
  for (int b : {batch / 3, batch / 2, batch}) {
    if (b >= 1 && std::fabs(probe_dense(model, b) - s) > 1e-9 * std::max(s, 1e-30)) {
      throw ConfigError("ideal_savings: dense stage is not constant in batch");
    }
  }
  if (s <= 0) throw ConfigError("ideal_savings: dense latency must be positive");

  const double full_load = static_cast<double>(batch) * target_len;
  const double r_full =
      model.attention_seconds(full_load, model.workers) * model.skew;
  for (double frac : {0.25, 0.5, 0.75}) {
    const double r_part =
        model.attention_seconds(full_load * frac, model.workers) * model.skew;
    if (std::fabs(r_part - frac * r_full) > 1e-9 * std::max(r_full, 1e-30)) {
      throw ConfigError("ideal_savings: attention stage is not linear in load");
    }
  }

  const double c = r_full / s;
  SavingsRatios ratios;
  if (c <= 1.0) {
    return ratios;  // attention never dominates; nothing to save
  }
  if (c < 2.0) {
    ratios.total_latency_ratio = 2.0 * c / (1.0 + c * c);
    ratios.peak_latency_ratio = 1.0 / c;
  } else {
    ratios.total_latency_ratio = c * c / (1.0 + c * c);
    ratios.peak_latency_ratio = 0.5;
  }
  return ratios;
}

ScheduleComparison compare_schedules(const LatencyModel& model, int batch,
                                     int target_len, int interval) {
  if (target_len % interval != 0) {
    throw ConfigError("compare_schedules: S must be divisible by F");
  }
  const long horizon = 3L * target_len;
  const long generous_limit =
      static_cast<long>(batch) * target_len + static_cast<long>(batch) * interval;

  const auto stab_admissions = cold_start_schedule(
      batch, target_len, interval, ColdStartMode::kFixedInterval, horizon);
  const auto large_admissions = cold_start_schedule(
      batch, target_len, target_len, ColdStartMode::kFixedInterval, horizon);

  const auto stab_plans = run_schedule(stab_admissions, generous_limit, horizon);
  const auto large_plans = run_schedule(large_admissions, generous_limit, horizon);

  SimOptions options;
  options.pipelined = true;
  options.warmup_steps = target_len;

  ScheduleComparison cmp;
  cmp.stabilized = simulate(model, stab_plans, options).steps;
  cmp.large_batch = simulate(model, large_plans, options).steps;

  // steady window: steps (S, 2S] — the second large-batch generation and,
  // for the stabilized schedule, S post-warmup steps carrying the same work
  const std::size_t begin = static_cast<std::size_t>(target_len);
  const std::size_t end = static_cast<std::size_t>(2L * target_len);

  double stab_total = 0, large_total = 0, stab_peak = 0, large_peak = 0;
  double stab_s_idle = 0, stab_r_idle = 0, large_s_idle = 0, large_r_idle = 0;
  std::vector<double> window;
  for (std::size_t i = begin; i < end; ++i) {
    const StepTrace& st = cmp.stabilized[i];
    const StepTrace& lt = cmp.large_batch[i];
    stab_total += st.overall_latency;
    large_total += lt.overall_latency;
    stab_peak = std::max(stab_peak, st.overall_latency);
    large_peak = std::max(large_peak, lt.overall_latency);
    stab_s_idle += st.s_idle;
    stab_r_idle += st.r_idle;
    large_s_idle += lt.s_idle;
    large_r_idle += lt.r_idle;
    cmp.stab_window_load += st.active_load;
    cmp.large_window_load += lt.active_load;
    window.push_back(st.overall_latency);
  }
  cmp.measured.total_latency_ratio = stab_total / large_total;
  cmp.measured.peak_latency_ratio = stab_peak / large_peak;
  cmp.stab_s_idle_fraction = stab_s_idle / stab_total;
  cmp.stab_r_idle_fraction = stab_r_idle / stab_total;
  cmp.large_s_idle_fraction = large_s_idle / large_total;
  cmp.large_r_idle_fraction = large_r_idle / large_total;
  std::sort(window.begin(), window.end());
  cmp.plateau_latency = window[window.size() / 2];
  return cmp;
}

std::string trace_csv(const std::vector<StepTrace>& traces) {
  if (traces.empty()) throw ConfigError("no trace rows to emit");
  std::string csv =
      "step,s_latency,r_latency,overall_latency,total_load,batch_size,s_idle,"
      "r_idle\n";
  char line[256];
  for (const StepTrace& t : traces) {
    std::snprintf(line, sizeof line, "%ld,%.9g,%.9g,%.9g,%ld,%d,%.9g,%.9g\n",
                  t.step, t.s_latency, t.r_latency, t.overall_latency,
                  t.active_load, t.batch_size, t.s_idle, t.r_idle);
    csv += line;
  }
  return csv;
}

}  // namespace splitdecode
