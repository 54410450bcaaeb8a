#include "splitdecode/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

namespace splitdecode {

int micro_batch_size(int batch, int interval, int target_len) {
  if (batch < 1 || interval < 1 || target_len < 1) {
    throw AdmissionError("micro_batch_size: arguments must be >= 1");
  }
  const long product = static_cast<long>(batch) * interval;
  if (product < target_len) {
    throw AdmissionError("interval too short for target batch: B*F = " +
                         std::to_string(product) + " < S = " +
                         std::to_string(target_len));
  }
  return static_cast<int>(std::max<long>(1, product / target_len));
}

PeakLoad peak_load_fixed_interval(int batch, int target_len, int interval) {
  if (target_len % interval != 0) {
    throw AdmissionError("target length " + std::to_string(target_len) +
                         " not divisible by interval " +
                         std::to_string(interval));
  }
  PeakLoad peak;
  peak.large_batch = static_cast<long>(batch) * target_len;
  peak.stabilized = static_cast<long>(batch) * (target_len + interval) / 2;
  return peak;
}

LoadTracker::LoadTracker(long load_limit) : load_limit_(load_limit) {
  if (load_limit < 1) throw AdmissionError("load limit must be >= 1");
}

void LoadTracker::set_load_limit(long limit) {
  if (limit < 1) throw AdmissionError("load limit must be >= 1");
  load_limit_ = limit;
}

long LoadTracker::earliest_start(int size, int target_len) const {
  if (size < 1 || target_len < 1) {
    throw AdmissionError("earliest_start: size and target length must be >= 1");
  }
  if (static_cast<long>(size) * target_len > load_limit_) {
    throw AdmissionError("micro-batch exceeds load limit: " +
                         std::to_string(static_cast<long>(size) * target_len) +
                         " > " + std::to_string(load_limit_));
  }
  long r = current_step_;
  for (std::size_t i = 0; i < batches_.size(); ++i) {
    // max length the new batch may reach by E[i]: x = floor((W_lim - W[i]) / m)
    const long x = (load_limit_ - workloads_[i]) / size;
    r = std::max(r, batches_[i].end_step - x);
  }
  return r;
}

int LoadTracker::add_micro_batch(long start_step, int size, int target_len) {
  if (size < 1 || target_len < 1) {
    throw AdmissionError("add_micro_batch: size and target length must be >= 1");
  }
  if (start_step < current_step_) {
    throw AdmissionError("cannot admit in the past: step " +
                         std::to_string(start_step) + " < current " +
                         std::to_string(current_step_));
  }
  const long own = static_cast<long>(size) * target_len;
  if (own > load_limit_) {
    throw AdmissionError("admission rejected: batch workload " +
                         std::to_string(own) + " exceeds limit " +
                         std::to_string(load_limit_));
  }
  for (std::size_t i = 0; i < batches_.size(); ++i) {
    if (batches_[i].end_step > start_step) {
      const long grown =
          workloads_[i] + (batches_[i].end_step - start_step) * size;
      if (grown > load_limit_) {
        throw AdmissionError(
            "admission rejected: end-step workload of batch " +
            std::to_string(batches_[i].id) + " would reach " +
            std::to_string(grown) + " > " + std::to_string(load_limit_));
      }
    }
  }

  MicroBatch mb;
  mb.id = next_id_++;
  mb.size = size;
  mb.start_step = start_step;
  mb.end_step = start_step + target_len;
  mb.target_length = target_len;

  for (std::size_t i = 0; i < batches_.size(); ++i) {
    if (batches_[i].end_step > start_step) {
      workloads_[i] += (batches_[i].end_step - start_step) * size;
    }
  }
  batches_.push_back(mb);
  workloads_.push_back(own);
  admission_log_.push_back(mb);
  return mb.id;
}

StepPlan LoadTracker::step() {
  current_step_ += 1;
  StepPlan plan;
  plan.step = current_step_;
  for (const MicroBatch& mb : batches_) {
    if (mb.start_step < current_step_ && current_step_ <= mb.end_step) {
      ActiveBatch ab;
      ab.id = mb.id;
      ab.size = mb.size;
      ab.current_length = current_step_ - mb.start_step;
      plan.total_load += static_cast<long>(ab.size) * ab.current_length;
      plan.active.push_back(ab);
      if (mb.end_step == current_step_) plan.ending.push_back(mb.id);
    }
  }

  std::size_t keep = 0;
  for (std::size_t i = 0; i < batches_.size(); ++i) {
    if (batches_[i].end_step > current_step_) {
      batches_[keep] = batches_[i];
      workloads_[keep] = workloads_[i];
      ++keep;
    }
  }
  batches_.resize(keep);
  workloads_.resize(keep);
  return plan;
}

long LoadTracker::recomputed_load(long step) const {
  long load = 0;
  for (const MicroBatch& mb : admission_log_) {
    if (mb.start_step < step && step <= mb.end_step) {
      load += static_cast<long>(mb.size) * (step - mb.start_step);
    }
  }
  return load;
}

ColdStartMode cold_start_mode_from_string(const std::string& name) {
  if (name == "fixed-interval") return ColdStartMode::kFixedInterval;
  if (name == "ramped-limit") return ColdStartMode::kRampedLimit;
  throw ConfigError("unknown cold start mode: " + name);
}

namespace {

// k-th admission size under the exact-average policy: sizes sum to
// floor((k+1)*B*F/S) after k+1 admissions.
int admission_size(long k, long batch, long interval, long target_len) {
  const long a = ((k + 1) * batch * interval) / target_len;
  const long b = (k * batch * interval) / target_len;
  return static_cast<int>(a - b);
}

// Load limit during cold start: the load profile of the fixed-interval
// schedule itself, ending at B(S+F)/2 from step S on.
long ramp_limit(long u, long batch, long target_len, long interval) {
  const double steady =
      static_cast<double>(batch) * (target_len + interval) / 2.0;
  if (u >= target_len) return static_cast<long>(steady);
  const double b = static_cast<double>(batch);
  const double value =
      b * interval +
      b * static_cast<double>(u) * (2.0 * target_len - interval - u) /
          (2.0 * target_len);
  return static_cast<long>(std::floor(value + 1e-9));
}

}  // namespace

std::vector<Admission> cold_start_schedule(int batch, int target_len,
                                           int interval, ColdStartMode mode,
                                           long horizon) {
  micro_batch_size(batch, interval, target_len);  // validates B*F >= S
  std::vector<Admission> admissions;

  if (mode == ColdStartMode::kFixedInterval) {
    long k = 0;
    for (long t = 0; t <= horizon; t += interval, ++k) {
      const int m = admission_size(k, batch, interval, target_len);
      if (m > 0) admissions.push_back({t, m, target_len});
    }
    return admissions;
  }

  const long steady_limit =
      static_cast<long>(batch) * (target_len + interval) / 2;

  LoadTracker tracker(std::max<long>(1, ramp_limit(0, batch, target_len, interval)));
  long k = 0;
  for (long u = 0; u <= horizon; ++u) {
    tracker.set_load_limit(
        std::max<long>(1, std::min(steady_limit,
                                   ramp_limit(u, batch, target_len, interval))));
    for (;;) {
      const int m = admission_size(k, batch, interval, target_len);
      if (static_cast<long>(m) * target_len > tracker.load_limit()) break;
      if (tracker.earliest_start(m, target_len) != tracker.current_step()) break;
      tracker.add_micro_batch(tracker.current_step(), m, target_len);
      admissions.push_back({tracker.current_step(), m, target_len});
      ++k;
    }
    tracker.step();
  }
  return admissions;
}

std::vector<StepPlan> run_schedule(const std::vector<Admission>& admissions,
                                   long load_limit, long horizon) {
  LoadTracker tracker(load_limit);
  std::size_t next = 0;
  std::vector<StepPlan> plans;
  plans.reserve(static_cast<std::size_t>(horizon));
  while (next < admissions.size() && admissions[next].step == 0) {
    tracker.add_micro_batch(0, admissions[next].size,
                            admissions[next].target_length);
    ++next;
  }
  for (long u = 1; u <= horizon; ++u) {
    plans.push_back(tracker.step());
    while (next < admissions.size() && admissions[next].step == u) {
      tracker.add_micro_batch(u, admissions[next].size,
                              admissions[next].target_length);
      ++next;
    }
  }
  return plans;
}

std::string schedule_csv(const std::vector<StepPlan>& plans,
                         const std::vector<Admission>& admissions) {
  std::map<long, int> admitted;
  for (const Admission& a : admissions) admitted[a.step] += a.size;
  std::string csv = "step,active_batches,total_load,admissions\n";
  char line[128];
  for (const StepPlan& plan : plans) {
    const auto it = admitted.find(plan.step);
    std::snprintf(line, sizeof line, "%ld,%zu,%ld,%d\n", plan.step,
                  plan.active.size(), plan.total_load,
                  it == admitted.end() ? 0 : it->second);
    csv += line;
  }
  return csv;
}

}  // namespace splitdecode
