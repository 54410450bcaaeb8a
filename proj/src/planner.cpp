#include "splitdecode/planner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

namespace splitdecode {

void to_json(nlohmann::json& j, const PerfProfile& profile) {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [batch, seconds] : profile.t_table) {
    table.push_back({{"batch_size", batch}, {"seconds_per_block", seconds}});
  }
  j = nlohmann::json{{"t_table", table},
                     {"r_per_token", profile.r_per_token},
                     {"capacity_c", profile.capacity_c},
                     {"machine_tag", profile.machine_tag}};
}

void from_json(const nlohmann::json& j, PerfProfile& profile) {
  profile.t_table.clear();
  for (const auto& row : j.at("t_table")) {
    profile.t_table.emplace_back(row.at("batch_size").get<int>(),
                                 row.at("seconds_per_block").get<double>());
  }
  profile.r_per_token = j.at("r_per_token").get<double>();
  profile.capacity_c = j.at("capacity_c").get<long>();
  profile.machine_tag = j.value("machine_tag", "");
  validate(profile);
}

void validate(const PerfProfile& profile) {
  if (profile.t_table.empty()) throw ConfigError("profile: empty T(B) table");
  for (std::size_t i = 0; i < profile.t_table.size(); ++i) {
    if (profile.t_table[i].second <= 0) {
      throw ConfigError("profile: T(B) entries must be positive");
    }
    if (i > 0 && profile.t_table[i].first <= profile.t_table[i - 1].first) {
      throw ConfigError("profile: batch sizes must be strictly ascending");
    }
  }
  if (profile.r_per_token <= 0) throw ConfigError("profile: R must be positive");
  if (profile.capacity_c < 1) throw ConfigError("profile: capacity must be >= 1");
}

double block_seconds(const PerfProfile& profile, int batch) {
  const auto& table = profile.t_table;
  if (batch < table.front().first) {
    throw ConfigError("T(B): batch " + std::to_string(batch) +
                      " below the measured range");
  }
  if (batch > table.back().first) {
    throw ConfigError("T(B): batch " + std::to_string(batch) +
                      " above the measured range (extrapolation refused)");
  }
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table[i].first == batch) return table[i].second;
    if (table[i].first > batch) {
      const auto& [b0, t0] = table[i - 1];
      const auto& [b1, t1] = table[i];
      const double alpha = static_cast<double>(batch - b0) / (b1 - b0);
      return t0 + alpha * (t1 - t0);
    }
  }
  return table.back().second;
}

double batch_efficiency(const PerfProfile& profile, int batch) {
  return static_cast<double>(batch) / block_seconds(profile, batch);
}

const char* to_string(PlanConstraint c) {
  switch (c) {
    case PlanConstraint::kLatency: return "latency";
    case PlanConstraint::kEfficiencyKnee: return "efficiency-knee";
    case PlanConstraint::kMemory: return "memory";
  }
  return "unknown";
}

void to_json(nlohmann::json& j, const HardwarePlan& plan) {
  j = nlohmann::json{{"batch_size", plan.batch_size},
                     {"worker_count", plan.worker_count},
                     {"worker_estimate", plan.worker_estimate},
                     {"predicted_seq_seconds", plan.predicted_seq_seconds},
                     {"efficiency", plan.efficiency},
                     {"balance_residual", plan.balance_residual},
                     {"balanced", plan.balanced},
                     {"binding_constraint", to_string(plan.binding_constraint)}};
}

namespace {

std::vector<int> candidates_for(const PerfProfile& profile,
                                const PlanRequest& request) {
  std::vector<int> candidates = request.candidate_batches;
  if (candidates.empty()) {
    for (const auto& [batch, _] : profile.t_table) candidates.push_back(batch);
  }
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

}  // namespace

int plan_batch_size(const PerfProfile& profile, const PlanRequest& request) {
  if (request.num_layers < 1 || request.target_len < 1) {
    throw ConfigError("plan request: layers and target length must be >= 1");
  }
  const std::vector<int> candidates = candidates_for(profile, request);

  if (request.latency_budget.has_value()) {
    const double budget = *request.latency_budget;
    if (budget <= 0) throw ConfigError("plan request: latency budget must be positive");
    int best = -1;
    int tightest = candidates.front();
    double tightest_seconds = 0;
    bool first = true;
    for (int batch : candidates) {
      const double seconds = 2.0 * request.num_layers * request.target_len *
                             block_seconds(profile, batch);
      if (first || seconds < tightest_seconds) {
        tightest = batch;
        tightest_seconds = seconds;
        first = false;
      }
      if (seconds <= budget) best = batch;
    }
    if (best < 0) {
      throw InfeasiblePlanError(
          "no candidate batch satisfies the latency budget; tightest is B=" +
              std::to_string(tightest) + " at " +
              std::to_string(tightest_seconds) + " s",
          tightest);
    }
    return best;
  }

  // knee rule: stop where the efficiency gain per doubling turns marginal
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double prev = batch_efficiency(profile, candidates[i - 1]);
    const double cur = batch_efficiency(profile, candidates[i]);
    const double doublings =
        std::log2(static_cast<double>(candidates[i]) / candidates[i - 1]);
    const double gain_per_doubling =
        std::pow(cur / prev, 1.0 / doublings) - 1.0;
    if (gain_per_doubling < request.knee_threshold) return candidates[i - 1];
  }
  return candidates.back();
}

WorkerCount plan_worker_count(const PerfProfile& profile, int batch,
                              int target_len) {
  const double t = block_seconds(profile, batch);
  WorkerCount result;
  result.estimate = static_cast<double>(batch) * target_len *
                    profile.r_per_token / (2.0 * t);
  result.workers = std::max(1, static_cast<int>(std::ceil(result.estimate)));
  return result;
}

MemoryCheck check_memory(long batch, long target_len, long capacity,
                         long workers) {
  if (batch < 1 || target_len < 1 || capacity < 1 || workers < 1) {
    throw ConfigError("check_memory: all arguments must be >= 1");
  }
  MemoryCheck check;
  const double demand = static_cast<double>(batch) * target_len / 2.0;
  check.feasible = demand <= static_cast<double>(capacity) * workers;
  check.min_workers =
      check.feasible
          ? static_cast<int>(workers)
          : static_cast<int>(std::ceil(demand / static_cast<double>(capacity)));
  return check;
}

BalanceCheck check_balance(const PerfProfile& profile, int batch,
                           int target_len, int workers, double tolerance) {
  if (workers < 1) throw ConfigError("check_balance: workers must be >= 1");
  const double t = block_seconds(profile, batch);
  BalanceCheck check;
  check.attention_stage_seconds = static_cast<double>(batch) * target_len *
                                  profile.r_per_token / (2.0 * workers);
  check.residual = std::fabs(check.attention_stage_seconds - t) / t;
  check.accepted = check.residual <= tolerance;
  return check;
}

HardwarePlan plan(const PerfProfile& profile, const PlanRequest& request) {
  validate(profile);
  HardwarePlan result;
  result.batch_size = plan_batch_size(profile, request);
  result.binding_constraint = request.latency_budget.has_value()
                                  ? PlanConstraint::kLatency
                                  : PlanConstraint::kEfficiencyKnee;

  const WorkerCount workers =
      plan_worker_count(profile, result.batch_size, request.target_len);
  result.worker_count = workers.workers;
  result.worker_estimate = workers.estimate;

  const MemoryCheck memory =
      check_memory(result.batch_size, request.target_len, profile.capacity_c,
                   result.worker_count);
  if (!memory.feasible) {
    result.worker_count = memory.min_workers;
    result.binding_constraint = PlanConstraint::kMemory;
  }

  const double t = block_seconds(profile, result.batch_size);
  result.predicted_seq_seconds =
      2.0 * request.num_layers * request.target_len * t;
  result.efficiency = batch_efficiency(profile, result.batch_size);
  const double r_stage = static_cast<double>(result.batch_size) *
                         request.target_len * profile.r_per_token /
                         (2.0 * result.worker_count);
  result.balance_residual = std::fabs(r_stage - t) / t;
  result.balanced = result.balance_residual <= request.balance_tolerance;
  return result;
}

std::string plan_table(const PerfProfile& profile, const PlanRequest& request,
                       const HardwarePlan& plan) {
  char buf[1024];
  std::snprintf(
      buf, sizeof buf,
      "  batch size          %8d\n"
      "  workers             %8d  (estimate %.2f)\n"
      "  seq latency         %10.3f s  (N=%d, S=%d)\n"
      "  efficiency E(B)     %12.1f tokens/s/block\n"
      "  balance residual    %9.2f%%  (%s, tolerance %.0f%%)\n"
      "  binding constraint  %s\n"
      "  profile             %s\n",
      plan.batch_size, plan.worker_count, plan.worker_estimate,
      plan.predicted_seq_seconds, request.num_layers, request.target_len,
      plan.efficiency, 100.0 * plan.balance_residual,
      plan.balanced ? "balanced" : "imbalanced",
      100.0 * request.balance_tolerance, to_string(plan.binding_constraint),
      profile.machine_tag.c_str());
  return buf;
}

}  // namespace splitdecode
