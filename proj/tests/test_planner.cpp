#include <doctest.h>

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "splitdecode/core.hpp"
#include "splitdecode/pipesim.hpp"
#include "splitdecode/planner.hpp"
#include "splitdecode/scheduler.hpp"

using namespace splitdecode;

namespace {

PerfProfile simple_profile() {
  PerfProfile p;
  p.t_table = {{1, 1e-3}, {8, 1.5e-3}, {64, 4e-3}, {256, 10e-3}, {512, 18e-3}};
  p.r_per_token = 1e-6;
  p.capacity_c = 1 << 20;
  p.machine_tag = "synthetic";
  return p;
}

}  // namespace

TEST_CASE("T(B) interpolates linearly and refuses extrapolation") {
  const PerfProfile p = simple_profile();
  CHECK(block_seconds(p, 8) == doctest::Approx(1.5e-3));
  CHECK(block_seconds(p, 36) == doctest::Approx(2.75e-3));  // midpoint of 8..64
  CHECK_THROWS_WITH_AS(block_seconds(p, 0), doctest::Contains("below"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(block_seconds(p, 1024),
                       doctest::Contains("extrapolation refused"), ConfigError);
}

TEST_CASE("efficiency is B over T(B)") {
  PerfProfile p = simple_profile();
  p.t_table = {{1, 1e-3}, {1024, 7.08e-3}};
  CHECK(batch_efficiency(p, 1) == doctest::Approx(1000.0));
  CHECK(batch_efficiency(p, 1024) == doctest::Approx(144632.768).epsilon(1e-4));
}

TEST_CASE("profile validation catches malformed tables") {
  PerfProfile p = simple_profile();
  p.t_table[1].first = 1;  // duplicate batch size
  CHECK_THROWS_AS(validate(p), ConfigError);
  p = simple_profile();
  p.t_table[0].second = 0;
  CHECK_THROWS_AS(validate(p), ConfigError);
  p = simple_profile();
  p.r_per_token = -1;
  CHECK_THROWS_AS(validate(p), ConfigError);
}

TEST_CASE("profile json round-trip") {
  const PerfProfile p = simple_profile();
  const nlohmann::json j = p;
  const PerfProfile back = j.get<PerfProfile>();
  CHECK(back.t_table == p.t_table);
  CHECK(back.r_per_token == p.r_per_token);
  CHECK(back.capacity_c == p.capacity_c);
  CHECK(back.machine_tag == p.machine_tag);
}

TEST_CASE("latency budget picks the largest feasible batch") {
  PerfProfile p = simple_profile();
  p.t_table = {{64, 3e-3}, {256, 5e-3}, {512, 7e-3}};
  PlanRequest req;
  req.num_layers = 32;
  req.target_len = 1024;

  // hand evaluation: 2*32*1024*0.005 = 327.68 <= 400 but 458.75 > 400
  req.latency_budget = 400.0;
  CHECK(plan_batch_size(p, req) == 256);

  req.latency_budget = 1e9;  // unconstrained: table max
  CHECK(plan_batch_size(p, req) == 512);

  req.latency_budget = 1.0;  // nothing fits
  CHECK_THROWS_AS(plan_batch_size(p, req), InfeasiblePlanError);
  try {
    plan_batch_size(p, req);
  } catch (const InfeasiblePlanError& e) {
    CHECK(e.tightest_batch == 64);
  }
}

TEST_CASE("knee rule stops where the gain per doubling turns marginal") {
  PerfProfile p = simple_profile();
  // E(B): 1000, 4000, 8000, 8400 -- the last doubling gains under 10%
  p.t_table = {{1, 1e-3}, {8, 2e-3}, {64, 8e-3}, {128, 128.0 / 8400.0}};
  PlanRequest req;
  req.num_layers = 1;
  req.target_len = 1;
  CHECK(plan_batch_size(p, req) == 64);

  // steep table all the way: pick the maximum
  p.t_table = {{1, 1e-3}, {8, 2e-3}, {64, 8e-3}};
  CHECK(plan_batch_size(p, req) == 64);
}

TEST_CASE("worker count is the ceiling of B*S*R / (2 T(B))") {
  PerfProfile p = simple_profile();
  p.t_table = {{100, 5e-3}};
  p.r_per_token = 1e-5;
  const WorkerCount w = plan_worker_count(p, 100, 100);
  CHECK(w.estimate == doctest::Approx(10.0));
  CHECK(w.workers == 10);

  p.r_per_token = 1e-12;  // R -> 0 floors at one worker
  CHECK(plan_worker_count(p, 100, 100).workers == 1);
}

TEST_CASE("memory check mirrors B*S/2 <= C*P with the minimal fix-up") {
  CHECK(check_memory(1024, 1024, 1 << 20, 1).feasible);
  // boundary inclusive: C*P exactly B*S/2
  CHECK(check_memory(1024, 1024, 524288, 1).feasible);
  const MemoryCheck infeasible = check_memory(1024, 1024, 1000, 1);
  CHECK_FALSE(infeasible.feasible);
  CHECK(infeasible.min_workers == 525);  // ceil(524288 / 1000)
}

TEST_CASE("plan composes the constraints and reports the binding one") {
  PerfProfile p = simple_profile();
  PlanRequest req;
  req.num_layers = 2;
  req.target_len = 64;

  SUBCASE("knee-bound when no latency budget is given") {
    const HardwarePlan plan_result = plan(p, req);
    CHECK(plan_result.binding_constraint == PlanConstraint::kEfficiencyKnee);
    CHECK(plan_result.worker_count >= 1);
    CHECK(plan_result.predicted_seq_seconds ==
          doctest::Approx(2.0 * 2 * 64 * block_seconds(p, plan_result.batch_size)));
  }

  SUBCASE("memory-bound synthetic profile") {
    p.capacity_c = 64;  // tiny KV store forces extra workers
    const HardwarePlan plan_result = plan(p, req);
    CHECK(plan_result.binding_constraint == PlanConstraint::kMemory);
    CHECK(static_cast<double>(plan_result.batch_size) * req.target_len / 2.0 <=
          static_cast<double>(p.capacity_c) * plan_result.worker_count);
  }

  SUBCASE("latency-bound when the budget constrains the batch") {
    req.latency_budget = 2.0 * 2 * 64 * 4e-3 + 1e-9;  // exactly B=64 feasible
    const HardwarePlan plan_result = plan(p, req);
    CHECK(plan_result.binding_constraint == PlanConstraint::kLatency);
    CHECK(plan_result.batch_size == 64);
  }
}

TEST_CASE("plan accepts the reference two-worker operating point") {
  // dense block 7.08 ms at batch 1024; attention side measured at 8.12 ms
  // across 2 workers at the same batch: R = 8.12e-3 * 2 / (1024*1024/2)
  PerfProfile p;
  p.t_table = {{1024, 7.08e-3}};
  p.capacity_c = 1 << 20;
  const double measured_r_stage = 8.12e-3;
  const int workers = 2;
  p.r_per_token = measured_r_stage * workers / (1024.0 * 1024.0 / 2.0);
  p.machine_tag = "reference";

  // the balance check accepts the reference two-worker operating point:
  // residual |8.12 - 7.08| / 7.08 ~= 14.7%, inside the default 15%
  const BalanceCheck at_two = check_balance(p, 1024, 1024, 2);
  CHECK(at_two.attention_stage_seconds == doctest::Approx(8.12e-3).epsilon(1e-9));
  CHECK(at_two.residual == doctest::Approx((8.12 - 7.08) / 7.08).epsilon(1e-6));
  CHECK(at_two.accepted);

  // strict balancing by Eq-style ceiling lands one worker higher
  PlanRequest req;
  req.num_layers = 32;
  req.target_len = 1024;
  const HardwarePlan plan_result = plan(p, req);
  CHECK(plan_result.worker_count == 3);
  CHECK(plan_result.worker_estimate == doctest::Approx(8.12 * 2 / 7.08).epsilon(1e-6));
}

TEST_CASE("brute force confirms maximal batch and minimal workers") {
  std::uint64_t state = 77;
  auto next_unit = [&]() {
    state = mix64(state);
    return static_cast<double>(state >> 11) * 0x1p-53;
  };

  for (int trial = 0; trial < 200; ++trial) {
    PerfProfile p;
    double t = 0.5e-3 + next_unit() * 1e-3;
    for (int b = 1; b <= 64; b *= 2) {
      p.t_table.emplace_back(b, t);
      t *= 1.2 + next_unit();  // grows slower than 2x: efficiency rises
    }
    p.r_per_token = 1e-7 + next_unit() * 1e-5;
    p.capacity_c = 1 << 24;
    PlanRequest req;
    req.num_layers = 1 + static_cast<int>(state % 8);
    req.target_len = 16 + static_cast<int>(state % 512);
    req.latency_budget =
        2.0 * req.num_layers * req.target_len * block_seconds(p, 8) *
        (0.5 + next_unit() * 4.0);

    int expected_b = -1;
    for (const auto& [b, tb] : p.t_table) {
      if (2.0 * req.num_layers * req.target_len * tb <= *req.latency_budget) {
        expected_b = std::max(expected_b, b);
      }
    }
    if (expected_b < 0) {
      CHECK_THROWS_AS(plan_batch_size(p, req), InfeasiblePlanError);
      continue;
    }
    const int got_b = plan_batch_size(p, req);
    REQUIRE(got_b == expected_b);

    const WorkerCount wc = plan_worker_count(p, got_b, req.target_len);
    const double tb = block_seconds(p, got_b);
    int minimal = 1;
    while (static_cast<double>(got_b) * req.target_len * p.r_per_token /
               (2.0 * minimal) >
           tb) {
      ++minimal;
      REQUIRE(minimal < 10000);
    }
    REQUIRE(wc.workers == std::max(1, minimal));
  }
}

TEST_CASE("plans always satisfy the latency and memory inequalities") {
  std::uint64_t state = 404;
  auto next_unit = [&]() {
    state = mix64(state);
    return static_cast<double>(state >> 11) * 0x1p-53;
  };
  int planned = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    PerfProfile p;
    double t = 1e-4 + next_unit() * 1e-2;
    for (int b = 1; b <= 256; b *= 4) {
      p.t_table.emplace_back(b, t);
      t *= 1.1 + 2.0 * next_unit();
    }
    p.r_per_token = 1e-8 + next_unit() * 1e-4;
    p.capacity_c = 1 + static_cast<long>(next_unit() * (1 << 22));
    PlanRequest req;
    req.num_layers = 1 + static_cast<int>(state % 48);
    req.target_len = 1 + static_cast<int>(mix64(state) % 2048);
    if (next_unit() < 0.7) {
      req.latency_budget = (0.05 + next_unit() * 4.0) * 2.0 * req.num_layers *
                           req.target_len * p.t_table.back().second;
    }
    HardwarePlan result;
    try {
      result = plan(p, req);
    } catch (const InfeasiblePlanError&) {
      continue;
    }
    if (req.latency_budget) {
      REQUIRE(result.predicted_seq_seconds <= *req.latency_budget * (1 + 1e-12));
    }
    REQUIRE(static_cast<double>(result.batch_size) * req.target_len / 2.0 <=
            static_cast<double>(p.capacity_c) * result.worker_count);
    ++planned;
  }
  CHECK(planned > 400);
}

TEST_CASE("planned workers never decrease with the target length") {
  const PerfProfile p = simple_profile();
  int last = 0;
  for (int s = 16; s <= 4096; s *= 2) {
    const int workers = plan_worker_count(p, 64, s).workers;
    CHECK(workers >= last);
    last = workers;
  }
}

TEST_CASE("machine-local fixture: efficiency is monotone over the table") {
  std::ifstream f(std::string(FIXTURES_DIR) + "/perf_profile_local.json");
  REQUIRE(f.good());
  nlohmann::json j;
  f >> j;
  const PerfProfile profile = j.get<PerfProfile>();
  CHECK_FALSE(profile.machine_tag.empty());
  double last = 0;
  for (const auto& [batch, _] : profile.t_table) {
    const double e = batch_efficiency(profile, batch);
    CHECK(e > last);
    last = e;
  }
}

TEST_CASE("machine-local fixture plans a balanced operating point") {
  std::ifstream f(std::string(FIXTURES_DIR) + "/perf_profile_local.json");
  REQUIRE(f.good());
  nlohmann::json j;
  f >> j;
  const PerfProfile profile = j.get<PerfProfile>();

  // pick the workload length that balances four workers at the table's top
  // batch, then let the planner recover the point
  const int batch = profile.t_table.back().first;
  const double t = block_seconds(profile, batch);
  // floor keeps the worker estimate just under the integer, so the
  // ceiling lands on it instead of one past it
  const int target_workers = 4;
  const int target_len = std::max(
      1, static_cast<int>(std::floor(2.0 * target_workers * t /
                                     (batch * profile.r_per_token))));

  PlanRequest req;
  req.num_layers = 2;
  req.target_len = target_len;
  req.candidate_batches = {batch};
  const HardwarePlan result = plan(profile, req);
  CHECK(result.batch_size == batch);
  CHECK(result.balance_residual <= 0.15);
  CHECK(result.balanced);

  // validated by the simulator: with the planned worker count, the steady
  // per-step cost of the two stages agrees within the same tolerance
  LatencyModelConfig model_config;
  model_config.t_table = profile.t_table;
  model_config.num_layers = 1;  // per-block balance, as the planner states it
  model_config.r_seconds_per_position = profile.r_per_token;
  model_config.workers = result.worker_count;
  const LatencyModel model = build_latency_model(model_config);

  const int interval = std::max(1, target_len / 16);
  const int sim_len = (target_len / interval) * interval;  // divisible
  const auto cmp = compare_schedules(model, batch, sim_len, interval);
  double worst_gap = 0;
  for (std::size_t i = static_cast<std::size_t>(sim_len);
       i < static_cast<std::size_t>(2 * sim_len); ++i) {
    const StepTrace& step = cmp.stabilized[i];
    worst_gap = std::max(
        worst_gap, std::fabs(step.r_latency - step.s_latency) / step.s_latency);
  }
  CHECK(worst_gap <= 0.15 + 2.0 * interval / static_cast<double>(sim_len));
}

TEST_CASE("doubling the model width roughly halves the planned workers") {
  // T scales ~4x with width, R scales ~2x
  PerfProfile narrow;
  narrow.t_table = {{64, 1e-3}};
  narrow.r_per_token = 4e-7;
  narrow.capacity_c = 1 << 24;

  PerfProfile wide;
  wide.t_table = {{64, 4e-3}};
  wide.r_per_token = 8e-7;
  wide.capacity_c = 1 << 24;

  const int s = 2048;
  const double narrow_estimate = plan_worker_count(narrow, 64, s).estimate;
  const double wide_estimate = plan_worker_count(wide, 64, s).estimate;
  CHECK(wide_estimate == doctest::Approx(narrow_estimate / 2.0).epsilon(1e-9));
}
