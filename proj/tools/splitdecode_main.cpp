#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "splitdecode/attention.hpp"
#include "splitdecode/dense.hpp"
#include "splitdecode/net.hpp"
#include "splitdecode/pipesim.hpp"
#include "splitdecode/planner.hpp"
#include "splitdecode/scheduler.hpp"
#include "splitdecode/transport.hpp"
#include "splitdecode/workers.hpp"

namespace sd = splitdecode;
using nlohmann::json;

namespace {

bool g_json_logs = false;

void log_info(const std::string& msg) {
  if (g_json_logs) {
    std::cerr << json{{"level", "info"}, {"msg", msg}}.dump() << "\n";
  } else {
    std::cerr << msg << "\n";
  }
}

json load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw sd::ConfigError("cannot open " + path);
  json j;
  f >> j;
  return j;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << content;
  if (!f) throw std::runtime_error("write failed for " + path);
}

void emit_report(const std::vector<sd::StepTrace>& traces,
                 const std::string& path) {
  if (traces.empty()) throw std::runtime_error("no trace rows to emit");
  write_file(path, sd::trace_csv(traces));
}

struct ScheduleParams {
  int batch = 0;
  int target_len = 0;
  int interval = 0;
  std::string mode = "fixed-interval";
  long load_limit = 0;
};

ScheduleParams schedule_from_json(const json& j) {
  ScheduleParams p;
  p.batch = j.at("batch").get<int>();
  p.target_len = j.at("target_len").get<int>();
  p.interval = j.value("interval", p.target_len);
  p.mode = j.value("mode", "fixed-interval");
  p.load_limit = j.value("load_limit", 0L);
  if (p.target_len % p.interval != 0) {
    throw sd::ConfigError(
        "schedule: target_len must be divisible by interval for "
        "fixed-interval serving (got S=" +
        std::to_string(p.target_len) + ", F=" + std::to_string(p.interval) +
        ")");
  }
  return p;
}

int cmd_plan(const std::string& profile_path, int layers, int seq,
             double latency, const std::vector<int>& candidates, double knee,
             double tolerance, const std::string& out_path) {
  sd::PerfProfile profile = load_json(profile_path).get<sd::PerfProfile>();
  sd::PlanRequest request;
  request.num_layers = layers;
  request.target_len = seq;
  if (latency > 0) request.latency_budget = latency;
  request.candidate_batches = candidates;
  request.knee_threshold = knee;
  request.balance_tolerance = tolerance;

  const sd::HardwarePlan plan = sd::plan(profile, request);
  std::cout << sd::plan_table(profile, request, plan);
  const json j = plan;
  if (!out_path.empty()) {
    write_file(out_path, j.dump(2) + "\n");
    log_info("plan written to " + out_path);
  } else {
    std::cout << j.dump(2) << "\n";
  }
  return 0;
}

int cmd_simulate(const std::string& scenario_path, const std::string& out_path,
                 const std::string& summary_path,
                 const std::string& baseline_path,
                 const std::string& schedule_csv_path) {
  const json scenario = load_json(scenario_path);
  const ScheduleParams sched = schedule_from_json(scenario.at("schedule"));
  sd::LatencyModelConfig model_config =
      scenario.at("latency_model").get<sd::LatencyModelConfig>();
  const sd::LatencyModel model = sd::build_latency_model(model_config);
  const long horizon = scenario.value("horizon", 3L * sched.target_len);
  const bool compare = scenario.value("compare", false);

  json summary;
  if (compare) {
    const sd::ScheduleComparison cmp = sd::compare_schedules(
        model, sched.batch, sched.target_len, sched.interval);
    emit_report(cmp.stabilized, out_path);
    if (!baseline_path.empty()) emit_report(cmp.large_batch, baseline_path);
    summary = json{
        {"total_latency_ratio", cmp.measured.total_latency_ratio},
        {"total_saving_percent", 100.0 * (1.0 - cmp.measured.total_latency_ratio)},
        {"peak_latency_ratio", cmp.measured.peak_latency_ratio},
        {"peak_saving_percent", 100.0 * (1.0 - cmp.measured.peak_latency_ratio)},
        {"plateau_latency", cmp.plateau_latency},
        {"stabilized_s_idle_fraction", cmp.stab_s_idle_fraction},
        {"stabilized_r_idle_fraction", cmp.stab_r_idle_fraction},
        {"large_batch_s_idle_fraction", cmp.large_s_idle_fraction},
        {"large_batch_r_idle_fraction", cmp.large_r_idle_fraction},
        {"window_load_stabilized", cmp.stab_window_load},
        {"window_load_large_batch", cmp.large_window_load},
    };
    try {
      const sd::SavingsRatios ideal =
          sd::ideal_savings(model, sched.batch, sched.target_len);
      summary["ideal_total_latency_ratio"] = ideal.total_latency_ratio;
      summary["ideal_peak_latency_ratio"] = ideal.peak_latency_ratio;
    } catch (const sd::ConfigError&) {
      // model shape outside the closed form; simulated ratios stand alone
    }
  } else {
    const auto admissions = sd::cold_start_schedule(
        sched.batch, sched.target_len, sched.interval,
        sd::cold_start_mode_from_string(sched.mode), horizon);
    const long limit = sched.load_limit > 0
                           ? sched.load_limit
                           : static_cast<long>(sched.batch) *
                                 (sched.target_len + sched.interval);
    const auto plans = sd::run_schedule(admissions, limit, horizon);
    sd::SimOptions options;
    options.pipelined = scenario.value("pipelined", true);
    options.warmup_steps = sched.target_len;
    const sd::SimResult result = sd::simulate(model, plans, options);
    emit_report(result.steps, out_path);
    if (!schedule_csv_path.empty()) {
      write_file(schedule_csv_path, sd::schedule_csv(plans, admissions));
    }
    double total = 0, peak = 0;
    for (const sd::StepTrace& t : result.steps) {
      total += t.overall_latency;
      peak = std::max(peak, t.overall_latency);
    }
    summary = json{{"total_latency", total},
                   {"peak_latency", peak},
                   {"steps", result.steps.size()},
                   {"horizon_warning", result.horizon_warning}};
  }

  if (!summary_path.empty()) {
    write_file(summary_path, summary.dump(2) + "\n");
  }
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_bench(const std::string& model_path, const std::string& batches_csv,
              int reps, int attn_batch, int attn_len, long capacity,
              const std::string& out_path, const std::string& csv_path) {
  const sd::ModelSpec spec = load_json(model_path).get<sd::ModelSpec>();
  std::vector<int> batches;
  std::stringstream ss(batches_csv);
  for (std::string item; std::getline(ss, item, ',');) {
    batches.push_back(std::stoi(item));
  }

  log_info("measuring dense block latency over " +
           std::to_string(batches.size()) + " batch sizes");
  const auto rows = sd::bench_dense_block(spec, batches, reps);
  log_info("measuring attention cost per token-position");
  const double r = sd::bench_attention_per_token(spec, attn_batch, attn_len, reps);

  sd::PerfProfile profile;
  for (const auto& row : rows) {
    profile.t_table.emplace_back(row.batch_size, row.seconds_per_block);
  }
  profile.r_per_token = r;
  profile.capacity_c = capacity;
  profile.machine_tag = sd::machine_tag();

  const json j = profile;
  if (!out_path.empty()) {
    write_file(out_path, j.dump(2) + "\n");
    log_info("profile written to " + out_path);
  }
  if (!csv_path.empty()) {
    write_file(csv_path, sd::dense_bench_csv(rows, profile.machine_tag));
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_serve(const std::string& listen, long capacity,
              const std::string& storage, const std::string& port_file,
              bool once, double timeout) {
  sd::ServeOptions options;
  options.listen_addr = listen;
  options.worker.capacity_tokens = capacity;
  options.worker.storage = sd::kv_format_from_string(storage);
  options.port_file = port_file;
  options.once = once;
  options.recv_timeout_seconds = timeout;
  return sd::serve_attention_worker(options);
}

int cmd_drive(const std::string& workers_csv, int local_workers,
              const std::string& model_path, const std::string& schedule_path,
              long steps, std::uint64_t seed, bool pipeline,
              const std::string& shard_mode, const std::string& precision,
              double timeout, long local_capacity, const std::string& out_path,
              const std::string& transcript_path,
              const std::string& report_path) {
  sd::GenerationConfig config;
  config.model = load_json(model_path).get<sd::ModelSpec>();
  const ScheduleParams sched = schedule_from_json(load_json(schedule_path));
  config.batch = sched.batch;
  config.target_len = sched.target_len;
  config.interval = sched.interval;
  config.cold_start = sd::cold_start_mode_from_string(sched.mode);
  config.load_limit = sched.load_limit;
  config.steps = steps;
  config.seed = seed;
  config.pipelined = pipeline;
  config.shard_mode = sd::shard_mode_from_string(shard_mode);
  config.wire_precision = sd::wire_precision_from_string(precision);

  std::vector<std::unique_ptr<sd::WorkerLink>> links;
  if (local_workers > 0) {
    sd::AttentionWorkerConfig worker;
    worker.capacity_tokens = local_capacity;
    for (int i = 0; i < local_workers; ++i) {
      links.push_back(std::make_unique<sd::LoopbackLink>(worker));
    }
    log_info("driving " + std::to_string(local_workers) + " in-process workers");
  } else {
    std::stringstream ss(workers_csv);
    for (std::string addr; std::getline(ss, addr, ',');) {
      const auto [host, port] = sd::parse_host_port(addr);
      links.push_back(std::make_unique<sd::TcpWorkerLink>(
          sd::TcpStream::connect_to(host, port), timeout));
      log_info("connected to " + addr);
    }
  }
  if (links.empty()) {
    throw sd::ConfigError("drive needs --workers or --local-workers");
  }

  const sd::DriveResult result = sd::run_generation(config, std::move(links));
  const sd::BenchmarkReport report = sd::summarize_run(result);

  if (!out_path.empty()) emit_report(result.traces, out_path);
  if (!transcript_path.empty()) {
    write_file(transcript_path, sd::transcript_csv(result.transcript));
  }
  const json report_json = to_json(report);
  if (!report_path.empty()) write_file(report_path, report_json.dump(2) + "\n");
  std::cout << report_json.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "splitdecode: disaggregated transformer decoding at desk scale --\n"
      "dense math on one worker, attention over the KV cache on others"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "global random seed");
  app.add_flag("--json-logs", g_json_logs, "structured log lines on stderr");

  // plan
  auto* plan = app.add_subcommand("plan", "pick batch size and worker count from a profile");
  std::string plan_profile, plan_out;
  int plan_layers = 1, plan_seq = 1;
  double plan_latency = 0, plan_knee = 0.10, plan_tolerance = 0.15;
  std::vector<int> plan_candidates;
  plan->add_option("--profile", plan_profile, "PerfProfile JSON")->required();
  plan->add_option("--layers", plan_layers, "model layer count")->required();
  plan->add_option("--seq", plan_seq, "target sequence length")->required();
  plan->add_option("--latency", plan_latency, "sequence latency budget in seconds");
  plan->add_option("--candidates", plan_candidates, "candidate batch sizes");
  plan->add_option("--knee", plan_knee, "marginal efficiency gain per doubling");
  plan->add_option("--tolerance", plan_tolerance, "accepted balance residual");
  plan->add_option("--out", plan_out, "write the plan JSON here");

  // simulate
  auto* simulate = app.add_subcommand("simulate", "run the pipeline simulator");
  std::string sim_scenario, sim_out, sim_summary, sim_baseline, sim_schedule_csv;
  simulate->add_option("--scenario", sim_scenario, "scenario JSON")->required();
  simulate->add_option("--out", sim_out, "StepTrace CSV path")->required();
  simulate->add_option("--summary", sim_summary, "summary JSON path");
  simulate->add_option("--baseline-out", sim_baseline,
                       "large-batch trace CSV (compare scenarios)");
  simulate->add_option("--schedule-csv", sim_schedule_csv, "schedule trace CSV");

  // bench
  auto* bench = app.add_subcommand("bench", "measure T(B) and R on this machine");
  std::string bench_model, bench_batches = "1,8,64", bench_out, bench_csv;
  int bench_reps = 5, bench_attn_batch = 8, bench_attn_len = 256;
  long bench_capacity = 1 << 20;
  bench->add_option("--model", bench_model, "ModelSpec JSON")->required();
  bench->add_option("--batches", bench_batches, "comma-separated batch sizes");
  bench->add_option("--reps", bench_reps, "repetitions per measurement");
  bench->add_option("--attn-batch", bench_attn_batch, "attention bench batch");
  bench->add_option("--attn-len", bench_attn_len, "attention bench stored length");
  bench->add_option("--capacity", bench_capacity, "tokens per worker for the profile");
  bench->add_option("--out", bench_out, "PerfProfile JSON path");
  bench->add_option("--csv", bench_csv, "dense bench CSV path");

  // serve
  auto* serve = app.add_subcommand("serve", "run an attention worker");
  std::string serve_listen = "127.0.0.1:0", serve_storage = "single", serve_port_file;
  long serve_capacity = 1 << 20;
  bool serve_once = false;
  double serve_timeout = 0;
  serve->add_option("--listen", serve_listen, "host:port (port 0 = ephemeral)");
  serve->add_option("--capacity", serve_capacity, "KV capacity in tokens")->required();
  serve->add_option("--storage", serve_storage, "single|half|int8");
  serve->add_option("--port-file", serve_port_file, "write the bound port here");
  serve->add_flag("--once", serve_once, "exit after one session");
  serve->add_option("--timeout", serve_timeout, "recv timeout seconds (0 = none)");

  // drive
  auto* drive = app.add_subcommand("drive", "run the dense worker over a schedule");
  std::string drive_workers, drive_model, drive_schedule, drive_out,
      drive_transcript, drive_report;
  std::string drive_shard_mode = "by-sequence", drive_precision = "single";
  int drive_local = 0;
  long drive_steps = 0, drive_local_capacity = 1 << 20;
  bool drive_no_pipeline = false;
  double drive_timeout = 30.0;
  drive->add_option("--workers", drive_workers, "comma-separated host:port list");
  drive->add_option("--local-workers", drive_local, "use N in-process workers");
  drive->add_option("--model", drive_model, "ModelSpec JSON")->required();
  drive->add_option("--schedule", drive_schedule, "schedule JSON")->required();
  drive->add_option("--steps", drive_steps, "decode steps (0 = to completion)");
  drive->add_flag("--no-pipeline", drive_no_pipeline, "disable mini-batch interleaving");
  drive->add_option("--shard-mode", drive_shard_mode, "by-sequence|by-head|hybrid");
  drive->add_option("--wire-precision", drive_precision, "single|half");
  drive->add_option("--timeout", drive_timeout, "reply timeout seconds");
  drive->add_option("--local-capacity", drive_local_capacity,
                    "per-worker KV tokens for --local-workers");
  drive->add_option("--out", drive_out, "StepTrace CSV path");
  drive->add_option("--transcript", drive_transcript, "transcript CSV path");
  drive->add_option("--report", drive_report, "benchmark report JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints the usage message
    return code == 0 ? 0 : 1;      // usage problems exit 1, --help exits 0
  }

  try {
    if (plan->parsed()) {
      return cmd_plan(plan_profile, plan_layers, plan_seq, plan_latency,
                      plan_candidates, plan_knee, plan_tolerance, plan_out);
    }
    if (simulate->parsed()) {
      return cmd_simulate(sim_scenario, sim_out, sim_summary, sim_baseline,
                          sim_schedule_csv);
    }
    if (bench->parsed()) {
      return cmd_bench(bench_model, bench_batches, bench_reps, bench_attn_batch,
                       bench_attn_len, bench_capacity, bench_out, bench_csv);
    }
    if (serve->parsed()) {
      return cmd_serve(serve_listen, serve_capacity, serve_storage,
                       serve_port_file, serve_once, serve_timeout);
    }
    if (drive->parsed()) {
      return cmd_drive(drive_workers, drive_local, drive_model, drive_schedule,
                       drive_steps, seed, !drive_no_pipeline, drive_shard_mode,
                       drive_precision, drive_timeout, drive_local_capacity,
                       drive_out, drive_transcript, drive_report);
    }
  } catch (const std::exception& e) {
    if (g_json_logs) {
      std::cerr << json{{"level", "error"}, {"msg", e.what()}}.dump() << "\n";
    } else {
      std::cerr << "error: " << e.what() << "\n";
    }
    return 2;
  }
  return 1;
}
