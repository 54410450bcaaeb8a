#include "splitdecode/dense.hpp"

#include "splitdecode/attention.hpp"

#include <sys/utsname.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>

namespace splitdecode {

void apply_linear(const MatrixXf& x, const MatrixXf& w, MatrixXf& out) {
  if (x.cols() != w.cols()) {
    throw ConfigError("apply_linear: input width " + std::to_string(x.cols()) +
                      " != weight fan-in " + std::to_string(w.cols()));
  }
  out.setZero(x.rows(), w.rows());
  // out(b, j) accumulates w(j, k) * x(b, k) with k ascending and a single
  // accumulator per element; the axpy over a column vectorizes across the
  // batch without changing any element's operation sequence.
  for (Eigen::Index k = 0; k < w.cols(); ++k) {
    const auto xk = x.col(k);
    for (Eigen::Index j = 0; j < w.rows(); ++j) {
      out.col(j) += w(j, k) * xk;
    }
  }
}

QkvProjection project_qkv(const WeightSet& weights, int layer,
                          const TokenBatch& batch) {
  if (batch.size() == 0) throw ConfigError("project_qkv: empty batch");
  validate_batch(batch, weights.spec.model_dim);
  const LayerWeights& lw = weights.layers.at(static_cast<std::size_t>(layer));
  QkvProjection p;
  apply_linear(batch.features, lw.w_q, p.q);
  apply_linear(batch.features, lw.w_k, p.k);
  apply_linear(batch.features, lw.w_v, p.v);
  return p;
}

namespace {

float silu(float v) { return v / (1.0f + std::exp(-v)); }

}  // namespace

MatrixXf finish_block(const WeightSet& weights, int layer, const MatrixXf& o,
                      const MatrixXf& residual) {
  const LayerWeights& lw = weights.layers.at(static_cast<std::size_t>(layer));
  if (o.rows() != residual.rows() || o.cols() != weights.spec.model_dim ||
      residual.cols() != weights.spec.model_dim) {
    throw ConfigError("finish_block: O/residual shape mismatch");
  }
  MatrixXf y;
  apply_linear(o, lw.w_o, y);
  y += residual;

  MatrixXf hidden;
  apply_linear(y, lw.w_mlp_in, hidden);
  for (Eigen::Index i = 0; i < hidden.size(); ++i) {
    hidden.data()[i] = silu(hidden.data()[i]);
  }
  MatrixXf mlp_out;
  apply_linear(hidden, lw.w_mlp_out, mlp_out);
  return y + mlp_out;
}

MatrixXf output_logits(const WeightSet& weights, const MatrixXf& x) {
  MatrixXf logits;
  apply_linear(x, weights.head, logits);
  return logits;
}

int argmax_token(const Eigen::Ref<const Eigen::RowVectorXf>& logits) {
  int best = 0;
  float best_value = logits[0];
  for (int i = 1; i < logits.size(); ++i) {
    if (logits[i] > best_value) {
      best_value = logits[i];
      best = i;
    }
  }
  return best;
}

DecodeStepResult decode_step_monolithic(const WeightSet& weights,
                                        KvShard& cache,
                                        const TokenBatch& batch) {
  MatrixXf x = batch.features;
  for (int layer = 0; layer < weights.spec.num_layers; ++layer) {
    TokenBatch current{batch.seq_ids, x};
    QkvProjection proj = project_qkv(weights, layer, current);

    AttentionRequest request;
    request.layer = layer;
    request.items.reserve(batch.seq_ids.size());
    for (int b = 0; b < batch.size(); ++b) {
      AttentionItem item;
      item.seq = batch.seq_ids[static_cast<std::size_t>(b)];
      item.position =
          static_cast<std::uint32_t>(cache.stored_length(item.seq, layer));
      item.q = proj.q.row(b);
      item.k = proj.k.row(b);
      item.v = proj.v.row(b);
      request.items.push_back(std::move(item));
    }
    cache.append_request(request);
    AttentionResponse response = cache.attend(request);

    MatrixXf o(batch.size(), weights.spec.model_dim);
    for (int b = 0; b < batch.size(); ++b) {
      o.row(b) = response.outputs[static_cast<std::size_t>(b)].o;
    }
    x = finish_block(weights, layer, o, x);
  }

  DecodeStepResult result;
  result.final_activations = x;
  MatrixXf logits = output_logits(weights, x);
  result.next_tokens.reserve(batch.seq_ids.size());
  for (int b = 0; b < batch.size(); ++b) {
    result.next_tokens.push_back(argmax_token(logits.row(b)));
  }
  return result;
}

namespace {

MatrixXf deterministic_batch(int rows, int cols, std::uint64_t salt) {
  MatrixXf m(rows, cols);
  std::uint64_t state = salt;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    state = mix64(state);
    m.data()[i] = 2.0f * (static_cast<float>(state >> 40) * 0x1p-24f) - 1.0f;
  }
  return m;
}

}  // namespace

std::vector<DenseBenchRow> bench_dense_block(const ModelSpec& spec,
                                             const std::vector<int>& batch_sizes,
                                             int repetitions) {
  if (batch_sizes.empty()) throw ConfigError("bench: no batch sizes given");
  if (!std::is_sorted(batch_sizes.begin(), batch_sizes.end())) {
    throw ConfigError("bench: batch sizes must be ascending");
  }
  if (repetitions < 1) throw ConfigError("need at least one repetition");

  WeightSet weights = seed_random_weights(spec, 7);
  using clock = std::chrono::steady_clock;

  std::vector<DenseBenchRow> rows;
  volatile float sink = 0.0f;
  for (int b : batch_sizes) {
    TokenBatch batch;
    batch.features = deterministic_batch(b, spec.model_dim, 0x5eedu + b);
    batch.seq_ids.resize(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
      batch.seq_ids[static_cast<std::size_t>(i)] = static_cast<SequenceId>(i + 1);
    }

    auto run_once = [&]() {
      QkvProjection proj = project_qkv(weights, 0, batch);
      MatrixXf x = finish_block(weights, 0, proj.q, batch.features);
      sink = sink + x(0, 0) + proj.k(0, 0) + proj.v(0, 0);
    };

    // calibrate an inner loop so each sample spans at least ~2 ms
    run_once();
    int inner = 1;
    for (;;) {
      const auto t0 = clock::now();
      for (int i = 0; i < inner; ++i) run_once();
      const double elapsed = std::chrono::duration<double>(clock::now() - t0).count();
      if (elapsed >= 2e-3 || inner >= (1 << 20)) break;
      inner *= 4;
    }

    std::vector<double> samples;
    samples.reserve(static_cast<std::size_t>(repetitions));
    for (int rep = 0; rep < repetitions; ++rep) {
      const auto t0 = clock::now();
      for (int i = 0; i < inner; ++i) run_once();
      const double elapsed = std::chrono::duration<double>(clock::now() - t0).count();
      samples.push_back(elapsed / inner);
    }
    std::sort(samples.begin(), samples.end());
    rows.push_back({b, samples[samples.size() / 2]});
  }
  return rows;
}

std::string dense_bench_csv(const std::vector<DenseBenchRow>& rows,
                            const std::string& tag) {
  std::string csv = "batch_size,seconds_per_block,machine_tag\n";
  char line[256];
  for (const DenseBenchRow& row : rows) {
    std::snprintf(line, sizeof line, "%d,%.9g,%s\n", row.batch_size,
                  row.seconds_per_block, tag.c_str());
    csv += line;
  }
  return csv;
}

std::string machine_tag() {
  utsname info{};
  uname(&info);
  char host[256] = "unknown";
  gethostname(host, sizeof host - 1);
  return std::string(host) + "/" + info.machine + "/gcc" +
         std::to_string(__GNUC__) + "." + std::to_string(__GNUC_MINOR__);
}

}  // namespace splitdecode
