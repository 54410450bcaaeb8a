#pragma once

#include "splitdecode/core.hpp"

#include <vector>

// Parameter-bearing dense math: QKV projections, the output projection + MLP
// tail of a transformer block, and the output head. Also hosts the monolithic
// single-process decoder used as the correctness oracle for the distributed
// runtime, and the dense-stage micro-benchmark.

namespace splitdecode {

class KvShard;  // attention.hpp

/// out = x * W^T, computed with one accumulator per output element and the
/// input index ascending. Batch rows are independent, so the result for a
/// row never depends on which other rows are present -- the property the
/// distributed/monolithic equivalence tests rely on, bit for bit.
void apply_linear(const MatrixXf& x, const MatrixXf& w, MatrixXf& out);

struct QkvProjection {
  MatrixXf q, k, v;  // each batch x model_dim, rows aligned with the batch
};

QkvProjection project_qkv(const WeightSet& weights, int layer,
                          const TokenBatch& batch);

/// x_next = y + mlp(y) with y = residual + o * W_o^T. The MLP nonlinearity is
/// silu; there is no layer norm in this model family.
MatrixXf finish_block(const WeightSet& weights, int layer, const MatrixXf& o,
                      const MatrixXf& residual);

/// Logits for each row of x through the output head.
MatrixXf output_logits(const WeightSet& weights, const MatrixXf& x);

/// Greedy sampler: index of the largest logit, first index winning ties.
int argmax_token(const Eigen::Ref<const Eigen::RowVectorXf>& logits);

struct DecodeStepResult {
  std::vector<int> next_tokens;   // aligned with the batch rows
  MatrixXf final_activations;     // pre-head activations, batch x model_dim
};

/// One full decode step on a local cache: for every layer project QKV,
/// append K/V to the cache, attend, finish the block; then head + argmax.
/// Exactly the computation the distributed runtime performs, minus transport.
DecodeStepResult decode_step_monolithic(const WeightSet& weights,
                                        KvShard& cache,
                                        const TokenBatch& batch);

struct DenseBenchRow {
  int batch_size = 0;
  double seconds_per_block = 0;  // median over repetitions
};

/// Times the dense part of one transformer block (QKV projection + output
/// projection + MLP) at each batch size. Deterministic input data; medians
/// of `repetitions` samples.
std::vector<DenseBenchRow> bench_dense_block(const ModelSpec& spec,
                                             const std::vector<int>& batch_sizes,
                                             int repetitions);

/// CSV rows "batch_size,seconds_per_block,machine_tag".
std::string dense_bench_csv(const std::vector<DenseBenchRow>& rows,
                            const std::string& machine_tag);

/// Hostname/arch/compiler tag recorded alongside measured numbers.
std::string machine_tag();

}  // namespace splitdecode
