#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "splitdecode/attention.hpp"
#include "splitdecode/core.hpp"
#include "splitdecode/dense.hpp"
#include "splitdecode/workers.hpp"

using namespace splitdecode;

namespace {

MatrixXf random_matrix(int rows, int cols, std::uint64_t salt) {
  MatrixXf m(rows, cols);
  std::uint64_t state = salt;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    state = mix64(state);
    m.data()[i] = 2.0f * (static_cast<float>(state >> 40) * 0x1p-24f) - 1.0f;
  }
  return m;
}

// independent scalar triple-loop oracle for out = x * w^T, double accumulators
Eigen::MatrixXd matmul_oracle(const MatrixXf& x, const MatrixXf& w) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), w.rows());
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    for (Eigen::Index j = 0; j < w.rows(); ++j) {
      double acc = 0;
      for (Eigen::Index k = 0; k < x.cols(); ++k) {
        acc += static_cast<double>(w(j, k)) * static_cast<double>(x(b, k));
      }
      out(b, j) = acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("identity projections pass features through untouched") {
  const ModelSpec spec = make_model_spec(1, 8, 2, 16, 10);
  WeightSet w = seed_random_weights(spec, 3);
  w.layers[0].w_q.setIdentity();
  w.layers[0].w_k.setIdentity();
  w.layers[0].w_v.setIdentity();

  TokenBatch batch;
  batch.seq_ids = {1, 2};
  batch.features = random_matrix(2, 8, 77);
  const QkvProjection p = project_qkv(w, 0, batch);
  CHECK(p.q == batch.features);
  CHECK(p.k == batch.features);
  CHECK(p.v == batch.features);

  batch.features.setZero();
  const QkvProjection z = project_qkv(w, 0, batch);
  CHECK(z.q.isZero(0));
  CHECK(z.k.isZero(0));
  CHECK(z.v.isZero(0));
}

TEST_CASE("qkv projection matches the scalar oracle") {
  const ModelSpec spec = make_model_spec(1, 24, 4, 32, 10);
  const WeightSet w = seed_random_weights(spec, 9);
  TokenBatch batch;
  batch.seq_ids = {1, 2, 3, 4};
  batch.features = random_matrix(4, 24, 123);

  const QkvProjection p = project_qkv(w, 0, batch);
  const auto expected = matmul_oracle(batch.features, w.layers[0].w_q);
  CHECK((p.q.cast<double>() - expected).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("projection of one row is bitwise independent of the batch") {
  const ModelSpec spec = make_model_spec(1, 32, 4, 32, 10);
  const WeightSet w = seed_random_weights(spec, 21);
  TokenBatch big;
  big.seq_ids = {1, 2, 3, 4, 5, 6, 7};
  big.features = random_matrix(7, 32, 5);

  TokenBatch solo;
  solo.seq_ids = {3};
  solo.features = big.features.row(2);

  const QkvProjection pb = project_qkv(w, 0, big);
  const QkvProjection ps = project_qkv(w, 0, solo);
  CHECK(pb.q.row(2) == ps.q.row(0));
  CHECK(pb.k.row(2) == ps.k.row(0));
  CHECK(pb.v.row(2) == ps.v.row(0));
}

TEST_CASE("finish_block degenerate cases") {
  const ModelSpec spec = make_model_spec(1, 8, 2, 12, 10);
  WeightSet w = seed_random_weights(spec, 31);

  SUBCASE("zero O and zero residual with a zero MLP give zero output") {
    w.layers[0].w_mlp_out.setZero();
    const MatrixXf o = MatrixXf::Zero(3, 8);
    const MatrixXf res = MatrixXf::Zero(3, 8);
    const MatrixXf out = finish_block(w, 0, o, res);
    CHECK(out.isZero(0));
  }

  SUBCASE("zero MLP output matrix reduces the block to residual + W_o O") {
    w.layers[0].w_mlp_out.setZero();
    const MatrixXf o = random_matrix(3, 8, 41);
    const MatrixXf res = random_matrix(3, 8, 43);
    const MatrixXf out = finish_block(w, 0, o, res);
    MatrixXf y;
    apply_linear(o, w.layers[0].w_o, y);
    y += res;
    CHECK(out == y);
  }
}

TEST_CASE("finish_block matches a scalar oracle") {
  const ModelSpec spec = make_model_spec(1, 16, 2, 24, 10);
  const WeightSet w = seed_random_weights(spec, 55);
  const MatrixXf o = random_matrix(3, 16, 71);
  const MatrixXf res = random_matrix(3, 16, 73);
  const MatrixXf out = finish_block(w, 0, o, res);

  const Eigen::MatrixXd y =
      matmul_oracle(o, w.layers[0].w_o) + res.cast<double>();
  Eigen::MatrixXd hidden = matmul_oracle(y.cast<float>().eval(), w.layers[0].w_mlp_in);
  for (Eigen::Index i = 0; i < hidden.size(); ++i) {
    const double v = hidden.data()[i];
    hidden.data()[i] = v / (1.0 + std::exp(-v));
  }
  const Eigen::MatrixXd expected =
      y + matmul_oracle(hidden.cast<float>().eval(), w.layers[0].w_mlp_out);
  CHECK((out.cast<double>() - expected).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("argmax is invariant under positive rescaling of logits") {
  Eigen::RowVectorXf logits = random_matrix(1, 50, 91).row(0);
  const int base = argmax_token(logits);
  CHECK(argmax_token((logits.array() * 7.5f).matrix()) == base);
  CHECK(argmax_token((logits.array() * 0.001f).matrix()) == base);
}

TEST_CASE("monolithic decode step: batch of one equals the batched run bitwise") {
  const ModelSpec spec = make_model_spec(2, 64, 4, 256, 128);
  const WeightSet w = seed_random_weights(spec, 0);

  TokenBatch batch;
  batch.seq_ids = {1, 2, 3};
  batch.features.resize(3, 64);
  for (int b = 0; b < 3; ++b) batch.features.row(b) = w.embedding.col(b + 5);

  KvShard shard_all(spec, 0, spec.num_heads, 1 << 12);
  KvShard shard_solo(spec, 0, spec.num_heads, 1 << 12);

  TokenBatch solo;
  solo.seq_ids = {2};
  solo.features = batch.features.row(1);

  for (int step = 0; step < 4; ++step) {
    const DecodeStepResult all = decode_step_monolithic(w, shard_all, batch);
    const DecodeStepResult one = decode_step_monolithic(w, shard_solo, solo);
    REQUIRE(all.next_tokens[1] == one.next_tokens[0]);
    REQUIRE(all.final_activations.row(1) == one.final_activations.row(0));
    for (int b = 0; b < 3; ++b) {
      batch.features.row(b) = w.embedding.col(all.next_tokens[b]);
    }
    solo.features = batch.features.row(1);
  }
}

TEST_CASE("golden transcript fixture: 2 layers, 64 dim, 3 sequences, 20 steps") {
  const ModelSpec spec = make_model_spec(2, 64, 4, 256, 128);
  const WeightSet w = seed_random_weights(spec, 0);
  GenerationConfig config;
  config.model = spec;
  config.seed = 0;
  config.batch = 3;
  config.target_len = 20;
  config.interval = 20;
  config.steps = 20;
  const DriveResult result = run_monolithic(config, w, 1 << 16);

  std::ifstream f(std::string(FIXTURES_DIR) + "/golden_transcript_2x64_3seq_20.csv");
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  CHECK(transcript_csv(result.transcript) == ss.str());
}

TEST_CASE("dense bench rejects bad arguments and emits csv rows") {
  const ModelSpec spec = make_model_spec(1, 16, 2, 32, 16);
  CHECK_THROWS_AS(bench_dense_block(spec, {}, 3), ConfigError);
  CHECK_THROWS_AS(bench_dense_block(spec, {8, 1}, 3), ConfigError);
  CHECK_THROWS_WITH_AS(bench_dense_block(spec, {1}, 0),
                       doctest::Contains("at least one repetition"), ConfigError);

  const auto rows = bench_dense_block(spec, {2}, 3);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].batch_size == 2);
  CHECK(rows[0].seconds_per_block > 0);
  CHECK(std::isfinite(rows[0].seconds_per_block));

  const std::string csv = dense_bench_csv(rows, "testbox");
  CHECK(csv.rfind("batch_size,seconds_per_block,machine_tag\n", 0) == 0);
  CHECK(csv.find(",testbox\n") != std::string::npos);
}

TEST_CASE("batching amortizes dense per-token cost" *
          doctest::description("throughput proxy B/T(B) rises from B=1 to B=64")) {
  const ModelSpec spec = make_model_spec(1, 64, 4, 256, 128);
  const auto rows = bench_dense_block(spec, {1, 64}, 5);
  const double eff1 = 1.0 / rows[0].seconds_per_block;
  const double eff64 = 64.0 / rows[1].seconds_per_block;
  CHECK(eff64 > eff1);
}
