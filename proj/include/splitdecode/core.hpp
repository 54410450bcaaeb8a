#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

// Shared domain types for model geometry, sequences and weights.
//
// Single precision is the reference arithmetic everywhere in this project;
// half precision and int8 exist only as storage formats inside the KV store.
// All dense math keeps a fixed per-element reduction order (ascending input
// index, one accumulator) so that results are bit-identical no matter how a
// batch is split across workers.

namespace splitdecode {

using Eigen::MatrixXf;
using Eigen::VectorXf;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using SequenceId = std::uint64_t;

/// Geometry of a toy decoder-only transformer.
struct ModelSpec {
  int num_layers = 0;
  int model_dim = 0;
  int num_heads = 0;
  int head_dim = 0;
  int mlp_dim = 0;
  int vocab_size = 0;
};

/// Validates and completes a spec; head_dim is derived as model_dim / heads.
/// Throws ConfigError when any field is < 1 or model_dim % heads != 0.
ModelSpec make_model_spec(int num_layers, int model_dim, int num_heads,
                          int mlp_dim, int vocab_size);

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);

struct SequenceState {
  SequenceId id = 0;
  int current_length = 0;  // tokens generated so far, including prompt
  int target_length = 0;
  int micro_batch_id = -1;
};

/// One token per sequence, stacked row-wise: features(b, :) belongs to
/// seq_ids[b]. Rows are ordered and ids must be unique within the batch.
struct TokenBatch {
  std::vector<SequenceId> seq_ids;
  MatrixXf features;  // batch x model_dim

  int size() const { return static_cast<int>(seq_ids.size()); }
};

/// Throws ConfigError on duplicate ids or a row/ids size mismatch.
void validate_batch(const TokenBatch& batch, int model_dim);

struct LayerWeights {
  MatrixXf w_q, w_k, w_v, w_o;  // model_dim x model_dim, stored (out x in)
  MatrixXf w_mlp_in;            // mlp_dim x model_dim
  MatrixXf w_mlp_out;           // model_dim x mlp_dim
};

struct WeightSet {
  ModelSpec spec;
  MatrixXf embedding;  // model_dim x vocab_size, one column per token id
  std::vector<LayerWeights> layers;
  MatrixXf head;  // vocab_size x model_dim
};

/// Deterministic random weights for a given (spec, seed). The generator is
/// mt19937 with a fixed uniform mapping, so the bit pattern of every tensor
/// is identical across runs and platforms. Entries are uniform in
/// [-1/sqrt(fan_in), 1/sqrt(fan_in)) to keep activations O(1).
WeightSet seed_random_weights(const ModelSpec& spec, std::uint64_t seed);

/// FNV-1a over the raw float bits of every tensor, in a fixed tensor order.
/// Used to freeze golden weight fixtures.
std::uint64_t weight_checksum(const WeightSet& weights);

/// True when every coefficient is finite (no NaN/Inf).
bool all_finite(const Eigen::Ref<const MatrixXf>& m);

/// SplitMix64; the project-wide portable integer mixer (prompt tokens,
/// sequence-to-worker hashing).
std::uint64_t mix64(std::uint64_t x);

/// Deterministic prompt token for a sequence.
int prompt_token(std::uint64_t seed, SequenceId id, int vocab_size);

/// Least-squares fit y = a + b*x; returns R^2 (1.0 when y is constant).
double linear_fit_r2(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace splitdecode
