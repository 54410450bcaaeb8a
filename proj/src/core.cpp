#include "splitdecode/core.hpp"

#include <cmath>
#include <random>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace splitdecode {

ModelSpec make_model_spec(int num_layers, int model_dim, int num_heads,
                          int mlp_dim, int vocab_size) {
  if (num_layers < 1 || model_dim < 1 || num_heads < 1 || mlp_dim < 1 ||
      vocab_size < 1) {
    throw ConfigError("model spec fields must all be >= 1");
  }
  if (model_dim % num_heads != 0) {
    throw ConfigError("model_dim not divisible by heads (model_dim=" +
                      std::to_string(model_dim) +
                      ", num_heads=" + std::to_string(num_heads) + ")");
  }
  ModelSpec spec;
  spec.num_layers = num_layers;
  spec.model_dim = model_dim;
  spec.num_heads = num_heads;
  spec.head_dim = model_dim / num_heads;
  spec.mlp_dim = mlp_dim;
  spec.vocab_size = vocab_size;
  return spec;
}

void to_json(nlohmann::json& j, const ModelSpec& spec) {
  j = nlohmann::json{{"num_layers", spec.num_layers},
                     {"model_dim", spec.model_dim},
                     {"num_heads", spec.num_heads},
                     {"head_dim", spec.head_dim},
                     {"mlp_dim", spec.mlp_dim},
                     {"vocab_size", spec.vocab_size}};
}

void from_json(const nlohmann::json& j, ModelSpec& spec) {
  ModelSpec parsed = make_model_spec(
      j.at("num_layers").get<int>(), j.at("model_dim").get<int>(),
      j.at("num_heads").get<int>(), j.at("mlp_dim").get<int>(),
      j.at("vocab_size").get<int>());
  if (j.contains("head_dim") && j.at("head_dim").get<int>() != parsed.head_dim) {
    throw ConfigError("head_dim inconsistent with model_dim / num_heads");
  }
  spec = parsed;
}

void validate_batch(const TokenBatch& batch, int model_dim) {
  if (batch.features.rows() != static_cast<Eigen::Index>(batch.seq_ids.size())) {
    throw ConfigError("token batch: row count does not match sequence ids");
  }
  if (batch.features.cols() != model_dim) {
    throw ConfigError("token batch: feature width " +
                      std::to_string(batch.features.cols()) +
                      " != model_dim " + std::to_string(model_dim));
  }
  std::unordered_set<SequenceId> seen;
  for (SequenceId id : batch.seq_ids) {
    if (!seen.insert(id).second) {
      throw ConfigError("token batch: duplicate sequence id " +
                        std::to_string(id));
    }
  }
}

namespace {

// Portable uniform in [0,1): top 24 bits of an mt19937 draw. The standard
// fixes the mt19937 bit stream, and all arithmetic here is exact in float.
class UniformSource {
 public:
  explicit UniformSource(std::uint64_t seed)
      : gen_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

  float next_unit() {
    return static_cast<float>(gen_() >> 8) * 0x1p-24f;
  }

  // Uniform in [-scale, scale).
  float next_signed(float scale) { return (2.0f * next_unit() - 1.0f) * scale; }

  void fill(MatrixXf& m, float scale) {
    float* p = m.data();
    for (Eigen::Index i = 0; i < m.size(); ++i) p[i] = next_signed(scale);
  }

 private:
  std::mt19937 gen_;
};

}  // namespace

WeightSet seed_random_weights(const ModelSpec& spec, std::uint64_t seed) {
  WeightSet w;
  w.spec = spec;
  UniformSource src(seed);

  const float d_scale = 1.0f / std::sqrt(static_cast<float>(spec.model_dim));
  const float m_scale = 1.0f / std::sqrt(static_cast<float>(spec.mlp_dim));

  w.embedding.resize(spec.model_dim, spec.vocab_size);
  src.fill(w.embedding, 1.0f);

  w.layers.resize(spec.num_layers);
  for (auto& layer : w.layers) {
    layer.w_q.resize(spec.model_dim, spec.model_dim);
    layer.w_k.resize(spec.model_dim, spec.model_dim);
    layer.w_v.resize(spec.model_dim, spec.model_dim);
    layer.w_o.resize(spec.model_dim, spec.model_dim);
    layer.w_mlp_in.resize(spec.mlp_dim, spec.model_dim);
    layer.w_mlp_out.resize(spec.model_dim, spec.mlp_dim);
    src.fill(layer.w_q, d_scale);
    src.fill(layer.w_k, d_scale);
    src.fill(layer.w_v, d_scale);
    src.fill(layer.w_o, d_scale);
    src.fill(layer.w_mlp_in, d_scale);
    src.fill(layer.w_mlp_out, m_scale);
  }

  w.head.resize(spec.vocab_size, spec.model_dim);
  src.fill(w.head, d_scale);
  return w;
}

namespace {

void hash_matrix(std::uint64_t& h, const MatrixXf& m) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
  const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(float);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ull;
  }
}

}  // namespace

std::uint64_t weight_checksum(const WeightSet& w) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  hash_matrix(h, w.embedding);
  for (const auto& layer : w.layers) {
    hash_matrix(h, layer.w_q);
    hash_matrix(h, layer.w_k);
    hash_matrix(h, layer.w_v);
    hash_matrix(h, layer.w_o);
    hash_matrix(h, layer.w_mlp_in);
    hash_matrix(h, layer.w_mlp_out);
  }
  hash_matrix(h, w.head);
  return h;
}

bool all_finite(const Eigen::Ref<const MatrixXf>& m) {
  return m.allFinite();
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

int prompt_token(std::uint64_t seed, SequenceId id, int vocab_size) {
  return static_cast<int>(mix64(seed ^ mix64(id)) %
                          static_cast<std::uint64_t>(vocab_size));
}

double linear_fit_r2(const std::vector<double>& x,
                     const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n != y.size() || n < 2) {
    throw ConfigError("linear_fit_r2 needs two same-length samples");
  }
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / static_cast<double>(n);
  const double my = sy / static_cast<double>(n);
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (syy == 0.0) return 1.0;
  if (sxx == 0.0) throw ConfigError("linear_fit_r2: x values are constant");
  const double slope = sxy / sxx;
  double ss_res = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pred = my + slope * (x[i] - mx);
    ss_res += (y[i] - pred) * (y[i] - pred);
  }
  return 1.0 - ss_res / syy;
}

}  // namespace splitdecode
