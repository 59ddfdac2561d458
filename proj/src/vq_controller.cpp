#include "asac/vq_controller.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace asac::vq {

void ControllerConfig::validate() const {
  if (input_dim == 0 || latent_dim == 0 || codebook_dim == 0 || codebook_size == 0) {
    throw ConfigurationError("controller dimensions must be positive");
  }
  if (latent_dim % codebook_dim != 0) {
    throw ConfigurationError("latent_dim " + std::to_string(latent_dim) + " is not a multiple of codebook_dim " +
                             std::to_string(codebook_dim));
  }
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigurationError("ema_decay must lie in (0, 1)");
  if (dead_threshold < 0.0) throw ConfigurationError("dead_threshold must be non-negative");
  if (commitment_cost < 0.0) throw ConfigurationError("commitment_cost must be non-negative");
}

CodebookState CodebookState::random(std::size_t size, std::size_t dim, double decay, double dead_threshold,
                                    std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  std::vector<double> e(size * dim);
  for (auto& v : e) v = normal(rng);
  CodebookState cb;
  cb.embeddings = Tensor::from({size, dim}, e);
  cb.ema_sum = Tensor::from({size, dim}, std::move(e));
  cb.ema_cluster_size = Tensor::full({size}, 1.0);
  cb.decay = decay;
  cb.dead_threshold = dead_threshold;
  return cb;
}

namespace {
thread_local FrozenQuantization* t_frozen = nullptr;
}

FrozenQuantization::FrozenQuantization() : previous_(t_frozen) { t_frozen = this; }
FrozenQuantization::~FrozenQuantization() { t_frozen = previous_; }

void FrozenQuantization::record() {
  replaying = false;
  frames.clear();
}

void FrozenQuantization::replay() {
  replaying = true;
  cursor = 0;
}

QuantizeResult quantize(const Tensor& z_e, const CodebookState& codebook) {
  if (t_frozen && t_frozen->replaying) {
    if (t_frozen->cursor >= t_frozen->frames.size()) throw ContractError("quantize: no recorded frame to replay");
    const auto& f = t_frozen->frames[t_frozen->cursor++];
    if (f.offset.size() != z_e.numel()) throw ContractError("quantize: replayed frame has the wrong size");
    std::vector<double> shifted(z_e.data().begin(), z_e.data().end());
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += f.offset[i];
    QuantizeResult r;
    r.codes = f.codes;
    r.indices = f.indices;
    r.distances = f.distances;
    r.z_q = straight_through(z_e, Tensor::from(z_e.shape(), std::move(shifted)));
    return r;
  }

  const std::size_t d = codebook.dim();
  const std::size_t k = codebook.size();
  if (z_e.rank() != 2 || z_e.dim(1) % d != 0) {
    throw ContractError("quantize: input " + shape_str(z_e.shape()) + " is not a whole number of " +
                        std::to_string(d) + "-wide chunks per row");
  }
  const std::size_t count = z_e.numel() / d;
  auto x = z_e.data();
  auto e = codebook.embeddings.data();

  QuantizeResult result;
  result.indices.resize(count);
  result.distances.resize(count);
  std::vector<double> values(z_e.numel());
  for (std::size_t c = 0; c < count; ++c) {
    const double* chunk = x.data() + c * d;
    std::size_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      const double* code = e.data() + j * d;
      double dist = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double diff = chunk[i] - code[i];
        dist += diff * diff;
      }
      if (dist < best_dist) {  // strict: the first minimum wins ties
        best_dist = dist;
        best = j;
      }
    }
    result.indices[c] = best;
    result.distances[c] = best_dist;
    std::copy_n(e.data() + best * d, d, values.data() + c * d);
  }
  result.codes = Tensor::from(z_e.shape(), values);
  result.z_q = straight_through(z_e, result.codes);
  if (t_frozen) {
    std::vector<double> offset(values.size());
    for (std::size_t i = 0; i < offset.size(); ++i) offset[i] = values[i] - x[i];
    t_frozen->frames.push_back({result.codes, std::move(offset), result.indices, result.distances});
  }
  return result;
}

void ema_update(CodebookState& codebook, std::span<const double> chunks, std::span<const std::size_t> indices,
                std::mt19937_64& rng) {
  const std::size_t d = codebook.dim();
  const std::size_t k = codebook.size();
  if (indices.empty()) return;
  if (chunks.size() != indices.size() * d) {
    throw ContractError("ema_update: " + std::to_string(indices.size()) + " indices but " +
                        std::to_string(chunks.size()) + " chunk values");
  }
  std::vector<double> counts(k, 0.0);
  std::vector<double> sums(k * d, 0.0);
  for (std::size_t c = 0; c < indices.size(); ++c) {
    const std::size_t j = indices[c];
    if (j >= k) throw ContractError("ema_update: code index out of range");
    counts[j] += 1.0;
    for (std::size_t i = 0; i < d; ++i) sums[j * d + i] += chunks[c * d + i];
  }

  const double decay = codebook.decay;
  auto size = codebook.ema_cluster_size.mutable_data();
  auto sum = codebook.ema_sum.mutable_data();
  auto emb = codebook.embeddings.mutable_data();
  for (std::size_t j = 0; j < k; ++j) {
    size[j] = decay * size[j] + (1.0 - decay) * counts[j];
    const double divisor = std::max(size[j], kEmaDivisorFloor);
    for (std::size_t i = 0; i < d; ++i) {
      sum[j * d + i] = decay * sum[j * d + i] + (1.0 - decay) * sums[j * d + i];
      emb[j * d + i] = sum[j * d + i] / divisor;
    }
  }

  std::uniform_int_distribution<std::size_t> pick(0, indices.size() - 1);
  for (std::size_t j = 0; j < k; ++j) {
    if (size[j] >= codebook.dead_threshold) continue;
    const std::size_t c = pick(rng);
    size[j] = 1.0;
    for (std::size_t i = 0; i < d; ++i) {
      sum[j * d + i] = chunks[c * d + i];
      emb[j * d + i] = chunks[c * d + i];
    }
  }
}

Tensor vq_loss(const Tensor& z_e, const Tensor& codes, double beta) {
  const Tensor e = stop_gradient(codes);
  Tensor codebook_term = mse(stop_gradient(z_e), e);
  Tensor commitment_term = scale(mse(z_e, e), beta);
  return add(codebook_term, commitment_term);
}

AttentionController::AttentionController(const ControllerConfig& config, ParameterStore& store,
                                         const std::string& prefix, std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  const std::size_t h = config_.hidden();
  enc1_ = Linear(store, prefix + ".encoder.0", config_.input_dim, h, rng);
  enc2_ = Linear(store, prefix + ".encoder.1", h, config_.latent_dim, rng);
  dec1_ = Linear(store, prefix + ".decoder.0", config_.latent_dim + config_.decoder_task_dim, h, rng);
  dec2_ = Linear(store, prefix + ".decoder.1", h, config_.input_dim, rng);
  codebook_ = CodebookState::random(config_.codebook_size, config_.codebook_dim, config_.ema_decay,
                                    config_.dead_threshold, rng);
  codebook_.embeddings = store.add(prefix + ".codebook.embeddings", codebook_.embeddings, false);
  codebook_.ema_cluster_size = store.add(prefix + ".codebook.ema_cluster_size", codebook_.ema_cluster_size, false);
  codebook_.ema_sum = store.add(prefix + ".codebook.ema_sum", codebook_.ema_sum, false);
}

Tensor AttentionController::encode(const Tensor& scores) const {
  if (scores.rank() != 2 || scores.dim(1) != config_.input_dim) {
    throw ContractError("encode: expected [rows x " + std::to_string(config_.input_dim) + "], got " +
                        shape_str(scores.shape()));
  }
  return enc2_(leaky_relu(enc1_(scores), config_.leaky_slope));
}

Tensor AttentionController::decode(const Tensor& z_q, const std::optional<Tensor>& task_embedding) const {
  if (z_q.rank() != 2 || z_q.dim(1) != config_.latent_dim) {
    throw ContractError("decode: expected [rows x " + std::to_string(config_.latent_dim) + "], got " +
                        shape_str(z_q.shape()));
  }
  Tensor input = z_q;
  if (task_embedding) {
    if (config_.decoder_task_dim == 0) {
      throw ConfigurationError("decode: task embedding supplied but the controller has no decoder task input");
    }
    const Tensor& t = *task_embedding;
    if (t.rank() != 2 || t.dim(0) != z_q.dim(0) || t.dim(1) != config_.decoder_task_dim) {
      throw ContractError("decode: task embedding " + shape_str(t.shape()) + " does not match rows of " +
                          shape_str(z_q.shape()));
    }
    input = concat({z_q, t}, 1);
  } else if (config_.decoder_task_dim != 0) {
    throw ConfigurationError("decode: controller expects a task embedding of width " +
                             std::to_string(config_.decoder_task_dim));
  }
  return dec2_(leaky_relu(dec1_(input), config_.leaky_slope));
}

AttentionController::Output AttentionController::forward(const Tensor& scores,
                                                          const std::optional<Tensor>& task_embedding) const {
  Output out;
  out.z_e = encode(scores);
  out.quantized = quantize(out.z_e);
  out.reconstruction = decode(out.quantized.z_q, task_embedding);
  return out;
}

void AttentionController::ema_update(const Output& output, std::mt19937_64& rng) {
  vq::ema_update(codebook_, output.z_e.data(), output.quantized.indices, rng);
}

}  // namespace asac::vq
