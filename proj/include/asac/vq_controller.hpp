#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "asac/layers.hpp"
#include "asac/tensor.hpp"

namespace asac::vq {

/// Raised when a controller is driven in a way its configuration does not allow.
class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ControllerConfig {
  std::size_t input_dim = 0;   // width of one score row
  std::size_t hidden_dim = 0;  // width between the two linear layers; 0 means latent_dim
  std::size_t latent_dim = 32;
  std::size_t codebook_dim = 32;
  std::size_t codebook_size = 64;
  double commitment_cost = 1.0;
  double ema_decay = 0.99;
  double dead_threshold = 2.0;
  double leaky_slope = 0.01;
  std::size_t decoder_task_dim = 0;  // 0 disables task input to the decoder

  std::size_t hidden() const { return hidden_dim == 0 ? latent_dim : hidden_dim; }
  std::size_t chunks_per_row() const { return latent_dim / codebook_dim; }
  void validate() const;
};

inline constexpr double kEmaDivisorFloor = 1e-5;

/// Codebook embeddings and their EMA statistics.
///
/// Invariant after every update: embeddings[i] == ema_sum[i] / max(ema_cluster_size[i], 1e-5).
struct CodebookState {
  Tensor embeddings;        // [codebook_size x codebook_dim]
  Tensor ema_cluster_size;  // [codebook_size]
  Tensor ema_sum;           // [codebook_size x codebook_dim]
  double decay = 0.99;
  double dead_threshold = 2.0;

  std::size_t size() const { return embeddings.dim(0); }
  std::size_t dim() const { return embeddings.dim(1); }

  /// N(0, 1/codebook_dim) codes with unit cluster sizes.
  static CodebookState random(std::size_t size, std::size_t dim, double decay, double dead_threshold,
                              std::mt19937_64& rng);
};

struct QuantizeResult {
  Tensor z_q;                         // straight-through output, same shape as z_e
  Tensor codes;                       // selected embeddings, detached
  std::vector<std::size_t> indices;   // [rows x chunks_per_row], row-major
  std::vector<double> distances;      // squared distance to the selected code, per chunk
};

/// Nearest-code quantisation of codebook_dim-wide chunks of z_e. Ties go to the
/// lowest index. Gradient reaching z_q passes to z_e unchanged; the codebook gets none.
QuantizeResult quantize(const Tensor& z_e, const CodebookState& codebook);

/// Finite-difference support. While one is alive, the first quantize pass after
/// record() stores each call's codes and offsets e - z_e; after replay() every
/// pass reuses them, so quantize becomes z_e + const and central differences
/// see exactly the function whose gradient the straight-through rule reports.
class FrozenQuantization {
 public:
  FrozenQuantization();
  ~FrozenQuantization();
  FrozenQuantization(const FrozenQuantization&) = delete;
  FrozenQuantization& operator=(const FrozenQuantization&) = delete;

  void record();
  void replay();

  struct Frame {
    Tensor codes;
    std::vector<double> offset;
    std::vector<std::size_t> indices;
    std::vector<double> distances;
  };
  bool replaying = false;
  std::size_t cursor = 0;
  std::vector<Frame> frames;

 private:
  FrozenQuantization* previous_;
};

/// EMA re-estimation followed by dead-code revival. `chunks` is the flattened
/// [count x codebook_dim] matrix of encoder outputs; an empty batch is a no-op.
void ema_update(CodebookState& codebook, std::span<const double> chunks, std::span<const std::size_t> indices,
                std::mt19937_64& rng);

/// ||sg[z_e] - e||^2 + beta ||z_e - sg[e]||^2, each as a mean over elements.
Tensor vq_loss(const Tensor& z_e, const Tensor& codes, double beta);

/// VQ-VAE over attention-score rows: two-layer encoder, quantiser, two-layer decoder.
class AttentionController {
 public:
  struct Output {
    Tensor reconstruction;  // [rows x input_dim]
    Tensor z_e;
    QuantizeResult quantized;
  };

  AttentionController(const ControllerConfig& config, ParameterStore& store, const std::string& prefix,
                      std::mt19937_64& rng);

  Tensor encode(const Tensor& scores) const;
  QuantizeResult quantize(const Tensor& z_e) const { return vq::quantize(z_e, codebook_); }
  /// task_embedding, when given, is [rows x decoder_task_dim] and is concatenated before decoding.
  Tensor decode(const Tensor& z_q, const std::optional<Tensor>& task_embedding = std::nullopt) const;
  Output forward(const Tensor& scores, const std::optional<Tensor>& task_embedding = std::nullopt) const;

  void ema_update(const Output& output, std::mt19937_64& rng);

  const ControllerConfig& config() const { return config_; }
  CodebookState& codebook() { return codebook_; }
  const CodebookState& codebook() const { return codebook_; }
  Linear& encoder_in() { return enc1_; }
  Linear& encoder_out() { return enc2_; }
  Linear& decoder_in() { return dec1_; }
  Linear& decoder_out() { return dec2_; }

 private:
  ControllerConfig config_;
  Linear enc1_, enc2_, dec1_, dec2_;
  CodebookState codebook_;
};

}  // namespace asac::vq
