#pragma once

#include <optional>
#include <random>
#include <string>

#include "asac/layers.hpp"
#include "asac/tensor.hpp"
#include "asac/vq_controller.hpp"

namespace asac::attention {

struct AttentionConfig {
  std::size_t model_dim = 64;
  std::size_t num_heads = 2;
  double dropout_p = 0.1;  // on attention probabilities
  bool use_asac = true;
  std::optional<vq::ControllerConfig> controller;

  std::size_t head_dim() const { return model_dim / num_heads; }
  void validate() const;
};

/// Z = Q K^T / sqrt(d_k) per leading index: [g x n x d_k] -> [g x n x n].
Tensor scaled_dot(const Tensor& q, const Tensor& k);

/// Multi-head self-attention with an optional VQ-VAE controller on the score rows.
///
/// With the controller, attention = softmax(Z + Zhat) where Zhat is the
/// controller's reconstruction of Z; one controller is shared by all heads of
/// the layer and consumes the [batch*heads*n x n] matrix of score rows.
class MultiHeadAttention {
 public:
  struct Output {
    Tensor out;             // [batch x n x model_dim]
    Tensor scores;          // Z, [batch x heads x n x n]
    Tensor reconstruction;  // Zhat, same shape as scores; undefined without the controller
    Tensor attention;       // softmax output before dropout, [batch x heads x n x n]
    std::optional<vq::AttentionController::Output> controller;
  };

  MultiHeadAttention(const AttentionConfig& config, std::size_t seq_len, ParameterStore& store,
                     const std::string& prefix, std::mt19937_64& rng);

  /// x is [batch x n x model_dim] (or [n x model_dim] for one sequence).
  /// decoder_task, when the controller takes a task input, is [batch x task_dim].
  Output forward(const Tensor& x, const ForwardContext& ctx,
                 const std::optional<Tensor>& decoder_task = std::nullopt) const;

  /// The same projections with the controller bypassed: softmax(Z) V.
  Output forward_baseline(const Tensor& x, const ForwardContext& ctx) const;

  const AttentionConfig& config() const { return config_; }
  std::size_t seq_len() const { return seq_len_; }
  bool has_controller() const { return controller_.has_value(); }
  vq::AttentionController& controller() { return *controller_; }
  const vq::AttentionController& controller() const { return *controller_; }
  Linear& query() { return wq_; }
  Linear& key() { return wk_; }
  Linear& value() { return wv_; }
  Linear& projection() { return wo_; }

 private:
  Output run(const Tensor& x, const ForwardContext& ctx, bool with_controller,
             const std::optional<Tensor>& decoder_task) const;

  AttentionConfig config_;
  std::size_t seq_len_;
  Linear wq_, wk_, wv_, wo_;
  std::optional<vq::AttentionController> controller_;
};

}  // namespace asac::attention
