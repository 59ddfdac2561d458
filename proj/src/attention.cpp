#include "asac/attention.hpp"

#include <cmath>

namespace asac::attention {

void AttentionConfig::validate() const {
  if (num_heads == 0 || model_dim == 0 || model_dim % num_heads != 0) {
    throw ContractError("model_dim " + std::to_string(model_dim) + " is not divisible by num_heads " +
                        std::to_string(num_heads));
  }
  if (use_asac && !controller) throw vq::ConfigurationError("use_asac requires a controller configuration");
}

Tensor scaled_dot(const Tensor& q, const Tensor& k) {
  if (q.rank() != 3 || q.shape() != k.shape()) {
    throw ContractError("scaled_dot: expected matching [heads x n x d_k], got " + shape_str(q.shape()) + " and " +
                        shape_str(k.shape()));
  }
  return scale(bmm(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.dim(2))));
}

MultiHeadAttention::MultiHeadAttention(const AttentionConfig& config, std::size_t seq_len, ParameterStore& store,
                                       const std::string& prefix, std::mt19937_64& rng)
    : config_(config), seq_len_(seq_len) {
  config_.validate();
  const std::size_t d = config_.model_dim;
  wq_ = Linear(store, prefix + ".query", d, d, rng);
  wk_ = Linear(store, prefix + ".key", d, d, rng);
  wv_ = Linear(store, prefix + ".value", d, d, rng);
  wo_ = Linear(store, prefix + ".output", d, d, rng);
  if (config_.use_asac) {
    vq::ControllerConfig cc = *config_.controller;
    if (cc.input_dim != seq_len) {
      throw vq::ConfigurationError("controller input_dim " + std::to_string(cc.input_dim) +
                                   " differs from sequence length " + std::to_string(seq_len));
    }
    controller_.emplace(cc, store, prefix + ".controller", rng);
  }
}

MultiHeadAttention::Output MultiHeadAttention::forward(const Tensor& x, const ForwardContext& ctx,
                                                       const std::optional<Tensor>& decoder_task) const {
  return run(x, ctx, controller_.has_value(), decoder_task);
}

MultiHeadAttention::Output MultiHeadAttention::forward_baseline(const Tensor& x, const ForwardContext& ctx) const {
  return run(x, ctx, false, std::nullopt);
}

MultiHeadAttention::Output MultiHeadAttention::run(const Tensor& x_in, const ForwardContext& ctx,
                                                   bool with_controller,
                                                   const std::optional<Tensor>& decoder_task) const {
  const bool single = x_in.rank() == 2;
  const Tensor x = single ? reshape(x_in, {1, x_in.dim(0), x_in.dim(1)}) : x_in;
  if (x.rank() != 3 || x.dim(2) != config_.model_dim) {
    throw ContractError("attention: expected [batch x n x " + std::to_string(config_.model_dim) + "], got " +
                        shape_str(x_in.shape()));
  }
  if (x.dim(1) != seq_len_) {
    throw vq::ConfigurationError("attention: sequence length " + std::to_string(x.dim(1)) +
                                 " differs from the model's fixed length " + std::to_string(seq_len_));
  }
  const std::size_t b = x.dim(0);
  const std::size_t n = seq_len_;
  const std::size_t h = config_.num_heads;
  const std::size_t dk = config_.head_dim();

  // [b, n, d] -> [b*h, n, dk]
  auto split_heads = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {b, n, h, dk}), {0, 2, 1, 3}), {b * h, n, dk});
  };
  const Tensor q = split_heads(wq_(x));
  const Tensor k = split_heads(wk_(x));
  const Tensor v = split_heads(wv_(x));

  Output out;
  const Tensor z = scaled_dot(q, k);  // [b*h, n, n]
  out.scores = reshape(z, {b, h, n, n});

  Tensor logits = z;
  if (with_controller) {
    std::optional<Tensor> task_rows;
    if (decoder_task) {
      if (decoder_task->rank() != 2 || decoder_task->dim(0) != b) {
        throw ContractError("attention: decoder task embedding must be [batch x task_dim], got " +
                            shape_str(decoder_task->shape()));
      }
      task_rows = repeat_interleave(*decoder_task, h * n);
    }
    auto c = controller_->forward(reshape(z, {b * h * n, n}), task_rows);
    const Tensor z_hat = reshape(c.reconstruction, {b * h, n, n});
    out.reconstruction = reshape(z_hat, {b, h, n, n});
    logits = add(z, z_hat);
    out.controller = std::move(c);
  }
  const Tensor probs = softmax_lastdim(logits);
  out.attention = reshape(probs, {b, h, n, n});
  const Tensor dropped = ctx.train ? dropout(probs, config_.dropout_p, true, *ctx.rng) : probs;
  const Tensor context = bmm(dropped, v);  // [b*h, n, dk]
  const Tensor merged = reshape(permute(reshape(context, {b, h, n, dk}), {0, 2, 1, 3}), {b, n, h * dk});
  Tensor y = wo_(merged);
  out.out = single ? reshape(y, {n, config_.model_dim}) : y;
  return out;
}

}  // namespace asac::attention
