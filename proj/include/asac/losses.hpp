#pragma once

#include <span>
#include <utility>
#include <vector>

#include "asac/tensor.hpp"

namespace asac::loss {

inline constexpr double kProbabilityFloor = 1e-12;

struct LossBreakdown {
  double task = 0.0;
  double recon = 0.0;
  double vq = 0.0;
  double total = 0.0;
  double lambda = 0.0;
};

/// Global mean of squared differences over every (Z, Zhat) pair; 0 for an empty list.
Tensor recon_loss(const std::vector<std::pair<Tensor, Tensor>>& pairs);

/// Mean over the batch of -log softmax(logits)[label], probabilities floored at 1e-12.
Tensor ce_multiclass(const Tensor& logits, std::span<const int> labels);

/// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets of the same
/// shape ([batch x labels]); p is clamped to [1e-12, 1 - 1e-12].
Tensor bce_binary(const Tensor& logits, std::span<const int> targets);
/// Same loss evaluated on probabilities rather than logits.
double bce_probability(double p, int label);

/// task + lambda * (recon + vq).
LossBreakdown total_loss(double task, double recon, double vq, double lambda);
/// Graph form of total_loss; recon/vq may be undefined for the baseline.
Tensor total_loss(const Tensor& task, const Tensor& recon, const Tensor& vq, double lambda);

}  // namespace asac::loss
