#include "asac/losses.hpp"

#include <algorithm>
#include <cmath>

namespace asac::loss {

using detail::Node;

Tensor recon_loss(const std::vector<std::pair<Tensor, Tensor>>& pairs) {
  if (pairs.empty()) return Tensor::scalar(0.0);
  std::size_t count = 0;
  Tensor total;
  for (const auto& [original, reconstructed] : pairs) {
    if (original.shape() != reconstructed.shape()) {
      throw ContractError("recon_loss: shape mismatch " + shape_str(original.shape()) + " vs " +
                          shape_str(reconstructed.shape()));
    }
    const Tensor diff = sub(original, reconstructed);
    const Tensor s = sum(mul(diff, diff));
    total = total.defined() ? add(total, s) : s;
    count += original.numel();
  }
  return scale(total, 1.0 / static_cast<double>(count));
}

Tensor ce_multiclass(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ContractError("ce_multiclass: logits must be [batch x classes]");
  const std::size_t b = logits.dim(0);
  const std::size_t m = logits.dim(1);
  if (labels.size() != b) throw ContractError("ce_multiclass: label count does not match batch");
  auto x = logits.data();
  auto probs = std::make_shared<std::vector<double>>(b * m);
  std::vector<std::size_t> target(b);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= m) {
      throw ContractError("ce_multiclass: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(m) + ")");
    }
    target[i] = static_cast<std::size_t>(labels[i]);
    const double* row = x.data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += ((*probs)[i * m + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < m; ++c) (*probs)[i * m + c] /= s;
    total -= std::log(std::max((*probs)[i * m + target[i]], kProbabilityFloor));
  }
  return detail::make_result({1}, {total / static_cast<double>(b)}, {logits}, [probs, target, b, m](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const double scale_ = self.grad[0] / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
      const double pt = (*probs)[i * m + target[i]];
      if (pt < kProbabilityFloor) continue;  // clamped: flat
      for (std::size_t c = 0; c < m; ++c) {
        const double onehot = c == target[i] ? 1.0 : 0.0;
        g[i * m + c] += scale_ * ((*probs)[i * m + c] - onehot);
      }
    }
  });
}

double bce_probability(double p, int label) {
  const double q = std::clamp(p, kProbabilityFloor, 1.0 - kProbabilityFloor);
  return -(label * std::log(q) + (1 - label) * std::log(1.0 - q));
}

Tensor bce_binary(const Tensor& logits, std::span<const int> targets) {
  if (targets.size() != logits.numel()) {
    throw ContractError("bce_binary: " + std::to_string(targets.size()) + " targets for logits " +
                        shape_str(logits.shape()));
  }
  const std::size_t n = logits.numel();
  auto x = logits.data();
  auto p = std::make_shared<std::vector<double>>(n);
  std::vector<int> y(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] != 0 && y[i] != 1) throw ContractError("bce_binary: targets must be 0 or 1");
    const double z = x[i];
    (*p)[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    total += bce_probability((*p)[i], y[i]);
  }
  return detail::make_result({1}, {total / static_cast<double>(n)}, {logits}, [p, y, n](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const double s = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double pi = (*p)[i];
      if (pi < kProbabilityFloor || pi > 1.0 - kProbabilityFloor) continue;  // clamped: flat
      g[i] += s * (pi - y[i]);
    }
  });
}

LossBreakdown total_loss(double task, double recon, double vq, double lambda) {
  return LossBreakdown{task, recon, vq, task + lambda * (recon + vq), lambda};
}

Tensor total_loss(const Tensor& task, const Tensor& recon, const Tensor& vq, double lambda) {
  if (!recon.defined() && !vq.defined()) return task;
  const Tensor r = recon.defined() ? recon : Tensor::scalar(0.0);
  const Tensor v = vq.defined() ? vq : Tensor::scalar(0.0);
  return add(task, scale(add(r, v), lambda));
}

}  // namespace asac::loss
