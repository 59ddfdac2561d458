#pragma once

#include <random>
#include <string>
#include <vector>

#include "asac/tensor.hpp"

namespace asac {

/// Train/eval switch plus the run's random stream (dropout draws).
struct ForwardContext {
  bool train = false;
  std::mt19937_64* rng = nullptr;
};

/// Ordered, named collection of model state. Trainable entries receive
/// gradients and optimizer updates; buffers (codebook EMA statistics) do not.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
  };

  Tensor& add(std::string name, Tensor tensor, bool trainable = true);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t trainable_count() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.
struct Linear {
  Linear() = default;
  Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
         std::mt19937_64& rng);

  /// Applies to the last axis of x; leading axes are preserved.
  Tensor operator()(const Tensor& x) const;

  std::size_t in_features = 0;
  std::size_t out_features = 0;
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

struct LayerNorm {
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& prefix, std::size_t width);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, 1e-5); }

  Tensor gamma;
  Tensor beta;
};

}  // namespace asac
