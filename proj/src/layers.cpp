#include "asac/layers.hpp"

#include <algorithm>
#include <cmath>

namespace asac {

Tensor& ParameterStore::add(std::string name, Tensor tensor, bool trainable) {
  if (contains(name)) throw ContractError("duplicate parameter name: " + name);
  tensor.set_requires_grad(trainable);
  entries_.push_back({std::move(name), std::move(tensor), trainable});
  return entries_.back().tensor;
}

Tensor& ParameterStore::get(const std::string& name) {
  for (auto& e : entries_)
    if (e.name == name) return e.tensor;
  throw ContractError("unknown parameter: " + name);
}

const Tensor& ParameterStore::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.tensor;
  throw ContractError("unknown parameter: " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

Linear::Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
               std::mt19937_64& rng)
    : in_features(in), out_features(out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> w(in * out);
  for (auto& v : w) v = u(rng);
  // Entries are copies of the same handle, so the layer and the store share storage.
  weight = store.add(prefix + ".weight", Tensor::from({in, out}, std::move(w)));
  bias = store.add(prefix + ".bias", Tensor::zeros({out}));
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.rank() == 0 || x.shape().back() != in_features) {
    throw ContractError("linear: expected last dimension " + std::to_string(in_features) + ", got " +
                        shape_str(x.shape()));
  }
  if (x.rank() == 2) return add_broadcast(matmul(x, weight), bias);
  const std::size_t rows = x.numel() / in_features;
  Shape out_shape = x.shape();
  out_shape.back() = out_features;
  Tensor y = add_broadcast(matmul(reshape(x, {rows, in_features}), weight), bias);
  return reshape(y, std::move(out_shape));
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& prefix, std::size_t width) {
  gamma = store.add(prefix + ".gamma", Tensor::full({width}, 1.0));
  beta = store.add(prefix + ".beta", Tensor::zeros({width}));
}

}  // namespace asac
