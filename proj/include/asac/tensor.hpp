#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace asac {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised for shape or argument violations of an operation's preconditions.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor of doubles with tape-based reverse-mode autodiff.
///
/// A Tensor is a cheap handle; copies share storage. Every op creates a new
/// node stamped with a monotonically increasing id; backward() replays the
/// reachable nodes in descending id order, which is a reverse topological
/// order of the recorded graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Direct write access, for parameter initialisation and optimizer updates.
  std::span<double> mutable_data() { return node_->data; }
  double at(std::size_t flat_index) const { return node_->data.at(flat_index); }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// Reverse-mode sweep from a scalar. Leaf gradients accumulate.
  void backward() const;

  /// Value copy cut from the graph.
  Tensor detach() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {
/// Builds an op result. The backward closure is kept only when some parent
/// requires grad and recording is enabled.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   BackwardFn backward);
}  // namespace detail

// Elementwise and arithmetic.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// b's shape must equal the trailing dimensions of a; b is broadcast over the rest.
Tensor add_broadcast(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched product over the leading axis: [b,m,k] x [b,k,n] -> [b,m,n].
Tensor bmm(const Tensor& a, const Tensor& b);
/// Swaps the last two axes (rank 2 or 3).
Tensor transpose(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& a, Shape shape);

// Structural.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
/// Prepends an axis of size count, replicating a.
Tensor expand(const Tensor& a, std::size_t count);
/// Repeats each slice along axis 0 `repeats` times consecutively.
Tensor repeat_interleave(const Tensor& a, std::size_t repeats);
/// Gathers rows of a [vocab x dim] table.
Tensor embedding(const Tensor& table, std::span<const std::size_t> indices);

// Normalisation and regularisation.
Tensor softmax_lastdim(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Inverted dropout; identity when !train or p == 0.
Tensor dropout(const Tensor& a, double p, bool train, std::mt19937_64& rng);

/// Forward identity that contributes no gradient upstream.
Tensor stop_gradient(const Tensor& a);
/// Forward value is `value`; backward routes the incoming gradient to `through` unchanged.
Tensor straight_through(const Tensor& through, const Tensor& value);

}  // namespace asac
