#include "asac/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace asac {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.defined() && b.defined(), std::string(op) + ": undefined tensor");
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

bool wants_grad(const Tensor& t) { return t.node()->requires_grad; }

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  for (auto d : shape) require(d > 0, "tensor dimensions must be positive: " + shape_str(shape));
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  node->id = g_next_id++;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) require(d > 0, "tensor dimensions must be positive: " + shape_str(shape));
  require(values.size() == shape_numel(shape),
          "data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  node->id = g_next_id++;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::size_t Tensor::dim(std::size_t axis) const {
  require(axis < rank(), "axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

double Tensor::item() const {
  require(numel() == 1, "item() on non-scalar tensor " + shape_str(shape()));
  return node_->data[0];
}

void Tensor::backward() const {
  require(defined() && numel() == 1, "backward() requires a scalar loss");
  if (!node_->requires_grad) return;

  std::vector<detail::Node*> order;
  std::vector<detail::Node*> stack{node_.get()};
  std::unordered_set<const detail::Node*> visited;
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!visited.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  node_->ensure_grad()[0] += 1.0;
  for (detail::Node* n : order) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor detail::make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                           BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = g_next_id++;
  if (t_grad_enabled) {
    bool any = std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return wants_grad(p); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

using detail::make_result;
using detail::Node;

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size() && std::equal(sb.begin(), sb.end(), sa.end() - sb.size());
  if (!ok) {
    throw ContractError("add_broadcast: " + shape_str(sb) + " is not a suffix of " + shape_str(sa));
  }
  const std::size_t inner = b.numel();
  const std::size_t outer = a.numel() / inner;
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = x[o * inner + i] + y[i];
  return make_result(sa, std::move(out), {a, b}, [outer, inner](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
    }
  });
}

namespace {

// Unary op whose derivative is a function of (input, output).
template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result(a.shape(), std::move(out), {a}, [df](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p.data[i], self.data[i]);
  });
}

}  // namespace

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      a, [slope](double x) { return x >= 0.0 ? x : slope * x; },
      [slope](double x, double) { return x >= 0.0 ? 1.0 : slope; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [inv_sqrt2pi](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({1}, {s}, {a}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({1}, {s / n}, {a}, [n](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0] / n;
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = x[i] - y[i];
    s += d * d;
  }
  return make_result({1}, {s / n}, {a, b}, [n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double c = 2.0 * self.grad[0] / n;
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * (pa.data[i] - pb.data[i]);
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= c * (pa.data[i] - pb.data[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ContractError("matmul: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return make_result({a.dim(0), b.dim(1)}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    ConstMap dc(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MutMap(pa.ensure_grad().data(), m, k).noalias() += dc * ConstMap(pb.data.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MutMap(pb.ensure_grad().data(), k, n).noalias() += ConstMap(pa.data.data(), m, k).transpose() * dc;
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ContractError("bmm: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0);
  const auto m = static_cast<Eigen::Index>(a.dim(1));
  const auto k = static_cast<Eigen::Index>(a.dim(2));
  const auto n = static_cast<Eigen::Index>(b.dim(2));
  std::vector<double> out(batch * static_cast<std::size_t>(m * n));
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap(out.data() + i * m * n, m, n).noalias() =
        ConstMap(a.data().data() + i * m * k, m, k) * ConstMap(b.data().data() + i * k * n, k, n);
  }
  return make_result({batch, a.dim(1), b.dim(2)}, std::move(out), {a, b}, [batch, m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    double* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
    double* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMap dc(self.grad.data() + i * m * n, m, n);
      if (ga) MutMap(ga + i * m * k, m, k).noalias() += dc * ConstMap(pb.data.data() + i * k * n, k, n).transpose();
      if (gb) MutMap(gb + i * k * n, k, n).noalias() += ConstMap(pa.data.data() + i * m * k, m, k).transpose() * dc;
    }
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  require(axes.size() == r, "permute: axis count does not match rank");
  std::vector<bool> used(r, false);
  for (auto ax : axes) {
    require(ax < r && !used[ax], "permute: invalid axis permutation");
    used[ax] = true;
  }
  const auto& in_shape = a.shape();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];

  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  // Source offset for each output position, shared by forward and backward.
  const std::size_t total = a.numel();
  auto source = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[axes[i]];
    (*source)[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(total);
  auto x = a.data();
  for (std::size_t i = 0; i < total; ++i) out[i] = x[(*source)[i]];
  return make_result(std::move(out_shape), std::move(out), {a}, [source](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*source)[i]] += self.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() == 2) return permute(a, {1, 0});
  if (a.rank() == 3) return permute(a, {0, 2, 1});
  throw ContractError("transpose: expected rank 2 or 3, got " + shape_str(a.shape()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ContractError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Structural

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == first.size();
    for (std::size_t i = 0; ok && i < first.size(); ++i) ok = (i == axis) || p.shape()[i] == first[i];
    if (!ok) throw ContractError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(p.shape()));
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_row = out_shape[axis] * inner;

  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * inner;
    auto x = p.data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data() + o * w, w, out.data() + o * out_row + offset);
    widths.push_back(w);
    offset += w;
  }
  return make_result(std::move(out_shape), std::move(out), parts, [outer, out_row, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t w = widths[k];
      if (self.parents[k]->requires_grad) {
        auto& g = self.parents[k]->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < w; ++i) g[o * w + i] += self.grad[o * out_row + off + i];
      }
      off += w;
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  require(axis < a.rank(), "slice: axis out of range");
  require(length > 0 && start + length <= a.dim(axis),
          "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
              ") exceeds axis of size " + std::to_string(a.dim(axis)));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t in_row = a.dim(axis) * inner;
  const std::size_t w = length * inner;
  const std::size_t off = start * inner;
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<double> out(outer * w);
  auto x = a.data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data() + o * in_row + off, w, out.data() + o * w);
  return make_result(std::move(out_shape), std::move(out), {a}, [outer, in_row, w, off](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < w; ++i) g[o * in_row + off + i] += self.grad[o * w + i];
  });
}

Tensor expand(const Tensor& a, std::size_t count) {
  require(count > 0, "expand: count must be positive");
  Shape out_shape{count};
  out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
  const std::size_t n = a.numel();
  std::vector<double> out(count * n);
  for (std::size_t c = 0; c < count; ++c) std::copy(a.data().begin(), a.data().end(), out.begin() + c * n);
  return make_result(std::move(out_shape), std::move(out), {a}, [count, n](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t c = 0; c < count; ++c)
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[c * n + i];
  });
}

Tensor repeat_interleave(const Tensor& a, std::size_t repeats) {
  require(repeats > 0 && a.rank() >= 1, "repeat_interleave: invalid arguments");
  const std::size_t rows = a.dim(0);
  const std::size_t w = a.numel() / rows;
  Shape out_shape = a.shape();
  out_shape[0] = rows * repeats;
  std::vector<double> out(rows * repeats * w);
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < repeats; ++k) std::copy_n(x.data() + r * w, w, out.data() + (r * repeats + k) * w);
  return make_result(std::move(out_shape), std::move(out), {a}, [rows, repeats, w](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < repeats; ++k)
        for (std::size_t i = 0; i < w; ++i) g[r * w + i] += self.grad[(r * repeats + k) * w + i];
  });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> indices) {
  require(table.rank() == 2, "embedding: table must be rank 2");
  require(!indices.empty(), "embedding: no indices");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size() * d);
  auto x = table.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] < vocab, "embedding: index " + std::to_string(idx[r]) + " >= vocabulary " + std::to_string(vocab));
    std::copy_n(x.data() + idx[r] * d, d, out.data() + r * d);
  }
  return make_result({idx.size(), d}, std::move(out), {table}, [idx, d](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t i = 0; i < d; ++i) g[idx[r] * d + i] += self.grad[r * d + i];
  });
}

// ---------------------------------------------------------------------------
// Normalisation

Tensor softmax_lastdim(const Tensor& a) {
  require(a.rank() >= 1, "softmax_lastdim: rank 0 input");
  const std::size_t w = a.shape().back();
  const std::size_t rows = a.numel() / w;
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * w;
    double* o = out.data() + r * w;
    double mx = *std::max_element(in, in + w);
    double s = 0.0;
    for (std::size_t i = 0; i < w; ++i) s += (o[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < w; ++i) o[i] /= s;
  }
  return make_result(a.shape(), std::move(out), {a}, [rows, w](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * w;
      const double* dy = self.grad.data() + r * w;
      double dot = 0.0;
      for (std::size_t i = 0; i < w; ++i) dot += dy[i] * y[i];
      for (std::size_t i = 0; i < w; ++i) g[r * w + i] += y[i] * (dy[i] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require(x.rank() >= 1, "layer_norm: rank 0 input");
  const std::size_t w = x.shape().back();
  require(gamma.shape() == Shape{w} && beta.shape() == Shape{w},
          "layer_norm: gain/bias must have shape [" + std::to_string(w) + "]");
  const std::size_t rows = x.numel() / w;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  auto in = x.data(), gm = gamma.data(), bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* v = in.data() + r * w;
    double mu = 0.0;
    for (std::size_t i = 0; i < w; ++i) mu += v[i];
    mu /= static_cast<double>(w);
    double var = 0.0;
    for (std::size_t i = 0; i < w; ++i) var += (v[i] - mu) * (v[i] - mu);
    var /= static_cast<double>(w);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t i = 0; i < w; ++i) {
      double h = (v[i] - mu) * inv;
      (*xhat)[r * w + i] = h;
      out[r * w + i] = h * gm[i] + bt[i];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [rows, w, xhat, inv_std](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    const auto& dy = self.grad;
    if (pg.requires_grad) {
      auto& g = pg.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < w; ++i) g[i] += dy[r * w + i] * (*xhat)[r * w + i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < w; ++i) g[i] += dy[r * w + i];
    }
    if (px.requires_grad) {
      auto& g = px.ensure_grad();
      const double n = static_cast<double>(w);
      std::vector<double> dxhat(w);
      for (std::size_t r = 0; r < rows; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < w; ++i) {
          dxhat[i] = dy[r * w + i] * pg.data[i];
          s1 += dxhat[i];
          s2 += dxhat[i] * (*xhat)[r * w + i];
        }
        const double inv = (*inv_std)[r];
        for (std::size_t i = 0; i < w; ++i)
          g[r * w + i] += inv / n * (n * dxhat[i] - s1 - (*xhat)[r * w + i] * s2);
      }
    }
  });
}

Tensor dropout(const Tensor& a, double p, bool train, std::mt19937_64& rng) {
  require(p >= 0.0 && p < 1.0, "dropout: p must lie in [0, 1)");
  if (!train || p == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - p);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto mask = std::make_shared<std::vector<double>>(a.numel());
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = u(rng) < p ? 0.0 : keep_scale;
    out[i] = x[i] * (*mask)[i];
  }
  return make_result(a.shape(), std::move(out), {a}, [mask](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}

Tensor stop_gradient(const Tensor& a) { return a.detach(); }

Tensor straight_through(const Tensor& through, const Tensor& value) {
  require_same_shape(through, value, "straight_through");
  std::vector<double> out(value.data().begin(), value.data().end());
  return make_result(value.shape(), std::move(out), {through}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

}  // namespace asac
