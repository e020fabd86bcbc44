#ifndef ADVRF_CORE_TENSOR_HPP_
#define ADVRF_CORE_TENSOR_HPP_

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "advrf/core/errors.hpp"
#include "advrf/core/rng.hpp"

namespace advrf {

using Shape = std::vector<int>;

template <typename Scalar>
using ArrX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

template <typename Scalar>
class Tensor;

// One vertex of the reverse-mode graph. Creation order doubles as
// topological order, so backward never needs an explicit sort pass
// beyond ordering the reachable set by id.
template <typename Scalar>
struct TensorNode {
  Shape shape;
  ArrX<Scalar> value;
  ArrX<Scalar> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<TensorNode<Scalar>>> parents;
  std::function<void(TensorNode<Scalar>&)> backward_fn;
};

template <typename Scalar>
class Tensor {
 public:
  using Node = TensorNode<Scalar>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return filled(shape, Scalar(0), requires_grad);
  }

  static Tensor filled(const Shape& shape, Scalar v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = ArrX<Scalar>::Constant(shape_numel(shape), v);
    n->requires_grad = requires_grad;
    n->id = next_node_id();
    return Tensor(std::move(n));
  }

  static Tensor from_data(const Shape& shape, std::vector<Scalar> data,
                          bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw DimensionError("from_data: " + std::to_string(data.size()) +
                           " values for shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = Eigen::Map<const ArrX<Scalar>>(data.data(),
                                              static_cast<Eigen::Index>(data.size()));
    n->requires_grad = requires_grad;
    n->id = next_node_id();
    return Tensor(std::move(n));
  }

  static Tensor randn(const Shape& shape, Pcg32& rng, double stddev,
                      bool requires_grad = false) {
    auto t = zeros(shape, requires_grad);
    auto& v = t.value();
    for (Eigen::Index i = 0; i < v.size(); ++i)
      v[i] = static_cast<Scalar>(rng.normal() * stddev);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return node_->value.size(); }

  ArrX<Scalar>& value() { return node_->value; }
  const ArrX<Scalar>& value() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return node_->grad.size() > 0; }
  ArrX<Scalar>& grad() {
    if (node_->grad.size() == 0)
      node_->grad = ArrX<Scalar>::Zero(node_->value.size());
    return node_->grad;
  }
  const ArrX<Scalar>& grad_ref() const { return node_->grad; }
  void zero_grad() { node_->grad = ArrX<Scalar>::Zero(node_->value.size()); }
  void drop_grad() { node_->grad.resize(0); }

  Scalar item() const {
    if (numel() != 1)
      throw InvalidArgument("item: tensor has " + std::to_string(numel()) +
                            " elements");
    return node_->value[0];
  }

  Scalar at4(int n, int c, int h, int w) const {
    const Shape& s = node_->shape;
    return node_->value[((static_cast<std::int64_t>(n) * s[1] + c) * s[2] + h) * s[3] + w];
  }

  Scalar at2(int n, int c) const {
    return node_->value[static_cast<std::int64_t>(n) * node_->shape[1] + c];
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

// Builds an op output. Parents and the backward closure are only retained
// when some parent takes gradient, so frozen/constant subgraphs cost nothing
// at backward time.
template <typename Scalar>
Tensor<Scalar> make_op(Shape shape, ArrX<Scalar> value,
                       std::vector<Tensor<Scalar>> parents,
                       std::function<void(TensorNode<Scalar>&)> backward_fn) {
  auto n = std::make_shared<TensorNode<Scalar>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->id = next_node_id();
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<Scalar>(std::move(n));
}

// Accumulates `delta` into the node's grad buffer if it participates in
// differentiation. ArrX-expression friendly.
template <typename Scalar, typename Expr>
void accum_grad(TensorNode<Scalar>& node, const Expr& delta) {
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) node.grad = ArrX<Scalar>::Zero(node.value.size());
  node.grad += delta;
}

template <typename Scalar>
void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                      const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Grad buffers of every reachable
// tensor with requires_grad end up holding d(loss)/d(tensor); frozen or
// constant tensors are never touched.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (loss.numel() != 1)
    throw InvalidArgument("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
  if (!loss.requires_grad()) return;  // fully detached graph: nothing to do

  std::vector<TensorNode<Scalar>*> order;
  std::unordered_set<TensorNode<Scalar>*> seen;
  std::vector<TensorNode<Scalar>*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    TensorNode<Scalar>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const TensorNode<Scalar>* a, const TensorNode<Scalar>* b) {
              return a->id > b->id;
            });

  loss.node()->grad = ArrX<Scalar>::Constant(1, Scalar(1));
  for (TensorNode<Scalar>* n : order) {
    if (n->backward_fn && n->grad.size() > 0) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise / scalar ops
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape(a, b, "add");
  auto an = a.node(); auto bn = b.node();
  return detail::make_op<Scalar>(
      a.shape(), a.value() + b.value(), {a, b},
      [an, bn](TensorNode<Scalar>& self) {
        detail::accum_grad(*an, self.grad);
        detail::accum_grad(*bn, self.grad);
      });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape(a, b, "sub");
  auto an = a.node(); auto bn = b.node();
  return detail::make_op<Scalar>(
      a.shape(), a.value() - b.value(), {a, b},
      [an, bn](TensorNode<Scalar>& self) {
        detail::accum_grad(*an, self.grad);
        detail::accum_grad(*bn, -self.grad);
      });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape(a, b, "mul");
  auto an = a.node(); auto bn = b.node();
  return detail::make_op<Scalar>(
      a.shape(), a.value() * b.value(), {a, b},
      [an, bn](TensorNode<Scalar>& self) {
        detail::accum_grad(*an, self.grad * bn->value);
        detail::accum_grad(*bn, self.grad * an->value);
      });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar c) {
  auto an = a.node();
  return detail::make_op<Scalar>(
      a.shape(), a.value() * c, {a},
      [an, c](TensorNode<Scalar>& self) {
        detail::accum_grad(*an, self.grad * c);
      });
}

template <typename Scalar>
Tensor<Scalar> one_minus(const Tensor<Scalar>& a) {
  auto an = a.node();
  return detail::make_op<Scalar>(
      a.shape(), Scalar(1) - a.value(), {a},
      [an](TensorNode<Scalar>& self) { detail::accum_grad(*an, -self.grad); });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  auto an = a.node();
  ArrX<Scalar> v(1);
  v[0] = a.value().sum();
  return detail::make_op<Scalar>(
      Shape{1}, std::move(v), {a}, [an](TensorNode<Scalar>& self) {
        detail::accum_grad(*an, ArrX<Scalar>::Constant(an->value.size(), self.grad[0]));
      });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a) {
  ArrX<Scalar> y(a.numel());
  const auto& x = a.value();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Scalar xi = x[i];
    y[i] = xi >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-xi))
                           : std::exp(xi) / (Scalar(1) + std::exp(xi));
  }
  auto an = a.node();
  auto yn = std::make_shared<ArrX<Scalar>>(y);
  return detail::make_op<Scalar>(
      a.shape(), std::move(y), {a}, [an, yn](TensorNode<Scalar>& self) {
        detail::accum_grad(*an, self.grad * (*yn) * (Scalar(1) - *yn));
      });
}

template <typename Scalar>
Tensor<Scalar> leaky_relu(const Tensor<Scalar>& a, Scalar slope) {
  auto an = a.node();
  ArrX<Scalar> y = (a.value() > Scalar(0)).select(a.value(), a.value() * slope);
  return detail::make_op<Scalar>(
      a.shape(), std::move(y), {a}, [an, slope](TensorNode<Scalar>& self) {
        detail::accum_grad(
            *an, (an->value > Scalar(0)).select(self.grad, self.grad * slope));
      });
}

template <typename Scalar>
Tensor<Scalar> clamp01(const Tensor<Scalar>& a) {
  auto an = a.node();
  ArrX<Scalar> y = a.value().cwiseMax(Scalar(0)).cwiseMin(Scalar(1));
  return detail::make_op<Scalar>(
      a.shape(), std::move(y), {a}, [an](TensorNode<Scalar>& self) {
        ArrX<Scalar> pass =
            ((an->value > Scalar(0)) && (an->value < Scalar(1)))
                .select(self.grad, ArrX<Scalar>::Zero(self.grad.size()));
        detail::accum_grad(*an, pass);
      });
}

// Constant copy: value preserved, gradient path severed.
template <typename Scalar>
Tensor<Scalar> detach(const Tensor<Scalar>& a) {
  auto n = std::make_shared<TensorNode<Scalar>>();
  n->shape = a.shape();
  n->value = a.value();
  n->requires_grad = false;
  n->id = next_node_id();
  return Tensor<Scalar>(std::move(n));
}

// x: (N,C,H,W), mask: (N,1,H,W) broadcast across channels.
template <typename Scalar>
Tensor<Scalar> mul_mask(const Tensor<Scalar>& x, const Tensor<Scalar>& mask) {
  if (x.rank() != 4 || mask.rank() != 4)
    throw DimensionError("mul_mask: expected rank-4 tensors");
  if (mask.dim(1) != 1 || mask.dim(0) != x.dim(0) || mask.dim(2) != x.dim(2) ||
      mask.dim(3) != x.dim(3))
    throw DimensionError("mul_mask: mask " + shape_str(mask.shape()) +
                         " does not broadcast over " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  ArrX<Scalar> y(x.numel());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      y.segment((static_cast<std::int64_t>(n) * C + c) * plane, plane) =
          x.value().segment((static_cast<std::int64_t>(n) * C + c) * plane, plane) *
          mask.value().segment(static_cast<std::int64_t>(n) * plane, plane);
  auto xn = x.node(); auto mn = mask.node();
  return detail::make_op<Scalar>(
      x.shape(), std::move(y), {x, mask},
      [xn, mn, N, C, plane](TensorNode<Scalar>& self) {
        if (xn->requires_grad) {
          ArrX<Scalar> dx(xn->value.size());
          for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
              dx.segment((static_cast<std::int64_t>(n) * C + c) * plane, plane) =
                  self.grad.segment((static_cast<std::int64_t>(n) * C + c) * plane, plane) *
                  mn->value.segment(static_cast<std::int64_t>(n) * plane, plane);
          detail::accum_grad(*xn, dx);
        }
        if (mn->requires_grad) {
          ArrX<Scalar> dm = ArrX<Scalar>::Zero(mn->value.size());
          for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
              dm.segment(static_cast<std::int64_t>(n) * plane, plane) +=
                  self.grad.segment((static_cast<std::int64_t>(n) * C + c) * plane, plane) *
                  xn->value.segment((static_cast<std::int64_t>(n) * C + c) * plane, plane);
          detail::accum_grad(*mn, dm);
        }
      });
}

}  // namespace advrf

#endif  // ADVRF_CORE_TENSOR_HPP_
