#ifndef ADVRF_CORE_PARAM_SET_HPP_
#define ADVRF_CORE_PARAM_SET_HPP_

#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "advrf/core/tensor.hpp"

namespace advrf {

// Named collection of trainable tensors. Freezing removes every entry from
// differentiation entirely: backward never writes their grad buffers and the
// optimizer refuses to step them.
template <typename Scalar>
class ParamSet {
 public:
  void add(const std::string& name, Tensor<Scalar> t) {
    for (const auto& e : entries_)
      if (e.first == name)
        throw InvalidArgument("ParamSet: duplicate entry '" + name + "'");
    t.set_requires_grad(!frozen_);
    entries_.emplace_back(name, std::move(t));
  }

  Tensor<Scalar>& get(const std::string& name) {
    for (auto& e : entries_)
      if (e.first == name) return e.second;
    throw InvalidArgument("ParamSet: no entry '" + name + "'");
  }

  const std::vector<std::pair<std::string, Tensor<Scalar>>>& entries() const {
    return entries_;
  }
  std::vector<std::pair<std::string, Tensor<Scalar>>>& entries() {
    return entries_;
  }

  bool frozen() const { return frozen_; }

  void set_frozen(bool f) {
    frozen_ = f;
    for (auto& e : entries_) e.second.set_requires_grad(!f);
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

  Scalar grad_max_abs() const {
    Scalar m = 0;
    for (const auto& e : entries_)
      if (e.second.has_grad())
        m = std::max(m, e.second.grad_ref().abs().maxCoeff());
    return m;
  }

  Scalar value_norm() const {
    Scalar s = 0;
    for (const auto& e : entries_) s += e.second.value().square().sum();
    return std::sqrt(s);
  }

  std::vector<Scalar>& momentum_buffer(const std::string& name,
                                       std::int64_t size) {
    for (auto& b : momentum_)
      if (b.first == name) return b.second;
    momentum_.emplace_back(name, std::vector<Scalar>(static_cast<std::size_t>(size),
                                                     Scalar(0)));
    return momentum_.back().second;
  }

  std::vector<std::pair<std::string, std::vector<Scalar>>>& momentum_buffers() {
    return momentum_;
  }

 private:
  std::vector<std::pair<std::string, Tensor<Scalar>>> entries_;
  std::vector<std::pair<std::string, std::vector<Scalar>>> momentum_;
  bool frozen_ = false;
};

// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v
template <typename Scalar>
void sgd_momentum_step(ParamSet<Scalar>& params, Scalar lr, Scalar momentum,
                       Scalar weight_decay) {
  if (params.frozen())
    throw ContractViolation("sgd_momentum_step: ParamSet is frozen");
  for (auto& e : params.entries()) {
    Tensor<Scalar>& p = e.second;
    auto& buf = params.momentum_buffer(e.first, p.numel());
    Eigen::Map<ArrX<Scalar>> v(buf.data(), static_cast<Eigen::Index>(buf.size()));
    if (p.has_grad())
      v = momentum * v + p.grad_ref() + weight_decay * p.value();
    else  // missing grad buffer counts as zero gradient
      v = momentum * v + weight_decay * p.value();
    p.value() -= lr * v;
  }
}

// FNV-1a over the raw parameter bytes, entry order included. Bit-exact
// witness for the phase-isolation contract.
template <typename Scalar>
std::uint64_t param_hash(const ParamSet<Scalar>& params) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& e : params.entries()) {
    h = fnv1a64(e.first.data(), e.first.size(), h);
    h = fnv1a64(e.second.value().data(),
                static_cast<std::size_t>(e.second.numel()) * sizeof(Scalar), h);
  }
  return h;
}

}  // namespace advrf

#endif  // ADVRF_CORE_PARAM_SET_HPP_
