#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace egnlq {

// Validity mask over temporal positions. Empty means "all valid".
using Mask = std::vector<std::uint8_t>;

inline bool mask_at(const Mask& m, std::size_t i) { return m.empty() || m[i] != 0; }

template <class Real>
class Tensor {
 public:
  struct Node {
    std::vector<Tensor> parents;
    // Reads out.grad(), accumulates into parents' grad buffers.
    std::function<void(Tensor&)> backward;
  };

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<Real>>(count(t.shape_), Real(0));
    t.requires_grad_ = requires_grad;
    if (requires_grad) t.alloc_grad();
    return t;
  }

  static Tensor full(std::vector<int> shape, Real value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : *t.data_) v = value;
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<Real> values, bool requires_grad = false) {
    if (values.size() != count(shape)) throw std::invalid_argument("Tensor::from: size mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<Real>>(std::move(values));
    t.requires_grad_ = requires_grad;
    if (requires_grad) t.alloc_grad();
    return t;
  }

  static Tensor scalar(Real value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  template <class Rng>
  static Tensor randn(std::vector<int> shape, Rng& rng, Real stddev = Real(1),
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : *t.data_) v = Real(dist(rng)) * stddev;
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }
  bool requires_grad() const { return requires_grad_; }

  std::vector<Real>& values() { return *data_; }
  const std::vector<Real>& values() const { return *data_; }
  std::vector<Real>& grad() {
    if (!grad_) alloc_grad();
    return *grad_;
  }
  const std::vector<Real>& grad() const { return *grad_; }
  bool has_grad() const { return static_cast<bool>(grad_); }

  Real& at(int i) { return (*data_)[static_cast<std::size_t>(i)]; }
  Real at(int i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  Real& at(int i, int j) { return (*data_)[idx2(i, j)]; }
  Real at(int i, int j) const { return (*data_)[idx2(i, j)]; }
  Real& at(int i, int j, int k) { return (*data_)[idx3(i, j, k)]; }
  Real at(int i, int j, int k) const { return (*data_)[idx3(i, j, k)]; }

  void set_node(std::vector<Tensor> parents, std::function<void(Tensor&)> backward) {
    node_ = std::make_shared<Node>();
    node_->parents = std::move(parents);
    node_->backward = std::move(backward);
    requires_grad_ = true;
    alloc_grad();
  }

  std::shared_ptr<Node> node() const { return node_; }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), Real(0));
  }

  // Reverse-mode sweep from a scalar loss: seeds grad with 1, visits the
  // recorded graph in reverse topological order.
  void backward() {
    if (numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!requires_grad_) return;
    grad()[0] = Real(1);
    std::vector<Tensor> order;
    std::unordered_set<const Node*> seen;
    topo(*this, seen, order);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if (it->node_ && it->node_->backward) it->node_->backward(*it);
    }
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << ']';
    return os.str();
  }

  bool all_finite() const {
    for (Real v : *data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
      if (e <= 0) throw std::invalid_argument("Tensor: non-positive extent");
      n *= static_cast<std::size_t>(e);
    }
    return n;
  }

  std::size_t idx2(int i, int j) const {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_.back()) +
           static_cast<std::size_t>(j);
  }
  std::size_t idx3(int i, int j, int k) const {
    const auto d1 = static_cast<std::size_t>(shape_[1]);
    const auto d2 = static_cast<std::size_t>(shape_[2]);
    return (static_cast<std::size_t>(i) * d1 + static_cast<std::size_t>(j)) * d2 +
           static_cast<std::size_t>(k);
  }

  void alloc_grad() {
    if (!grad_) grad_ = std::make_shared<std::vector<Real>>(numel(), Real(0));
  }

  static void topo(const Tensor& t, std::unordered_set<const Node*>& seen,
                   std::vector<Tensor>& order) {
    if (!t.node_ || seen.count(t.node_.get())) return;
    seen.insert(t.node_.get());
    for (const Tensor& p : t.node_->parents) topo(p, seen, order);
    order.push_back(t);
  }

  std::vector<int> shape_;
  std::shared_ptr<std::vector<Real>> data_;
  std::shared_ptr<std::vector<Real>> grad_;
  std::shared_ptr<Node> node_;
  bool requires_grad_ = false;
};

// Scoped switch that stops ops from recording backward nodes (inference path).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(enabled()) { enabled() = false; }
  ~NoGradGuard() { enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool grad_enabled() { return enabled(); }

 private:
  static bool& enabled() {
    thread_local bool e = true;
    return e;
  }
  bool prev_;
};

template <class Real>
inline bool track_grad(const Tensor<Real>& t) {
  return NoGradGuard::grad_enabled() && t.requires_grad();
}

}  // namespace egnlq
