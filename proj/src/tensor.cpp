#include "rcn/tensor.hpp"

#include <cmath>
#include <malloc.h>
#include <sstream>
#include <unordered_set>

#include "rcn/error.hpp"

namespace rcn {

namespace {
thread_local bool g_grad_enabled = true;
thread_local int g_probe_depth = 0;
thread_local std::uint64_t g_probe_hash = 0;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, Real fill, bool requires_grad) : node_(std::make_shared<Node>()) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
  }
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<Real> values, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

std::span<Real> Tensor::grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), Real(0));
  return node_->grad;
}

std::span<const Real> Tensor::grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), Real(0));
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() {
  if (numel() != 1) throw ShapeError("backward() needs a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  grad()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(n->grad);
  }
}

Tensor Tensor::detach() const {
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = node_->shape;
  t.node_->data = node_->data;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
}

namespace detail {

void check_finite(const char* op, std::span<const Real> values) {
  // v * 0 is NaN exactly for inf and NaN
  Real acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < values.size(); ++i) acc += values[i] * Real(0);
  if (acc == 0) return;
  for (Real v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

Tensor make_result(const char* op, Shape shape, std::vector<Real> data,
                   const std::vector<Tensor>& inputs, Tensor::BackwardFn backward) {
  check_finite(op, data);
  Tensor out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  auto* node = out.node();
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) node->parents.push_back(in.node_ptr());
  }
  if (!node->parents.empty()) {
    node->requires_grad = true;
    node->backward = std::move(backward);
  }
  return out;
}

std::span<Real> grad_sink(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  return const_cast<Tensor&>(t).grad();
}

}  // namespace detail

namespace detail {

KinkProbe::KinkProbe() {
  if (g_probe_depth++ == 0) g_probe_hash = 0xcbf29ce484222325ull;
}
KinkProbe::~KinkProbe() { --g_probe_depth; }
std::uint64_t KinkProbe::value() const { return g_probe_hash; }
void KinkProbe::reset() { g_probe_hash = 0xcbf29ce484222325ull; }

bool kink_probe_active() { return g_probe_depth > 0; }
void kink_mix(std::uint64_t v) { g_probe_hash = (g_probe_hash ^ v) * 0x100000001b3ull; }

}  // namespace detail

}  // namespace rcn
