#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rcn {

#ifdef RCN_REAL64
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array with an optional gradient buffer and a link into the
/// reverse-mode graph that produced it.
///
/// Tensor is a shared handle: copies alias the same storage. Use clone() for an
/// independent copy and detach() to drop the graph link.
class Tensor {
 public:
  using BackwardFn = std::function<void(std::span<const Real> grad_out)>;

  struct Node {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;
  };

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = 0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false);

  static Tensor scalar(Real v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<Real> data() { return node_->data; }
  std::span<const Real> data() const { return node_->data; }
  Real item() const;
  Real operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; allocates a zero buffer on first use.
  std::span<Real> grad();
  std::span<const Real> grad() const;
  void zero_grad();

  /// Reverse-mode sweep from this scalar.
  void backward();

  Tensor detach() const;
  Tensor clone() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Keep freed activation buffers in the heap instead of returning them to the
// OS; training reallocates the same sizes every step. Call once from main.
void tune_allocator();

namespace detail {

/// Wraps freshly computed op output. Throws NumericError on non-finite values.
/// The backward closure is attached only when some input requires a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<Real> data,
                   const std::vector<Tensor>& inputs, Tensor::BackwardFn backward);

/// Gradient buffer of t, or an empty span when t does not take gradients.
std::span<Real> grad_sink(const Tensor& t);

void check_finite(const char* op, std::span<const Real> values);

/// Fingerprint of the branch decisions (ReLU signs, max selections, loss
/// clamps) taken by ops on this thread while a probe is alive.
class KinkProbe {
 public:
  KinkProbe();
  ~KinkProbe();
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;
  std::uint64_t value() const;
  void reset();
};

bool kink_probe_active();
void kink_mix(std::uint64_t v);

}  // namespace detail

}  // namespace rcn
