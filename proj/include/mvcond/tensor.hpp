#pragma once

// Dense tensors with a reverse-mode tape.
//
// A Tensor is a shared handle to a node holding a row-major value buffer.
// Ops build new nodes that remember their parents and a backward closure;
// Tensor::backward() walks the reachable nodes in reverse creation order.
// Values are stored in double precision. Training code keeps parameters
// representable in float32 (see optim.hpp) so checkpoints are lossless.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mvcond {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  // Lazily sized gradient buffer.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim() const { return static_cast<int>(shape().size()); }
  int64_t size(int axis) const;
  int64_t numel() const;

  std::span<const double> data() const;
  // Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<int64_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Seeds d(self)/d(self) = 1 and propagates; self must hold one element.
  void backward() const;

  // Same values, no history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  friend Tensor make_result(Shape, std::vector<double>, const std::vector<Tensor>&, BackwardFn);
  std::shared_ptr<Node> node_;
};

// Builds an op output. Parents that do not require grad are dropped; when no
// parent requires grad (or grad recording is disabled) the result is a leaf.
Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& parents,
                   BackwardFn backward);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Checked mode: every op output is scanned for NaN/Inf. Initialized from the
// MVCOND_CHECKED environment variable.
bool checked_mode();
void set_checked_mode(bool on);

class CheckedModeGuard {
 public:
  explicit CheckedModeGuard(bool on);
  ~CheckedModeGuard();
  CheckedModeGuard(const CheckedModeGuard&) = delete;
  CheckedModeGuard& operator=(const CheckedModeGuard&) = delete;

 private:
  bool previous_;
};

void check_finite(std::span<const double> values, const char* op);

}  // namespace mvcond
