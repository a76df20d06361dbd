#include "mvcond/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <unordered_set>

#include "mvcond/errors.hpp"

namespace mvcond {

namespace {

std::atomic<uint64_t> g_seq{1};
thread_local bool t_grad_enabled = true;

bool checked_from_env() {
  const char* v = std::getenv("MVCOND_CHECKED");
  return v != nullptr && std::string(v) == "1";
}

std::atomic<bool> g_checked{checked_from_env()};

}  // namespace

int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const int64_t n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(static_cast<size_t>(n), value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

int64_t Tensor::size(int axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(node_ ? node_->value.size() : 0); }

std::span<const double> Tensor::data() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("at(): rank mismatch");
  int64_t flat = 0;
  size_t i = 0;
  for (int64_t idx : index) {
    if (idx < 0 || idx >= s[i]) throw DimensionError("at(): index out of range");
    flat = flat * s[i] + idx;
    ++i;
  }
  return node_->value[static_cast<size_t>(flat)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!node_) throw ContractError("use of undefined tensor");
  node_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->grad_buffer();
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->grad_buffer();
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

void Tensor::backward() const {
  if (!node_) throw ContractError("backward on undefined tensor");
  if (node_->value.size() != 1) {
    throw ContractError("backward requires a scalar, got shape " + shape_str(node_->shape));
  }
  if (!node_->requires_grad) throw ContractError("backward on a tensor that does not require grad");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{node_.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

  node_->grad_buffer()[0] += 1.0;
  for (Node* n : order) {
    if (n->backward && !n->grad.empty()) {
      n->backward(*n);
      if (checked_mode()) {
        for (const auto& p : n->parents) {
          if (!p->grad.empty()) check_finite(p->grad, "backward");
        }
      }
    }
  }
  // Intermediate gradients are not needed once propagated.
  for (Node* n : order) {
    if (n->backward) n->grad.clear();
  }
}

Tensor Tensor::detach() const {
  if (!node_) return {};
  return from(node_->shape, node_->value, false);
}

Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& parents,
                   BackwardFn backward) {
  if (numel_of(shape) != static_cast<int64_t>(value.size())) {
    throw DimensionError("make_result: shape/value mismatch " + shape_str(shape));
  }
  if (checked_mode()) check_finite(value, "forward");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  if (t_grad_enabled) {
    for (const auto& p : parents) {
      if (p.requires_grad()) node->parents.push_back(p.node_ptr());
    }
  }
  if (!node->parents.empty()) {
    node->requires_grad = true;
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }
void set_checked_mode(bool on) { g_checked.store(on, std::memory_order_relaxed); }

CheckedModeGuard::CheckedModeGuard(bool on) : previous_(checked_mode()) { set_checked_mode(on); }
CheckedModeGuard::~CheckedModeGuard() { set_checked_mode(previous_); }

void check_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value at ") + op);
  }
}

}  // namespace mvcond
