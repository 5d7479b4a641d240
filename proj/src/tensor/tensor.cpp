#include "blocklm/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace blocklm {

namespace {
thread_local bool g_grad_enabled = true;
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

static void check_shape(const Shape& shape) {
  if (shape.size() > static_cast<size_t>(kMaxRank)) {
    throw ShapeError("tensor: rank " + std::to_string(shape.size()) + " exceeds " +
                     std::to_string(kMaxRank) + " for shape " + shape_str(shape));
  }
  for (int64_t e : shape) {
    if (e < 0) throw ShapeError("tensor: negative extent in " + shape_str(shape));
  }
}

Tensor::Tensor(Shape shape, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad) {
  check_shape(shape_);
  numel_ = shape_numel(shape_);
  storage_ = std::make_shared<detail::Storage>();
  storage_->data.assign(static_cast<size_t>(numel_), 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad) {
  check_shape(shape_);
  numel_ = shape_numel(shape_);
  if (static_cast<int64_t>(values.size()) != numel_) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape_));
  }
  storage_ = std::make_shared<detail::Storage>();
  storage_->data.assign(values.begin(), values.end());
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.storage_->data.begin(), t.storage_->data.end(), value);
  return t;
}

int64_t Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape_));
  }
  return shape_[static_cast<size_t>(a)];
}

std::span<float> Tensor::values() { return {storage_->data.data(), storage_->data.size()}; }

std::span<const float> Tensor::values() const {
  return {storage_->data.data(), storage_->data.size()};
}

float Tensor::item() const {
  if (numel_ != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
  return storage_->data[0];
}

bool Tensor::has_grad() const noexcept {
  return storage_ && !storage_->grad.empty();
}

std::span<const float> Tensor::grad() const {
  if (!has_grad()) throw AutogradError("grad: tensor of shape " + shape_str(shape_) + " has no gradient");
  return {storage_->grad.data(), storage_->grad.size()};
}

std::span<float> Tensor::mutable_grad() {
  storage_->ensure_grad();
  return {storage_->grad.data(), storage_->grad.size()};
}

void Tensor::zero_grad() {
  if (storage_) std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0f);
}

Tensor Tensor::reshape(Shape shape) const {
  check_shape(shape);
  if (shape_numel(shape) != numel_) {
    throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  Tensor view = *this;
  view.shape_ = std::move(shape);
  return view;
}

Tensor Tensor::detach() const {
  return Tensor(shape_, std::vector<float>(storage_->data.begin(), storage_->data.end()), false);
}

void Tensor::attach_node(std::shared_ptr<detail::Node> node) {
  node_ = std::move(node);
  requires_grad_ = true;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

void record(Tensor& out, std::initializer_list<const Tensor*> inputs, std::function<void()> fn) {
  auto node = std::make_shared<Node>();
  for (const Tensor* t : inputs) {
    if (t && t->node()) node->parents.push_back(t->node());
  }
  node->backward = std::move(fn);
  out.attach_node(std::move(node));
}

}  // namespace detail

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw AutogradError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const auto& root = loss.node();
  if (!root) {
    throw AutogradError("backward: loss is not connected to any tensor that requires grad");
  }
  if (root->consumed) {
    throw AutogradError("backward: graph already consumed; run a new forward pass before calling backward again");
  }

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.storage()->ensure_grad();
  loss.storage()->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward();
  }
  for (detail::Node* node : order) {
    node->backward = nullptr;
    node->parents.clear();
    node->consumed = true;
  }
}

}  // namespace blocklm
