#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace blocklm {

using Shape = std::vector<int64_t>;

constexpr int kMaxRank = 4;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

// Raised by kernels when operand extents do not conform. The message names
// the kernel, the operands and their extents.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AutogradError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 64-byte aligned allocations keep vectorized reductions independent of
// where a buffer lands in memory, so kernels are bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

namespace detail {

struct Storage {
  FloatBuffer data;
  FloatBuffer grad;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

struct Node {
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;
  bool consumed = false;
};

}  // namespace detail

// Dense row-major float32 tensor of rank <= 4. Copies are shallow: two
// Tensor handles may share the same storage (reshape returns such a view).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);

  bool defined() const noexcept { return storage_ != nullptr; }
  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int64_t dim(int axis) const;
  int64_t numel() const noexcept { return numel_; }

  std::span<float> values();
  std::span<const float> values() const;
  float* data() { return storage_->data.data(); }
  const float* data() const { return storage_->data.data(); }
  float item() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool flag) { requires_grad_ = flag; }
  bool has_grad() const noexcept;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  // View over the same storage (and autograd node) with a new shape.
  Tensor reshape(Shape shape) const;
  // Deep copy of values with no autograd history.
  Tensor detach() const;

  const std::shared_ptr<detail::Storage>& storage() const noexcept { return storage_; }
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
  void attach_node(std::shared_ptr<detail::Node> node);

 private:
  Shape shape_;
  int64_t numel_ = 0;
  std::shared_ptr<detail::Storage> storage_;
  std::shared_ptr<detail::Node> node_;
  bool requires_grad_ = false;
};

// Reverse-mode pass from a scalar loss. Gradients accumulate into every
// reachable tensor that requires grad. The graph is released afterwards;
// calling backward again on the same loss throws AutogradError.
void backward(const Tensor& loss);

bool grad_enabled() noexcept;

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

// True when an op over these inputs must record a backward node.
bool needs_grad(std::initializer_list<const Tensor*> inputs);

// Marks `out` as produced by `fn`, linking the nodes of `inputs`.
void record(Tensor& out, std::initializer_list<const Tensor*> inputs, std::function<void()> fn);

}  // namespace detail

}  // namespace blocklm
