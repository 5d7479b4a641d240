#pragma once

#include <string>
#include <utility>
#include <vector>

#include "blocklm/random.hpp"
#include "blocklm/tensor.hpp"
#include "blocklm/tensor_file.hpp"

namespace blocklm {

// Ordered name -> parameter registry. Entries are shallow handles sharing
// storage with the owning module, so in-place updates are visible to it.
class ParamList {
 public:
  // Marks the module-owned handle as requiring grad and registers a shared view.
  void add(std::string name, Tensor& tensor);

  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  const Tensor* find(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  int64_t element_count() const;
  void zero_grad();

  TensorFile to_file() const;
  // Copies values into the registered tensors; every name and shape must match.
  void load(const TensorFile& file);

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

Tensor normal_tensor(Shape shape, Rng& rng, double std);

}  // namespace blocklm
