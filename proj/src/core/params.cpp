#include "blocklm/params.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_set>

namespace blocklm {

void ParamList::add(std::string name, Tensor& tensor) {
  if (find(name)) throw std::logic_error("duplicate parameter name '" + name + "'");
  tensor.set_requires_grad(true);
  items_.emplace_back(std::move(name), tensor);
}

const Tensor* ParamList::find(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return &t;
  }
  return nullptr;
}

Tensor& ParamList::at(const std::string& name) {
  for (auto& [n, t] : items_) {
    if (n == name) return t;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

const Tensor& ParamList::at(const std::string& name) const {
  if (const Tensor* t = find(name)) return *t;
  throw std::out_of_range("no parameter named '" + name + "'");
}

int64_t ParamList::element_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParamList::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

TensorFile ParamList::to_file() const {
  TensorFile f;
  for (const auto& [name, t] : items_) f.entries.push_back(TensorEntry::from_tensor(name, t));
  return f;
}

void ParamList::load(const TensorFile& file) {
  std::vector<std::string> problems;
  std::unordered_set<std::string> seen;
  for (auto& [name, t] : items_) {
    const TensorEntry* e = file.find(name);
    if (!e) {
      problems.push_back("missing tensor '" + name + "'");
      continue;
    }
    seen.insert(name);
    if (e->dtype != DType::f32 || e->shape != t.shape()) {
      problems.push_back("tensor '" + name + "' has shape " + shape_str(e->shape) + ", expected " + shape_str(t.shape()));
      continue;
    }
    std::copy(e->f32.begin(), e->f32.end(), t.values().begin());
  }
  for (const auto& e : file.entries) {
    if (!seen.count(e.name) && !find(e.name)) problems.push_back("unexpected tensor '" + e.name + "'");
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match the model:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw std::runtime_error(msg);
  }
}

Tensor normal_tensor(Shape shape, Rng& rng, double std) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, static_cast<float>(std));
  for (float& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace blocklm
