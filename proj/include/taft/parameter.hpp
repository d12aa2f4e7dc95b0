#pragma once

#include <string>
#include <vector>

#include "taft/tensor.hpp"

namespace taft {

enum class ParamGroup : uint8_t { encoder = 0, decoder = 1, references = 2 };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::decoder: return "decoder";
    case ParamGroup::references: return "references";
  }
  return "?";
}

// A learnable leaf tensor with its Adam moment buffers.
template <class T>
struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor<T> value;
  std::vector<T> adam_m;
  std::vector<T> adam_v;
  int64_t step_count = 0;

  int64_t numel() const { return value.numel(); }
};

// Flat, registration-ordered parameter collection. The registration order
// defines the checkpoint manifest order.
template <class T>
class ParameterStore {
 public:
  Parameter<T>& add(std::string name, ParamGroup group, Shape shape,
                    std::vector<T> init) {
    Tensor<T> value = Tensor<T>::from_data(std::move(shape), std::move(init), true);
    const size_t n = static_cast<size_t>(value.numel());
    items_.push_back(Parameter<T>{std::move(name), group, std::move(value),
                                  std::vector<T>(n, T(0)), std::vector<T>(n, T(0)), 0});
    return items_.back();
  }

  std::vector<Parameter<T>>& items() { return items_; }
  const std::vector<Parameter<T>>& items() const { return items_; }
  size_t size() const { return items_.size(); }
  Parameter<T>& operator[](size_t i) { return items_[i]; }
  const Parameter<T>& operator[](size_t i) const { return items_[i]; }

  void zero_grad() {
    for (auto& p : items_) p.value.zero_grad();
  }

  void zero_grad(ParamGroup group) {
    for (auto& p : items_) {
      if (p.group == group) p.value.zero_grad();
    }
  }

 private:
  std::vector<Parameter<T>> items_;
};

}  // namespace taft
