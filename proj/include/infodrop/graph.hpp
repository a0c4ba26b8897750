#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "infodrop/error.hpp"
#include "infodrop/tensor.hpp"

namespace infodrop {

// Named set of trainable tensors plus the backward entry point. The tape
// itself lives on the tensors produced during the forward pass; this class
// only tracks which leaves are parameters and in which (deterministic) order
// they were registered.
class Graph {
 public:
  Tensor add_parameter(const std::string& name, Tensor t) {
    if (index_.count(name)) {
      throw ContractError("parameter '" + name + "' registered twice");
    }
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.emplace_back(name, t);
    return t;
  }

  bool has_parameter(const std::string& name) const {
    return index_.count(name) != 0;
  }

  Tensor parameter(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ContractError("unknown parameter '" + name + "'");
    }
    return params_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor>>& parameters() const {
    return params_;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  // Reverse-mode gradients of a scalar loss for every registered parameter.
  // Parameters the loss does not depend on get a zero gradient of matching
  // shape. Calling this twice on the same tape returns identical maps.
  std::map<std::string, Tensor> backward_gradients(const Tensor& loss) const {
    for (const auto& [name, t] : params_) {
      t.node_ptr()->grad.assign(t.numel(), 0.0);
    }
    backward(loss);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, t] : params_) {
      grads.emplace(name, Tensor::from_data(t.shape(), t.node_ptr()->grad));
    }
    return grads;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace infodrop
