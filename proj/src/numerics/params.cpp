#include "usage/numerics/params.hpp"

#include "usage/error.hpp"

namespace usage {

const Tensor& ParamSet::at(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error("no parameter named '" + name + "'");
  return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error("no parameter named '" + name + "'");
  return it->second;
}

std::size_t ParamSet::total_values() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.size();
  return n;
}

bool ParamSet::same_structure(const ParamSet& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  auto a = tensors_.begin();
  auto b = other.tensors_.begin();
  for (; a != tensors_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
  }
  return true;
}

ParamVars::ParamVars(ad::Tape& tape, const ParamSet& params, bool differentiable) {
  for (const auto& [name, t] : params) {
    vars_.emplace(name, differentiable ? tape.input(t) : tape.constant(t));
  }
}

ad::Var ParamVars::operator[](const std::string& name) const {
  const auto it = vars_.find(name);
  if (it == vars_.end()) throw Error("parameter '" + name + "' is not bound");
  return it->second;
}

ParamSet ParamVars::grads() const {
  ParamSet out;
  for (const auto& [name, v] : vars_) out.set(name, v.tape().grad(v));
  return out;
}

}  // namespace usage
