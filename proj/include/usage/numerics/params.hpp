#pragma once

#include <map>
#include <string>

#include "usage/numerics/tape.hpp"
#include "usage/numerics/tensor.hpp"

namespace usage {

// Named tensor collection, ordered by name.
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor>;

  void set(const std::string& name, Tensor value) { tensors_[name] = std::move(value); }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  std::size_t size() const { return tensors_.size(); }
  std::size_t total_values() const;
  // Same names with the same shapes.
  bool same_structure(const ParamSet& other) const;

  Map::const_iterator begin() const { return tensors_.begin(); }
  Map::const_iterator end() const { return tensors_.end(); }
  Map::iterator begin() { return tensors_.begin(); }
  Map::iterator end() { return tensors_.end(); }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.tensors_ == b.tensors_; }

 private:
  Map tensors_;
};

// Parameters placed on a tape, looked up by name.
class ParamVars {
 public:
  ParamVars() = default;
  // differentiable=false binds every tensor as a constant.
  ParamVars(ad::Tape& tape, const ParamSet& params, bool differentiable);

  // Adds or replaces a binding (used to bind existing tape leaves).
  void bind(const std::string& name, ad::Var v) { vars_[name] = v; }
  ad::Var operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  // Gradients after a backward sweep, as a ParamSet of the same structure.
  ParamSet grads() const;

 private:
  std::map<std::string, ad::Var> vars_;
};

}  // namespace usage
