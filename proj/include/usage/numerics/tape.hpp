#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>

#include "usage/numerics/tensor.hpp"

namespace usage::ad {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records the forward computation and replays it in reverse.
//
// Every op output is checked for NaN/Inf at construction; the error names the
// op. A tape built with record=false keeps values only (inference mode).
class Tape {
 public:
  // Called with the accumulated gradient of the node's output.
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable leaf.
  Var input(Tensor value);
  // Leaf excluded from differentiation.
  Var constant(Tensor value);

  // Appends an op node. `backward` is dropped when no input needs a gradient.
  Var push(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward);

  // Reverse sweep from `root`, seeded with ones (gradient of sum(root)).
  void backward(Var root);

  // Gradient reaching `v` in the last sweep; zeros when none did.
  Tensor grad(Var v) const;

  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  bool recording() const { return record_; }

  // Adds `g` into the gradient buffer of `v` (no-op when v is not differentiable).
  void accumulate(Var v, const Tensor& g);
  // Mutable gradient buffer of `v`, allocated as zeros on first use.
  Tensor& grad_buffer(Var v);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

  // Non-smooth ops (max, relu, floors) fold their branch selection into a
  // signature so finite-difference checks can detect kink crossings.
  void set_track_branches(bool on) { track_branches_ = on; }
  bool tracking_branches() const { return track_branches_; }
  void note_branch(std::uint64_t token);
  std::uint64_t branch_signature() const { return branch_signature_; }

 private:
  struct Node {
    const char* op;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  bool record_;
  bool track_branches_ = false;
  std::uint64_t branch_signature_ = 0xcbf29ce484222325ULL;
  std::deque<Node> nodes_;
};

}  // namespace usage::ad
