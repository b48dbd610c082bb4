#include "usage/numerics/tape.hpp"

#include "usage/error.hpp"
#include "usage/numerics/kernels.hpp"

namespace usage::ad {

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::input(Tensor value) {
  if (!value.all_finite()) throw NonFiniteError("input: non-finite leaf value");
  nodes_.push_back(Node{"input", std::move(value), Tensor(), record_, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NonFiniteError("constant: non-finite leaf value");
  nodes_.push_back(Node{"constant", std::move(value), Tensor(), false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string("op '") + op + "' produced a non-finite value");
  }
  bool needs = false;
  if (record_) {
    for (const Var& in : inputs) {
      if (in.tape_ != this) throw Error(std::string("op '") + op + "' mixes vars from different tapes");
      needs = needs || nodes_[in.id_].requires_grad;
    }
  }
  nodes_.push_back(Node{op, std::move(value), Tensor(), needs, needs ? std::move(backward) : nullptr});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var root) {
  if (!record_) throw Error("backward() on a tape created with record=false");
  for (Node& n : nodes_) n.grad = Tensor();
  Node& r = nodes_[root.id_];
  if (!r.requires_grad) return;
  r.grad = Tensor(r.value.shape(), 1.0);
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
    if (!n.grad.all_finite()) {
      throw NonFiniteError(std::string("op '") + n.op + "' received a non-finite gradient");
    }
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id_];
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id_];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!nodes_[v.id_].requires_grad) return;
  Tensor& buf = grad_buffer(v);
  if (buf.size() != g.size()) {
    throw ShapeError(std::string("gradient shape mismatch at op '") + nodes_[v.id_].op + "'");
  }
  kernels::active().axpy(g.size(), 1.0, g.data(), buf.data());
}

void Tape::note_branch(std::uint64_t token) {
  // FNV-1a style fold.
  branch_signature_ ^= token + 0x9e3779b97f4a7c15ULL + (branch_signature_ << 6) + (branch_signature_ >> 2);
  branch_signature_ *= 0x100000001b3ULL;
}

}  // namespace usage::ad
