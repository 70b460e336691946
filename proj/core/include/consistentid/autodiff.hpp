#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every op applied to its Vars. Calling backward() on a 1x1 Var walks the
// tape in reverse and accumulates gradients into differentiable leaves and into trainable
// Parameters. Ops whose inputs are all non-differentiable record no backward closure, so a
// tape built with grad disabled doubles as a cheap inference context.

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace cid::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  // Zero-sized until backward has reached this node.
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(const Matrix& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var leaf(Matrix value);
  // References p.value without copying; p must outlive the tape.
  Var param(Parameter& p);

  void backward(const Var& scalar);

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Op-construction interface.
  bool any_requires_grad(std::initializer_list<Var> vars) const;
  Var record(Matrix value, bool requires_grad, BackwardFn fn);
  void accumulate(const Var& v, const Matrix& g);

  const Matrix& value_of(int id) const;
  const Matrix& grad_of(int id) const;
  bool requires_grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };
  bool grad_enabled_;
  std::deque<Node> nodes_;
};

// ---- ops -------------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// Broadcasts a 1xC row over every row of a.
Var add_row(const Var& a, const Var& row);
Var silu(const Var& a);
Var softmax_rows(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
// mean((a-b)^2) over all elements
Var mse(const Var& a, const Var& b);
// sum(a .* w) for a constant weight matrix w
Var weighted_sum(const Var& a, const Matrix& w);
Var concat_cols(const Var& a, const Var& b);
Var concat_rows(const Var& a, const Var& b);
// out = base, with out.row(positions[j]) = rows.row(j)
Var replace_rows(const Var& base, const Var& rows, std::span<const int> positions);
// Zeroes rows where keep[r] == false.
Var mask_rows(const Var& a, const std::vector<bool>& keep);
Var slice_rows(const Var& a, int begin, int count);
// out.row(i) = table.row(ids[i]); gradients scatter-add back into the table.
Var gather_rows(const Var& table, std::span<const int> ids);

// Feature maps are stored as (height*width) x channels matrices in row-major pixel order.
// weight: (9*Cin) x Cout laid out as [ky][kx][cin]; bias: 1 x Cout. Zero padding, stride 1.
Var conv3x3(const Var& x, int height, int width, const Var& weight, const Var& bias);
Var avg_pool2(const Var& x, int height, int width);
Var upsample2(const Var& x, int height, int width);

}  // namespace cid::ad
